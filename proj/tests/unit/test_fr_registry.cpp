#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "wali/datasets.hpp"
#include "wali/evaluation.hpp"
#include "wali/fr_registry.hpp"

using namespace wali;
namespace fs = std::filesystem;

namespace {

ScoreSet random_score_set(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> size(1, 60);
  std::uniform_int_distribution<int> coarse(0, 20);
  std::normal_distribution<double> g;
  ScoreSet s;
  const int ng = size(rng), ni = size(rng);
  // Mix continuous and heavily tied scores.
  const bool tied = rng() % 2 == 0;
  for (int i = 0; i < ng; ++i) s.genuine.push_back(tied ? coarse(rng) * 0.05 : 0.4 + 0.2 * g(rng));
  for (int i = 0; i < ni; ++i) s.impostor.push_back(tied ? 0.3 + coarse(rng) * 0.05 : 0.9 + 0.2 * g(rng));
  return s;
}

struct ToyFrData {
  Dataset all, train, held_out;
  ToyFrData() {
    SyntheticConfig sc;
    sc.seed = 1;
    all = generate_synthetic_dataset(sc);
    std::vector<int> a, b;
    for (int i = 0; i < sc.n_identities; ++i) (i < 30 ? a : b).push_back(i);
    train = all.subset(a);
    held_out = all.subset(b);
  }
};

const ToyFrData& data() {
  static const ToyFrData d;
  return d;
}

ToyFrConfig toy_config(uint64_t seed) {
  ToyFrConfig c;
  c.net.image_size = 16;
  c.net.base_width = 8;
  c.net.embedding_dim = 32;
  c.epochs = 30;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Calibration, WorkedExample) {
  ScoreSet s{{0.1, 0.2, 0.4}, {0.3, 0.5, 0.6}};
  const auto c = calibrate_threshold(s, 0.001);
  EXPECT_DOUBLE_EQ(c.threshold, 0.3);
  EXPECT_DOUBLE_EQ(c.fmr, 0.0);
  EXPECT_DOUBLE_EQ(c.fnmr, 1.0 / 3.0);
  const auto o = oracle::exhaustive_calibration(s.genuine, s.impostor, 0.001);
  EXPECT_DOUBLE_EQ(o.fnmr, c.fnmr);
}

TEST(Calibration, SeparableAndDegenerateCases) {
  ScoreSet sep{{0.1, 0.15, 0.2}, {0.5, 0.7, 0.9}};
  const auto c = calibrate_threshold(sep);
  EXPECT_DOUBLE_EQ(c.threshold, 0.5);
  EXPECT_DOUBLE_EQ(c.fnmr, 0.0);

  ScoreSet same{{0.2, 0.4, 0.6}, {0.2, 0.4, 0.6}};
  const auto d = calibrate_threshold(same);
  EXPECT_DOUBLE_EQ(d.fnmr, 1.0);
  EXPECT_DOUBLE_EQ(d.fmr, 0.0);

  EXPECT_THROW(calibrate_threshold({{}, {0.1}}), std::invalid_argument);
  EXPECT_THROW(calibrate_threshold({{0.1}, {}}), std::invalid_argument);
}

TEST(Calibration, LooseBoundAdmitsImpostors) {
  ScoreSet s{{0.1, 0.2, 0.3, 0.4}, {0.15, 0.5, 0.6, 0.7}};
  const auto c = calibrate_threshold(s, 0.3);  // one impostor below t is allowed
  EXPECT_DOUBLE_EQ(c.fnmr, 0.0);
  EXPECT_LT(c.fmr, 0.3);
  EXPECT_DOUBLE_EQ(c.threshold, 0.5);
}

TEST(Calibration, MatchesExhaustiveSweepOnRandomSets) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_score_set(rng);
    const auto c = calibrate_threshold(s);
    EXPECT_LT(oracle::fraction_below(s.impostor, c.threshold), 0.001) << trial;
    EXPECT_EQ(false_match_rate(s, c.threshold), oracle::fraction_below(s.impostor, c.threshold));
    EXPECT_EQ(c.fnmr, oracle::fraction_at_or_above(s.genuine, c.threshold));
    const auto o = oracle::exhaustive_calibration(s.genuine, s.impostor, 0.001);
    EXPECT_EQ(c.fnmr, o.fnmr) << trial;
  }
}

TEST(Rates, MonotoneInThreshold) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_score_set(rng);
    double last_fmr = -1, last_fnmr = 2;
    for (double t = -0.5; t <= 2.0; t += 0.01) {
      const double fmr = false_match_rate(s, t), fnmr = false_non_match_rate(s, t);
      EXPECT_GE(fmr, last_fmr);
      EXPECT_LE(fnmr, last_fnmr);
      last_fmr = fmr;
      last_fnmr = fnmr;
    }
  }
}

TEST(FrBackendTest, ScoresAndThreshold) {
  FrBackend fr("flat", [](const torch::Tensor& x) {
    auto f = x.flatten(1);
    return f / f.norm(2, 1, true);
  });
  EXPECT_THROW(fr.calibrated_threshold(), std::logic_error);
  fr.set_threshold(0.7);
  EXPECT_EQ(fr.calibrated_threshold(), 0.7);
  EXPECT_EQ(fr.role(), FrRole::black_box);
  const auto e = fr.embed_all(torch::rand({5, 1, 2, 2}), 2);
  ASSERT_EQ(e.size(), 5u);
  for (const auto& v : e) EXPECT_NEAR(v.norm(), 1.0, 1e-6);
  EXPECT_NEAR(fr.dissimilarity(Embedding({1, 0}, true), Embedding({0, 1}, true)), std::acos(0.0), 1e-12);
  EXPECT_EQ(fr_role_from_string(to_string(FrRole::white_box)), FrRole::white_box);
  EXPECT_THROW(fr_role_from_string("grey"), std::invalid_argument);
}

TEST(ScoreSetBuilder, CountsAndDeterminism) {
  std::vector<Embedding> e;
  std::vector<int> labels;
  std::mt19937_64 rng(1);
  for (int id = 0; id < 4; ++id) {
    for (int k = 0; k < 3; ++k) {
      e.emplace_back(oracle::random_unit(rng, 4), true);
      labels.push_back(id);
    }
  }
  FrBackend fr("x", [](const torch::Tensor& x) { return x; });
  const auto a = build_score_set(fr, e, labels, 20, 5);
  const auto b = build_score_set(fr, e, labels, 20, 5);
  EXPECT_EQ(a.genuine.size(), 4u * 3u);  // C(3,2) per identity
  EXPECT_EQ(a.impostor.size(), 20u);
  EXPECT_EQ(a.impostor, b.impostor);
  EXPECT_NE(build_score_set(fr, e, labels, 20, 6).impostor, a.impostor);
}

TEST(ToyFrTest, DeterministicDistinctAndAccurate) {
  const auto& d = data();
  auto a = train_toy_fr(d.train.tensor(), d.train.labels, toy_config(1), "a");
  auto a2 = train_toy_fr(d.train.tensor(), d.train.labels, toy_config(1), "a2");
  auto b = train_toy_fr(d.train.tensor(), d.train.labels, toy_config(2), "b");
  auto probe = d.held_out.tensor();
  auto fa = a.backend(), fa2 = a2.backend(), fb = b.backend();
  auto ea = fa.embed(probe), ea2 = fa2.embed(probe), eb = fb.embed(probe);
  EXPECT_EQ((ea - ea2).abs().max().item<double>(), 0.0);
  const double mean_angle = torch::acos((ea * eb).sum(1).clamp(-1, 1)).mean().item<double>();
  EXPECT_GT(mean_angle, 0.1);

  const auto s = build_score_set(fa, fa.embed_all(probe), d.held_out.labels, 0, 0);
  const double eer = equal_error_rate(s);
  EXPECT_LT(eer, 0.15);

  auto white = a.backend(FrRole::white_box);
  EXPECT_EQ(white.role(), FrRole::white_box);
}

TEST(ToyFrTest, RejectsTooFewIdentities) {
  const auto& d = data();
  std::vector<int> few{0, 1, 2};
  auto small = d.all.subset(few);
  EXPECT_THROW(train_toy_fr(small.tensor(), small.labels, toy_config(1), "x"), std::invalid_argument);
}

TEST(Registry, RoundTripAndLoad) {
  const auto dir = fs::temp_directory_path() / "wali_registry";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto cfg = toy_config(3);
  cfg.epochs = 1;
  const auto& d = data();
  auto fr = train_toy_fr(d.train.tensor(), d.train.labels, cfg, "fr-x");
  save_checkpoint(dir / "fr-x.bin", fr.to_checkpoint());

  RegistryEntry calibrated{"fr-x", "fr-x.bin", ScoreKind::angular_dissimilarity, 0.75, FrRole::white_box};
  RegistryEntry raw{"fr-y", "fr-x.bin", ScoreKind::angular_dissimilarity, std::nullopt, FrRole::black_box};
  write_registry(dir / "registry.json", {calibrated, raw});
  const auto back = read_registry(dir / "registry.json");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].checkpoint, dir / "fr-x.bin");
  EXPECT_EQ(*back[0].threshold, 0.75);
  EXPECT_FALSE(back[1].threshold.has_value());

  auto loaded = load_backend(back[0]);
  EXPECT_EQ(loaded.id(), "fr-x");
  EXPECT_EQ(loaded.calibrated_threshold(), 0.75);
  EXPECT_EQ(loaded.role(), FrRole::white_box);
  auto probe = d.held_out.tensor().narrow(0, 0, 4);
  EXPECT_EQ((loaded.embed(probe) - fr.backend().embed(probe)).abs().max().item<double>(), 0.0);
  EXPECT_THROW(load_backend(back[1]).calibrated_threshold(), std::logic_error);
  EXPECT_THROW(FrBackend("none", nullptr), std::invalid_argument);
}
