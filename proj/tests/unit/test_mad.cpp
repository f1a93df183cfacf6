#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "oracles.hpp"
#include "wali/mad.hpp"

using namespace wali;
namespace fs = std::filesystem;

namespace {

GrayImage gray(int h, int w, std::vector<double> px) { return GrayImage{h, w, std::move(px)}; }

GrayImage random_gray(std::mt19937_64& rng, int h, int w) {
  std::uniform_int_distribution<int> level(0, 7);  // coarse levels force ties
  GrayImage g{h, w, std::vector<double>(static_cast<std::size_t>(h) * w)};
  for (auto& p : g.pixels) p = level(rng) / 7.0;
  return g;
}

/// Direct evaluation of one code from the neighbour order TL, T, TR, R, BR, B, BL, L.
uint8_t oracle_code(const GrayImage& g, int r, int c) {
  const int dr[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
  const int dc[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
  unsigned code = 0;
  for (int k = 0; k < 8; ++k) {
    if (g.at(r + dr[k], c + dc[k]) >= g.at(r, c)) code |= 1u << k;
  }
  return static_cast<uint8_t>(code);
}

int transitions(uint8_t code) {
  int t = 0;
  for (int k = 0; k < 8; ++k) t += ((code >> k) & 1) != ((code >> ((k + 1) % 8)) & 1);
  return t;
}

struct Toy {
  std::vector<std::vector<double>> x;
  std::vector<bool> y;
};

Toy separable(uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Toy t;
  for (int i = 0; i < n; ++i) {
    const bool attack = i % 2 == 0;
    t.x.push_back({g(rng) + (attack ? 4.0 : -4.0), g(rng), 0.5 * g(rng) + (attack ? 1.0 : 0.0)});
    t.y.push_back(attack);
  }
  return t;
}

}  // namespace

TEST(Lbp, ConstantImageGivesAllOnesCode) {
  const auto g = gray(6, 6, std::vector<double>(36, 0.4));
  for (auto c : lbp_codes(g)) EXPECT_EQ(c, 255);
  LbpConfig cfg;
  cfg.grid_rows = 2;
  cfg.grid_cols = 2;
  const auto f = lbp_features(g, cfg);
  ASSERT_EQ(f.size(), 4u * 256u);
  for (int cell = 0; cell < 4; ++cell) {
    EXPECT_EQ(f[cell * 256 + 255], 4.0);
    double mass = 0;
    for (int b = 0; b < 256; ++b) mass += f[cell * 256 + b];
    EXPECT_EQ(mass, 4.0);
  }
}

TEST(Lbp, HandEvaluatedCode) {
  // 1 2 3 / 9 5 4 / 8 7 6: neighbours clockwise from the top-left are 1..4, 6..9.
  const auto g = gray(3, 3, {1, 2, 3, 9, 5, 4, 8, 7, 6});
  const auto codes = lbp_codes(g);
  ASSERT_EQ(codes.size(), 1u);
  EXPECT_EQ(codes[0], 0b11110000);
  EXPECT_EQ(codes[0], oracle_code(g, 1, 1));
}

TEST(Lbp, CodesMatchDirectEvaluation) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = random_gray(rng, 7 + trial % 5, 9 + trial % 3);
    const auto codes = lbp_codes(g);
    ASSERT_EQ(codes.size(), static_cast<std::size_t>((g.height - 2) * (g.width - 2)));
    for (int r = 1; r + 1 < g.height; ++r) {
      for (int c = 1; c + 1 < g.width; ++c) EXPECT_EQ(codes[(r - 1) * (g.width - 2) + (c - 1)], oracle_code(g, r, c));
    }
  }
}

TEST(Lbp, FeatureLengthsAndUniformBins) {
  LbpConfig cfg;
  EXPECT_EQ(cfg.feature_length(), 4096);
  cfg.uniform = true;
  EXPECT_EQ(cfg.feature_length(), 16 * 59);
  std::set<int> uniform_bins;
  int non_uniform = 0;
  for (int code = 0; code < 256; ++code) {
    const int bin = uniform_bin(static_cast<uint8_t>(code));
    if (transitions(static_cast<uint8_t>(code)) <= 2) {
      EXPECT_LT(bin, 58);
      uniform_bins.insert(bin);
    } else {
      EXPECT_EQ(bin, 58);
      ++non_uniform;
    }
  }
  EXPECT_EQ(uniform_bins.size(), 58u);
  EXPECT_EQ(non_uniform, 256 - 58);
}

TEST(Lbp, MassConservationAndShiftInvariance) {
  std::mt19937_64 rng(2);
  for (bool uniform : {false, true}) {
    LbpConfig cfg;
    cfg.uniform = uniform;
    const auto g = random_gray(rng, 16, 16);
    const auto f = lbp_features(g, cfg);
    double total = 0;
    for (double v : f) total += v;
    EXPECT_EQ(total, 14.0 * 14.0);
    auto shifted = g;
    for (auto& p : shifted.pixels) p += 0.25;
    EXPECT_EQ(lbp_codes(shifted), lbp_codes(g));
    EXPECT_EQ(lbp_features(shifted, cfg), f);
  }
}

TEST(Lbp, RejectsTooSmallImages) {
  LbpConfig cfg;
  EXPECT_THROW(lbp_features(gray(8, 8, std::vector<double>(64, 0.0)), cfg), std::invalid_argument);
  EXPECT_NO_THROW(lbp_features(gray(14, 14, std::vector<double>(196, 0.0)), cfg));
  cfg.grid_rows = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Lbp, GrayConversionUsesLuma) {
  auto img = torch::zeros({3, 2, 2}, torch::kDouble);
  img[0].fill_(1.0);
  const auto g = to_gray(img);
  EXPECT_EQ(g.height, 2);
  EXPECT_NEAR(g.at(1, 1), 0.299, 1e-12);
  EXPECT_NEAR(to_gray(torch::full({2, 2}, 0.5)).at(0, 0), 0.5, 1e-7);
}

TEST(Svm, SeparableDataHasZeroTrainingError) {
  const auto t = separable(3, 60);
  const auto c = train_linear_svm(t.x, t.y, SvmConfig{});
  for (std::size_t i = 0; i < t.x.size(); ++i) EXPECT_EQ(c.decision(t.x[i]) > 0, t.y[i]) << i;
}

TEST(Svm, LabelFlipNegatesScores) {
  const auto t = separable(4, 40);
  std::vector<bool> flipped;
  for (bool b : t.y) flipped.push_back(!b);
  const auto a = train_linear_svm(t.x, t.y, SvmConfig{});
  const auto b = train_linear_svm(t.x, flipped, SvmConfig{});
  for (const auto& x : t.x) EXPECT_NEAR(a.decision(x), -b.decision(x), 1e-9);
}

TEST(Svm, DuplicatedTrainingSetGivesSameClassifier) {
  auto t = separable(5, 30);
  // Overlap the classes a little so the solution has bounded support vectors.
  t.x[0][0] = -3.0;
  t.x[1][0] = 3.0;
  auto doubled = t;
  doubled.x.insert(doubled.x.end(), t.x.begin(), t.x.end());
  doubled.y.insert(doubled.y.end(), t.y.begin(), t.y.end());
  const auto a = train_linear_svm(t.x, t.y, SvmConfig{});
  const auto b = train_linear_svm(doubled.x, doubled.y, SvmConfig{});
  for (std::size_t k = 0; k < a.weights.size(); ++k) EXPECT_NEAR(a.weights[k], b.weights[k], 1e-6);
  EXPECT_NEAR(a.bias, b.bias, 1e-6);
}

TEST(Svm, ErrorsAndDeterminism) {
  const auto t = separable(6, 20);
  EXPECT_THROW(train_linear_svm(t.x, std::vector<bool>(20, true), SvmConfig{}), std::invalid_argument);
  EXPECT_THROW(train_linear_svm({}, {}, SvmConfig{}), std::invalid_argument);
  const auto a = train_linear_svm(t.x, t.y, SvmConfig{});
  const auto b = train_linear_svm(t.x, t.y, SvmConfig{});
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_THROW(mad_evaluate(a, {}, {}), std::invalid_argument);
  const auto scores = mad_evaluate(a, t.x, t.y);
  EXPECT_EQ(scores.attack.size() + scores.bona_fide.size(), 20u);
}

TEST(Svm, ClassifierJsonRoundTrip) {
  const auto t = separable(7, 20);
  auto c = train_linear_svm(t.x, t.y, SvmConfig{});
  c.feature_kind = "lbp";
  c.feature_config = LbpConfig{};
  const auto path = fs::temp_directory_path() / "wali_mad" / "clf.json";
  fs::remove_all(path.parent_path());
  save_classifier(path, c);
  const auto back = load_classifier(path);
  EXPECT_EQ(back.weights, c.weights);
  EXPECT_EQ(back.bias, c.bias);
  EXPECT_EQ(back.feature_kind, "lbp");
  for (const auto& x : t.x) EXPECT_EQ(back.decision(x), c.decision(x));
}

TEST(Smad, SeparatesTexturedFromSmoothImages) {
  std::mt19937_64 rng(8);
  std::vector<GrayImage> images;
  std::vector<bool> labels;
  for (int i = 0; i < 40; ++i) {
    const bool attack = i % 2 == 1;
    GrayImage g{16, 16, std::vector<double>(256)};
    std::normal_distribution<double> noise(0.0, 0.2);
    for (int r = 0; r < 16; ++r) {
      for (int c = 0; c < 16; ++c) g.pixels[r * 16 + c] = attack ? (r + c) / 30.0 : noise(rng);
    }
    images.push_back(g);
    labels.push_back(attack);
  }
  LbpConfig lbp;
  lbp.uniform = true;
  const auto clf = smad_train(images, labels, lbp, SvmConfig{});
  EXPECT_EQ(clf.feature_kind, "lbp");
  std::vector<std::vector<double>> feats;
  for (const auto& g : images) feats.push_back(lbp_features(g, lbp));
  const auto scores = mad_evaluate(clf, feats, labels);
  EXPECT_EQ(bpcer_at_apcer(scores, 0.1), 0.0);
}

TEST(Dmad, DifferenceVectorProperties) {
  FrBackend fr("flat", [](const torch::Tensor& x) {
    auto f = x.flatten(1);
    return f / f.norm(2, 1, true);
  });
  torch::manual_seed(9);
  for (int i = 0; i < 50; ++i) {
    auto a = torch::randn({3, 4, 4}), b = torch::randn({3, 4, 4});
    const auto same = dmad_features(fr, a, a);
    for (double v : same) EXPECT_EQ(v, 0.0);
    const auto ab = dmad_features(fr, a, b), ba = dmad_features(fr, b, a);
    for (std::size_t k = 0; k < ab.size(); ++k) EXPECT_EQ(ab[k], -ba[k]);
    EXPECT_LE(oracle::norm(ab), 2.0 + 1e-12);
  }
}
