#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "wali/datasets.hpp"

using namespace wali;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticConfig small_cfg(uint64_t seed) {
  SyntheticConfig c;
  c.n_identities = 12;
  c.samples_per_identity = 6;
  c.seed = seed;
  return c;
}

/// Unit vectors with the given Gram matrix, by Cholesky factorisation.
std::vector<oracle::Vec> from_gram(const std::vector<oracle::Vec>& gram) {
  const std::size_t n = gram.size();
  std::vector<oracle::Vec> l(n, oracle::Vec(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = gram[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      l[i][j] = i == j ? std::sqrt(s) : s / l[j][j];
    }
  }
  return l;
}

/// Embeddings that depend only on mean pixel colour, so identities separate.
std::vector<Embedding> colour_embeddings(const Dataset& ds) {
  std::vector<Embedding> out;
  for (const auto& img : ds.images) {
    const auto s = channel_stats(img);
    out.push_back(Embedding({s.mean[0] + 0.1, s.mean[1] + 0.1, s.mean[2] + 0.1, s.std[0] + 0.1}).unit());
  }
  return out;
}

}  // namespace

TEST(Synthetic, CountsLabelsAndIds) {
  SyntheticConfig c;
  const auto ds = generate_synthetic_dataset(c);
  EXPECT_EQ(ds.size(), 800u);
  EXPECT_EQ(std::set<int>(ds.labels.begin(), ds.labels.end()).size(), 40u);
  EXPECT_EQ(ds.image_ids[21], "id001/s01");
  EXPECT_EQ(ds.index_of("id039/s19"), 799u);
  EXPECT_EQ(ds.tensor().sizes(), (std::vector<int64_t>{800, 3, 16, 16}));
  EXPECT_THROW(ds.index_of("id099/s00"), std::invalid_argument);
}

TEST(Synthetic, SeedDeterminismAndVariation) {
  const auto a = identity_spec(3, 5).to_vector(), b = identity_spec(3, 5).to_vector();
  EXPECT_EQ(a, b);
  EXPECT_NE(identity_spec(4, 5).to_vector(), a);
  EXPECT_NE(identity_spec(3, 6).to_vector(), a);

  const auto d1 = fs::temp_directory_path() / "wali_ds_a", d2 = fs::temp_directory_path() / "wali_ds_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  write_dataset(d1, generate_synthetic_dataset(small_cfg(9)));
  write_dataset(d2, generate_synthetic_dataset(small_cfg(9)));
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), d1);
    EXPECT_EQ(slurp(entry.path()), slurp(d2 / rel)) << rel;
  }
  const auto back = read_dataset(d1);
  EXPECT_EQ(back.size(), 72u);
  EXPECT_EQ(back.labels[7], 1);
}

TEST(Synthetic, ValidationNamesField) {
  auto c = small_cfg(1);
  c.image_size = 12;
  try {
    c.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("image_size"), std::string::npos);
  }
  c = small_cfg(1);
  c.n_identities = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Png, RoundTripIsExactAt8Bits) {
  Image img{5, 7, 3, std::vector<float>(105)};
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>((i * 37 % 256) / 255.0);
  const auto path = fs::temp_directory_path() / "wali_png" / "x.png";
  write_png(path, img);
  const auto back = read_png(path);
  ASSERT_EQ(back.height, 5);
  ASSERT_EQ(back.width, 7);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-6);
  const auto t = to_tensor(img);
  EXPECT_EQ(t.sizes(), (std::vector<int64_t>{3, 5, 7}));
  EXPECT_EQ(from_tensor(t).data, img.data);
}

TEST(PairRanking, ThreeIdentityExample) {
  const auto v = from_gram({{1.0, 0.9, 0.1}, {0.9, 1.0, 0.2}, {0.1, 0.2, 1.0}});
  std::map<int, Embedding> means{{1, Embedding(v[0])}, {2, Embedding(v[1])}, {3, Embedding(v[2])}};
  const auto ranked = rank_identity_pairs(means);
  ASSERT_EQ(ranked.size(), 3u);
  EXPECT_EQ(ranked[0].a, 1);
  EXPECT_EQ(ranked[0].b, 2);
  EXPECT_NEAR(ranked[0].similarity, 0.9, 1e-12);
  EXPECT_EQ(ranked[1].b, 3);
  EXPECT_NEAR(ranked[1].similarity, 0.2, 1e-12);
  EXPECT_NEAR(ranked[2].similarity, 0.1, 1e-12);
}

TEST(PairRanking, MeanEmbeddingsMatchRecomputation) {
  std::mt19937_64 rng(4);
  std::vector<Embedding> e;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    e.emplace_back(oracle::random_unit(rng, 16), true);
    labels.push_back(i % 5);
  }
  const auto means = identity_mean_embeddings(e, labels);
  ASSERT_EQ(means.size(), 5u);
  for (int id = 0; id < 5; ++id) {
    oracle::Vec sum(16, 0.0);
    for (int i = 0; i < 60; ++i) {
      if (labels[i] != id) continue;
      for (int k = 0; k < 16; ++k) sum[k] += e[i].values[k];
    }
    const auto ref = oracle::unit(sum);
    for (int k = 0; k < 16; ++k) EXPECT_NEAR(means.at(id).values[k], ref[k], 1e-9);
  }
}

TEST(PairSelection, EmptyDeterministicAndDisjoint) {
  const auto ds = generate_synthetic_dataset(small_cfg(2));
  const auto emb = colour_embeddings(ds);
  PairSelectionConfig cfg;
  cfg.n_pairs = 0;
  EXPECT_TRUE(select_pairs(ds, emb, cfg).empty());

  cfg.n_pairs = 30;
  cfg.identity_pairs = 6;
  cfg.seed = 11;
  const auto a = select_pairs(ds, emb, cfg), b = select_pairs(ds, emb, cfg);
  ASSERT_EQ(a.size(), 30u);
  const auto dir = fs::temp_directory_path() / "wali_protocol";
  fs::remove_all(dir);
  write_protocol(dir / "a.jsonl", a);
  write_protocol(dir / "b.jsonl", b);
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  cfg.seed = 12;
  write_protocol(dir / "c.jsonl", select_pairs(ds, emb, cfg));
  EXPECT_NE(slurp(dir / "a.jsonl"), slurp(dir / "c.jsonl"));

  std::map<int, std::set<std::string>> sources, probes;
  std::set<std::pair<int, int>> identity_pairs;
  for (const auto& e : a) {
    EXPECT_NE(e.identity_a, e.identity_b);
    EXPECT_EQ(ds.labels[ds.index_of(e.image_a)], e.identity_a);
    EXPECT_EQ(ds.labels[ds.index_of(e.probe_b)], e.identity_b);
    sources[e.identity_a].insert(e.image_a);
    sources[e.identity_b].insert(e.image_b);
    probes[e.identity_a].insert(e.probe_a);
    probes[e.identity_b].insert(e.probe_b);
    identity_pairs.insert({std::min(e.identity_a, e.identity_b), std::max(e.identity_a, e.identity_b)});
  }
  EXPECT_EQ(identity_pairs.size(), 6u);
  for (const auto& [id, src] : sources) {
    for (const auto& p : probes[id]) EXPECT_EQ(src.count(p), 0u) << p;
  }

  const auto back = read_protocol(dir / "a.jsonl");
  ASSERT_EQ(back.size(), a.size());
  EXPECT_EQ(back[3].probe_b, a[3].probe_b);
  EXPECT_EQ(back[3].pair_id, a[3].pair_id);
}

TEST(PairSelection, TopPairsFollowRanking) {
  const auto ds = generate_synthetic_dataset(small_cfg(3));
  const auto emb = colour_embeddings(ds);
  const auto ranked = rank_identity_pairs(identity_mean_embeddings(emb, ds.labels));
  PairSelectionConfig cfg;
  cfg.identity_pairs = 1;
  cfg.n_pairs = 4;
  for (const auto& e : select_pairs(ds, emb, cfg)) {
    EXPECT_EQ(std::min(e.identity_a, e.identity_b), ranked[0].a);
    EXPECT_EQ(std::max(e.identity_a, e.identity_b), ranked[0].b);
  }
  cfg.identity_pairs = 1000;
  EXPECT_THROW(select_pairs(ds, emb, cfg), std::invalid_argument);
}

TEST(Protocol, AcceptsProbeFieldAliases) {
  const auto path = fs::temp_directory_path() / "wali_protocol_alias.jsonl";
  {
    std::ofstream out(path);
    out << R"({"pair_id":"p0000","identity_a":1,"identity_b":2,"image_a":"id001/s00","image_b":"id002/s00",)"
        << R"("probe1":"id001/s05","probe2":"id002/s05"})" << '\n';
    out << R"({"pair_id":"p0001","identity_a":1,"identity_b":2,"image1":"id001/s01","image2":"id002/s01",)"
        << R"("probe_a":"id001/s05","probe_b":"id002/s05"})" << '\n';
  }
  const auto p = read_protocol(path);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].probe_a, "id001/s05");
  EXPECT_EQ(p[1].image_b, "id002/s01");
}

TEST(ColourCorrect, IdentityConstantAndStatistics) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.3, 0.7);
  Image img{8, 8, 3, std::vector<float>(192)};
  for (auto& v : img.data) v = static_cast<float>(u(rng));
  const auto same = colour_correct(img, channel_stats(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(same.data[i], img.data[i], 1e-6);

  Image flat = img;
  for (std::size_t i = 0; i < flat.data.size(); i += 3) flat.data[i] = 0.2f;
  ChannelStats ref{{0.45, 0.5, 0.55}, {0.05, 0.06, 0.07}};
  const auto out = colour_correct(flat, ref);
  for (std::size_t i = 0; i < out.data.size(); i += 3) EXPECT_NEAR(out.data[i], 0.45, 1e-6);

  const auto corrected = colour_correct(img, ref);
  const auto s = channel_stats(corrected);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(s.mean[c], ref.mean[c], 0.01);
    EXPECT_NEAR(s.std[c], ref.std[c], 0.01);
  }
  const auto j = stats_to_json(ref);
  EXPECT_TRUE(j.contains("g"));
  EXPECT_EQ(stats_from_json(j).std, ref.std);
  EXPECT_THROW(colour_correct(img, ChannelStats{{0.5}, {0.1}}), std::invalid_argument);
}
