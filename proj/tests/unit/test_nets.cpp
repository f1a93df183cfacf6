#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "wali/nets.hpp"

using namespace wali;

namespace {

NetworkConfig small(int size = 16) {
  NetworkConfig c;
  c.image_size = size;
  c.latent_dim = 8;
  c.base_width = 4;
  return c;
}

std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kDouble).contiguous();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

}  // namespace

TEST(NetworkConfigTest, StageCountFollowsResolution) {
  for (auto [size, stages] : std::vector<std::pair<int, int>>{{8, 1}, {16, 2}, {32, 3}, {64, 4}, {512, 7}}) {
    auto c = small(size);
    EXPECT_EQ(c.num_stages(), stages) << size;
  }
  NetworkConfig c;
  EXPECT_EQ(c.stage_width(0), 64);
  EXPECT_EQ(c.stage_width(3), 512);
  EXPECT_EQ(c.stage_width(5), 512);
}

TEST(NetworkConfigTest, ValidationNamesField) {
  auto c = small();
  c.image_size = 24;
  try {
    c.validate();
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("image_size"), std::string::npos);
  }
  c = small();
  c.latent_dim = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(NetworkConfigTest, JsonRoundTrip) {
  auto c = small(32);
  c.max_width_multiplier = 4;
  const auto back = nlohmann::json(c).get<NetworkConfig>();
  EXPECT_EQ(back.image_size, 32);
  EXPECT_EQ(back.latent_dim, 8);
  EXPECT_EQ(back.max_width_multiplier, 4);
}

TEST(EncoderTest, ZeroImageGivesFinitePositiveSigma) {
  torch::manual_seed(0);
  Encoder enc(small());
  auto out = enc(torch::zeros({3, 16, 16}));
  EXPECT_EQ(out.mu.sizes(), (std::vector<int64_t>{8}));
  EXPECT_TRUE(torch::isfinite(out.mu).all().item<bool>());
  EXPECT_TRUE((out.sigma > 0).all().item<bool>());
}

TEST(EncoderTest, DeterministicAndBatchEquivalent) {
  torch::manual_seed(1);
  Encoder enc(small());
  auto x = torch::rand({4, 3, 16, 16});
  auto a = enc(x), b = enc(x);
  EXPECT_TRUE(torch::equal(a.mu, b.mu));
  for (int i = 0; i < 4; ++i) {
    auto single = enc(x[i]);
    EXPECT_TRUE(torch::allclose(single.mu, a.mu[i], 1e-5, 1e-6));
    EXPECT_TRUE(torch::allclose(single.sigma, a.sigma[i], 1e-5, 1e-6));
  }
  EXPECT_THROW(enc(torch::rand({3, 8, 8})), std::invalid_argument);
}

TEST(ReparameterizeTest, ZeroNoiseAndTinySigma) {
  EncoderOutput out{torch::tensor({1.0, -2.0}, torch::kDouble), torch::tensor({0.5, 2.0}, torch::kDouble)};
  EXPECT_TRUE(torch::equal(reparameterize(out, torch::zeros({2}, torch::kDouble)), out.mu));
  EncoderOutput tiny{out.mu, torch::full({2}, 1e-12, torch::kDouble)};
  EXPECT_TRUE(torch::allclose(reparameterize(tiny, torch::randn({2}, torch::kDouble)), out.mu, 0, 1e-10));
  EXPECT_THROW(reparameterize(out, torch::zeros({3}, torch::kDouble)), std::invalid_argument);
}

TEST(ReparameterizeTest, MonteCarloMoments) {
  torch::manual_seed(2);
  EncoderOutput out{torch::tensor({0.5, -1.5, 3.0}, torch::kDouble), torch::tensor({0.2, 1.0, 2.5}, torch::kDouble)};
  const int n = 10000;
  auto z = reparameterize({out.mu.expand({n, 3}), out.sigma.expand({n, 3})}, torch::randn({n, 3}, torch::kDouble));
  auto mean = to_vec(z.mean(0)), var = to_vec(z.var(0));
  for (int k = 0; k < 3; ++k) {
    const double mu = out.mu[k].item<double>(), s2 = std::pow(out.sigma[k].item<double>(), 2);
    EXPECT_LT(std::abs(mean[k] - mu), 0.05 * std::max(std::abs(mu), out.sigma[k].item<double>()));
    EXPECT_LT(std::abs(var[k] - s2), 0.05 * s2);
  }
}

TEST(DecoderTest, OutputRangeAndShapes) {
  for (int size : {8, 16, 32, 64}) {
    torch::manual_seed(3);
    Decoder dec(small(size));
    auto x = dec(10.0 * torch::randn({2, 8}));
    EXPECT_EQ(x.sizes(), (std::vector<int64_t>{2, 3, size, size}));
    EXPECT_GE(x.min().item<double>(), 0.0);
    EXPECT_LE(x.max().item<double>(), 1.0);
  }
  Decoder dec(small());
  EXPECT_EQ(dec(torch::zeros({8})).sizes(), (std::vector<int64_t>{3, 16, 16}));
  EXPECT_THROW(dec(torch::zeros({2, 7})), std::invalid_argument);
}

TEST(DecoderTest, NoTransposedConvolutions) {
  Decoder dec(small(32));
  int upsamples = 0;
  for (const auto& m : dec->modules(false)) {
    EXPECT_EQ(m->as<torch::nn::ConvTranspose2d>(), nullptr);
    if (m->as<torch::nn::Upsample>()) ++upsamples;
  }
  EXPECT_EQ(upsamples, small(32).num_stages());
}

TEST(CriticTest, ShapesAndExtremes) {
  torch::manual_seed(4);
  Critic critic(small());
  EXPECT_EQ(critic(torch::rand({3, 16, 16}), torch::randn({8})).dim(), 0);
  EXPECT_EQ(critic(torch::rand({5, 3, 16, 16}), torch::randn({5, 8})).sizes(), (std::vector<int64_t>{5}));
  EXPECT_TRUE(torch::isfinite(critic(torch::zeros({2, 3, 16, 16}), torch::zeros({2, 8}))).all().item<bool>());
  EXPECT_TRUE(torch::isfinite(critic(torch::ones({2, 3, 16, 16}), 100 * torch::ones({2, 8}))).all().item<bool>());
  EXPECT_THROW(critic(torch::rand({2, 3, 16, 16}), torch::randn({3, 8})), std::invalid_argument);
}

TEST(CriticTest, InputGradientMatchesFiniteDifferences) {
  torch::manual_seed(5);
  Critic critic(small(8));
  critic->to(torch::kDouble);
  auto x = torch::rand({3, 8, 8}, torch::kDouble).requires_grad_(true);
  auto z = torch::randn({8}, torch::kDouble);
  auto s = critic(x, z);
  auto grad = to_vec(torch::autograd::grad({s}, {x})[0]);

  auto f = [&](const oracle::Vec& v) {
    torch::NoGradGuard ng;
    auto xv = torch::tensor(v, torch::kDouble).view({3, 8, 8});
    return critic(xv, z).item<double>();
  };
  const auto fd = oracle::finite_difference_gradient(f, to_vec(x), 1e-6);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    num += (grad[i] - fd[i]) * (grad[i] - fd[i]);
    den += fd[i] * fd[i];
  }
  EXPECT_LT(std::sqrt(num / den), 1e-5);
}

TEST(FrEmbedderTest, UnitNormAndDeterministic) {
  torch::manual_seed(6);
  FrNetConfig c;
  c.image_size = 16;
  FrEmbedder fr(c);
  auto x = torch::rand({4, 3, 16, 16});
  auto y = fr(x);
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{4, 64}));
  EXPECT_TRUE(torch::allclose(y.norm(2, 1), torch::ones({4}), 0, 1e-6));
  EXPECT_TRUE(torch::equal(y, fr(x)));
}

TEST(CheckpointTest, SaveLoadSaveIsByteIdentical) {
  torch::manual_seed(7);
  Encoder enc(small());
  Checkpoint ckpt;
  ckpt.header = {{"kind", "test"}, {"network", small()}};
  capture_parameters(*enc, "encoder.", ckpt);
  const auto path = std::filesystem::temp_directory_path() / "wali_ckpt_test.bin";
  save_checkpoint(path, ckpt);
  const auto bytes = serialize_checkpoint(load_checkpoint(path));
  EXPECT_EQ(bytes, serialize_checkpoint(ckpt));

  torch::manual_seed(8);
  Encoder other(small());
  restore_parameters(*other, "encoder.", load_checkpoint(path));
  auto x = torch::rand({2, 3, 16, 16});
  EXPECT_EQ((enc(x).mu - other(x).mu).abs().max().item<double>(), 0.0);
}

TEST(CheckpointTest, RejectsCorruptionAndMissingParameters) {
  Encoder enc(small());
  Checkpoint ckpt;
  capture_parameters(*enc, "encoder.", ckpt);
  auto bytes = serialize_checkpoint(ckpt);
  bytes[bytes.size() / 2] ^= 0x5a;
  EXPECT_THROW(deserialize_checkpoint(bytes), std::runtime_error);
  EXPECT_THROW(deserialize_checkpoint("garbage"), std::runtime_error);
  Decoder dec(small());
  EXPECT_THROW(restore_parameters(*dec, "decoder.", ckpt), std::runtime_error);
  EXPECT_GT(parameter_count(*enc), 0);
}
