#pragma once

// Small networks and helpers shared by the unit and acceptance tests.

#include <torch/torch.h>

#include <vector>

#include "oracles.hpp"
#include "wali/losses.hpp"

namespace fixtures {

/// Three dense layers with tanh over the concatenated (flattened image, latent).
struct ToyCriticImpl : torch::nn::Module {
  ToyCriticImpl(int64_t image_numel, int64_t latent_dim, int64_t hidden) {
    l1 = register_module("l1", torch::nn::Linear(image_numel + latent_dim, hidden));
    l2 = register_module("l2", torch::nn::Linear(hidden, hidden));
    l3 = register_module("l3", torch::nn::Linear(hidden, 1));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z) {
    auto h = torch::cat({x.flatten(1), z}, 1);
    h = torch::tanh(l1(h));
    h = torch::tanh(l2(h));
    return l3(h).squeeze(1);
  }
  torch::nn::Linear l1{nullptr}, l2{nullptr}, l3{nullptr};
};
TORCH_MODULE(ToyCritic);

inline std::vector<double> flat(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kDouble).contiguous();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

inline std::vector<double> flat_parameters(torch::nn::Module& m) {
  std::vector<double> out;
  for (auto& p : m.parameters()) {
    auto v = flat(p);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

inline void load_flat_parameters(torch::nn::Module& m, const std::vector<double>& v) {
  torch::NoGradGuard ng;
  std::size_t off = 0;
  for (auto& p : m.parameters()) {
    auto n = static_cast<std::size_t>(p.numel());
    std::vector<double> slice(v.begin() + off, v.begin() + off + n);
    p.copy_(torch::tensor(slice, torch::kDouble).view(p.sizes()).to(p.dtype()));
    off += n;
  }
}

inline std::vector<double> flat_gradients(torch::nn::Module& m) {
  std::vector<double> out;
  for (auto& p : m.parameters()) {
    auto v = p.grad().defined() ? flat(p.grad()) : std::vector<double>(p.numel(), 0.0);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

struct PenaltyCheck {
  double rel_err_64 = 0.0;
  double rel_err_32 = 0.0;
};

/// Parameter gradient of R_x + R_z through double backprop, compared with
/// central differences of the same penalty evaluated in double precision.
inline PenaltyCheck check_penalty_gradient(uint64_t seed, int64_t batch, int64_t image_side, int64_t latent_dim,
                                           int64_t hidden) {
  torch::manual_seed(seed);
  const int64_t numel = image_side * image_side;
  ToyCritic critic(numel, latent_dim, hidden);
  critic->to(torch::kDouble);
  auto x_hat = torch::rand({batch, 1, image_side, image_side}, torch::kDouble);
  auto z_hat = torch::randn({batch, latent_dim}, torch::kDouble);

  auto penalty_of = [&](ToyCritic& c, const torch::Tensor& x, const torch::Tensor& z) {
    wali::CriticFn fn = [&c](const torch::Tensor& xi, const torch::Tensor& zi) { return c(xi, zi); };
    auto gp = wali::gradient_penalties(fn, x, z);
    return gp.r_x + gp.r_z;
  };

  const auto theta = flat_parameters(*critic);
  auto f = [&](const std::vector<double>& v) {
    load_flat_parameters(*critic, v);
    return penalty_of(critic, x_hat, z_hat).item<double>();
  };
  const auto fd = oracle::finite_difference_gradient(f, theta, 1e-6);
  load_flat_parameters(*critic, theta);

  PenaltyCheck out;
  critic->zero_grad();
  penalty_of(critic, x_hat, z_hat).backward();
  out.rel_err_64 = relative_error(flat_gradients(*critic), fd);

  ToyCritic c32(numel, latent_dim, hidden);
  load_flat_parameters(*c32, theta);
  c32->zero_grad();
  penalty_of(c32, x_hat.to(torch::kFloat), z_hat.to(torch::kFloat)).backward();
  out.rel_err_32 = relative_error(flat_gradients(*c32), fd);
  return out;
}

}  // namespace fixtures
