#include "wali/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "wali/geometry.hpp"

namespace wali {
namespace {

const char* const kTermNames[5] = {"pixel", "ffl", "fr", "fr_morph", "fr_morph_alpha"};

void require_finite(std::initializer_list<double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite input");
  }
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    std::ostringstream msg;
    msg << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(msg.str());
  }
}

torch::Tensor batched(const torch::Tensor& t, int64_t unbatched_dim) {
  return t.dim() == unbatched_dim ? t.unsqueeze(0) : t;
}

}  // namespace

void LossWeights::validate() const {
  if (!std::isfinite(lambda_gp) || lambda_gp < 0.0) throw std::invalid_argument("invalid weight 'lambda_gp'");
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    if (!std::isfinite(gamma[i]) || gamma[i] < 0.0) {
      throw std::invalid_argument("invalid weight 'gamma[" + std::to_string(i) + "]' (" + kTermNames[i] + ")");
    }
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_gp", w.lambda_gp}, {"gamma", w.gamma}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w = LossWeights{};
  if (j.contains("lambda_gp")) w.lambda_gp = j.at("lambda_gp").get<double>();
  if (j.contains("gamma")) {
    const auto& g = j.at("gamma");
    if (!g.is_array() || g.size() != 5) throw std::invalid_argument("invalid weight 'gamma': expected 5 values");
    for (std::size_t i = 0; i < 5; ++i) w.gamma[i] = g[i].get<double>();
  }
}

double LossReport::get(const std::string& name) const {
  for (const auto& [k, v] : terms) {
    if (k == name) return v;
  }
  if (name == "total") return total;
  throw std::out_of_range("no loss term named " + name);
}

double critic_loss(double s_fake, double s_real, double r_x, double r_z, const LossWeights& w) {
  require_finite({s_fake, s_real, r_x, r_z}, "critic_loss");
  if (r_x < 0.0 || r_z < 0.0) throw std::invalid_argument("critic_loss: penalties must be non-negative");
  return s_fake - s_real + w.lambda_gp * (r_x + r_z);
}

torch::Tensor critic_loss(const torch::Tensor& s_fake, const torch::Tensor& s_real, const torch::Tensor& r_x,
                          const torch::Tensor& r_z, const LossWeights& w) {
  return s_fake - s_real + w.lambda_gp * (r_x + r_z);
}

double generator_adv_loss(double s_fake, double s_real) {
  require_finite({s_fake, s_real}, "generator_adv_loss");
  return std::abs(s_real - s_fake);
}

torch::Tensor generator_adv_loss(const torch::Tensor& s_fake, const torch::Tensor& s_real) {
  return torch::abs(s_real - s_fake);
}

GradientPenalties gradient_penalties(const CriticFn& critic, const torch::Tensor& x_hat, const torch::Tensor& z_hat) {
  auto x = batched(x_hat, 3).detach().requires_grad_(true);
  auto z = batched(z_hat, 1).detach().requires_grad_(true);
  auto scores = critic(x, z);
  if (!scores.requires_grad()) {
    throw std::invalid_argument("gradient_penalty: critic output is not differentiable w.r.t. its inputs");
  }
  auto grads = torch::autograd::grad({scores.sum()}, {x, z}, /*grad_outputs=*/{}, /*retain_graph=*/true,
                                     /*create_graph=*/true, /*allow_unused=*/true);
  GradientPenalties out;
  auto penalty = [](const torch::Tensor& g, double& mean_norm) {
    auto norms = torch::linalg_vector_norm(g.flatten(1), 2, {1});
    mean_norm = norms.mean().item<double>();
    return (norms - 1.0).pow(2).mean();
  };
  // An unused input has identically zero gradient, i.e. penalty 1.
  auto gx = grads[0].defined() ? grads[0] : torch::zeros_like(x);
  auto gz = grads[1].defined() ? grads[1] : torch::zeros_like(z);
  out.r_x = penalty(gx, out.mean_grad_norm_x);
  out.r_z = penalty(gz, out.mean_grad_norm_z);
  return out;
}

torch::Tensor gradient_penalty(const CriticFn& critic, const torch::Tensor& x_hat, const torch::Tensor& z_hat,
                               PenaltyInput wrt) {
  auto x = batched(x_hat, 3).detach().requires_grad_(wrt == PenaltyInput::x);
  auto z = batched(z_hat, 1).detach().requires_grad_(wrt == PenaltyInput::z);
  auto& input = wrt == PenaltyInput::x ? x : z;
  auto scores = critic(x, z);
  if (!scores.requires_grad()) {
    throw std::invalid_argument("gradient_penalty: critic output is not differentiable w.r.t. the requested input");
  }
  auto g = torch::autograd::grad({scores.sum()}, {input}, {}, true, true, true)[0];
  if (!g.defined()) g = torch::zeros_like(input);
  auto norms = torch::linalg_vector_norm(g.flatten(1), 2, {1});
  return (norms - 1.0).pow(2).mean();
}

torch::Tensor pixel_loss(const torch::Tensor& x, const torch::Tensor& x_recon) {
  require_same_shape(x, x_recon, "pixel_loss");
  return (x - x_recon).pow(2).mean();
}

torch::Tensor focal_frequency_loss(const torch::Tensor& x, const torch::Tensor& x_recon) {
  require_same_shape(x, x_recon, "focal_frequency_loss");
  auto real = batched(x, 3);
  auto recon = batched(x_recon, 3);
  auto diff = torch::fft::fft2(recon, c10::nullopt, {-2, -1}, "ortho") -
              torch::fft::fft2(real, c10::nullopt, {-2, -1}, "ortho");
  auto distance = torch::real(diff).pow(2) + torch::imag(diff).pow(2);

  torch::Tensor weight;
  {
    torch::NoGradGuard no_grad;
    weight = distance.detach().sqrt();
    auto peak = std::get<0>(weight.flatten(1).max(1)).view({-1, 1, 1, 1});
    weight = torch::nan_to_num(weight / peak, 0.0).clamp(0.0, 1.0);
  }
  return (weight * distance).mean();
}

torch::Tensor angular_distance(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "angular_distance");
  auto cos = (batched(a, 1) * batched(b, 1)).sum(1);
  return torch::acos(cos.clamp(-1.0 + 1e-7, 1.0 - 1e-7));
}

torch::Tensor fr_recon_loss(const EmbedFn& fr, const torch::Tensor& x, const torch::Tensor& x_recon) {
  if (!fr) throw std::invalid_argument("fr_recon_loss: invalid FR backend");
  require_same_shape(x, x_recon, "fr_recon_loss");
  torch::Tensor target;
  {
    torch::NoGradGuard no_grad;
    target = fr(batched(x, 3));
  }
  return angular_distance(fr(batched(x_recon, 3)), target).mean();
}

torch::Tensor fr_morph_alpha_loss(const EmbedFn& fr, const torch::Tensor& x_morph, const torch::Tensor& y_target) {
  if (!fr) throw std::invalid_argument("fr_morph_alpha_loss: invalid FR backend");
  auto target = batched(y_target, 1);
  if (!torch::isfinite(target).all().item<bool>()) throw std::invalid_argument("fr_morph_alpha_loss: invalid target");
  auto norms = torch::linalg_vector_norm(target, 2, {1});
  if ((norms - 1.0).abs().max().item<double>() > 1e-4) {
    throw std::invalid_argument("fr_morph_alpha_loss: target embeddings must be unit norm");
  }
  return angular_distance(fr(batched(x_morph, 3)), target).mean();
}

torch::Tensor worst_case_alpha_batch(const torch::Tensor& y1, const torch::Tensor& y2, double alpha) {
  require_same_shape(y1, y2, "worst_case_alpha_batch");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  auto mix = alpha * batched(y1, 1) + (1.0 - alpha) * batched(y2, 1);
  auto n = torch::linalg_vector_norm(mix, 2, {1}, /*keepdim=*/true);
  if (n.min().item<double>() <= 1e-9) {
    throw DegenerateInputError("worst-case embedding undefined: weighted sum of inputs is zero");
  }
  return mix / n;
}

torch::Tensor worst_case_angular_batch(const torch::Tensor& y1, const torch::Tensor& y2) {
  return worst_case_alpha_batch(y1, y2, 0.5);
}

GeneratorLoss combined_generator_loss(const GeneratorTerms& terms, const LossWeights& w) {
  w.validate();
  const torch::Tensor* parts[5] = {&terms.pixel, &terms.ffl, &terms.fr, &terms.fr_morph, &terms.fr_morph_alpha};
  GeneratorLoss out;
  out.total = terms.adversarial.defined() ? terms.adversarial : torch::zeros({});
  const double adv = terms.adversarial.defined() ? terms.adversarial.item<double>() : 0.0;
  out.report.terms.emplace_back("adversarial", adv);
  double total = adv;
  for (int i = 0; i < 5; ++i) {
    if (!parts[i]->defined()) continue;
    const double v = parts[i]->item<double>();
    if (!std::isfinite(v)) throw std::invalid_argument(std::string("non-finite loss term ") + kTermNames[i]);
    out.report.terms.emplace_back(kTermNames[i], v);
    total += w.gamma[i] * v;
    if (w.gamma[i] != 0.0) out.total = out.total + w.gamma[i] * *parts[i];
  }
  out.report.total = total;
  return out;
}

LossReport combined_generator_loss(double adversarial, const std::array<double, 5>& terms, const LossWeights& w) {
  w.validate();
  require_finite({adversarial}, "combined_generator_loss");
  LossReport report;
  report.terms.emplace_back("adversarial", adversarial);
  report.total = adversarial;
  for (int i = 0; i < 5; ++i) {
    require_finite({terms[i]}, "combined_generator_loss");
    report.terms.emplace_back(kTermNames[i], terms[i]);
    report.total += w.gamma[i] * terms[i];
  }
  return report;
}

}  // namespace wali
