#pragma once

// Training and finetuning objectives.
//
//   critic:     L_C = s_fake - s_real + lambda (R_x + R_z)
//   generator:  L_G = |s_real - s_fake| + g1 L_pixel + g2 L_ffl + g3 L_FR
//                     + g4 L_FR_Morph + g5 L_FR_Morph_alpha
//
// R_x / R_z are the squared deviations of the critic's input-gradient norm
// from 1 at interpolated samples; they are built with create_graph so the
// critic parameters receive second-order gradients.

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace wali {

/// Differentiable image -> unit embedding map ([N,C,H,W] -> [N,D]).
using EmbedFn = std::function<torch::Tensor(const torch::Tensor&)>;
/// Batched critic (x [N,C,H,W], z [N,L]) -> scores [N].
using CriticFn = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

struct LossWeights {
  double lambda_gp = 10.0;
  /// pixel, ffl, fr, fr_morph, fr_morph_alpha
  std::array<double, 5> gamma{1.0, 1.0, 1.0, 1.0, 1.0};

  /// Throws std::invalid_argument on negative or non-finite weights.
  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossReport {
  std::vector<std::pair<std::string, double>> terms;
  double total = 0.0;

  double get(const std::string& name) const;
};

double critic_loss(double s_fake, double s_real, double r_x, double r_z, const LossWeights& w);
torch::Tensor critic_loss(const torch::Tensor& s_fake, const torch::Tensor& s_real, const torch::Tensor& r_x,
                          const torch::Tensor& r_z, const LossWeights& w);

double generator_adv_loss(double s_fake, double s_real);
torch::Tensor generator_adv_loss(const torch::Tensor& s_fake, const torch::Tensor& s_real);

enum class PenaltyInput { x, z };

/// Mean over the batch of (||grad_{input} C(x_hat, z_hat)||_2 - 1)^2. The
/// result stays attached to the critic parameters. Throws std::invalid_argument
/// when the critic output does not depend on the requested input.
torch::Tensor gradient_penalty(const CriticFn& critic, const torch::Tensor& x_hat, const torch::Tensor& z_hat,
                               PenaltyInput wrt);

struct GradientPenalties {
  torch::Tensor r_x;
  torch::Tensor r_z;
  /// Detached batch means of the gradient norms, for diagnostics.
  double mean_grad_norm_x = 0.0;
  double mean_grad_norm_z = 0.0;
};

/// Both penalties from a single critic evaluation.
GradientPenalties gradient_penalties(const CriticFn& critic, const torch::Tensor& x_hat, const torch::Tensor& z_hat);

torch::Tensor pixel_loss(const torch::Tensor& x, const torch::Tensor& x_recon);

/// Focal frequency loss with exponent 1: mean over batch, channel and
/// frequency of w * |F(x_recon) - F(x)|^2, where F is the orthonormal 2-D DFT
/// and w = |F(x_recon) - F(x)| divided by its per-image maximum, detached.
torch::Tensor focal_frequency_loss(const torch::Tensor& x, const torch::Tensor& x_recon);

/// Row-wise angle between (unit) embeddings, cosine clamped to +-(1 - 1e-7).
torch::Tensor angular_distance(const torch::Tensor& a, const torch::Tensor& b);

/// Mean angle between phi(x_recon) and phi(x); phi(x) is treated as constant.
torch::Tensor fr_recon_loss(const EmbedFn& fr, const torch::Tensor& x, const torch::Tensor& x_recon);

/// Mean angle between phi(x_morph) and the worst-case targets.
torch::Tensor fr_morph_alpha_loss(const EmbedFn& fr, const torch::Tensor& x_morph, const torch::Tensor& y_target);

/// Batched (a y1 + (1 - a) y2) / ||.||, row-wise. Throws DegenerateInputError
/// on a zero row.
torch::Tensor worst_case_alpha_batch(const torch::Tensor& y1, const torch::Tensor& y2, double alpha);
torch::Tensor worst_case_angular_batch(const torch::Tensor& y1, const torch::Tensor& y2);

/// Undefined tensors count as inactive terms.
struct GeneratorTerms {
  torch::Tensor adversarial;
  torch::Tensor pixel;
  torch::Tensor ffl;
  torch::Tensor fr;
  torch::Tensor fr_morph;
  torch::Tensor fr_morph_alpha;
};

struct GeneratorLoss {
  torch::Tensor total;
  LossReport report;
};

/// total = adversarial + sum_i gamma_i * term_i (adversarial weight fixed to 1).
GeneratorLoss combined_generator_loss(const GeneratorTerms& terms, const LossWeights& w);

/// Scalar form of the same combination; `terms` are (pixel, ffl, fr, fr_morph,
/// fr_morph_alpha).
LossReport combined_generator_loss(double adversarial, const std::array<double, 5>& terms, const LossWeights& w);

}  // namespace wali
