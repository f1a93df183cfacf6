#pragma once

// Two-phase latent optimisation toward the worst-case embedding.
//
// Phase 1 (per source image): start from the encoder mean and minimise
//   L' = w_img ||x - G(z)||^2 + sum_k w_k w_emb ||phi_k(x) - phi_k(G(z))||^2
// Phase 2 (per pair): start from (z1 + z2) / 2 and minimise
//   L'' = sum_k w_k ||y*_k - phi_k(G(z))||^2
// where y*_k is the normalised bisector of phi_k(x1) and phi_k(x2).
//
// The generator is any GeneratorBackend; WALI's encoder/decoder is one of them.
// Backends are never updated.

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "wali/losses.hpp"
#include "wali/nets.hpp"

namespace wali {

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  /// [N,C,H,W] -> [N,L]
  virtual torch::Tensor encode(const torch::Tensor& images) = 0;
  /// [N,L] -> [N,C,H,W]; must be differentiable w.r.t. the latent.
  virtual torch::Tensor decode(const torch::Tensor& latents) = 0;
  virtual int latent_dim() const = 0;
  virtual std::string descriptor() const = 0;
};

/// WALI encoder mean + decoder.
class WaliBackend : public GeneratorBackend {
 public:
  WaliBackend(Encoder encoder, Decoder decoder, std::string descriptor = "wali");
  torch::Tensor encode(const torch::Tensor& images) override;
  torch::Tensor decode(const torch::Tensor& latents) override;
  int latent_dim() const override;
  std::string descriptor() const override { return descriptor_; }

 private:
  Encoder encoder_;
  Decoder decoder_;
  std::string descriptor_;
};

struct WeightedFr {
  std::string id;
  EmbedFn embed;
  double weight = 1.0;
};

struct OptimizationConfig {
  int steps_phase1 = 150;
  int steps_phase2 = 150;
  double adam_alpha = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  /// Sub-weights of the two phase-1 terms.
  double image_weight = 1.0;
  double embedding_weight = 1.0;
  double early_stop_loss = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizationConfig& c);
void from_json(const nlohmann::json& j, OptimizationConfig& c);

/// One evaluated loss: total plus its unweighted parts.
struct LossRecord {
  double total = 0.0;
  double image_term = 0.0;             // phase 1 only
  std::vector<double> fr_terms;        // one per FR backend, unweighted
};

struct PhaseResult {
  torch::Tensor latent;                // [L], best latent seen
  std::vector<LossRecord> trajectory;  // loss before each update, then the final one
  int steps_run = 0;
  double initial_loss() const { return trajectory.front().total; }
  double best_loss = 0.0;
};

PhaseResult optimize_phase1(GeneratorBackend& backend, const std::vector<WeightedFr>& fr_set, const torch::Tensor& x,
                            const OptimizationConfig& cfg);

/// `targets[k]` is the worst-case embedding in the space of fr_set[k].
PhaseResult optimize_phase2(GeneratorBackend& backend, const std::vector<WeightedFr>& fr_set, const torch::Tensor& z1,
                            const torch::Tensor& z2, const std::vector<torch::Tensor>& targets,
                            const OptimizationConfig& cfg);

struct MorphResult {
  torch::Tensor image;                  // [C,H,W]
  PhaseResult phase1_first;
  PhaseResult phase1_second;
  PhaseResult phase2;
  std::vector<torch::Tensor> targets;   // per FR, [D]
  std::vector<double> target_distance;  // per FR: angle(phi_k(morph), y*_k)
  std::vector<double> initial_target_distance;  // same, at the midpoint latent
};

MorphResult generate_morph(GeneratorBackend& backend, const std::vector<WeightedFr>& fr_set, const torch::Tensor& x1,
                           const torch::Tensor& x2, const OptimizationConfig& cfg);

/// JSON-lines record {pair_id, target_distance{fr: d}, steps{...}, final_losses{...}}.
nlohmann::json morph_metadata(const std::string& pair_id, const std::vector<WeightedFr>& fr_set,
                              const MorphResult& result);

}  // namespace wali
