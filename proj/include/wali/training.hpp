#pragma once

// Wasserstein ALI training: a WGAN-GP baseline phase over joint (x, z) pairs,
// then finetuning with reconstruction and worst-case-morph identity losses.
//
// The critic is updated on every step; encoder and decoder are updated on every
// `critic_updates_per_gen`-th step. During finetuning each batch is paired with
// its rotation j = (2, ..., N, 1) so no sample is morphed with itself.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "wali/losses.hpp"
#include "wali/nets.hpp"

namespace wali {

struct AdamSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
};

struct TrainingConfig {
  int batch_size = 32;
  int critic_updates_per_gen = 5;
  int baseline_epochs = 60;
  int finetune_epochs = 15;
  AdamSettings critic_optimizer;
  AdamSettings encoder_optimizer;
  AdamSettings decoder_optimizer;
  LossWeights weights;
  uint64_t seed = 0;
  /// Abort when any loss is non-finite or exceeds this magnitude.
  double divergence_limit = 1e6;
  bool verbose = false;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

/// Raised before any parameter update when a loss diverges; `snapshot` holds
/// the offending values and step counters.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, nlohmann::json snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const nlohmann::json& snapshot() const { return snapshot_; }

 private:
  nlohmann::json snapshot_;
};

/// Encoder, decoder and critic sharing one NetworkConfig.
struct WaliModel {
  NetworkConfig config;
  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  Critic critic{nullptr};

  /// Parameters are initialised from `seed` (torch's global generator is
  /// reseeded).
  WaliModel(const NetworkConfig& cfg, uint64_t seed);

  Checkpoint to_checkpoint() const;
  static WaliModel from_checkpoint(const Checkpoint& ckpt);
  void to(torch::Dtype dtype);
  void train_mode(bool on);
};

struct TrainingState {
  WaliModel model;
  TrainingConfig config;
  std::unique_ptr<torch::optim::Adam> critic_optimizer;
  std::unique_ptr<torch::optim::Adam> encoder_optimizer;
  std::unique_ptr<torch::optim::Adam> decoder_optimizer;
  at::Generator rng;
  /// Draws the per-batch morph weight alpha; kept apart from `rng` so the
  /// finetuning terms never shift the adversarial sampling stream.
  at::Generator alpha_rng;
  int64_t critic_updates = 0;
  int64_t generator_updates = 0;

  TrainingState(WaliModel m, const TrainingConfig& cfg);
};

struct StepReport {
  double s_real = 0.0;
  double s_fake = 0.0;
  double r_x = 0.0;
  double r_z = 0.0;
  double grad_norm_x = 0.0;
  double grad_norm_z = 0.0;
  double critic_loss = 0.0;
  bool generator_updated = false;
  LossReport generator;
};

/// j(i) = (i + 1) mod n, i.e. the 1-based pairing (2, ..., N, 1).
std::vector<int64_t> morph_pairing(int64_t n);

StepReport baseline_step(TrainingState& state, const torch::Tensor& batch);

/// As baseline_step, with the generator loss extended by the five finetuning
/// terms. Worst-case targets are recomputed from `fr` on every batch.
StepReport finetune_step(TrainingState& state, const torch::Tensor& batch, const EmbedFn& fr, const LossWeights& w);

struct TrainResult {
  std::filesystem::path baseline_checkpoint;
  std::optional<std::filesystem::path> finetune_checkpoint;
  std::filesystem::path losses_csv;
  std::filesystem::path manifest;
  int64_t baseline_steps = 0;
  int64_t finetune_steps = 0;
};

/// Extra provenance merged into manifest.json (e.g. dataset hash, FR id).
struct TrainInputs {
  nlohmann::json provenance = nlohmann::json::object();
  std::string fr_backend_id;
};

/// Runs the full procedure and writes the run directory:
///   config.json, manifest.json, checkpoints/{baseline,finetune}.bin, logs/losses.csv
/// Finetuning runs only when finetune_epochs > 0 and `fr` is set.
TrainResult train(const NetworkConfig& net, const TrainingConfig& cfg, const torch::Tensor& images,
                  const EmbedFn& fr, const std::filesystem::path& out_dir, const TrainInputs& inputs = {});

/// Finetuning only, starting from an existing baseline checkpoint.
TrainResult finetune(const Checkpoint& baseline, const TrainingConfig& cfg, const torch::Tensor& images,
                     const EmbedFn& fr, const std::filesystem::path& out_dir, const TrainInputs& inputs = {});

}  // namespace wali
