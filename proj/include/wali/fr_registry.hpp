#pragma once

// Face-recognition backends behind one interface, toy embedder training, and
// decision-threshold calibration.
//
// A comparison is a match when its dissimilarity is strictly below the
// threshold: FMR(t) = #{impostor < t} / n_impostor and
// FNMR(t) = #{genuine >= t} / n_genuine.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "wali/geometry.hpp"
#include "wali/losses.hpp"
#include "wali/nets.hpp"

namespace wali {

enum class FrRole { white_box, black_box };
std::string to_string(FrRole role);
FrRole fr_role_from_string(const std::string& name);

class FrBackend {
 public:
  FrBackend(std::string id, EmbedFn embed, ScoreKind kind = ScoreKind::angular_dissimilarity,
            FrRole role = FrRole::black_box);

  const std::string& id() const { return id_; }
  ScoreKind kind() const { return kind_; }
  FrRole role() const { return role_; }
  void set_role(FrRole role) { role_ = role; }

  const EmbedFn& embed_fn() const { return embed_; }
  /// Differentiable [N,C,H,W] -> [N,D] unit embeddings.
  torch::Tensor embed(const torch::Tensor& images) const;
  /// Inference in chunks, without autograd.
  std::vector<Embedding> embed_all(const torch::Tensor& images, int64_t chunk = 256) const;

  /// Dissimilarity under this backend's metric (1 - cos for cosine backends).
  double dissimilarity(const Embedding& a, const Embedding& b) const;

  const std::optional<double>& threshold() const { return threshold_; }
  void set_threshold(double t) { threshold_ = t; }
  /// Throws std::logic_error when the backend has not been calibrated.
  double calibrated_threshold() const;

 private:
  std::string id_;
  EmbedFn embed_;
  ScoreKind kind_;
  FrRole role_;
  std::optional<double> threshold_;
};

struct ScoreSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
};

double false_match_rate(const ScoreSet& scores, double t);
double false_non_match_rate(const ScoreSet& scores, double t);

struct Calibration {
  double threshold = 0.0;
  double fmr = 0.0;
  double fnmr = 0.0;
};

/// Largest-FNMR-minimising threshold with FMR(t) < fmr_bound, searched over the
/// observed scores and one value above the maximum. Ties go to the larger t.
Calibration calibrate_threshold(const ScoreSet& scores, double fmr_bound = 0.001);

/// All same-identity pairs as genuine, plus `n_impostor` cross-identity pairs
/// drawn with `seed` (all of them when n_impostor <= 0).
ScoreSet build_score_set(const FrBackend& fr, const std::vector<Embedding>& embeddings, const std::vector<int>& labels,
                         int64_t n_impostor, uint64_t seed);

// --- toy embedders ------------------------------------------------------------

struct ToyFrConfig {
  FrNetConfig net;
  int epochs = 40;
  int batch_size = 32;
  double learning_rate = 1e-3;
  /// Additive cosine margin and scale of the identity-classification head.
  double margin = 0.2;
  double scale = 16.0;
  uint64_t seed = 0;
  bool verbose = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const ToyFrConfig& c);
void from_json(const nlohmann::json& j, ToyFrConfig& c);

struct ToyFr {
  FrEmbedder net{nullptr};
  std::string id;

  /// Backend wrapping `net` (parameters frozen).
  FrBackend backend(FrRole role = FrRole::black_box) const;
  Checkpoint to_checkpoint() const;
  static ToyFr from_checkpoint(const Checkpoint& ckpt);
};

/// Trains an embedder with a margin-based identity classifier, then discards
/// the classifier. Requires at least 10 identities.
ToyFr train_toy_fr(const torch::Tensor& images, const std::vector<int>& labels, const ToyFrConfig& cfg,
                   const std::string& id);

// --- registry file --------------------------------------------------------------

struct RegistryEntry {
  std::string id;
  std::filesystem::path checkpoint;
  ScoreKind metric = ScoreKind::angular_dissimilarity;
  std::optional<double> threshold;
  FrRole role = FrRole::black_box;
};

void to_json(nlohmann::json& j, const RegistryEntry& e);
void from_json(const nlohmann::json& j, RegistryEntry& e);

/// Registry file: JSON array of entries; relative checkpoint paths resolve
/// against the registry file's directory.
std::vector<RegistryEntry> read_registry(const std::filesystem::path& path);
void write_registry(const std::filesystem::path& path, const std::vector<RegistryEntry>& entries);

FrBackend load_backend(const RegistryEntry& entry);

}  // namespace wali
