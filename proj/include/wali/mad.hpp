#pragma once

// Morphing attack detection baselines.
//
// S-MAD: per-cell LBP histograms of a single image fed to a linear max-margin
// classifier. D-MAD: the difference of FR embeddings of the suspect image and a
// trusted probe, fed to the same classifier.
//
// LBP code: radius 1, neighbours visited clockwise from the top-left one
// (top-left = bit 0, top = bit 1, ..., left = bit 7); a bit is set when the
// neighbour is >= the centre. Border pixels get no code.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "wali/evaluation.hpp"
#include "wali/fr_registry.hpp"

namespace wali {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // row-major

  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

/// [C,H,W] or [H,W] tensor with C in {1, 3}; colour uses luma weights
/// 0.299, 0.587, 0.114.
GrayImage to_gray(const torch::Tensor& image);

/// (H-2) x (W-2) codes, row-major.
std::vector<uint8_t> lbp_codes(const GrayImage& image);

/// Index of `code` among the 58 uniform patterns (at most two circular bit
/// transitions), or 58 for the rest.
int uniform_bin(uint8_t code);

struct LbpConfig {
  int grid_rows = 4;
  int grid_cols = 4;
  bool uniform = false;

  int bins() const { return uniform ? 59 : 256; }
  int feature_length() const { return grid_rows * grid_cols * bins(); }
  void validate() const;
};

void to_json(nlohmann::json& j, const LbpConfig& c);
void from_json(const nlohmann::json& j, LbpConfig& c);

/// Concatenated per-cell histograms of LBP codes (raw counts). The code grid is
/// split into grid_rows x grid_cols cells. Throws when the image is smaller
/// than 3x3 pixels per cell.
std::vector<double> lbp_features(const GrayImage& image, const LbpConfig& cfg);

/// phi(suspect) - phi(probe) with unit embeddings.
std::vector<double> dmad_features(const FrBackend& fr, const torch::Tensor& suspect, const torch::Tensor& probe);

// --- linear classifier -------------------------------------------------------

struct SvmConfig {
  /// Objective: lambda/2 |w|^2 + mean hinge loss, the bias being an extra
  /// (regularised) weight on a constant feature.
  double lambda = 1e-3;
  int max_epochs = 2000;
  double tolerance = 1e-9;
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SvmConfig& c);
void from_json(const nlohmann::json& j, SvmConfig& c);

/// Scores are "higher = more morph-like".
struct LinearClassifier {
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<double> mean;   // feature standardisation
  std::vector<double> scale;
  std::string feature_kind;   // "lbp" or "dmad"
  nlohmann::json feature_config = nlohmann::json::object();

  double decision(const std::vector<double>& features) const;
  std::vector<double> decisions(const std::vector<std::vector<double>>& features) const;
};

void to_json(nlohmann::json& j, const LinearClassifier& c);
void from_json(const nlohmann::json& j, LinearClassifier& c);
void save_classifier(const std::filesystem::path& path, const LinearClassifier& c);
LinearClassifier load_classifier(const std::filesystem::path& path);

/// Dual coordinate descent on the hinge-loss SVM. `is_attack` marks the
/// positive (morph) class; both classes must be present.
LinearClassifier train_linear_svm(const std::vector<std::vector<double>>& features, const std::vector<bool>& is_attack,
                                  const SvmConfig& cfg);

LinearClassifier smad_train(const std::vector<GrayImage>& images, const std::vector<bool>& is_attack,
                            const LbpConfig& lbp, const SvmConfig& svm);

/// Scores a labelled test set. Throws on an empty set.
MadScores mad_evaluate(const LinearClassifier& classifier, const std::vector<std::vector<double>>& features,
                       const std::vector<bool>& is_attack);

/// CSV with columns id,label,f0,f1,...
void write_feature_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                       const std::vector<bool>& is_attack, const std::vector<std::vector<double>>& features);

}  // namespace wali
