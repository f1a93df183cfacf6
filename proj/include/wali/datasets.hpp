#pragma once

// Images on disk, a procedural identity dataset, morph-pair protocols and
// colour correction.
//
// Dataset layout: images/{identity}/{sample}.png plus labels.csv with columns
// image_id,path,label where image_id = "{identity}/{sample}".

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "wali/fr_registry.hpp"
#include "wali/geometry.hpp"

namespace wali {

/// Interleaved HWC pixels in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> data;

  float& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * channels + ch]; }
  float at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * width + c) * channels + ch]; }
};

/// [C,H,W] float tensor.
torch::Tensor to_tensor(const Image& image);
Image from_tensor(const torch::Tensor& chw);
/// [N,C,H,W]; all images must share one shape.
torch::Tensor stack_images(const std::vector<Image>& images);

/// 8-bit PNG (RGB or grey). Values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// --- procedural identities ------------------------------------------------------

/// Face-like sprite parameters, in coordinates where the image spans [-1, 1]^2.
struct SyntheticIdentitySpec {
  std::array<double, 3> skin{};
  std::array<double, 3> hair{};
  std::array<double, 3> iris{};
  std::array<double, 3> lips{};
  double face_x = 0, face_y = 0, face_rx = 0, face_ry = 0;
  double hairline = 0;
  double eye_spacing = 0, eye_y = 0, eye_radius = 0;
  double brow_gap = 0, brow_tilt = 0;
  double nose_length = 0;
  double mouth_y = 0, mouth_half_width = 0, mouth_thickness = 0;

  std::vector<double> to_vector() const;
};

/// Deterministic in (seed, identity).
SyntheticIdentitySpec identity_spec(uint64_t seed, int identity);

/// Per-sample nuisance: pose shift and scale, lighting, background, eye
/// openness and pixel noise, all bounded.
struct SampleJitter {
  double dx = 0, dy = 0, scale = 1, brightness = 1, eye_open = 1, noise = 0;
  std::array<double, 3> background{};
  uint64_t noise_seed = 0;
};

SampleJitter sample_jitter(uint64_t seed, int identity, int sample);

Image render_identity(const SyntheticIdentitySpec& spec, const SampleJitter& jitter, int size, int supersample = 4);

struct SyntheticConfig {
  int n_identities = 40;
  int samples_per_identity = 20;
  int image_size = 16;
  int supersample = 4;
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> image_ids;

  std::size_t size() const { return images.size(); }
  torch::Tensor tensor() const { return stack_images(images); }
  /// Throws when the id is unknown.
  std::size_t index_of(const std::string& image_id) const;
  /// Rows whose label is in `identities`, in dataset order.
  Dataset subset(const std::vector<int>& identities) const;
  Dataset select(const std::vector<std::size_t>& rows) const;
};

std::string image_id(int identity, int sample);

/// Throws for fewer than 10 identities or fewer than 2 samples each.
Dataset generate_synthetic_dataset(const SyntheticConfig& cfg);

void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

// --- morph pairs -------------------------------------------------------------------

/// Unit-normalised average embedding per identity.
std::map<int, Embedding> identity_mean_embeddings(const std::vector<Embedding>& embeddings,
                                                  const std::vector<int>& labels);

struct IdentityPair {
  int a = 0;
  int b = 0;
  double similarity = 0.0;  // cosine of the mean embeddings
};

/// All identity pairs, most similar first (ties broken by identity order).
std::vector<IdentityPair> rank_identity_pairs(const std::map<int, Embedding>& means);

struct ProtocolEntry {
  std::string pair_id;
  int identity_a = 0;
  int identity_b = 0;
  std::string image_a;
  std::string image_b;
  std::string probe_a;
  std::string probe_b;
};

using MorphProtocol = std::vector<ProtocolEntry>;

struct PairSelectionConfig {
  /// Identity pairs kept: `identity_pairs` when > 0, else the top
  /// `identity_pair_fraction` of all pairs (at least one).
  int identity_pairs = 0;
  double identity_pair_fraction = 0.1;
  int n_pairs = 100;
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const PairSelectionConfig& c);
void from_json(const nlohmann::json& j, PairSelectionConfig& c);

/// Splits each identity's images (seeded) into a morph-source half and a probe
/// half; one probe per identity is fixed. Image pairs are drawn round-robin
/// over the kept identity pairs. `embeddings` are per dataset row.
MorphProtocol select_pairs(const Dataset& ds, const std::vector<Embedding>& embeddings,
                           const PairSelectionConfig& cfg);
MorphProtocol select_pairs(const Dataset& ds, const FrBackend& fr, const PairSelectionConfig& cfg);

/// JSON lines, one entry per line.
void write_protocol(const std::filesystem::path& path, const MorphProtocol& protocol);
/// Also accepts image1/image2 and probe1/probe2 key spellings.
MorphProtocol read_protocol(const std::filesystem::path& path);

// --- colour correction -----------------------------------------------------------

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

ChannelStats channel_stats(const Image& image);
ChannelStats channel_stats(const std::vector<Image>& images);

/// clip_[0,1]((x - mu_src) / max(sigma_src, 1e-6) * sigma_ref + mu_ref) per channel,
/// with source statistics taken from `image` itself.
Image colour_correct(const Image& image, const ChannelStats& reference);

/// {"r": {"mean", "std"}, "g": ..., "b": ...} (or "gray" for one channel).
nlohmann::json stats_to_json(const ChannelStats& stats);
ChannelStats stats_from_json(const nlohmann::json& j);

}  // namespace wali
