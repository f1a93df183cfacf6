#pragma once

// Encoder G_z, Decoder G_x, Critic C and the toy face-recognition embedder.
//
// Images are NCHW tensors in [0, 1]; a single image may also be passed as CHW.
// Resolution scales by stage count: every network has log2(image_size) - 2
// stride-2 stages between the image and a 4x4 feature map, so going from 32 to
// 64 pixels adds one downsampling conv to G_z and C and one upsample + conv to
// G_x. The decoder upsamples with nearest-neighbour + size-preserving convs
// (no transposed convolutions).

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace wali {

struct NetworkConfig {
  int image_size = 32;
  int channels = 3;
  int latent_dim = 128;
  int base_width = 64;
  /// Channel multiplier cap for the deepest stages.
  int max_width_multiplier = 8;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  int num_stages() const;
  int stage_width(int stage) const;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct FrNetConfig {
  int image_size = 32;
  int channels = 3;
  int embedding_dim = 64;
  int base_width = 16;

  void validate() const;
};

void to_json(nlohmann::json& j, const FrNetConfig& c);
void from_json(const nlohmann::json& j, FrNetConfig& c);

struct EncoderOutput {
  torch::Tensor mu;
  torch::Tensor sigma;
};

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const NetworkConfig& cfg);
  EncoderOutput forward(const torch::Tensor& x);
  const NetworkConfig& config() const { return cfg_; }

 private:
  NetworkConfig cfg_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Encoder);

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const NetworkConfig& cfg);
  torch::Tensor forward(const torch::Tensor& z);
  const NetworkConfig& config() const { return cfg_; }

 private:
  NetworkConfig cfg_;
  torch::nn::Linear project_{nullptr};
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Decoder);

/// Joint critic over (image, latent) pairs. Unbounded output, no sigmoid.
class CriticImpl : public torch::nn::Module {
 public:
  explicit CriticImpl(const NetworkConfig& cfg);
  /// Scalar for a single (CHW, latent) pair, shape [N] for a batch.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z);
  const NetworkConfig& config() const { return cfg_; }

 private:
  NetworkConfig cfg_;
  torch::nn::Sequential image_branch_{nullptr};
  torch::nn::Sequential latent_branch_{nullptr};
  torch::nn::Sequential joint_{nullptr};
};
TORCH_MODULE(Critic);

/// Toy FR network phi: image -> unit embedding.
class FrEmbedderImpl : public torch::nn::Module {
 public:
  explicit FrEmbedderImpl(const FrNetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);
  const FrNetConfig& config() const { return cfg_; }

 private:
  FrNetConfig cfg_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(FrEmbedder);

/// z = mu + sigma * eps.
torch::Tensor reparameterize(const EncoderOutput& out, const torch::Tensor& eps);

/// Throws std::invalid_argument unless x is [N,C,H,W] or [C,H,W] matching cfg.
void check_image_shape(const torch::Tensor& x, int channels, int image_size, const char* what);

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "WALICKPT" | u32 version | u32 header_len | header JSON
//   u32 record_count | records... | u32 crc32 of everything before it
//   record: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data (LE)
// ---------------------------------------------------------------------------

struct CheckpointRecord {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
};

inline constexpr uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Appends every named parameter of `module` as `<prefix><name>`.
void capture_parameters(const torch::nn::Module& module, const std::string& prefix, Checkpoint& ckpt);
/// Copies `<prefix><name>` records into the module; throws on any missing or
/// mis-shaped parameter.
void restore_parameters(torch::nn::Module& module, const std::string& prefix, const Checkpoint& ckpt);

int64_t parameter_count(const torch::nn::Module& module);

}  // namespace wali
