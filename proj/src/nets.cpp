#include "wali/nets.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <zlib.h>

#include "wali/text_io.hpp"

namespace wali {
namespace F = torch::nn::functional;

namespace {

constexpr double kLeakySlope = 0.2;

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw std::invalid_argument("invalid config field '" + field + "': " + why);
}

bool valid_image_size(int s) {
  static constexpr int kSizes[] = {8, 16, 32, 64, 128, 256, 512};
  return std::find(std::begin(kSizes), std::end(kSizes), s) != std::end(kSizes);
}

int stages_for(int image_size) { return std::bit_width(static_cast<unsigned>(image_size)) - 1 - 2; }

torch::nn::LeakyReLU leaky() { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(kLeakySlope)); }

/// conv3x3 stem followed by `stages` stride-2 convs; ends on a 4x4 map.
torch::nn::Sequential downsampling_stack(int channels, int stages, const std::function<int(int)>& width) {
  torch::nn::Sequential seq;
  seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, width(0), 3).padding(1)));
  seq->push_back(leaky());
  for (int k = 0; k < stages; ++k) {
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(width(k), width(k + 1), 4).stride(2).padding(1)));
    seq->push_back(leaky());
  }
  seq->push_back(torch::nn::Flatten());
  return seq;
}

std::pair<torch::Tensor, bool> as_batch(const torch::Tensor& x) {
  if (x.dim() == 3) return {x.unsqueeze(0), true};
  return {x, false};
}

// --- little-endian primitives ---------------------------------------------

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("truncated checkpoint");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[] = "WALICKPT";

}  // namespace

// --- configs ----------------------------------------------------------------

void NetworkConfig::validate() const {
  require(valid_image_size(image_size), "image_size", "must be one of 8,16,32,64,128,256,512");
  require(channels >= 1, "channels", "must be >= 1");
  require(latent_dim >= 1, "latent_dim", "must be >= 1");
  require(base_width >= 1, "base_width", "must be >= 1");
  require(max_width_multiplier >= 1, "max_width_multiplier", "must be >= 1");
}

int NetworkConfig::num_stages() const { return stages_for(image_size); }

int NetworkConfig::stage_width(int stage) const {
  return base_width * std::min(1 << stage, max_width_multiplier);
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"image_size", c.image_size},
       {"channels", c.channels},
       {"latent_dim", c.latent_dim},
       {"base_width", c.base_width},
       {"max_width_multiplier", c.max_width_multiplier}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c = NetworkConfig{};
  if (j.contains("image_size")) c.image_size = j.at("image_size").get<int>();
  if (j.contains("channels")) c.channels = j.at("channels").get<int>();
  if (j.contains("latent_dim")) c.latent_dim = j.at("latent_dim").get<int>();
  if (j.contains("base_width")) c.base_width = j.at("base_width").get<int>();
  if (j.contains("max_width_multiplier")) c.max_width_multiplier = j.at("max_width_multiplier").get<int>();
}

void FrNetConfig::validate() const {
  require(valid_image_size(image_size), "image_size", "must be one of 8,16,32,64,128,256,512");
  require(channels >= 1, "channels", "must be >= 1");
  require(embedding_dim >= 2, "embedding_dim", "must be >= 2");
  require(base_width >= 1, "base_width", "must be >= 1");
}

void to_json(nlohmann::json& j, const FrNetConfig& c) {
  j = {{"image_size", c.image_size},
       {"channels", c.channels},
       {"embedding_dim", c.embedding_dim},
       {"base_width", c.base_width}};
}

void from_json(const nlohmann::json& j, FrNetConfig& c) {
  c = FrNetConfig{};
  if (j.contains("image_size")) c.image_size = j.at("image_size").get<int>();
  if (j.contains("channels")) c.channels = j.at("channels").get<int>();
  if (j.contains("embedding_dim")) c.embedding_dim = j.at("embedding_dim").get<int>();
  if (j.contains("base_width")) c.base_width = j.at("base_width").get<int>();
}

void check_image_shape(const torch::Tensor& x, int channels, int image_size, const char* what) {
  const bool ok = (x.dim() == 4 && x.size(1) == channels && x.size(2) == image_size && x.size(3) == image_size) ||
                  (x.dim() == 3 && x.size(0) == channels && x.size(1) == image_size && x.size(2) == image_size);
  if (!ok) {
    std::ostringstream msg;
    msg << what << ": expected image of shape [N," << channels << "," << image_size << "," << image_size
        << "], got " << x.sizes();
    throw std::invalid_argument(msg.str());
  }
}

// --- networks ---------------------------------------------------------------

EncoderImpl::EncoderImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int stages = cfg_.num_stages();
  features_ = register_module(
      "features", downsampling_stack(cfg_.channels, stages, [this](int k) { return cfg_.stage_width(k); }));
  head_ = register_module("head", torch::nn::Linear(cfg_.stage_width(stages) * 16, 2 * cfg_.latent_dim));
}

EncoderOutput EncoderImpl::forward(const torch::Tensor& x) {
  check_image_shape(x, cfg_.channels, cfg_.image_size, "encode");
  auto [batch, single] = as_batch(x);
  auto h = head_(features_->forward(batch));
  auto parts = h.chunk(2, 1);
  EncoderOutput out{parts[0], F::softplus(parts[1]) + 1e-6};
  if (single) {
    out.mu = out.mu.squeeze(0);
    out.sigma = out.sigma.squeeze(0);
  }
  return out;
}

DecoderImpl::DecoderImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int stages = cfg_.num_stages();
  project_ = register_module("project", torch::nn::Linear(cfg_.latent_dim, cfg_.stage_width(stages) * 16));
  torch::nn::Sequential body;
  body->push_back(leaky());
  for (int k = stages - 1; k >= 0; --k) {
    body->push_back(torch::nn::Upsample(
        torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    body->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.stage_width(k + 1), cfg_.stage_width(k), 3).padding(1)));
    body->push_back(leaky());
  }
  body->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.stage_width(0), cfg_.channels, 3).padding(1)));
  body->push_back(torch::nn::Sigmoid());
  body_ = register_module("body", body);
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& z) {
  const bool single = z.dim() == 1;
  auto batch = single ? z.unsqueeze(0) : z;
  if (batch.dim() != 2 || batch.size(1) != cfg_.latent_dim) {
    std::ostringstream msg;
    msg << "decode: expected latent of length " << cfg_.latent_dim << ", got " << z.sizes();
    throw std::invalid_argument(msg.str());
  }
  const int stages = cfg_.num_stages();
  auto h = project_(batch).view({batch.size(0), cfg_.stage_width(stages), 4, 4});
  auto img = body_->forward(h);
  return single ? img.squeeze(0) : img;
}

CriticImpl::CriticImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int stages = cfg_.num_stages();
  const int hidden = cfg_.stage_width(stages);
  auto image = downsampling_stack(cfg_.channels, stages, [this](int k) { return cfg_.stage_width(k); });
  image->push_back(torch::nn::Linear(hidden * 16, hidden));
  image->push_back(leaky());
  image_branch_ = register_module("image_branch", image);
  latent_branch_ = register_module(
      "latent_branch", torch::nn::Sequential(torch::nn::Linear(cfg_.latent_dim, hidden), leaky(),
                                             torch::nn::Linear(hidden, hidden), leaky()));
  joint_ = register_module("joint", torch::nn::Sequential(torch::nn::Linear(2 * hidden, hidden), leaky(),
                                                          torch::nn::Linear(hidden, 1)));
}

torch::Tensor CriticImpl::forward(const torch::Tensor& x, const torch::Tensor& z) {
  check_image_shape(x, cfg_.channels, cfg_.image_size, "critic");
  auto [xb, single] = as_batch(x);
  auto zb = z.dim() == 1 ? z.unsqueeze(0) : z;
  if (zb.dim() != 2 || zb.size(1) != cfg_.latent_dim || zb.size(0) != xb.size(0)) {
    std::ostringstream msg;
    msg << "critic: latent shape " << z.sizes() << " does not pair with image batch " << x.sizes();
    throw std::invalid_argument(msg.str());
  }
  auto h = torch::cat({image_branch_->forward(xb), latent_branch_->forward(zb)}, 1);
  auto s = joint_->forward(h).squeeze(1);
  return single ? s.squeeze(0) : s;
}

FrEmbedderImpl::FrEmbedderImpl(const FrNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int stages = stages_for(cfg_.image_size);
  auto width = [this](int k) { return cfg_.base_width * std::min(1 << k, 8); };
  features_ = register_module("features", downsampling_stack(cfg_.channels, stages, width));
  head_ = register_module("head", torch::nn::Linear(width(stages) * 16, cfg_.embedding_dim));
}

torch::Tensor FrEmbedderImpl::forward(const torch::Tensor& x) {
  check_image_shape(x, cfg_.channels, cfg_.image_size, "fr_embed");
  auto [batch, single] = as_batch(x);
  auto y = F::normalize(head_(features_->forward(batch)), F::NormalizeFuncOptions().p(2).dim(1).eps(1e-12));
  return single ? y.squeeze(0) : y;
}

torch::Tensor reparameterize(const EncoderOutput& out, const torch::Tensor& eps) {
  if (!eps.sizes().equals(out.mu.sizes())) {
    std::ostringstream msg;
    msg << "reparameterize: noise shape " << eps.sizes() << " does not match mu " << out.mu.sizes();
    throw std::invalid_argument(msg.str());
  }
  return out.mu + out.sigma * eps;
}

// --- checkpoints --------------------------------------------------------------

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 8);
  put_u32(out, kCheckpointVersion);
  const std::string header = ckpt.header.dump();
  put_u32(out, static_cast<uint32_t>(header.size()));
  out += header;
  put_u32(out, static_cast<uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    put_u32(out, static_cast<uint32_t>(r.name.size()));
    out += r.name;
    put_u32(out, static_cast<uint32_t>(r.shape.size()));
    int64_t numel = 1;
    for (int64_t d : r.shape) {
      put_u32(out, static_cast<uint32_t>(d));
      numel *= d;
    }
    if (numel != static_cast<int64_t>(r.data.size())) {
      throw std::invalid_argument("checkpoint record '" + r.name + "' has data/shape mismatch");
    }
    for (float f : r.data) put_f32(out, f);
  }
  const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size()));
  put_u32(out, static_cast<uint32_t>(crc));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 8, kMagic) != 0) throw std::runtime_error("not a WALI checkpoint");
  const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size() - 4));
  Reader tail(bytes.substr(bytes.size() - 4));
  if (tail.u32() != static_cast<uint32_t>(crc)) throw std::runtime_error("checkpoint checksum mismatch");

  Reader in(bytes);
  in.str(8);
  const uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.header = nlohmann::json::parse(in.str(in.u32()));
  const uint32_t count = in.u32();
  ckpt.records.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = in.str(in.u32());
    const uint32_t ndim = in.u32();
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      r.shape.push_back(in.u32());
      numel *= r.shape.back();
    }
    r.data.resize(static_cast<std::size_t>(numel));
    for (auto& f : r.data) f = in.f32();
    ckpt.records.push_back(std::move(r));
  }
  if (in.pos() != bytes.size() - 4) throw std::runtime_error("trailing bytes in checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_text_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_text_file(path)); }

void capture_parameters(const torch::nn::Module& module, const std::string& prefix, Checkpoint& ckpt) {
  for (const auto& item : module.named_parameters(true)) {
    auto t = item.value().detach().to(torch::kFloat).contiguous();
    CheckpointRecord r;
    r.name = prefix + item.key();
    r.shape.assign(t.sizes().begin(), t.sizes().end());
    r.data.assign(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
    ckpt.records.push_back(std::move(r));
  }
}

void restore_parameters(torch::nn::Module& module, const std::string& prefix, const Checkpoint& ckpt) {
  torch::NoGradGuard guard;
  for (auto& item : module.named_parameters(true)) {
    const auto* r = ckpt.find(prefix + item.key());
    if (!r) throw std::runtime_error("checkpoint is missing parameter " + prefix + item.key());
    auto& p = item.value();
    if (!p.sizes().equals(r->shape)) throw std::runtime_error("shape mismatch for parameter " + prefix + item.key());
    auto src = torch::from_blob(const_cast<float*>(r->data.data()), r->shape, torch::kFloat);
    p.copy_(src.to(p.dtype()));
  }
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters(true)) n += p.numel();
  return n;
}

}  // namespace wali
