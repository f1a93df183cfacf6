#include "wali/fr_registry.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <stdexcept>

#include "wali/text_io.hpp"

namespace wali {
namespace F = torch::nn::functional;

std::string to_string(FrRole role) { return role == FrRole::white_box ? "white-box" : "black-box"; }

FrRole fr_role_from_string(const std::string& name) {
  if (name == "white-box" || name == "white_box") return FrRole::white_box;
  if (name == "black-box" || name == "black_box") return FrRole::black_box;
  throw std::invalid_argument("unknown FR role: " + name);
}

FrBackend::FrBackend(std::string id, EmbedFn embed, ScoreKind kind, FrRole role)
    : id_(std::move(id)), embed_(std::move(embed)), kind_(kind), role_(role) {
  if (!embed_) throw std::invalid_argument("FR backend '" + id_ + "' needs an embedding function");
}

torch::Tensor FrBackend::embed(const torch::Tensor& images) const {
  return embed_(images.dim() == 3 ? images.unsqueeze(0) : images);
}

std::vector<Embedding> FrBackend::embed_all(const torch::Tensor& images, int64_t chunk) const {
  torch::NoGradGuard no_grad;
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  std::vector<Embedding> out;
  out.reserve(static_cast<std::size_t>(batch.size(0)));
  for (int64_t start = 0; start < batch.size(0); start += chunk) {
    auto y = embed_(batch.slice(0, start, std::min(start + chunk, batch.size(0)))).to(torch::kDouble).contiguous();
    const int64_t d = y.size(1);
    const double* p = y.data_ptr<double>();
    for (int64_t i = 0; i < y.size(0); ++i) {
      Embedding e(std::vector<double>(p + i * d, p + (i + 1) * d));
      out.push_back(e.unit());
    }
  }
  return out;
}

double FrBackend::dissimilarity(const Embedding& a, const Embedding& b) const {
  if (kind_ == ScoreKind::cosine_similarity) return 1.0 - cosine_similarity(a, b);
  return score(kind_, a, b);
}

double FrBackend::calibrated_threshold() const {
  if (!threshold_) throw std::logic_error("FR backend '" + id_ + "' has no calibrated threshold");
  return *threshold_;
}

// --- rates and calibration ------------------------------------------------------

double false_match_rate(const ScoreSet& s, double t) {
  if (s.impostor.empty()) throw std::invalid_argument("empty impostor scores");
  const auto n = std::count_if(s.impostor.begin(), s.impostor.end(), [t](double d) { return d < t; });
  return static_cast<double>(n) / static_cast<double>(s.impostor.size());
}

double false_non_match_rate(const ScoreSet& s, double t) {
  if (s.genuine.empty()) throw std::invalid_argument("empty genuine scores");
  const auto n = std::count_if(s.genuine.begin(), s.genuine.end(), [t](double d) { return d >= t; });
  return static_cast<double>(n) / static_cast<double>(s.genuine.size());
}

Calibration calibrate_threshold(const ScoreSet& scores, double fmr_bound) {
  if (scores.genuine.empty() || scores.impostor.empty()) throw std::invalid_argument("calibration needs both score lists");
  if (!(fmr_bound > 0.0 && fmr_bound < 1.0)) throw std::invalid_argument("fmr_bound must lie in (0, 1)");

  std::vector<double> gen = scores.genuine, imp = scores.impostor;
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());
  std::vector<double> candidates;
  candidates.reserve(gen.size() + imp.size() + 1);
  std::merge(gen.begin(), gen.end(), imp.begin(), imp.end(), std::back_inserter(candidates));
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  candidates.push_back(std::nextafter(candidates.back(), std::numeric_limits<double>::infinity()));

  const double n_imp = static_cast<double>(imp.size());
  const double n_gen = static_cast<double>(gen.size());
  std::optional<Calibration> best;
  for (double t : candidates) {
    const auto accepted_imp = std::lower_bound(imp.begin(), imp.end(), t) - imp.begin();
    const double fmr = static_cast<double>(accepted_imp) / n_imp;
    if (!(fmr < fmr_bound)) break;  // FMR is non-decreasing in t
    const auto accepted_gen = std::lower_bound(gen.begin(), gen.end(), t) - gen.begin();
    const double fnmr = (n_gen - static_cast<double>(accepted_gen)) / n_gen;
    if (!best || fnmr <= best->fnmr) best = Calibration{t, fmr, fnmr};
  }
  // candidates.front() is the minimum observed score, where FMR = 0.
  return *best;
}

ScoreSet build_score_set(const FrBackend& fr, const std::vector<Embedding>& embeddings, const std::vector<int>& labels,
                         int64_t n_impostor, uint64_t seed) {
  if (embeddings.size() != labels.size()) throw std::invalid_argument("embeddings/labels size mismatch");
  ScoreSet s;
  const std::size_t n = embeddings.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (labels[i] == labels[j]) s.genuine.push_back(fr.dissimilarity(embeddings[i], embeddings[j]));
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> cross;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (labels[i] != labels[j]) cross.emplace_back(i, j);
    }
  }
  if (n_impostor > 0 && static_cast<std::size_t>(n_impostor) < cross.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(cross.begin(), cross.end(), rng);
    cross.resize(static_cast<std::size_t>(n_impostor));
  }
  for (auto [i, j] : cross) s.impostor.push_back(fr.dissimilarity(embeddings[i], embeddings[j]));
  if (s.genuine.empty() || s.impostor.empty()) {
    throw std::invalid_argument("score set needs at least one genuine and one impostor pair");
  }
  return s;
}

// --- toy embedders --------------------------------------------------------------

void ToyFrConfig::validate() const {
  net.validate();
  auto require = [](bool ok, const char* field, const char* why) {
    if (!ok) throw std::invalid_argument(std::string("invalid config field '") + field + "': " + why);
  };
  require(epochs >= 1, "epochs", "must be >= 1");
  require(batch_size >= 2, "batch_size", "must be >= 2");
  require(learning_rate > 0.0, "learning_rate", "must be > 0");
  require(margin >= 0.0 && margin < 1.0, "margin", "must lie in [0, 1)");
  require(scale > 0.0, "scale", "must be > 0");
}

void to_json(nlohmann::json& j, const ToyFrConfig& c) {
  j = {{"net", c.net},         {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
       {"margin", c.margin}, {"scale", c.scale},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ToyFrConfig& c) {
  c = ToyFrConfig{};
  if (j.contains("net")) c.net = j.at("net").get<FrNetConfig>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("margin")) c.margin = j.at("margin").get<double>();
  if (j.contains("scale")) c.scale = j.at("scale").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("verbose")) c.verbose = j.at("verbose").get<bool>();
}

FrBackend ToyFr::backend(FrRole role) const {
  FrEmbedder module = net;
  for (auto& p : module->parameters()) p.set_requires_grad(false);
  module->eval();
  return FrBackend(id, [module](const torch::Tensor& x) mutable { return module(x.to(torch::kFloat)); },
                   ScoreKind::angular_dissimilarity, role);
}

Checkpoint ToyFr::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.header = {{"kind", "toy_fr"}, {"id", id}, {"net", net->config()}};
  capture_parameters(*net, "fr.", ckpt);
  return ckpt;
}

ToyFr ToyFr::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "toy_fr") throw std::runtime_error("checkpoint does not hold a toy FR model");
  ToyFr fr;
  fr.id = ckpt.header.at("id").get<std::string>();
  fr.net = FrEmbedder(ckpt.header.at("net").get<FrNetConfig>());
  restore_parameters(*fr.net, "fr.", ckpt);
  return fr;
}

ToyFr train_toy_fr(const torch::Tensor& images, const std::vector<int>& labels, const ToyFrConfig& cfg,
                   const std::string& id) {
  cfg.validate();
  if (images.dim() != 4 || images.size(0) != static_cast<int64_t>(labels.size()) || labels.empty()) {
    throw std::invalid_argument("train_toy_fr: images and labels do not line up");
  }
  const std::set<int> identities(labels.begin(), labels.end());
  if (identities.size() < 10) throw std::invalid_argument("train_toy_fr: needs at least 10 identities");
  std::vector<int64_t> class_of(labels.size());
  {
    std::vector<int> ids(identities.begin(), identities.end());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      class_of[i] = std::lower_bound(ids.begin(), ids.end(), labels[i]) - ids.begin();
    }
  }
  const auto n_classes = static_cast<int64_t>(identities.size());

  torch::manual_seed(cfg.seed);
  ToyFr fr;
  fr.id = id;
  fr.net = FrEmbedder(cfg.net);
  auto centers = torch::randn({n_classes, cfg.net.embedding_dim}).requires_grad_(true);
  std::vector<torch::Tensor> params = fr.net->parameters();
  params.push_back(centers);
  torch::optim::Adam adam(params, torch::optim::AdamOptions(cfg.learning_rate));
  auto rng = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);

  auto x_all = images.to(torch::kFloat);
  auto y_all = torch::tensor(class_of, torch::kLong);
  const int64_t m = x_all.size(0);
  const int64_t n = std::min<int64_t>(cfg.batch_size, m);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = torch::randperm(m, rng, torch::TensorOptions().dtype(torch::kLong));
    double total = 0.0;
    int batches = 0;
    for (int64_t start = 0; start + n <= m; start += n) {
      auto idx = order.slice(0, start, start + n);
      auto x = x_all.index_select(0, idx);
      auto y = y_all.index_select(0, idx);
      auto emb = fr.net(x);
      auto cos = emb.matmul(F::normalize(centers, F::NormalizeFuncOptions().dim(1)).t());
      auto logits = cfg.scale * (cos - cfg.margin * F::one_hot(y, n_classes).to(cos.dtype()));
      auto loss = F::cross_entropy(logits, y);
      adam.zero_grad();
      loss.backward();
      adam.step();
      total += loss.item<double>();
      ++batches;
    }
    if (cfg.verbose) std::clog << "[train-fr " << id << "] epoch " << epoch + 1 << " loss " << total / batches << std::endl;
  }
  fr.net->eval();
  return fr;
}

// --- registry -------------------------------------------------------------------

void to_json(nlohmann::json& j, const RegistryEntry& e) {
  j = {{"id", e.id},
       {"checkpoint", e.checkpoint.string()},
       {"metric", to_string(e.metric)},
       {"threshold", e.threshold ? nlohmann::json(*e.threshold) : nlohmann::json()},
       {"role", to_string(e.role)}};
}

void from_json(const nlohmann::json& j, RegistryEntry& e) {
  e = RegistryEntry{};
  e.id = j.at("id").get<std::string>();
  e.checkpoint = j.at("checkpoint").get<std::string>();
  if (j.contains("metric")) e.metric = score_kind_from_string(j.at("metric").get<std::string>());
  if (j.contains("threshold") && !j.at("threshold").is_null()) e.threshold = j.at("threshold").get<double>();
  if (j.contains("role")) e.role = fr_role_from_string(j.at("role").get<std::string>());
}

std::vector<RegistryEntry> read_registry(const std::filesystem::path& path) {
  auto j = nlohmann::json::parse(read_text_file(path));
  if (j.is_object()) j = nlohmann::json::array({j});
  auto entries = j.get<std::vector<RegistryEntry>>();
  for (auto& e : entries) {
    if (e.checkpoint.is_relative()) e.checkpoint = path.parent_path() / e.checkpoint;
  }
  return entries;
}

void write_registry(const std::filesystem::path& path, const std::vector<RegistryEntry>& entries) {
  write_text_file(path, nlohmann::json(entries).dump(2) + "\n");
}

FrBackend load_backend(const RegistryEntry& entry) {
  auto fr = ToyFr::from_checkpoint(load_checkpoint(entry.checkpoint));
  if (!entry.id.empty()) fr.id = entry.id;
  auto backend = fr.backend(entry.role);
  if (entry.threshold) backend.set_threshold(*entry.threshold);
  return backend;
}

}  // namespace wali
