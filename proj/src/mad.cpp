#include "wali/mad.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "wali/text_io.hpp"

namespace wali {
namespace {

void require(bool ok, const char* field, const char* why) {
  if (!ok) throw std::invalid_argument(std::string("invalid config field '") + field + "': " + why);
}

std::array<int, 256> make_uniform_table() {
  std::array<int, 256> table{};
  int next = 0;
  for (int code = 0; code < 256; ++code) {
    const auto c = static_cast<uint8_t>(code);
    const auto rotated = static_cast<uint8_t>((c >> 1) | (c << 7));
    table[code] = std::popcount(static_cast<unsigned>(c ^ rotated)) <= 2 ? next++ : -1;
  }
  for (auto& v : table) {
    if (v < 0) v = next;
  }
  return table;
}

}  // namespace

GrayImage to_gray(const torch::Tensor& image) {
  auto x = image.detach().to(torch::kDouble).contiguous();
  if (x.dim() == 2) x = x.unsqueeze(0);
  if (x.dim() != 3 || (x.size(0) != 1 && x.size(0) != 3)) {
    throw std::invalid_argument("to_gray expects a [C,H,W] image with 1 or 3 channels");
  }
  if (x.size(0) == 3) x = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).unsqueeze(0).contiguous();
  GrayImage g;
  g.height = static_cast<int>(x.size(1));
  g.width = static_cast<int>(x.size(2));
  const double* p = x.data_ptr<double>();
  g.pixels.assign(p, p + x.numel());
  return g;
}

std::vector<uint8_t> lbp_codes(const GrayImage& image) {
  if (image.height < 3 || image.width < 3) throw std::invalid_argument("LBP needs an image of at least 3x3 pixels");
  static constexpr int dr[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
  static constexpr int dc[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
  std::vector<uint8_t> codes;
  codes.reserve(static_cast<std::size_t>(image.height - 2) * (image.width - 2));
  for (int r = 1; r < image.height - 1; ++r) {
    for (int c = 1; c < image.width - 1; ++c) {
      const double center = image.at(r, c);
      unsigned code = 0;
      for (int k = 0; k < 8; ++k) {
        if (image.at(r + dr[k], c + dc[k]) >= center) code |= 1u << k;
      }
      codes.push_back(static_cast<uint8_t>(code));
    }
  }
  return codes;
}

int uniform_bin(uint8_t code) {
  static const auto table = make_uniform_table();
  return table[code];
}

void LbpConfig::validate() const {
  require(grid_rows >= 1, "grid_rows", "must be >= 1");
  require(grid_cols >= 1, "grid_cols", "must be >= 1");
}

void to_json(nlohmann::json& j, const LbpConfig& c) {
  j = {{"grid_rows", c.grid_rows}, {"grid_cols", c.grid_cols}, {"uniform", c.uniform}, {"radius", 1},
       {"neighbours", 8},          {"convention", "neighbour>=centre sets bit; bit0=top-left, clockwise"}};
}

void from_json(const nlohmann::json& j, LbpConfig& c) {
  c = LbpConfig{};
  if (j.contains("grid_rows")) c.grid_rows = j.at("grid_rows").get<int>();
  if (j.contains("grid_cols")) c.grid_cols = j.at("grid_cols").get<int>();
  if (j.contains("uniform")) c.uniform = j.at("uniform").get<bool>();
  if (j.contains("radius") && j.at("radius").get<int>() != 1) throw std::invalid_argument("invalid config field 'radius': only 1 is supported");
}

std::vector<double> lbp_features(const GrayImage& image, const LbpConfig& cfg) {
  cfg.validate();
  if (image.height < 3 * cfg.grid_rows || image.width < 3 * cfg.grid_cols) {
    std::ostringstream msg;
    msg << "image " << image.height << "x" << image.width << " is smaller than 3x3 pixels per cell for a "
        << cfg.grid_rows << "x" << cfg.grid_cols << " grid";
    throw std::invalid_argument(msg.str());
  }
  const auto codes = lbp_codes(image);
  const int rows = image.height - 2;
  const int cols = image.width - 2;
  const int bins = cfg.bins();
  std::vector<double> hist(static_cast<std::size_t>(cfg.feature_length()), 0.0);
  for (int r = 0; r < rows; ++r) {
    const int cell_r = r * cfg.grid_rows / rows;
    for (int c = 0; c < cols; ++c) {
      const int cell_c = c * cfg.grid_cols / cols;
      const uint8_t code = codes[static_cast<std::size_t>(r) * cols + c];
      const int bin = cfg.uniform ? uniform_bin(code) : code;
      hist[static_cast<std::size_t>((cell_r * cfg.grid_cols + cell_c) * bins + bin)] += 1.0;
    }
  }
  return hist;
}

std::vector<double> dmad_features(const FrBackend& fr, const torch::Tensor& suspect, const torch::Tensor& probe) {
  auto batch = torch::stack({suspect.dim() == 4 ? suspect.squeeze(0) : suspect, probe.dim() == 4 ? probe.squeeze(0) : probe});
  const auto e = fr.embed_all(batch);
  std::vector<double> diff(e[0].values.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = e[0].values[i] - e[1].values[i];
  return diff;
}

// --- linear classifier -------------------------------------------------------

void SvmConfig::validate() const {
  require(lambda > 0.0 && std::isfinite(lambda), "lambda", "must be > 0");
  require(max_epochs >= 1, "max_epochs", "must be >= 1");
  require(tolerance > 0.0, "tolerance", "must be > 0");
}

void to_json(nlohmann::json& j, const SvmConfig& c) {
  j = {{"lambda", c.lambda}, {"max_epochs", c.max_epochs}, {"tolerance", c.tolerance}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SvmConfig& c) {
  c = SvmConfig{};
  if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
  if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<int>();
  if (j.contains("tolerance")) c.tolerance = j.at("tolerance").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
}

double LinearClassifier::decision(const std::vector<double>& features) const {
  if (features.size() != weights.size()) {
    throw std::invalid_argument("feature length " + std::to_string(features.size()) + " does not match classifier length " +
                                std::to_string(weights.size()));
  }
  double s = bias;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * (features[i] - mean[i]) / scale[i];
  return s;
}

std::vector<double> LinearClassifier::decisions(const std::vector<std::vector<double>>& features) const {
  std::vector<double> out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back(decision(f));
  return out;
}

void to_json(nlohmann::json& j, const LinearClassifier& c) {
  j = {{"weights", c.weights},
       {"bias", c.bias},
       {"mean", c.mean},
       {"scale", c.scale},
       {"feature_kind", c.feature_kind},
       {"feature_config", c.feature_config},
       {"convention", "higher score = more morph-like"}};
}

void from_json(const nlohmann::json& j, LinearClassifier& c) {
  c.weights = j.at("weights").get<std::vector<double>>();
  c.bias = j.at("bias").get<double>();
  c.mean = j.at("mean").get<std::vector<double>>();
  c.scale = j.at("scale").get<std::vector<double>>();
  c.feature_kind = j.value("feature_kind", "");
  c.feature_config = j.value("feature_config", nlohmann::json::object());
  if (c.mean.size() != c.weights.size() || c.scale.size() != c.weights.size()) {
    throw std::runtime_error("classifier file has inconsistent vector lengths");
  }
}

void save_classifier(const std::filesystem::path& path, const LinearClassifier& c) {
  write_text_file(path, nlohmann::json(c).dump(2) + "\n");
}

LinearClassifier load_classifier(const std::filesystem::path& path) {
  return nlohmann::json::parse(read_text_file(path)).get<LinearClassifier>();
}

LinearClassifier train_linear_svm(const std::vector<std::vector<double>>& features, const std::vector<bool>& is_attack,
                                  const SvmConfig& cfg) {
  cfg.validate();
  const std::size_t n = features.size();
  if (n == 0 || is_attack.size() != n) throw std::invalid_argument("SVM training needs matching features and labels");
  const auto n_attack = std::count(is_attack.begin(), is_attack.end(), true);
  if (n_attack == 0 || static_cast<std::size_t>(n_attack) == n) {
    throw std::invalid_argument("SVM training needs both bona fide and attack samples");
  }
  const std::size_t d = features[0].size();
  for (const auto& f : features) {
    if (f.size() != d) throw std::invalid_argument("SVM features have inconsistent lengths");
  }

  LinearClassifier model;
  model.mean.assign(d, 0.0);
  model.scale.assign(d, 0.0);
  for (const auto& f : features) {
    for (std::size_t k = 0; k < d; ++k) model.mean[k] += f[k];
  }
  for (auto& m : model.mean) m /= static_cast<double>(n);
  for (const auto& f : features) {
    for (std::size_t k = 0; k < d; ++k) model.scale[k] += (f[k] - model.mean[k]) * (f[k] - model.mean[k]);
  }
  for (auto& s : model.scale) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s < 1e-12) s = 1.0;
  }

  // Standardised samples with a trailing constant feature for the bias.
  std::vector<std::vector<double>> x(n, std::vector<double>(d + 1, 1.0));
  std::vector<double> y(n), qii(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) x[i][k] = (features[i][k] - model.mean[k]) / model.scale[k];
    y[i] = is_attack[i] ? 1.0 : -1.0;
    for (double v : x[i]) qii[i] += v * v;
  }

  const double c_box = 1.0 / (cfg.lambda * static_cast<double>(n));
  std::vector<double> alpha(n, 0.0), w(d + 1, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double pg_max = -INFINITY, pg_min = INFINITY;
    for (std::size_t i : order) {
      const double g = y[i] * std::inner_product(w.begin(), w.end(), x[i].begin(), 0.0) - 1.0;
      double pg = g;
      if (alpha[i] <= 0.0) pg = std::min(g, 0.0);
      else if (alpha[i] >= c_box) pg = std::max(g, 0.0);
      pg_max = std::max(pg_max, pg);
      pg_min = std::min(pg_min, pg);
      if (pg == 0.0) continue;
      const double old = alpha[i];
      alpha[i] = std::clamp(old - g / qii[i], 0.0, c_box);
      const double step = (alpha[i] - old) * y[i];
      for (std::size_t k = 0; k <= d; ++k) w[k] += step * x[i][k];
    }
    if (pg_max - pg_min < cfg.tolerance) break;
  }
  model.bias = w[d];
  w.pop_back();
  model.weights = std::move(w);
  return model;
}

LinearClassifier smad_train(const std::vector<GrayImage>& images, const std::vector<bool>& is_attack,
                            const LbpConfig& lbp, const SvmConfig& svm) {
  std::vector<std::vector<double>> features;
  features.reserve(images.size());
  for (const auto& img : images) features.push_back(lbp_features(img, lbp));
  auto model = train_linear_svm(features, is_attack, svm);
  model.feature_kind = "lbp";
  model.feature_config = lbp;
  return model;
}

MadScores mad_evaluate(const LinearClassifier& classifier, const std::vector<std::vector<double>>& features,
                       const std::vector<bool>& is_attack) {
  if (features.empty()) throw std::invalid_argument("MAD evaluation needs a non-empty test set");
  if (features.size() != is_attack.size()) throw std::invalid_argument("MAD evaluation: features/labels size mismatch");
  MadScores scores;
  for (std::size_t i = 0; i < features.size(); ++i) {
    (is_attack[i] ? scores.attack : scores.bona_fide).push_back(classifier.decision(features[i]));
  }
  return scores;
}

void write_feature_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                       const std::vector<bool>& is_attack, const std::vector<std::vector<double>>& features) {
  if (ids.size() != features.size() || is_attack.size() != features.size()) {
    throw std::invalid_argument("feature dump: ids, labels and features differ in length");
  }
  std::ostringstream out;
  out << "id,label";
  const std::size_t d = features.empty() ? 0 : features[0].size();
  for (std::size_t k = 0; k < d; ++k) out << ",f" << k;
  out << '\n';
  for (std::size_t i = 0; i < features.size(); ++i) {
    out << ids[i] << ',' << (is_attack[i] ? "attack" : "bona_fide");
    for (double v : features[i]) out << ',' << format_double(v);
    out << '\n';
  }
  write_text_file(path, out.str());
}

}  // namespace wali
