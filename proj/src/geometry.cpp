#include "wali/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "wali/text_io.hpp"

namespace wali {
namespace {

void require_same_dimension(const Embedding& a, const Embedding& b) {
  if (a.dimension() != b.dimension()) {
    throw std::invalid_argument("embedding dimension mismatch: " + std::to_string(a.dimension()) +
                                " vs " + std::to_string(b.dimension()));
  }
}

bool is_unit(const Embedding& e) { return std::abs(e.norm() - 1.0) < 1e-6; }

const Embedding& as_unit(const Embedding& e, Embedding& scratch, bool& renormalized) {
  if (e.normalized || is_unit(e)) return e;
  scratch = e.unit();
  renormalized = true;
  return scratch;
}

}  // namespace

Embedding::Embedding(std::vector<double> v, bool is_normalized)
    : values(std::move(v)), normalized(is_normalized) {}

double Embedding::norm() const { return std::sqrt(dot(values, values)); }

void Embedding::validate() const {
  if (values.size() < 2) throw std::invalid_argument("embedding dimension must be >= 2");
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("embedding has non-finite entries");
  }
  if (normalized && !is_unit(*this)) {
    throw std::invalid_argument("embedding flagged normalized but norm is " + std::to_string(norm()));
  }
}

Embedding Embedding::unit() const {
  const double n = norm();
  if (!(n > 0.0)) throw std::invalid_argument("cannot normalize a zero embedding");
  Embedding out;
  out.values.resize(values.size());
  std::transform(values.begin(), values.end(), out.values.begin(), [n](double v) { return v / n; });
  out.normalized = true;
  return out;
}

Orientation orientation(ScoreKind kind) {
  return kind == ScoreKind::cosine_similarity ? Orientation::similarity : Orientation::dissimilarity;
}

std::string to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::euclidean_dissimilarity: return "euclidean_dissimilarity";
    case ScoreKind::angular_dissimilarity: return "angular_dissimilarity";
    case ScoreKind::cosine_similarity: return "cosine_similarity";
  }
  return "unknown";
}

ScoreKind score_kind_from_string(const std::string& name) {
  if (name == "euclidean_dissimilarity" || name == "euclidean") return ScoreKind::euclidean_dissimilarity;
  if (name == "angular_dissimilarity" || name == "angular") return ScoreKind::angular_dissimilarity;
  if (name == "cosine_similarity" || name == "cosine") return ScoreKind::cosine_similarity;
  throw std::invalid_argument("unknown score kind: " + name);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine_similarity(const Embedding& a, const Embedding& b) {
  require_same_dimension(a, b);
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw std::invalid_argument("cosine similarity of a zero vector");
  return dot(a.values, b.values) / (na * nb);
}

double angular_dissimilarity(const Embedding& a, const Embedding& b) {
  const double c = std::clamp(cosine_similarity(a, b), -1.0 + kCosineClamp, 1.0 - kCosineClamp);
  return std::acos(c);
}

double euclidean_dissimilarity(const Embedding& a, const Embedding& b) {
  require_same_dimension(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double score(ScoreKind kind, const Embedding& a, const Embedding& b) {
  switch (kind) {
    case ScoreKind::euclidean_dissimilarity: return euclidean_dissimilarity(a, b);
    case ScoreKind::angular_dissimilarity: return angular_dissimilarity(a, b);
    case ScoreKind::cosine_similarity: return cosine_similarity(a, b);
  }
  throw std::invalid_argument("unknown score kind");
}

Embedding worst_case_euclidean(const Embedding& y1, const Embedding& y2) {
  require_same_dimension(y1, y2);
  Embedding out;
  out.values.resize(y1.dimension());
  for (std::size_t i = 0; i < y1.values.size(); ++i) out.values[i] = 0.5 * (y1.values[i] + y2.values[i]);
  return out;
}

Embedding worst_case_alpha(const Embedding& y1, const Embedding& y2, double alpha, bool* renormalized) {
  require_same_dimension(y1, y2);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  Embedding s1, s2;
  bool renorm = false;
  const Embedding& u1 = as_unit(y1, s1, renorm);
  const Embedding& u2 = as_unit(y2, s2, renorm);
  if (renormalized) *renormalized = renorm;

  std::vector<double> mix(u1.dimension());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * u1.values[i] + (1.0 - alpha) * u2.values[i];
  const double n = std::sqrt(dot(mix, mix));
  // Unit inputs make the mixture norm at least |2a - 1|; anything this small is
  // an (almost) antipodal pair where the bisector direction is not unique.
  if (!(n > 1e-9)) {
    throw DegenerateInputError("worst-case embedding undefined: weighted sum of inputs is zero");
  }
  for (double& v : mix) v /= n;
  return Embedding(std::move(mix), true);
}

Embedding worst_case_angular(const Embedding& y1, const Embedding& y2, bool* renormalized) {
  return worst_case_alpha(y1, y2, 0.5, renormalized);
}

Embedding worst_case(ScoreKind kind, const Embedding& y1, const Embedding& y2) {
  if (kind == ScoreKind::euclidean_dissimilarity) return worst_case_euclidean(y1, y2);
  return worst_case_angular(y1, y2);
}

void write_embedding_table(const std::filesystem::path& csv_path, const EmbeddingTable& table) {
  if (table.rows.empty()) throw std::invalid_argument("embedding table is empty");
  const std::size_t dim = table.rows.front().embedding.dimension();
  bool all_normalized = true;
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot write " + csv_path.string());
  out << "id,image_id";
  for (std::size_t i = 0; i < dim; ++i) out << ",e" << i;
  out << '\n';
  for (const auto& row : table.rows) {
    if (row.embedding.dimension() != dim) throw std::invalid_argument("ragged embedding table");
    all_normalized = all_normalized && row.embedding.normalized;
    out << row.id << ',' << row.image_id;
    for (double v : row.embedding.values) out << ',' << format_double(v);
    out << '\n';
  }
  nlohmann::json sidecar = {
      {"dimension", dim}, {"normalized", all_normalized}, {"fr_backend_id", table.fr_backend_id}};
  write_text_file(csv_path.string() + ".json", sidecar.dump(2) + "\n");
}

EmbeddingTable read_embedding_table(const std::filesystem::path& csv_path) {
  const auto sidecar = nlohmann::json::parse(read_text_file(csv_path.string() + ".json"));
  EmbeddingTable table;
  table.fr_backend_id = sidecar.at("fr_backend_id").get<std::string>();
  const auto dim = sidecar.at("dimension").get<std::size_t>();
  const bool normalized = sidecar.at("normalized").get<bool>();

  const auto rows = read_csv(csv_path);
  if (rows.empty() || rows.front().size() != dim + 2) {
    throw std::runtime_error("embedding CSV header does not match sidecar dimension");
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& cells = rows[r];
    if (cells.size() != dim + 2) throw std::runtime_error("malformed embedding row " + std::to_string(r));
    EmbeddingRow row;
    row.id = cells[0];
    row.image_id = cells[1];
    row.embedding.values.reserve(dim);
    for (std::size_t i = 0; i < dim; ++i) row.embedding.values.push_back(std::stod(cells[i + 2]));
    row.embedding.normalized = normalized;
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace wali
