#pragma once

// Worst-case embeddings and the score functions they optimise.
//
// For two identity embeddings y1, y2 the worst-case embedding y* is the point
// that minimises the larger of the two dissimilarities (or maximises the
// smaller of the two similarities). It has a closed form for both metrics used
// here: the midpoint for Euclidean distance and the normalised bisector for the
// angle between unit vectors.

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wali {

/// Raised when a worst-case embedding is undefined, e.g. antipodal inputs.
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Embedding {
  std::vector<double> values;
  bool normalized = false;

  Embedding() = default;
  explicit Embedding(std::vector<double> v, bool is_normalized = false);

  std::size_t dimension() const { return values.size(); }
  double norm() const;

  /// Throws std::invalid_argument when D < 2, entries are non-finite, or the
  /// normalized flag is set on a vector whose norm is not 1 (tolerance 1e-6).
  void validate() const;

  /// Returns a unit-norm copy with normalized = true. Throws on zero vectors.
  Embedding unit() const;
};

enum class ScoreKind { euclidean_dissimilarity, angular_dissimilarity, cosine_similarity };
enum class Orientation { dissimilarity, similarity };

Orientation orientation(ScoreKind kind);
std::string to_string(ScoreKind kind);
ScoreKind score_kind_from_string(const std::string& name);

/// Cosine inputs to arccos are clamped to [-1 + kCosineClamp, 1 - kCosineClamp].
inline constexpr double kCosineClamp = 1e-7;

double dot(std::span<const double> a, std::span<const double> b);
double cosine_similarity(const Embedding& a, const Embedding& b);
double angular_dissimilarity(const Embedding& a, const Embedding& b);
double euclidean_dissimilarity(const Embedding& a, const Embedding& b);

/// Symmetric in (a, b). Throws std::invalid_argument on dimension mismatch and
/// on zero vectors for the angular/cosine kinds.
double score(ScoreKind kind, const Embedding& a, const Embedding& b);

/// Midpoint (y1 + y2) / 2.
Embedding worst_case_euclidean(const Embedding& y1, const Embedding& y2);

/// Normalised bisector (y1 + y2) / ||y1 + y2||. Inputs that are not unit norm
/// are normalised first; `renormalized` (if given) reports that this happened.
/// Throws DegenerateInputError for antipodal inputs.
Embedding worst_case_angular(const Embedding& y1, const Embedding& y2, bool* renormalized = nullptr);

/// (a y1 + (1 - a) y2) / ||a y1 + (1 - a) y2|| for a in [0, 1]; a = 0.5 gives
/// exactly worst_case_angular.
Embedding worst_case_alpha(const Embedding& y1, const Embedding& y2, double alpha,
                           bool* renormalized = nullptr);

/// Dispatches on the metric: midpoint for Euclidean, bisector otherwise.
Embedding worst_case(ScoreKind kind, const Embedding& y1, const Embedding& y2);

// Exchange format: CSV `id,image_id,e0..e{D-1}` with a JSON sidecar
// {dimension, normalized, fr_backend_id} next to it (`<path>.json`).
struct EmbeddingRow {
  std::string id;
  std::string image_id;
  Embedding embedding;
};

struct EmbeddingTable {
  std::string fr_backend_id;
  std::vector<EmbeddingRow> rows;
};

void write_embedding_table(const std::filesystem::path& csv_path, const EmbeddingTable& table);
EmbeddingTable read_embedding_table(const std::filesystem::path& csv_path);

}  // namespace wali
