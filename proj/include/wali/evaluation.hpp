#pragma once

// Vulnerability metrics: MMPMR, worst-case bound, DET data and detector error
// rates.
//
// FR scores are dissimilarities; a comparison matches when d < t.
// Detector scores are "higher = more morph-like"; an image is classified as an
// attack when s >= tau, so APCER(tau) = #{attack < tau} / n_attack and
// BPCER(tau) = #{bona fide >= tau} / n_bona_fide.

#include <filesystem>
#include <string>
#include <vector>

#include "wali/fr_registry.hpp"
#include "wali/geometry.hpp"

namespace wali {

struct MorphScoreRow {
  std::string morph_id;
  double d1 = 0.0;  // against the identity-1 probe
  double d2 = 0.0;  // against the identity-2 probe
};

using MorphScoreTable = std::vector<MorphScoreRow>;

inline bool morph_accepted(const MorphScoreRow& row, double t) { return std::max(row.d1, row.d2) < t; }

/// Fraction of rows with max(d1, d2) < t. Throws on an empty table or
/// non-finite scores.
double mmpmr(const MorphScoreTable& table, double t);

/// Scores one morph embedding against the two probe embeddings.
MorphScoreRow score_morph(const FrBackend& fr, const std::string& morph_id, const Embedding& morph,
                          const Embedding& probe1, const Embedding& probe2);

/// Scores of y* (worst case for the backend's metric) against the two embeddings.
MorphScoreRow worst_case_scores(const FrBackend& fr, const std::string& pair_id, const Embedding& e1,
                                const Embedding& e2);

struct BoundReport {
  double threshold = 0.0;
  MorphScoreTable rows;
  std::vector<bool> matched;
  double mmpmr = 0.0;
};

struct ProbePair {
  std::string pair_id;
  Embedding probe1;
  Embedding probe2;
};

/// Worst-case MMPMR over probe pairs at the backend's calibrated threshold.
/// Throws std::logic_error for an uncalibrated backend and
/// DegenerateInputError for antipodal probes.
BoundReport worst_case_bound(const FrBackend& fr, const std::vector<ProbePair>& pairs);
BoundReport worst_case_bound(const FrBackend& fr, const std::vector<ProbePair>& pairs, double t);

// --- error-rate curves -------------------------------------------------------

struct MadScores {
  std::vector<double> bona_fide;
  std::vector<double> attack;
};

struct DetPoint {
  double threshold = 0.0;
  double rate1 = 0.0;  // FMR or APCER
  double rate2 = 0.0;  // FNMR or BPCER
};

/// One point at every distinct score plus one just above the maximum; runs
/// from (0, 1) to (1, 0). Throws if either class is empty.
std::vector<DetPoint> det_points(const ScoreSet& scores);
std::vector<DetPoint> det_points(const MadScores& scores);

double apcer(const MadScores& scores, double tau);
double bpcer(const MadScores& scores, double tau);

/// Minimal BPCER over thresholds with APCER <= apcer_bound (+inf included).
double bpcer_at_apcer(const MadScores& scores, double apcer_bound);

/// min_t max(FMR(t), FNMR(t)) over the DET thresholds.
double equal_error_rate(const ScoreSet& scores);

// --- CSV outputs -------------------------------------------------------------

struct MmpmrReportRow {
  std::string backend;
  std::string morph_set;
  double threshold = 0.0;
  double mmpmr = 0.0;
};

void write_mmpmr_report(const std::filesystem::path& path, const std::vector<MmpmrReportRow>& rows);
void write_det_csv(const std::filesystem::path& path, const std::vector<DetPoint>& points, const std::string& rate1_name,
                   const std::string& rate2_name);
void write_bounds_csv(const std::filesystem::path& path, const std::string& backend, const BoundReport& report);
void write_score_table(const std::filesystem::path& path, const MorphScoreTable& table);
/// Reads `morph_id,d1,d2` rows (header optional).
MorphScoreTable read_score_table(const std::filesystem::path& path);

}  // namespace wali
