#include "wali/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "wali/text_io.hpp"

namespace wali {
namespace {

std::vector<double> sorted(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v;
}

double count_below(const std::vector<double>& sorted_scores, double t) {
  return static_cast<double>(std::lower_bound(sorted_scores.begin(), sorted_scores.end(), t) - sorted_scores.begin());
}

/// Share of scores >= t, counted directly so it is bit-equal to a naive count.
double share_at_or_above(const std::vector<double>& sorted_scores, double t) {
  return (static_cast<double>(sorted_scores.size()) - count_below(sorted_scores, t)) / sorted_scores.size();
}

/// Distinct scores of both lists plus one value just above the maximum.
std::vector<double> det_thresholds(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> t;
  t.reserve(a.size() + b.size() + 1);
  std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(t));
  t.erase(std::unique(t.begin(), t.end()), t.end());
  t.push_back(std::nextafter(t.back(), std::numeric_limits<double>::infinity()));
  return t;
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument(std::string("non-finite ") + what + " score");
  }
}

}  // namespace

double mmpmr(const MorphScoreTable& table, double t) {
  if (table.empty()) throw std::invalid_argument("MMPMR needs at least one morph");
  std::size_t hits = 0;
  for (const auto& row : table) {
    if (!std::isfinite(row.d1) || !std::isfinite(row.d2)) {
      throw std::invalid_argument("non-finite score for morph '" + row.morph_id + "'");
    }
    if (morph_accepted(row, t)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(table.size());
}

MorphScoreRow score_morph(const FrBackend& fr, const std::string& morph_id, const Embedding& morph,
                          const Embedding& probe1, const Embedding& probe2) {
  return {morph_id, fr.dissimilarity(morph, probe1), fr.dissimilarity(morph, probe2)};
}

MorphScoreRow worst_case_scores(const FrBackend& fr, const std::string& pair_id, const Embedding& e1,
                                const Embedding& e2) {
  return score_morph(fr, pair_id, worst_case(fr.kind(), e1, e2), e1, e2);
}

BoundReport worst_case_bound(const FrBackend& fr, const std::vector<ProbePair>& pairs) {
  return worst_case_bound(fr, pairs, fr.calibrated_threshold());
}

BoundReport worst_case_bound(const FrBackend& fr, const std::vector<ProbePair>& pairs, double t) {
  BoundReport report;
  report.threshold = t;
  for (const auto& p : pairs) {
    report.rows.push_back(worst_case_scores(fr, p.pair_id, p.probe1, p.probe2));
    report.matched.push_back(morph_accepted(report.rows.back(), t));
  }
  report.mmpmr = mmpmr(report.rows, t);
  return report;
}

// --- error-rate curves -------------------------------------------------------

std::vector<DetPoint> det_points(const ScoreSet& scores) {
  if (scores.genuine.empty() || scores.impostor.empty()) throw std::invalid_argument("DET needs both score classes");
  check_finite(scores.genuine, "genuine");
  check_finite(scores.impostor, "impostor");
  const auto gen = sorted(scores.genuine);
  const auto imp = sorted(scores.impostor);
  std::vector<DetPoint> out;
  for (double t : det_thresholds(gen, imp)) {
    out.push_back({t, count_below(imp, t) / imp.size(), share_at_or_above(gen, t)});
  }
  return out;
}

std::vector<DetPoint> det_points(const MadScores& scores) {
  if (scores.bona_fide.empty() || scores.attack.empty()) throw std::invalid_argument("DET needs both score classes");
  check_finite(scores.bona_fide, "bona fide");
  check_finite(scores.attack, "attack");
  const auto bf = sorted(scores.bona_fide);
  const auto att = sorted(scores.attack);
  std::vector<DetPoint> out;
  for (double t : det_thresholds(bf, att)) {
    out.push_back({t, count_below(att, t) / att.size(), share_at_or_above(bf, t)});
  }
  return out;
}

double apcer(const MadScores& scores, double tau) {
  if (scores.attack.empty()) throw std::invalid_argument("no attack scores");
  const auto n = std::count_if(scores.attack.begin(), scores.attack.end(), [tau](double s) { return s < tau; });
  return static_cast<double>(n) / static_cast<double>(scores.attack.size());
}

double bpcer(const MadScores& scores, double tau) {
  if (scores.bona_fide.empty()) throw std::invalid_argument("no bona fide scores");
  const auto n = std::count_if(scores.bona_fide.begin(), scores.bona_fide.end(), [tau](double s) { return s >= tau; });
  return static_cast<double>(n) / static_cast<double>(scores.bona_fide.size());
}

double bpcer_at_apcer(const MadScores& scores, double apcer_bound) {
  if (scores.bona_fide.empty() || scores.attack.empty()) throw std::invalid_argument("BPCER@APCER needs both classes");
  check_finite(scores.bona_fide, "bona fide");
  check_finite(scores.attack, "attack");
  const auto bf = sorted(scores.bona_fide);
  const auto att = sorted(scores.attack);
  auto candidates = det_thresholds(bf, att);
  candidates.push_back(std::numeric_limits<double>::infinity());
  double best = 1.0;
  for (double t : candidates) {
    if (count_below(att, t) / att.size() > apcer_bound) break;  // APCER is non-decreasing in t
    best = std::min(best, share_at_or_above(bf, t));
  }
  return best;
}

double equal_error_rate(const ScoreSet& scores) {
  double eer = 1.0;
  for (const auto& p : det_points(scores)) eer = std::min(eer, std::max(p.rate1, p.rate2));
  return eer;
}

// --- CSV outputs -------------------------------------------------------------

void write_mmpmr_report(const std::filesystem::path& path, const std::vector<MmpmrReportRow>& rows) {
  std::ostringstream out;
  out << "backend,morph_set,threshold,mmpmr\n";
  for (const auto& r : rows) {
    out << r.backend << ',' << r.morph_set << ',' << format_double(r.threshold) << ',' << format_double(r.mmpmr)
        << '\n';
  }
  write_text_file(path, out.str());
}

void write_det_csv(const std::filesystem::path& path, const std::vector<DetPoint>& points, const std::string& rate1_name,
                   const std::string& rate2_name) {
  std::ostringstream out;
  out << "threshold," << rate1_name << ',' << rate2_name << '\n';
  for (const auto& p : points) {
    out << format_double(p.threshold) << ',' << format_double(p.rate1) << ',' << format_double(p.rate2) << '\n';
  }
  write_text_file(path, out.str());
}

void write_bounds_csv(const std::filesystem::path& path, const std::string& backend, const BoundReport& report) {
  std::ostringstream out;
  out << "backend,pair_id,d1,d2,threshold,matched\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    out << backend << ',' << r.morph_id << ',' << format_double(r.d1) << ',' << format_double(r.d2) << ','
        << format_double(report.threshold) << ',' << (report.matched[i] ? 1 : 0) << '\n';
  }
  write_text_file(path, out.str());
}

void write_score_table(const std::filesystem::path& path, const MorphScoreTable& table) {
  std::ostringstream out;
  out << "morph_id,d1,d2\n";
  for (const auto& r : table) out << r.morph_id << ',' << format_double(r.d1) << ',' << format_double(r.d2) << '\n';
  write_text_file(path, out.str());
}

MorphScoreTable read_score_table(const std::filesystem::path& path) {
  MorphScoreTable table;
  const auto rows = read_csv(path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.empty() || (r.size() == 1 && r[0].empty())) continue;
    if (i == 0 && r.size() >= 3 && r[1] == "d1") continue;
    if (r.size() != 3) throw std::runtime_error(path.string() + ": expected morph_id,d1,d2 on row " + std::to_string(i + 1));
    try {
      table.push_back({r[0], std::stod(r[1]), std::stod(r[2])});
    } catch (const std::logic_error&) {
      throw std::runtime_error(path.string() + ": bad score on row " + std::to_string(i + 1));
    }
  }
  return table;
}

}  // namespace wali
