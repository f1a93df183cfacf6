#pragma once

// Reference computations used to check the library. Everything here is plain
// C++ over std::vector and deliberately naive: sampling, grids, brute-force
// counting, direct DFT sums and central differences.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec unit(Vec a) {
  const double n = norm(a);
  for (auto& v : a) v /= n;
  return a;
}

inline double cosine(const Vec& a, const Vec& b) { return dot(a, b) / (norm(a) * norm(b)); }

inline double distance(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline Vec random_unit(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> g;
  Vec v(d);
  for (auto& x : v) x = g(rng);
  return unit(v);
}

/// Largest min(cos(c, y1), cos(c, y2)) over `n` random unit candidates c.
inline double best_sampled_min_similarity(const Vec& y1, const Vec& y2, int n, std::mt19937_64& rng) {
  double best = -2.0;
  for (int i = 0; i < n; ++i) {
    const Vec c = random_unit(rng, y1.size());
    best = std::max(best, std::min(dot(c, y1), dot(c, y2)));
  }
  return best;
}

/// Smallest max(|c - y1|, |c - y2|) over a regular 2-D grid covering both points.
inline double best_grid_max_distance(const Vec& y1, const Vec& y2, int per_axis) {
  const double lo_x = std::min(y1[0], y2[0]) - 1.0, hi_x = std::max(y1[0], y2[0]) + 1.0;
  const double lo_y = std::min(y1[1], y2[1]) - 1.0, hi_y = std::max(y1[1], y2[1]) + 1.0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < per_axis; ++i) {
    for (int j = 0; j < per_axis; ++j) {
      const Vec c = {lo_x + (hi_x - lo_x) * i / (per_axis - 1), lo_y + (hi_y - lo_y) * j / (per_axis - 1)};
      best = std::min(best, std::max(distance(c, y1), distance(c, y2)));
    }
  }
  return best;
}

/// Central differences of a scalar function of a vector.
inline Vec finite_difference_gradient(const std::function<double(const Vec&)>& f, Vec x, double h) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Orthonormal 2-D DFT of an h x w real plane, by direct summation.
inline std::vector<std::complex<double>> dft2(const Vec& plane, int h, int w) {
  const double pi = std::acos(-1.0);
  std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * w);
  for (int u = 0; u < h; ++u) {
    for (int v = 0; v < w; ++v) {
      std::complex<double> s = 0.0;
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          const double phase = -2.0 * pi * (static_cast<double>(u) * r / h + static_cast<double>(v) * c / w);
          s += plane[static_cast<std::size_t>(r) * w + c] * std::polar(1.0, phase);
        }
      }
      out[static_cast<std::size_t>(u) * w + v] = s / std::sqrt(static_cast<double>(h) * w);
    }
  }
  return out;
}

/// Focal frequency loss (exponent 1) for NCHW images stored flat: per image,
/// weights |dF| / max over channels and frequencies; mean of w * |dF|^2.
inline double focal_frequency_loss(const Vec& x, const Vec& y, int n, int ch, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> mag;
    for (int c = 0; c < ch; ++c) {
      const std::size_t off = (static_cast<std::size_t>(i) * ch + c) * plane;
      const auto fx = dft2(Vec(x.begin() + off, x.begin() + off + plane), h, w);
      const auto fy = dft2(Vec(y.begin() + off, y.begin() + off + plane), h, w);
      for (std::size_t k = 0; k < plane; ++k) mag.push_back(std::abs(fy[k] - fx[k]));
    }
    const double mx = *std::max_element(mag.begin(), mag.end());
    for (double m : mag) total += (mx > 0.0 ? m / mx : 0.0) * m * m;
  }
  return total / (static_cast<double>(n) * ch * plane);
}

// --- counting ---------------------------------------------------------------------

inline double fraction_below(const Vec& s, double t) {
  return static_cast<double>(std::count_if(s.begin(), s.end(), [t](double v) { return v < t; })) / s.size();
}

inline double fraction_at_or_above(const Vec& s, double t) {
  return static_cast<double>(std::count_if(s.begin(), s.end(), [t](double v) { return v >= t; })) / s.size();
}

inline double mmpmr(const std::vector<std::pair<double, double>>& rows, double t) {
  int hits = 0;
  for (const auto& [a, b] : rows) hits += (a < t && b < t) ? 1 : 0;
  return static_cast<double>(hits) / rows.size();
}

struct Sweep {
  double threshold;
  double fmr;
  double fnmr;
};

/// Tries every observed score and every midpoint and endpoint around them;
/// returns the admissible (FMR < bound) candidate with least FNMR, largest t on ties.
inline Sweep exhaustive_calibration(const Vec& genuine, const Vec& impostor, double bound) {
  Vec all = genuine;
  all.insert(all.end(), impostor.begin(), impostor.end());
  std::sort(all.begin(), all.end());
  Vec candidates = all;
  for (std::size_t i = 0; i + 1 < all.size(); ++i) candidates.push_back(0.5 * (all[i] + all[i + 1]));
  candidates.push_back(all.front() - 1.0);
  candidates.push_back(all.back() + 1.0);
  Sweep best{0, 2, 2};
  bool found = false;
  for (double t : candidates) {
    const double fmr = fraction_below(impostor, t);
    if (!(fmr < bound)) continue;
    const double fnmr = fraction_at_or_above(genuine, t);
    if (!found || fnmr < best.fnmr || (fnmr == best.fnmr && t > best.threshold)) {
      best = {t, fmr, fnmr};
      found = true;
    }
  }
  return best;
}

}  // namespace oracle
