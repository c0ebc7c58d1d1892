// Copyright 2026 The mpo-tomo Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mpotomo/mpo.hpp"
#include "mpotomo/parallel.hpp"
#include "mpotomo/rng.hpp"

namespace mpotomo {

/// Single-mode moment operators. Q0/P0 are the identity taken from the q and
/// p settings respectively; Q1 = q, P1 = p, Q2 = q^2, P2 = p^2.
enum Moment : int { Q0 = 0, P0 = 1, Q1 = 2, P1 = 3, Q2 = 4, P2 = 5 };

inline const char *moment_token(int m) {
  static const char *names[] = {"Q0", "P0", "Q1", "P1", "Q2", "P2"};
  return names[m];
}

inline std::string moment_word_string(std::int64_t code, int L) {
  std::string s;
  for (int d : word_digits(code, L, 6)) s += moment_token(d);
  return s;
}

inline std::vector<int> parse_moment_word(const std::string &s) {
  if (s.size() % 2 != 0) throw ValidationError("moment word '" + s + "' has odd length");
  std::vector<int> out;
  for (size_t k = 0; k < s.size(); k += 2) {
    const char a = s[k], b = s[k + 1];
    int base;
    if (a == 'Q') base = 0;
    else if (a == 'P') base = 1;
    else throw ValidationError("bad moment token in '" + s + "'");
    if (b < '0' || b > '2') throw ValidationError("bad moment order in '" + s + "'");
    out.push_back(2 * (b - '0') + base);
  }
  return out;
}

/// Measurement setting of one site: 0 for q, 1 for p.
inline int moment_setting(int m) { return m & 1; }

/// Expectations of the moment operators in a state supported on Fock 0, 1,
/// as rows over Pauli coefficients (I, X, Y, Z).
inline Matrix moment_map() {
  Matrix m = Matrix::Zero(6, 4);
  const double h = 1.0 / std::sqrt(2.0);
  m(Q0, 0) = m(P0, 0) = 1;
  m(Q1, 1) = h;
  m(P1, 2) = h;
  m(Q2, 0) = m(P2, 0) = 1;
  m(Q2, 3) = m(P2, 3) = -0.5;
  return m;
}

/// Same for the squared operators: 1, q^2 (-> I - Z/2) and q^4, whose
/// diagonal on Fock 0, 1 is (3/4, 15/4).
inline Matrix moment_square_map() {
  Matrix m = Matrix::Zero(6, 4);
  m(Q0, 0) = m(P0, 0) = 1;
  m(Q1, 0) = m(P1, 0) = 1;
  m(Q1, 3) = m(P1, 3) = -0.5;
  m(Q2, 0) = m(P2, 0) = 2.25;
  m(Q2, 3) = m(P2, 3) = -1.5;
  return m;
}

struct MomentWindow {
  int start = 1;
  std::vector<double> value;
  std::vector<double> se;
  std::vector<std::int64_t> shots;
  std::vector<std::uint8_t> present;
};

/// Moments keyed by (window start, base-6 word code).
struct MomentTable {
  int n_sites = 0;
  int window = 0;
  std::vector<MomentWindow> windows;

  std::int64_t rows_per_window() const { return ipow(6, window); }
};

inline void check_eta(double eta) {
  if (!(eta > 0.0 && eta <= 1.0)) throw ParameterError("eta must lie in (0, 1]");
}

namespace detail {

inline Mpo lossy(const Mpo &mpo, double eta) {
  if (eta == 1.0) return mpo;
  return apply_local_errors(mpo, std::vector<ProcessMatrix>(mpo.size(), ProcessMatrix::amplitude_damping(1.0 - eta)));
}

inline void check_window(const Mpo &mpo, int L) {
  if (L < 1 || L > mpo.size()) throw RangeError("window length must be in [1, N]");
  if (L > 6) throw SizeError("moment windows are limited to L <= 6");
}

}  // namespace detail

/// Noise-free moments of every window after loss 1 - eta on each mode.
inline MomentTable exact_local_moments(const Mpo &mpo, int L, double eta, int threads = 1) {
  check_eta(eta);
  detail::check_window(mpo, L);
  const Mpo m = detail::lossy(mpo, eta);
  CorrelationEvaluator ev(m);
  MomentTable t;
  t.n_sites = m.size();
  t.window = L;
  t.windows.resize(m.size() - L + 1);
  const Matrix map = moment_map();
  parallel_for(static_cast<std::int64_t>(t.windows.size()), threads, [&](std::int64_t w) {
    MomentWindow &mw = t.windows[w];
    mw.start = static_cast<int>(w) + 1;
    mw.value = transform_axes(ev.window(mw.start, L), map, L);
    mw.se.assign(mw.value.size(), 0.0);
    mw.shots.assign(mw.value.size(), 0);
    mw.present.assign(mw.value.size(), 1);
  });
  return t;
}

/// Exact moments plus Gaussian noise of variance Var[O]/shots per row.
inline MomentTable synthesize_dataset(const Mpo &mpo, int L, double eta, std::int64_t shots,
                                      std::uint64_t seed, int threads = 1) {
  if (shots < 100) throw ParameterError("shots must be >= 100");
  check_eta(eta);
  detail::check_window(mpo, L);
  const Mpo m = detail::lossy(mpo, eta);
  CorrelationEvaluator ev(m);
  MomentTable t;
  t.n_sites = m.size();
  t.window = L;
  t.windows.resize(m.size() - L + 1);
  const Matrix map = moment_map(), sq = moment_square_map();
  const std::int64_t rows = t.rows_per_window();
  parallel_for(static_cast<std::int64_t>(t.windows.size()), threads, [&](std::int64_t w) {
    MomentWindow &mw = t.windows[w];
    mw.start = static_cast<int>(w) + 1;
    const auto pauli = ev.window(mw.start, L);
    const auto mean = transform_axes(pauli, map, L);
    const auto second = transform_axes(pauli, sq, L);
    mw.value.resize(rows);
    mw.se.resize(rows);
    mw.shots.assign(rows, shots);
    mw.present.assign(rows, 1);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double var = std::max(0.0, second[r] - mean[r] * mean[r]);
      const double se = std::sqrt(var / static_cast<double>(shots));
      KeyedRng rng(seed, static_cast<std::uint64_t>(w * rows + r));
      mw.value[r] = mean[r] + se * rng.normal();
      mw.se[r] = se;
    }
  });
  return t;
}

/// CSV rows (window_start, basis_word, value, se, shots); `keep` selects
/// rows by (window start, word code).
inline void write_moment_csv(std::ostream &os, const MomentTable &t,
                             const std::function<bool(int, std::int64_t)> &keep = {}) {
  os.precision(17);
  os << "window_start,basis_word,value,se,shots\n";
  for (const auto &mw : t.windows)
    for (std::int64_t r = 0; r < t.rows_per_window(); ++r) {
      if (!mw.present[r]) continue;
      if (keep && !keep(mw.start, r)) continue;
      os << mw.start << "," << moment_word_string(r, t.window) << "," << mw.value[r] << "," << mw.se[r] << ","
         << mw.shots[r] << "\n";
    }
}

/// Per-window CSV rows in the format of write_moment_csv, appended into `t`
/// allocated for `n_sites` and `window`.
inline void read_moment_csv(std::istream &is, MomentTable &t, const std::string &source = "csv") {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("window_start", 0) == 0) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (int k = 0; k < 5; ++k)
      if (!std::getline(ss, f[k], ','))
        throw ValidationError(source + ":" + std::to_string(lineno) + ": expected 5 columns");
    try {
      const int start = std::stoi(f[0]);
      const auto word = parse_moment_word(f[1]);
      if (static_cast<int>(word.size()) != t.window)
        throw ValidationError(source + ":" + std::to_string(lineno) + ": word length differs from window");
      if (start < 1 || start > static_cast<int>(t.windows.size()))
        throw ValidationError(source + ":" + std::to_string(lineno) + ": window start out of range");
      auto &mw = t.windows[start - 1];
      const std::int64_t code = word_code(word, 6);
      mw.value[code] = std::stod(f[2]);
      mw.se[code] = std::stod(f[3]);
      mw.shots[code] = std::stoll(f[4]);
      mw.present[code] = 1;
      if (!std::isfinite(mw.value[code]) || !std::isfinite(mw.se[code]) || mw.se[code] < 0)
        throw DataError(source + ":" + std::to_string(lineno) + ": non-finite value or negative se");
    } catch (const std::invalid_argument &) {
      throw ValidationError(source + ":" + std::to_string(lineno) + ": unparsable number");
    } catch (const std::out_of_range &) {
      throw ValidationError(source + ":" + std::to_string(lineno) + ": number out of range");
    }
  }
}

inline MomentTable empty_moment_table(int n_sites, int window) {
  if (window < 1 || window > n_sites) throw RangeError("window must be in [1, N]");
  MomentTable t;
  t.n_sites = n_sites;
  t.window = window;
  const std::int64_t rows = t.rows_per_window();
  for (int s = 1; s + window - 1 <= n_sites; ++s) {
    MomentWindow mw;
    mw.start = s;
    mw.value.assign(rows, 0.0);
    mw.se.assign(rows, 0.0);
    mw.shots.assign(rows, 0);
    mw.present.assign(rows, 0);
    t.windows.push_back(std::move(mw));
  }
  return t;
}

// --- Quadrature sampling ----------------------------------------------------

namespace detail {

/// Cumulative integrals on [-6, 6] of phi0^2, phi1^2 and phi0 phi1 (real
/// wavefunctions of the q representation).
struct HermiteGrid {
  static constexpr int kPoints = 1 << 14;
  static constexpr double kLo = -6.0, kHi = 6.0;
  std::vector<double> x, f00, f11, f01;

  HermiteGrid() {
    x.resize(kPoints);
    f00.assign(kPoints, 0.0);
    f11.assign(kPoints, 0.0);
    f01.assign(kPoints, 0.0);
    const double dx = (kHi - kLo) / (kPoints - 1);
    auto phi0 = [](double v) { return std::pow(std::numbers::pi, -0.25) * std::exp(-0.5 * v * v); };
    std::vector<double> p00(kPoints), p11(kPoints), p01(kPoints);
    for (int k = 0; k < kPoints; ++k) {
      x[k] = kLo + k * dx;
      const double a = phi0(x[k]), b = std::sqrt(2.0) * x[k] * a;
      p00[k] = a * a;
      p11[k] = b * b;
      p01[k] = a * b;
    }
    for (int k = 1; k < kPoints; ++k) {
      f00[k] = f00[k - 1] + 0.5 * dx * (p00[k] + p00[k - 1]);
      f11[k] = f11[k - 1] + 0.5 * dx * (p11[k] + p11[k - 1]);
      f01[k] = f01[k - 1] + 0.5 * dx * (p01[k] + p01[k - 1]);
    }
  }

  static const HermiteGrid &get() {
    static const HermiteGrid g;
    return g;
  }
};

}  // namespace detail

/// Draw `shots` joint quadrature samples from a state whose modes each hold
/// at most one photon; mode k is measured in q (bases[k] = 'q') or p.
inline Matrix sample_quadratures(const DenseState &state, const std::string &bases, std::int64_t shots,
                                 std::uint64_t seed) {
  const int n = state.n_qubits;
  if (n < 1 || n > 8) throw SizeError("sample_quadratures supports 1..8 modes");
  if (state.matrix.rows() != (1 << n) || state.matrix.cols() != (1 << n))
    throw SizeError("state exceeds the Fock cutoff of one photon per mode");
  if (static_cast<int>(bases.size()) != n) throw ShapeError("one basis letter per mode required");
  for (char b : bases)
    if (b != 'q' && b != 'p') throw ParameterError("bases must be 'q' or 'p'");
  const auto &g = detail::HermiteGrid::get();
  const int np = detail::HermiteGrid::kPoints;
  const double norm00 = g.f00.back(), norm11 = g.f11.back();
  Matrix out(shots, n);
  for (std::int64_t shot = 0; shot < shots; ++shot) {
    KeyedRng rng(seed, static_cast<std::uint64_t>(shot));
    CMatrix rho = state.matrix;
    for (int k = 0; k < n; ++k) {
      const int rest = n - 1 - k;
      const std::int64_t half = std::int64_t(1) << rest;
      // Reduced single-mode matrix of the leading mode.
      Complex r00 = rho.topLeftCorner(half, half).trace();
      Complex r11 = rho.bottomRightCorner(half, half).trace();
      Complex r01 = rho.topRightCorner(half, half).trace();
      const double tr = (r00 + r11).real();
      const double a = r00.real() / tr, b = r11.real() / tr;
      // Cross term 2 Re(r01 phi0 phi1*): phi1 is real for q and carries -i for p.
      const double c = bases[k] == 'q' ? 2.0 * r01.real() / tr : -2.0 * r01.imag() / tr;
      auto cdf = [&](int idx) { return (a * g.f00[idx] / norm00 + b * g.f11[idx] / norm11 + c * g.f01[idx] / norm00); };
      const double total = cdf(np - 1);
      const double u = rng.uniform() * total;
      int lo = 0, hi = np - 1;
      while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        (cdf(mid) < u ? lo : hi) = mid;
      }
      const double c0 = cdf(lo), c1 = cdf(hi);
      const double t = c1 > c0 ? (u - c0) / (c1 - c0) : 0.5;
      const double x = g.x[lo] + t * (g.x[hi] - g.x[lo]);
      out(shot, k) = x;
      if (rest == 0) break;
      // Condition the remaining modes on the outcome.
      const double p0 = std::pow(std::numbers::pi, -0.25) * std::exp(-0.5 * x * x);
      const Complex w0 = p0;
      const Complex w1 = bases[k] == 'q' ? Complex(std::sqrt(2.0) * x * p0, 0.0) : Complex(0.0, -std::sqrt(2.0) * x * p0);
      CMatrix next = w0 * std::conj(w0) * rho.topLeftCorner(half, half) +
                     w0 * std::conj(w1) * rho.topRightCorner(half, half) +
                     w1 * std::conj(w0) * rho.bottomLeftCorner(half, half) +
                     w1 * std::conj(w1) * rho.bottomRightCorner(half, half);
      rho = next / next.trace().real();
    }
  }
  return out;
}

}  // namespace mpotomo
