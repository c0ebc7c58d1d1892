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

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpotomo/moments.hpp"
#include "mpotomo/mpo.hpp"

namespace mpotomo {

enum class CorrBasis { Pauli, ZShifted };

inline const char *basis_name(CorrBasis b) { return b == CorrBasis::Pauli ? "pauli" : "z-shifted"; }

struct CorrWindow {
  int start = 1;
  std::vector<double> value;  // 4^L entries, base-4 code, first site most significant
  std::vector<double> se;
};

/// Local correlations of consecutive-site windows.
struct CorrelationSet {
  CorrBasis basis = CorrBasis::Pauli;
  int n_sites = 0;
  int window = 0;
  std::vector<CorrWindow> windows;
  double eta = 1.0;
  double eta_se = 0.0;
  std::vector<double> angles;
  bool independence_assumed = false;

  std::int64_t rows_per_window() const { return ipow(4, window); }

  /// Estimate of the correlation with `word` on sites first..first+len-1,
  /// combining every window that contains those sites by inverse-variance
  /// weighting (plain mean when all errors vanish).
  Estimate local(int first, const std::vector<int> &word) const {
    const int len = static_cast<int>(word.size());
    if (len > window) throw RangeError("word longer than the correlation window");
    double wsum = 0, vsum = 0, plain = 0;
    int count = 0;
    bool all_exact = true;
    for (const auto &w : windows) {
      if (w.start > first || w.start + window - 1 < first + len - 1) continue;
      std::int64_t code = 0;
      for (int k = 0; k < window; ++k) {
        const int site = w.start + k;
        int p = 0;
        if (site >= first && site < first + len) p = word[site - first];
        code = code * 4 + p;
      }
      const double v = w.value[code], s = w.se[code];
      if (s > 0) all_exact = false;
      const double sf = std::max(s, 1e-9);
      wsum += 1.0 / (sf * sf);
      vsum += v / (sf * sf);
      plain += v;
      ++count;
    }
    if (count == 0)
      throw CompletenessError("no window covers sites " + std::to_string(first) + ".." +
                                  std::to_string(first + len - 1),
                              {pauli_word_string(word_code(word, 4), len)});
    if (all_exact) return {plain / count, 0.0};
    return {vsum / wsum, std::sqrt(1.0 / wsum)};
  }
};

/// Correlation set computed directly from an MPO (exact, zero errors).
inline CorrelationSet exact_correlations(const Mpo &mpo, int L) {
  if (L < 1 || L > mpo.size()) throw RangeError("window length must be in [1, N]");
  CorrelationEvaluator ev(mpo);
  CorrelationSet c;
  c.basis = CorrBasis::Pauli;
  c.n_sites = mpo.size();
  c.window = L;
  for (int s = 1; s + L - 1 <= mpo.size(); ++s) {
    CorrWindow w;
    w.start = s;
    w.value = ev.window(s, L);
    w.se.assign(w.value.size(), 0.0);
    c.windows.push_back(std::move(w));
  }
  return c;
}

/// Apply per-site 4x4 maps (indexed by absolute site, 0-based) to every
/// window; errors propagate with squared coefficients. `extra_var` adds a
/// per-row variance term when provided.
inline CorrelationSet transform_sites(const CorrelationSet &in, const std::vector<Eigen::Matrix4d> &site_maps) {
  if (static_cast<int>(site_maps.size()) != in.n_sites) throw ShapeError("one map per site required");
  CorrelationSet out = in;
  for (auto &w : out.windows) {
    std::vector<Eigen::Matrix4d> maps, sq;
    for (int k = 0; k < in.window; ++k) {
      maps.push_back(site_maps[w.start - 1 + k]);
      sq.push_back(site_maps[w.start - 1 + k].cwiseAbs2());
    }
    std::vector<double> var(w.se.size());
    for (size_t r = 0; r < var.size(); ++r) var[r] = w.se[r] * w.se[r];
    w.value = transform_axes(w.value, maps);
    var = transform_axes(var, sq);
    for (size_t r = 0; r < var.size(); ++r) w.se[r] = std::sqrt(std::max(0.0, var[r]));
  }
  return out;
}

/// Quadrature moments -> Z-shifted Pauli correlations (I, X, Y, 2I - Z).
inline CorrelationSet moments_to_zshifted(const MomentTable &t) {
  const int L = t.window;
  const double r2 = std::sqrt(2.0);
  CorrelationSet c;
  c.basis = CorrBasis::ZShifted;
  c.n_sites = t.n_sites;
  c.window = L;
  c.independence_assumed = true;
  std::vector<std::string> missing;
  const std::int64_t nr = ipow(4, L);
  for (const auto &mw : t.windows) {
    CorrWindow w;
    w.start = mw.start;
    w.value.assign(nr, 0.0);
    w.se.assign(nr, 0.0);
    for (std::int64_t code = 0; code < nr; ++code) {
      const auto r = word_digits(code, L, 4);
      std::vector<int> r0, r3;
      double scale = 1.0;
      std::vector<int> base(L);
      for (int k = 0; k < L; ++k) {
        switch (r[k]) {
          case 0: r0.push_back(k); base[k] = Q0; break;
          case 1: base[k] = Q1; scale *= r2; break;
          case 2: base[k] = P1; scale *= r2; break;
          case 3: r3.push_back(k); base[k] = Q2; break;
        }
      }
      // R3 = q^2 + p^2 needs both rows; R0 averages whichever of Q0/P0 exist.
      double value = 0, var = 0;
      bool ok = true;
      for (int c3 = 0; c3 < (1 << r3.size()) && ok; ++c3) {
        std::vector<int> word = base;
        for (size_t j = 0; j < r3.size(); ++j) word[r3[j]] = ((c3 >> j) & 1) ? P2 : Q2;
        double sum = 0, vs = 0;
        int avail = 0;
        for (int c0 = 0; c0 < (1 << r0.size()); ++c0) {
          for (size_t j = 0; j < r0.size(); ++j) word[r0[j]] = ((c0 >> j) & 1) ? P0 : Q0;
          const std::int64_t row = word_code(word, 6);
          if (!mw.present[row]) continue;
          sum += mw.value[row];
          vs += mw.se[row] * mw.se[row];
          ++avail;
        }
        if (avail == 0) {
          for (size_t j = 0; j < r0.size(); ++j) word[r0[j]] = Q0;
          missing.push_back("window " + std::to_string(mw.start) + " " + moment_word_string(word_code(word, 6), L));
          ok = false;
          break;
        }
        value += sum / avail;
        var += vs / (double(avail) * avail);
      }
      if (!ok) continue;
      w.value[code] = scale * value;
      w.se[code] = scale * std::sqrt(var);
    }
    c.windows.push_back(std::move(w));
  }
  if (!missing.empty()) {
    std::string what = std::to_string(missing.size()) + " moment rows missing, first: " + missing.front();
    throw CompletenessError(what, missing);
  }
  return c;
}

/// Inverse loss channel in the Z-shifted basis.
inline Eigen::Matrix4d zshifted_loss_inverse(double eta) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  m(0, 0) = 1;
  m(1, 1) = m(2, 2) = 1.0 / std::sqrt(eta);
  m(3, 0) = -(1.0 - eta) / eta;
  m(3, 3) = 1.0 / eta;
  return m;
}

/// Loss channel with efficiency eta in the Z-shifted basis.
inline Eigen::Matrix4d zshifted_loss(double eta) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  m(0, 0) = 1;
  m(1, 1) = m(2, 2) = std::sqrt(eta);
  m(3, 0) = 1.0 - eta;
  m(3, 3) = eta;
  return m;
}

/// F: Z-shifted <-> Pauli, an involution.
inline Eigen::Matrix4d f_matrix() {
  Eigen::Matrix4d f = Eigen::Matrix4d::Identity();
  f(3, 0) = 2;
  f(3, 3) = -1;
  return f;
}

inline CorrelationSet correct_inefficiency(const CorrelationSet &in, double eta, double eta_se = 0.0) {
  if (in.basis != CorrBasis::ZShifted) throw StateError("inefficiency correction expects z-shifted data");
  check_eta(eta);
  if (eta_se < 0) throw ParameterError("eta_se must be >= 0");
  CorrelationSet out = transform_sites(in, std::vector<Eigen::Matrix4d>(in.n_sites, zshifted_loss_inverse(eta)));
  out.eta = eta;
  out.eta_se = eta_se;
  if (eta_se > 0) {
    // d/d eta of the inverse map, applied one axis at a time.
    Eigen::Matrix4d d = Eigen::Matrix4d::Zero();
    d(1, 1) = d(2, 2) = -0.5 * std::pow(eta, -1.5);
    d(3, 0) = 1.0 / (eta * eta);
    d(3, 3) = -1.0 / (eta * eta);
    const Eigen::Matrix4d inv = zshifted_loss_inverse(eta);
    for (size_t w = 0; w < out.windows.size(); ++w) {
      std::vector<double> deriv(out.windows[w].value.size(), 0.0);
      for (int k = 0; k < in.window; ++k) {
        std::vector<Eigen::Matrix4d> maps(in.window, inv);
        maps[k] = d;
        const auto part = transform_axes(in.windows[w].value, maps);
        for (size_t r = 0; r < deriv.size(); ++r) deriv[r] += part[r];
      }
      auto &se = out.windows[w].se;
      for (size_t r = 0; r < se.size(); ++r) se[r] = std::sqrt(se[r] * se[r] + deriv[r] * deriv[r] * eta_se * eta_se);
    }
  }
  return out;
}

inline CorrelationSet zshifted_to_pauli(const CorrelationSet &in, bool ignore_tag = false) {
  if (!ignore_tag && in.basis != CorrBasis::ZShifted) throw StateError("expected z-shifted correlations");
  CorrelationSet out = transform_sites(in, std::vector<Eigen::Matrix4d>(in.n_sites, f_matrix()));
  out.basis = CorrBasis::Pauli;
  out.independence_assumed = true;
  return out;
}

inline CorrelationSet pauli_to_zshifted(const CorrelationSet &in, bool ignore_tag = false) {
  if (!ignore_tag && in.basis != CorrBasis::Pauli) throw StateError("expected Pauli correlations");
  CorrelationSet out = transform_sites(in, std::vector<Eigen::Matrix4d>(in.n_sites, f_matrix()));
  out.basis = CorrBasis::ZShifted;
  return out;
}

/// Rotate each site about Z by angles[s]: (x, y) -> (c x - s y, s x + c y).
inline CorrelationSet rotate_sites(const CorrelationSet &in, const std::vector<double> &angles) {
  if (static_cast<int>(angles.size()) != in.n_sites) throw ShapeError("one angle per site required");
  std::vector<Eigen::Matrix4d> maps;
  for (double a : angles) maps.push_back(ProcessMatrix::z_rotation(a).matrix());
  return transform_sites(in, maps);
}

struct AlignedCorrelations {
  CorrelationSet corrs;
  std::vector<double> angles;  // applied rotations
};

/// Stabilizer-pattern word centred on site s (1-based) with `centre` at s.
inline std::pair<int, std::vector<int>> stabilizer_pattern(int s, int n, int centre) {
  if (n < 2) throw RangeError("need at least two sites");
  if (s == 1) return {1, {centre, 3}};
  if (s == n) return {n - 1, {3, centre}};
  return {s - 1, {3, centre, 3}};
}

/// Remove per-site Z rotations so that every stabilizer pattern has a
/// vanishing Y component and a nonnegative X component. Z-shifted input is
/// rotated in place; Z rotations leave the R0 and R3 components alone.
inline AlignedCorrelations align_phases(const CorrelationSet &input) {
  if (input.basis == CorrBasis::ZShifted) {
    AlignedCorrelations p = align_phases(zshifted_to_pauli(input));
    AlignedCorrelations out{rotate_sites(input, p.angles), p.angles};
    out.corrs.angles = p.angles;
    return out;
  }
  if (input.basis != CorrBasis::Pauli) throw StateError("phase alignment expects Pauli or Z-shifted correlations");
  const CorrelationSet &in = input;
  const int n = in.n_sites;
  std::vector<double> angles(n, 0.0);
  for (int s = 1; s <= n; ++s) {
    auto [fx, wx] = stabilizer_pattern(s, n, 1);
    auto [fy, wy] = stabilizer_pattern(s, n, 2);
    const Estimate x = in.local(fx, wx), y = in.local(fy, wy);
    if (std::abs(x.value) <= 5.0 * std::max(x.se, 1e-9) && std::abs(y.value) <= 5.0 * std::max(y.se, 1e-9))
      throw UndefinedPhaseError("phase of site " + std::to_string(s) + " undefined: stabilizer components " +
                                std::to_string(x.value) + ", " + std::to_string(y.value) + " below 5 SE");
    angles[s - 1] = -std::atan2(y.value, x.value);
  }
  AlignedCorrelations out{rotate_sites(in, angles), angles};
  out.corrs.angles = angles;
  return out;
}

// --- I/O ---------------------------------------------------------------------

inline std::string corr_word_string(std::int64_t code, int L, CorrBasis b) {
  if (b == CorrBasis::Pauli) return pauli_word_string(code, L);
  std::string s;
  for (int d : word_digits(code, L, 4)) s += "R" + std::to_string(d);
  return s;
}

inline void write_correlation_csv(std::ostream &os, const CorrelationSet &c) {
  os.precision(17);
  os << "window_start,word,value,se\n";
  for (const auto &w : c.windows)
    for (std::int64_t r = 0; r < c.rows_per_window(); ++r)
      os << w.start << "," << corr_word_string(r, c.window, c.basis) << "," << w.value[r] << "," << w.se[r] << "\n";
}

inline nlohmann::json correlation_metadata(const CorrelationSet &c) {
  return {{"basis", basis_name(c.basis)}, {"n_sites", c.n_sites},        {"window", c.window},
          {"eta", c.eta},                 {"eta_se", c.eta_se},           {"angles", c.angles},
          {"independence_assumed", c.independence_assumed}};
}

inline CorrelationSet read_correlation_csv(std::istream &is, const nlohmann::json &meta) {
  CorrelationSet c;
  try {
    const std::string b = meta.at("basis").get<std::string>();
    if (b == "pauli") c.basis = CorrBasis::Pauli;
    else if (b == "z-shifted") c.basis = CorrBasis::ZShifted;
    else throw ValidationError("unknown basis tag " + b);
    c.n_sites = meta.at("n_sites").get<int>();
    c.window = meta.at("window").get<int>();
    c.eta = meta.value("eta", 1.0);
    c.eta_se = meta.value("eta_se", 0.0);
    c.angles = meta.value("angles", std::vector<double>{});
    c.independence_assumed = meta.value("independence_assumed", false);
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("correlation metadata: ") + e.what());
  }
  for (int s = 1; s + c.window - 1 <= c.n_sites; ++s) {
    CorrWindow w;
    w.start = s;
    w.value.assign(c.rows_per_window(), std::nan(""));
    w.se.assign(c.rows_per_window(), 0.0);
    c.windows.push_back(std::move(w));
  }
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line.rfind("window_start", 0) == 0) continue;
    std::stringstream ss(line);
    std::string f[4];
    for (auto &x : f)
      if (!std::getline(ss, x, ',')) throw ValidationError("correlation CSV row needs 4 columns");
    int start = 0;
    std::vector<int> digits;
    double value = 0, se = 0;
    try {
      start = std::stoi(f[0]);
      value = std::stod(f[2]);
      se = std::stod(f[3]);
    } catch (const std::exception &) {
      throw ValidationError("unparsable number in correlation CSV row: " + line);
    }
    if (c.basis == CorrBasis::Pauli) {
      try {
        for (char ch : f[1]) digits.push_back(pauli_from_letter(ch));
      } catch (const ParameterError &) {
        throw ValidationError("bad Pauli word: " + f[1]);
      }
    } else {
      if (f[1].size() % 2 != 0) throw ValidationError("bad z-shifted word: " + f[1]);
      for (size_t k = 0; k + 1 < f[1].size(); k += 2) {
        if (f[1][k] != 'R' || f[1][k + 1] < '0' || f[1][k + 1] > '3')
          throw ValidationError("bad z-shifted word: " + f[1]);
        digits.push_back(f[1][k + 1] - '0');
      }
    }
    if (start < 1 || start > static_cast<int>(c.windows.size()) || static_cast<int>(digits.size()) != c.window)
      throw ValidationError("correlation CSV row out of range: " + line);
    if (!std::isfinite(value) || !std::isfinite(se) || se < 0)
      throw DataError("non-finite value or negative se in correlation CSV row: " + line);
    const std::int64_t code = word_code(digits, 4);
    c.windows[start - 1].value[code] = value;
    c.windows[start - 1].se[code] = se;
  }
  for (const auto &w : c.windows)
    for (std::int64_t r = 0; r < c.rows_per_window(); ++r)
      if (std::isnan(w.value[r]))
        throw CompletenessError("correlation CSV incomplete", {corr_word_string(r, c.window, c.basis)});
  return c;
}

}  // namespace mpotomo
