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

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpotomo/mpo.hpp"

namespace mpotomo {

/// Pure-state chain with physical dimension 2: sites[s][x] is D_left x D_right.
struct Mps {
  std::vector<std::array<Matrix, 2>> sites;
  int size() const { return static_cast<int>(sites.size()); }
};

inline CVector mps_to_vector(const Mps &m) {
  const int n = m.size();
  if (n > DenseState::kMaxQubits) throw SizeError("state vector too large");
  const std::int64_t dim = std::int64_t(1) << n;
  CVector psi(dim);
  for (std::int64_t x = 0; x < dim; ++x) {
    RowVector v = RowVector::Ones(1);
    for (int s = 0; s < n; ++s) v = v * m.sites[s][(x >> (n - 1 - s)) & 1];
    psi(x) = v(0);
  }
  return psi;
}

inline Mps ideal_cluster_mps(int n) {
  if (n < 2) throw RangeError("cluster MPS needs n >= 2");
  const double h = 1.0 / std::sqrt(2.0);
  Mps m;
  m.sites.resize(n);
  m.sites[0][0] = Matrix(1, 2);
  m.sites[0][0] << h, 0;
  m.sites[0][1] = Matrix(1, 2);
  m.sites[0][1] << 0, h;
  for (int s = 1; s + 1 < n; ++s) {
    m.sites[s][0] = Matrix(2, 2);
    m.sites[s][0] << h, 0, h, 0;
    m.sites[s][1] = Matrix(2, 2);
    m.sites[s][1] << 0, h, 0, -h;
  }
  m.sites[n - 1][0] = Matrix(2, 1);
  m.sites[n - 1][0] << h, h;
  m.sites[n - 1][1] = Matrix(2, 1);
  m.sites[n - 1][1] << h, -h;
  return m;
}

/// Bond-dimension-4 Pauli-basis MPO of the linear cluster state.
inline Mpo ideal_cluster_mpo(int n) {
  if (n < 3) throw RangeError("cluster MPO needs n >= 3");
  std::vector<SiteTensor> sites;
  SiteTensor first(1, 4);
  first(0, 0, 0) = 1;
  first(0, 1, 1) = 1;
  first(0, 2, 2) = -1;
  first(0, 3, 3) = 1;
  sites.push_back(first);
  for (int s = 1; s + 1 < n; ++s) {
    SiteTensor t(4, 4);
    t(0, 0, 0) = 1;
    t(1, 0, 3) = 1;
    t(2, 1, 2) = -1;
    t(3, 1, 1) = 1;
    t(2, 2, 1) = -1;
    t(3, 2, 2) = -1;
    t(0, 3, 3) = 1;
    t(1, 3, 0) = 1;
    sites.push_back(t);
  }
  SiteTensor last(4, 1);
  last(0, 0, 0) = 1;
  last(1, 3, 0) = 1;
  last(2, 2, 0) = -1;
  last(3, 1, 0) = 1;
  sites.push_back(last);
  return Mpo(std::move(sites));
}

/// Product state from per-site Pauli coefficient vectors (1, x, y, z).
inline Mpo product_mpo(const std::vector<Eigen::Vector4d> &bloch) {
  std::vector<SiteTensor> sites;
  for (const auto &b : bloch) {
    SiteTensor t(1, 1);
    for (int i = 0; i < 4; ++i) t(0, i, 0) = b[i];
    sites.push_back(t);
  }
  return Mpo(std::move(sites));
}

struct StabilizerSet {
  int n_qubits = 0;
  std::vector<PauliWord> words;
};

/// S_1 = X1 Z2, S_s = Z_{s-1} X_s Z_{s+1}, S_N = Z_{N-1} X_N.
inline StabilizerSet cluster_stabilizers(int n) {
  if (n < 2) throw RangeError("stabilizers need n >= 2");
  StabilizerSet st;
  st.n_qubits = n;
  st.words.push_back(PauliWord({1, 3}, 1));
  for (int s = 2; s < n; ++s) st.words.push_back(PauliWord({3, 1, 3}, s - 1));
  st.words.push_back(PauliWord({3, 1}, n - 1));
  return st;
}

inline std::vector<double> stabilizer_values(const Mpo &m) {
  CorrelationEvaluator ev(m);
  std::vector<double> v;
  for (const auto &w : cluster_stabilizers(m.size()).words) v.push_back(ev(w));
  return v;
}

/// Mean photon number per site, (1 - <Z>)/2.
inline std::vector<double> mean_excitations(const Mpo &m) {
  CorrelationEvaluator ev(m);
  std::vector<double> v;
  for (int s = 1; s <= m.size(); ++s) v.push_back(0.5 * (1.0 - ev(PauliWord({3}, s))));
  return v;
}

/// Per-site loss and dephasing probabilities. Dephasing eps_pd corresponds
/// to a phase flip with probability eps_pd / 2.
struct ErrorModel {
  std::vector<double> eps_ad;
  std::vector<double> eps_pd;

  static ErrorModel uniform(int n, double ad, double pd) {
    ErrorModel m{std::vector<double>(n, ad), std::vector<double>(n, pd)};
    m.validate();
    return m;
  }
  int size() const { return static_cast<int>(eps_ad.size()); }
  std::vector<double> phase_flip() const {
    std::vector<double> p;
    for (double e : eps_pd) p.push_back(0.5 * e);
    return p;
  }
  void validate() const {
    if (eps_ad.size() != eps_pd.size()) throw ShapeError("eps_ad and eps_pd lengths differ");
    for (double e : eps_ad)
      if (!(e >= 0.0 && e <= 1.0)) throw ParameterError("eps_ad outside [0,1]");
    for (double e : eps_pd)
      if (!(e >= 0.0 && e <= 1.0)) throw ParameterError("eps_pd outside [0,1]");
  }
  std::vector<ProcessMatrix> channels() const {
    std::vector<ProcessMatrix> c;
    for (int s = 0; s < size(); ++s)
      c.push_back(ProcessMatrix::dephasing(eps_pd[s]) * ProcessMatrix::amplitude_damping(eps_ad[s]));
    return c;
  }
};

inline nlohmann::json error_model_to_json(const ErrorModel &m) {
  return {{"eps_ad", m.eps_ad}, {"eps_pd", m.eps_pd}, {"phase_flip", m.phase_flip()}};
}

inline ErrorModel error_model_from_json(const nlohmann::json &j) {
  ErrorModel m;
  try {
    m.eps_ad = j.at("eps_ad").get<std::vector<double>>();
    m.eps_pd = j.at("eps_pd").get<std::vector<double>>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("malformed error model: ") + e.what());
  }
  m.validate();
  return m;
}

inline Mpo noisy_cluster_model(int n, const ErrorModel &model) {
  model.validate();
  if (model.size() != n)
    throw ShapeError("error model has " + std::to_string(model.size()) + " sites, chain has " +
                     std::to_string(n));
  return apply_local_errors(ideal_cluster_mpo(n), model.channels());
}

/// prod_odd (1+S)/2 + prod_even (1+S)/2 - 1. Values may exceed [-1,1] by
/// up to 3 standard errors (or 1e-9 when no errors are given).
inline double stabilizer_fidelity_bound(const std::vector<double> &values,
                                        const std::vector<double> &se = {}) {
  if (values.empty()) throw ParameterError("no stabilizer values");
  if (!se.empty() && se.size() != values.size()) throw ShapeError("se length mismatch");
  double odd = 1.0, even = 1.0;
  for (size_t k = 0; k < values.size(); ++k) {
    const double v = values[k];
    const double tol = se.empty() ? 1e-9 : std::max(3.0 * se[k], 1e-9);
    if (!std::isfinite(v) || v < -1.0 - tol || v > 1.0 + tol)
      throw DataError("stabilizer " + std::to_string(k + 1) + " = " + std::to_string(v) +
                      " outside [-1, 1]");
    ((k % 2 == 0) ? odd : even) *= 0.5 * (1.0 + v);
  }
  return odd + even - 1.0;
}

/// Gradient of stabilizer_fidelity_bound with respect to each value.
inline std::vector<double> stabilizer_fidelity_bound_gradient(const std::vector<double> &values) {
  std::vector<double> g(values.size());
  for (size_t k = 0; k < values.size(); ++k) {
    double p = 0.5;
    for (size_t j = k % 2; j < values.size(); j += 2)
      if (j != k) p *= 0.5 * (1.0 + values[j]);
    g[k] = p;
  }
  return g;
}

struct ConcurrenceBound {
  double raw = 0.0;
  double value = 0.0;  // clamped at zero
};

/// 1 - (k+1)(1 - min S).
inline ConcurrenceBound stabilizer_concurrence_bound(const std::vector<double> &values, int k) {
  if (k < 1) throw ParameterError("separation k must be >= 1");
  if (values.empty()) throw ParameterError("no stabilizer values");
  const double smin = *std::min_element(values.begin(), values.end());
  ConcurrenceBound b;
  b.raw = 1.0 - (k + 1) * (1.0 - smin);
  b.value = std::max(0.0, b.raw);
  return b;
}

/// Nested least-squares identification of loss then dephasing.
/// Residuals are weighted by the reciprocal standard errors.
inline ErrorModel fit_error_model(const std::vector<double> &excitations,
                                  const std::vector<double> &excitation_se,
                                  const std::vector<double> &stabilizers,
                                  const std::vector<double> &stabilizer_se, bool uniform,
                                  int max_iterations = 100) {
  const int n = static_cast<int>(excitations.size());
  if (n < 3) throw ParameterError("error model fit needs at least 3 sites");
  if (static_cast<int>(stabilizers.size()) != n) throw ShapeError("stabilizer count mismatch");
  auto weights = [](const std::vector<double> &se, int n) {
    std::vector<double> w(n, 1.0);
    if (se.empty()) return w;
    if (static_cast<int>(se.size()) != n) throw ShapeError("se length mismatch");
    for (int k = 0; k < n; ++k) {
      const double s = std::max(se[k], 1e-9);
      w[k] = 1.0 / (s * s);
    }
    return w;
  };
  const auto wx = weights(excitation_se, n);
  const auto ws = weights(stabilizer_se, n);
  auto clamp01 = [](double x) { return std::clamp(x, 0.0, 1.0); };

  ErrorModel m{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  // excitation = (1 - eps)/2 is linear in eps.
  if (uniform) {
    double num = 0.0, den = 0.0;
    for (int k = 0; k < n; ++k) {
      num += wx[k] * (1.0 - 2.0 * excitations[k]);
      den += wx[k];
    }
    std::fill(m.eps_ad.begin(), m.eps_ad.end(), clamp01(num / den));
  } else {
    for (int k = 0; k < n; ++k) m.eps_ad[k] = clamp01(1.0 - 2.0 * excitations[k]);
  }

  auto model_stab = [&](const std::vector<double> &pd) {
    ErrorModel t{m.eps_ad, pd};
    return stabilizer_values(noisy_cluster_model(n, t));
  };
  // Gauss-Newton on the dephasing parameters with forward-difference slopes.
  std::vector<double> pd(n, 0.0);
  const double h = 1e-7;
  for (int it = 0; it < max_iterations; ++it) {
    const auto s0 = model_stab(pd);
    double max_step = 0.0;
    if (uniform) {
      std::vector<double> p1(n, std::min(pd[0] + h, 1.0));
      const double dh = p1[0] - pd[0];
      const auto s1 = model_stab(p1);
      double num = 0.0, den = 0.0;
      for (int k = 0; k < n; ++k) {
        const double d = (s1[k] - s0[k]) / dh;
        num += ws[k] * d * (stabilizers[k] - s0[k]);
        den += ws[k] * d * d;
      }
      const double step = den > 0 ? num / den : 0.0;
      const double next = clamp01(pd[0] + step);
      max_step = std::abs(next - pd[0]);
      std::fill(pd.begin(), pd.end(), next);
    } else {
      // Stabilizer s depends on eps_pd only through its centre site.
      std::vector<double> p1 = pd;
      for (int k = 0; k < n; ++k) p1[k] = std::min(pd[k] + h, 1.0);
      const auto s1 = model_stab(p1);
      for (int k = 0; k < n; ++k) {
        const double dh = p1[k] - pd[k];
        const double d = (s1[k] - s0[k]) / dh;
        const double step = d != 0.0 ? (stabilizers[k] - s0[k]) / d : 0.0;
        const double next = clamp01(pd[k] + step);
        max_step = std::max(max_step, std::abs(next - pd[k]));
        pd[k] = next;
      }
    }
    if (max_step < 1e-13) {
      m.eps_pd = pd;
      return m;
    }
  }
  std::vector<double> last = m.eps_ad;
  last.insert(last.end(), pd.begin(), pd.end());
  throw ConvergenceError("error-model fit did not converge", last);
}

}  // namespace mpotomo
