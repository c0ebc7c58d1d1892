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
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "json.hpp"
#include "mpotomo/fit.hpp"
#include "mpotomo/mpo.hpp"
#include "mpotomo/parallel.hpp"
#include "mpotomo/pauli.hpp"
#include "mpotomo/rng.hpp"

namespace mpotomo {

/// Sites r < r2 stay unmeasured; every other site is projected along a
/// Bloch vector.
struct MeasurementPlan {
  int r = 1, r2 = 2;
  std::vector<Eigen::Vector3d> axes;  // one per site, ignored at r and r2

  int n_sites() const { return static_cast<int>(axes.size()); }

  void validate() const {
    const int n = n_sites();
    if (n < 2) throw SizeError("measurement plan needs at least two sites");
    if (!(1 <= r && r < r2 && r2 <= n)) throw RangeError("plan needs 1 <= r < r' <= N");
    for (int s = 1; s <= n; ++s) {
      if (s == r || s == r2) continue;
      const double nrm = axes[s - 1].norm();
      if (!axes[s - 1].allFinite() || std::abs(nrm - 1.0) > 1e-9)
        throw ParameterError("measurement axis at site " + std::to_string(s) + " is not a unit vector");
    }
  }

  std::vector<int> measured_sites() const {
    std::vector<int> v;
    for (int s = 1; s <= n_sites(); ++s)
      if (s != r && s != r2) v.push_back(s);
    return v;
  }
};

/// X between the pair, Z elsewhere.
inline MeasurementPlan paper_plan(int n, int r, int r2) {
  MeasurementPlan p;
  p.r = r;
  p.r2 = r2;
  p.axes.assign(n, Eigen::Vector3d(0, 0, 1));
  for (int s = r + 1; s < r2 && s <= n; ++s) p.axes[s - 1] = Eigen::Vector3d(1, 0, 0);
  p.validate();
  return p;
}

struct TwoQubitState {
  Eigen::Matrix4cd rho;  // normalized unless weight == 0
  double weight = 1.0;

  TwoQubitState() : rho(Eigen::Matrix4cd::Identity() / 4.0) {}
  TwoQubitState(const Eigen::Matrix4cd &m, double w = 1.0) : rho(m), weight(w) {
    if ((m - m.adjoint()).cwiseAbs().maxCoeff() > 1e-10) throw ValidationError("two-qubit state is not Hermitian");
  }
};

namespace detail {

/// sum_ij t(i,j) (P_i x P_j) / 4
inline Eigen::Matrix4cd two_qubit_from_coeffs(const Eigen::Matrix4d &t, bool transpose_second = false) {
  Eigen::Matrix4cd rho = Eigen::Matrix4cd::Zero();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      if (t(i, j) == 0.0) continue;
      const Eigen::Matrix2cd a = pauli_matrix(i);
      const Eigen::Matrix2cd b = transpose_second ? Eigen::Matrix2cd(pauli_matrix(j).transpose()) : pauli_matrix(j);
      for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y) rho.block<2, 2>(2 * x, 2 * y) += 0.25 * t(i, j) * a(x, y) * b;
    }
  return rho;
}

/// (rho^T2)_{2i+j,2k+l} = <il| rho |kj>
inline Eigen::Matrix4cd partial_transpose(const Eigen::Matrix4cd &rho) {
  Eigen::Matrix4cd out;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k)
        for (int l = 0; l < 2; ++l) out(2 * i + j, 2 * k + l) = rho(2 * i + l, 2 * k + j);
  return out;
}

inline double trace_norm_hermitian(const Eigen::Matrix4cd &m) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4cd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().sum();
}

struct RawConcurrence {
  double raw;
  bool positive;  // whether the input was positive semidefinite
};

/// Wootters construction. For PSD input the spin-flip singular values come
/// from W^T (Y x Y) W with rho = W W^dagger, which avoids square roots of
/// tiny eigenvalues; otherwise from sqrt of the eigenvalues of R.
inline RawConcurrence raw_concurrence(const Eigen::Matrix4cd &rho) {
  const Eigen::Matrix4cd h = 0.5 * (rho + rho.adjoint());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4cd> es(h);
  const double tr = std::abs(h.trace().real());
  Eigen::Matrix4cd yy = Eigen::Matrix4cd::Zero();
  yy(0, 3) = yy(3, 0) = -1.0;
  yy(1, 2) = yy(2, 1) = 1.0;
  std::array<double, 4> lam{};
  bool psd = es.eigenvalues().minCoeff() >= -1e-12 * std::max(tr, 1e-300);
  if (psd) {
    Eigen::Matrix4cd w = es.eigenvectors();
    for (int k = 0; k < 4; ++k) w.col(k) *= std::sqrt(std::max(es.eigenvalues()(k), 0.0));
    const Eigen::Matrix4cd tau = w.transpose() * yy * w;
    Eigen::JacobiSVD<Eigen::Matrix4cd> svd(tau);
    for (int k = 0; k < 4; ++k) lam[k] = svd.singularValues()(k);
  } else {
    const Eigen::Matrix4cd rr = h * yy * h.conjugate() * yy;
    Eigen::ComplexEigenSolver<Eigen::Matrix4cd> ce(rr, false);
    for (int k = 0; k < 4; ++k) lam[k] = std::sqrt(std::max(ce.eigenvalues()(k).real(), 0.0));
  }
  std::sort(lam.begin(), lam.end(), std::greater<>());
  return {lam[0] - lam[1] - lam[2] - lam[3], psd};
}

inline void check_normalized(const TwoQubitState &s) {
  const double tr = s.rho.trace().real();
  if (std::abs(tr - 1.0) > 1e-8) throw NormalizationError("state trace is " + std::to_string(tr) + ", expected 1");
}

}  // namespace detail

inline double negativity(const TwoQubitState &s) {
  detail::check_normalized(s);
  return 0.5 * (detail::trace_norm_hermitian(detail::partial_transpose(s.rho)) - 1.0);
}

inline double concurrence(const TwoQubitState &s) {
  detail::check_normalized(s);
  return std::max(0.0, detail::raw_concurrence(s.rho).raw);
}

enum class EntanglementMeasure { Negativity, Concurrence };

inline std::string measure_name(EntanglementMeasure m) {
  return m == EntanglementMeasure::Negativity ? "negativity" : "concurrence";
}

inline EntanglementMeasure measure_from_name(const std::string &s) {
  if (s == "negativity") return EntanglementMeasure::Negativity;
  if (s == "concurrence") return EntanglementMeasure::Concurrence;
  throw ParameterError("unknown entanglement measure '" + s + "'");
}

namespace detail {

inline void check_plan(const Mpo &m, const MeasurementPlan &p) {
  p.validate();
  if (p.n_sites() != m.size()) throw ShapeError("plan and MPO disagree on the number of sites");
}

/// Branch-level contraction: projected site matrices and pair tensors.
struct Branch {
  std::vector<Matrix> proj;     // per site; unused at the pair
  Eigen::Matrix4d t;            // pair coefficients, t(0,0) = weight
};

inline void projected_sites(const Mpo &m, const MeasurementPlan &p, const std::vector<int> &signs,
                            std::vector<Matrix> &proj) {
  proj.resize(m.size());
  int k = 0;
  for (int s = 1; s <= m.size(); ++s) {
    if (s == p.r || s == p.r2) continue;
    const double sg = signs[k++];
    const Eigen::Vector3d &a = p.axes[s - 1];
    proj[s - 1] = 0.5 * m.site(s).combine(Eigen::Vector4d(1.0, sg * a(0), sg * a(1), sg * a(2)));
  }
}

inline Eigen::Matrix4d pair_coefficients(const Mpo &m, const MeasurementPlan &p, const std::vector<Matrix> &proj) {
  RowVector left = RowVector::Ones(1);
  for (int s = 1; s < p.r; ++s) left = left * proj[s - 1];
  Matrix mid = Matrix::Identity(m.site(p.r).right_dim(), m.site(p.r).right_dim());
  for (int s = p.r + 1; s < p.r2; ++s) mid = mid * proj[s - 1];
  Vector right = Vector::Ones(1);
  for (int s = m.size(); s > p.r2; --s) right = proj[s - 1] * right;
  Eigen::Matrix4d t;
  for (int i = 0; i < 4; ++i) {
    const RowVector u = left * m.site(p.r)[i] * mid;
    for (int j = 0; j < 4; ++j) t(i, j) = u.dot(m.site(p.r2)[j] * right);
  }
  return t;
}

inline std::vector<int> branch_signs(std::uint64_t b, int count) {
  std::vector<int> s(count);
  for (int k = 0; k < count; ++k) s[k] = ((b >> (count - 1 - k)) & 1) ? -1 : 1;
  return s;
}

/// Measure applied to an unnormalized pair state; homogeneous of degree one.
struct BranchTerm {
  double value = 0.0;
  double raw = 0.0;  // pre-clamp value, differs only for concurrence
};

inline BranchTerm branch_term(const Eigen::Matrix4d &t, EntanglementMeasure meas) {
  if (meas == EntanglementMeasure::Negativity) {
    const double v = 0.5 * (trace_norm_hermitian(two_qubit_from_coeffs(t, true)) - t(0, 0));
    return {v, v};
  }
  const double raw = raw_concurrence(two_qubit_from_coeffs(t)).raw;
  return {std::max(0.0, raw), raw};
}

/// d(term)/d t_ij: the trace-norm derivative when the spectrum is simple,
/// symmetric differences otherwise (and always for concurrence).
inline Eigen::Matrix4d branch_term_gradient(const Eigen::Matrix4d &t, EntanglementMeasure meas) {
  Eigen::Matrix4d g = Eigen::Matrix4d::Zero();
  bool analytic = false;
  if (meas == EntanglementMeasure::Negativity) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4cd> es(two_qubit_from_coeffs(t, true));
    std::array<double, 4> sv{};
    for (int k = 0; k < 4; ++k) sv[k] = std::abs(es.eigenvalues()(k));
    std::sort(sv.begin(), sv.end());
    const double scale = std::max(std::abs(t(0, 0)), 1e-300);
    analytic = sv[0] > 1e-10 * scale;
    for (int k = 0; k + 1 < 4; ++k)
      if (sv[k + 1] - sv[k] < 1e-10 * scale) analytic = false;
    if (analytic) {
      Eigen::Vector4cd sgn;
      for (int k = 0; k < 4; ++k) sgn(k) = es.eigenvalues()(k) >= 0 ? 1.0 : -1.0;
      const Eigen::Matrix4cd S = es.eigenvectors() * sgn.asDiagonal() * es.eigenvectors().adjoint();
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          Eigen::Matrix4d e = Eigen::Matrix4d::Zero();
          e(i, j) = 1.0;
          g(i, j) = 0.5 * (S * two_qubit_from_coeffs(e, true)).trace().real();
        }
      g(0, 0) -= 0.5;
    }
  }
  if (!analytic) {
    const double h = 1e-6 * std::max(std::abs(t(0, 0)), 1e-12);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        Eigen::Matrix4d tp = t, tm = t;
        tp(i, j) += h;
        tm(i, j) -= h;
        g(i, j) = (branch_term(tp, meas).value - branch_term(tm, meas).value) / (2 * h);
      }
  }
  return g;
}

/// Accumulate d(sum_ij G_ij t_ij)/dA into grad for one branch.
inline void accumulate_branch_gradient(const Mpo &m, const MeasurementPlan &p, const std::vector<int> &signs,
                                       const std::vector<Matrix> &proj, const Eigen::Matrix4d &G, MpoTangent &grad) {
  const int n = m.size();
  // Left region prefixes and right region suffixes.
  std::vector<RowVector> lp(p.r);
  lp[0] = RowVector::Ones(1);
  for (int s = 1; s < p.r; ++s) lp[s] = lp[s - 1] * proj[s - 1];
  std::vector<Vector> rs(n - p.r2 + 1);  // rs[k] = product of sites r2+1+k..n
  rs[n - p.r2] = Vector::Ones(1);
  for (int s = n; s > p.r2; --s) rs[s - p.r2 - 1] = proj[s - 1] * rs[s - p.r2];
  const RowVector &left = lp[p.r - 1];
  const Vector &right = rs[0];

  const int nm = p.r2 - p.r - 1;
  // Middle: U_k (4 x D) rows u_i * prefix, W_k (D x 4) columns suffix * w_j.
  std::vector<Matrix> U(nm + 1), W(nm + 1);
  const int dr = m.site(p.r).right_dim();
  U[0].resize(4, dr);
  for (int i = 0; i < 4; ++i) U[0].row(i) = left * m.site(p.r)[i];
  for (int k = 0; k < nm; ++k) U[k + 1] = U[k] * proj[p.r + k];
  const int dl = m.site(p.r2).left_dim();
  W[nm].resize(dl, 4);
  for (int j = 0; j < 4; ++j) W[nm].col(j) = m.site(p.r2)[j] * right;
  for (int k = nm - 1; k >= 0; --k) W[k] = proj[p.r + k] * W[k + 1];

  auto add_proj = [&](int s, const Matrix &dM) {
    // proj = (A0 + sg * a.A)/2
    int k = 0;
    for (int q = 1; q < s; ++q)
      if (q != p.r && q != p.r2) ++k;
    const double sg = signs[k];
    const Eigen::Vector3d &a = p.axes[s - 1];
    grad[s - 1][0] += 0.5 * dM;
    for (int c = 0; c < 3; ++c)
      if (a(c) != 0.0) grad[s - 1][c + 1] += 0.5 * sg * a(c) * dM;
  };

  // Pair sites.
  const Matrix WG = W[0] * G.transpose();  // column i: sum_j G_ij (mid w_j)
  for (int i = 0; i < 4; ++i) grad[p.r - 1][i] += left.transpose() * WG.col(i).transpose();
  const Matrix UG = G.transpose() * U[nm];  // row j: sum_i G_ij u_i mid
  for (int j = 0; j < 4; ++j) grad[p.r2 - 1][j] += UG.row(j).transpose() * right.transpose();
  // Middle sites.
  for (int k = 0; k < nm; ++k) add_proj(p.r + 1 + k, U[k].transpose() * G * W[k + 1].transpose());
  // Left sites: right vector q = sum_i A_r^(i) WG.col(i).
  Vector q = Vector::Zero(m.site(p.r).left_dim());
  for (int i = 0; i < 4; ++i) q += m.site(p.r)[i] * WG.col(i);
  for (int s = p.r - 1; s >= 1; --s) {
    add_proj(s, lp[s - 1].transpose() * q.transpose());
    q = proj[s - 1] * q;
  }
  // Right sites: left vector h = sum_j UG.row(j) A_r2^(j).
  RowVector h = RowVector::Zero(m.site(p.r2).right_dim());
  for (int j = 0; j < 4; ++j) h += UG.row(j) * m.site(p.r2)[j];
  for (int s = p.r2 + 1; s <= n; ++s) {
    add_proj(s, h.transpose() * rs[s - p.r2].transpose());
    h = h * proj[s - 1];
  }
}

}  // namespace detail

/// Unnormalized pair state after the given outcomes (+1/-1 per measured
/// site, in site order). rho is normalized by the weight when it is nonzero.
inline TwoQubitState post_measurement_state(const Mpo &m, const MeasurementPlan &p, const std::vector<int> &outcomes) {
  detail::check_plan(m, p);
  if (static_cast<int>(outcomes.size()) != m.size() - 2) throw ShapeError("outcomes must have length N - 2");
  for (int o : outcomes)
    if (o != 1 && o != -1) throw ParameterError("outcomes must be +1 or -1");
  std::vector<Matrix> proj;
  detail::projected_sites(m, p, outcomes, proj);
  const Eigen::Matrix4d t = detail::pair_coefficients(m, p, proj);
  const Eigen::Matrix4cd rho = detail::two_qubit_from_coeffs(t);
  const double w = t(0, 0);
  TwoQubitState st(std::abs(w) > 1e-300 ? Eigen::Matrix4cd(rho / w) : rho, w);
  return st;
}

struct LeResult {
  std::pair<int, int> pair;
  EntanglementMeasure measure = EntanglementMeasure::Negativity;
  double value = 0.0;
  double se_parameter = 0.0;
  double se_sampling = 0.0;
  std::int64_t branches_evaluated = 0;
  double weight_sum = 0.0;
  int clamped_branches = 0;  // concurrence branches with negative raw value
  double most_negative_raw = 0.0;
  MpoTangent gradient;  // empty unless requested
};

struct LeOptions {
  bool gradient = false;
  const FitResult *fit = nullptr;  // when set, se_parameter is propagated
  int threads = 1;
};

constexpr int kMaxExactLeSites = 15;

namespace detail {

struct ChunkAcc {
  double value = 0.0, weight = 0.0, most_negative = 0.0;
  int clamped = 0;
  MpoTangent grad;
  std::vector<double> terms;
};

template <class BranchOf>
inline LeResult accumulate_branches(const Mpo &m, const MeasurementPlan &p, EntanglementMeasure meas,
                                    std::int64_t count, BranchOf branch_of, const LeOptions &opt, bool keep_terms,
                                    std::vector<double> *terms_out) {
  const bool need_grad = opt.gradient || opt.fit;
  const std::int64_t chunks = std::min<std::int64_t>(count, 64);
  std::vector<ChunkAcc> acc(chunks);
  const int nmeas = m.size() - 2;
  parallel_for(chunks, opt.threads, [&](std::int64_t c) {
    ChunkAcc &a = acc[c];
    if (need_grad) a.grad = zero_tangent(m);
    std::vector<Matrix> proj;
    const std::int64_t lo = count * c / chunks, hi = count * (c + 1) / chunks;
    for (std::int64_t k = lo; k < hi; ++k) {
      const auto signs = branch_signs(branch_of(k), nmeas);
      projected_sites(m, p, signs, proj);
      const Eigen::Matrix4d t = pair_coefficients(m, p, proj);
      const BranchTerm bt = branch_term(t, meas);
      a.value += bt.value;
      a.weight += t(0, 0);
      if (bt.raw < 0 && meas == EntanglementMeasure::Concurrence) {
        ++a.clamped;
        a.most_negative = std::min(a.most_negative, bt.raw);
      }
      if (keep_terms) a.terms.push_back(bt.value);
      if (need_grad) accumulate_branch_gradient(m, p, signs, proj, branch_term_gradient(t, meas), a.grad);
    }
  });
  LeResult r;
  r.pair = {p.r, p.r2};
  r.measure = meas;
  r.branches_evaluated = count;
  if (need_grad) r.gradient = zero_tangent(m);
  for (auto &a : acc) {
    r.value += a.value;
    r.weight_sum += a.weight;
    r.clamped_branches += a.clamped;
    r.most_negative_raw = std::min(r.most_negative_raw, a.most_negative);
    if (need_grad)
      for (int s = 0; s < m.size(); ++s)
        for (int i = 0; i < 4; ++i) r.gradient[s][i] += a.grad[s][i];
    if (terms_out) terms_out->insert(terms_out->end(), a.terms.begin(), a.terms.end());
  }
  return r;
}

}  // namespace detail

/// Exact sum over all 2^(N-2) outcome branches of the measure applied to
/// the unnormalized pair states.
inline LeResult localizable_entanglement(const Mpo &m, const MeasurementPlan &p, EntanglementMeasure meas,
                                         const LeOptions &opt = {}) {
  detail::check_plan(m, p);
  if (m.size() > kMaxExactLeSites)
    throw SizeError("exact enumeration is limited to " + std::to_string(kMaxExactLeSites) +
                    " sites; use le_subset_estimate for longer chains");
  const std::int64_t count = std::int64_t{1} << (m.size() - 2);
  LeResult r = detail::accumulate_branches(
      m, p, meas, count, [](std::int64_t k) { return static_cast<std::uint64_t>(k); }, opt, false, nullptr);
  if (opt.fit) r.se_parameter = propagate_covariance(*opt.fit, r.gradient);
  if (!opt.gradient) r.gradient.clear();
  return r;
}

/// Distinct uniform sample of `k` values from [0, n), sorted (Floyd).
inline std::vector<std::uint64_t> sample_without_replacement(std::uint64_t n, std::uint64_t k, std::uint64_t seed) {
  if (k > n) throw ParameterError("cannot draw more samples than the population");
  KeyedRng rng(seed, 0x5eed);
  std::unordered_set<std::uint64_t> chosen;
  chosen.reserve(k * 2);
  for (std::uint64_t j = n - k; j < n; ++j) {
    const std::uint64_t t = rng.below(j + 1);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  std::vector<std::uint64_t> v(chosen.begin(), chosen.end());
  std::sort(v.begin(), v.end());
  return v;
}

/// Scaled sum over a random subset of branches. se_sampling includes the
/// finite-population factor, so a full enumeration has zero sampling SE.
inline LeResult le_subset_estimate(const Mpo &m, const MeasurementPlan &p, EntanglementMeasure meas,
                                   std::int64_t samples, std::uint64_t seed, const LeOptions &opt = {}) {
  detail::check_plan(m, p);
  if (m.size() - 2 > 62) throw SizeError("chain too long for branch indexing");
  const std::uint64_t total = std::uint64_t{1} << (m.size() - 2);
  if (samples < 1 || static_cast<std::uint64_t>(samples) > total)
    throw ParameterError("samples must lie in [1, 2^(N-2)]");
  const auto idx = sample_without_replacement(total, static_cast<std::uint64_t>(samples), seed);
  std::vector<double> terms;
  LeResult r = detail::accumulate_branches(
      m, p, meas, samples, [&](std::int64_t k) { return idx[k]; }, opt, true, &terms);
  const double scale = static_cast<double>(total) / static_cast<double>(samples);
  r.value *= scale;
  r.weight_sum *= scale;
  for (auto &g : r.gradient)
    for (int i = 0; i < 4; ++i) g[i] *= scale;
  if (samples > 1) {
    double mean = 0.0;
    for (double t : terms) mean += t;
    mean /= samples;
    double var = 0.0;
    for (double t : terms) var += (t - mean) * (t - mean);
    var /= (samples - 1);
    const double fpc = 1.0 - static_cast<double>(samples) / static_cast<double>(total);
    r.se_sampling = static_cast<double>(total) * std::sqrt(std::max(fpc, 0.0) * var / samples);
  }
  if (opt.fit) r.se_parameter = propagate_covariance(*opt.fit, r.gradient);
  if (!opt.gradient) r.gradient.clear();
  return r;
}

inline nlohmann::json le_report_json(const LeResult &r) {
  return {{"pair", {r.pair.first, r.pair.second}},
          {"measure", measure_name(r.measure)},
          {"value", r.value},
          {"se_parameter", r.se_parameter},
          {"se_sampling", r.se_sampling},
          {"branches_evaluated", r.branches_evaluated},
          {"clamped_branches", r.clamped_branches},
          {"most_negative_raw", r.most_negative_raw}};
}

/// Fidelity to a pure target with its propagated uncertainty.
inline Estimate fidelity_estimate(const FitResult &fit, const Mpo &target) {
  const double f = mpo_fidelity(fit.mpo, target);
  return {f, propagate_covariance(fit, fidelity_gradient(fit.mpo, target))};
}

}  // namespace mpotomo
