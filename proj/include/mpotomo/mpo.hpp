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
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "mpotomo/core.hpp"
#include "mpotomo/pauli.hpp"

namespace mpotomo {

/// Coefficient tensor of one site: four D_left x D_right slices, one per
/// Pauli operator.
class SiteTensor {
 public:
  SiteTensor() : SiteTensor(1, 1) {}
  SiteTensor(int dl, int dr) {
    for (auto &m : slices_) m = Matrix::Zero(dl, dr);
  }
  explicit SiteTensor(std::array<Matrix, 4> slices) : slices_(std::move(slices)) {
    for (int i = 1; i < 4; ++i)
      if (slices_[i].rows() != slices_[0].rows() || slices_[i].cols() != slices_[0].cols())
        throw ShapeError("site tensor slices differ in shape");
  }

  int left_dim() const { return static_cast<int>(slices_[0].rows()); }
  int right_dim() const { return static_cast<int>(slices_[0].cols()); }

  Matrix &operator[](int i) { return slices_[i]; }
  const Matrix &operator[](int i) const { return slices_[i]; }
  double &operator()(int l, int i, int r) { return slices_[i](l, r); }
  double operator()(int l, int i, int r) const { return slices_[i](l, r); }

  /// sum_i c_i A^(i)
  Matrix combine(const Eigen::Vector4d &c) const {
    Matrix m = Matrix::Zero(left_dim(), right_dim());
    for (int i = 0; i < 4; ++i)
      if (c[i] != 0.0) m += c[i] * slices_[i];
    return m;
  }

  /// A'^(i) = sum_j E(i,j) A^(j)
  SiteTensor mapped(const Eigen::Matrix4d &e) const {
    SiteTensor out(left_dim(), right_dim());
    for (int i = 0; i < 4; ++i) out.slices_[i] = combine(e.row(i).transpose());
    return out;
  }

  bool all_finite() const {
    for (const auto &m : slices_)
      if (!m.allFinite()) return false;
    return true;
  }

  /// Row-major (l, i, r) flattening.
  std::vector<double> flat() const {
    const int dl = left_dim(), dr = right_dim();
    std::vector<double> v(static_cast<size_t>(dl) * 4 * dr);
    for (int l = 0; l < dl; ++l)
      for (int i = 0; i < 4; ++i)
        for (int r = 0; r < dr; ++r) v[(l * 4 + i) * dr + r] = slices_[i](l, r);
    return v;
  }

  static SiteTensor from_flat(int dl, int dr, const std::vector<double> &v) {
    if (v.size() != static_cast<size_t>(dl) * 4 * dr)
      throw ShapeError("flat site tensor has " + std::to_string(v.size()) + " entries, expected " +
                       std::to_string(dl * 4 * dr));
    SiteTensor t(dl, dr);
    for (int l = 0; l < dl; ++l)
      for (int i = 0; i < 4; ++i)
        for (int r = 0; r < dr; ++r) t(l, i, r) = v[(l * 4 + i) * dr + r];
    return t;
  }

 private:
  std::array<Matrix, 4> slices_;
};

/// Chain of site tensors representing rho = 2^-N sum rho_{i...} P^{i_1}...P^{i_N}.
class Mpo {
 public:
  Mpo() = default;
  explicit Mpo(std::vector<SiteTensor> sites) : sites_(std::move(sites)) { validate(); }

  int size() const { return static_cast<int>(sites_.size()); }
  const SiteTensor &operator[](int k) const { return sites_[k]; }
  SiteTensor &operator[](int k) { return sites_[k]; }
  const std::vector<SiteTensor> &sites() const { return sites_; }

  /// 1-based site access.
  const SiteTensor &site(int s) const { return sites_.at(s - 1); }
  SiteTensor &site(int s) { return sites_.at(s - 1); }

  std::vector<int> bond_dims() const {
    std::vector<int> b;
    for (int k = 0; k + 1 < size(); ++k) b.push_back(sites_[k].right_dim());
    return b;
  }
  int max_bond() const {
    int m = 1;
    for (int b : bond_dims()) m = std::max(m, b);
    return m;
  }

  /// Product of the identity slices.
  double trace() const {
    RowVector v = RowVector::Ones(1);
    for (const auto &s : sites_) v = v * s[0];
    return v(0);
  }

  void validate() const {
    if (sites_.empty()) throw ShapeError("MPO needs at least one site");
    if (sites_.front().left_dim() != 1) throw ShapeError("first site must have D_left = 1");
    if (sites_.back().right_dim() != 1) throw ShapeError("last site must have D_right = 1");
    for (int k = 0; k + 1 < size(); ++k)
      if (sites_[k].right_dim() != sites_[k + 1].left_dim())
        throw ShapeError("bond mismatch between sites " + std::to_string(k + 1) + " and " +
                         std::to_string(k + 2));
    for (int k = 0; k < size(); ++k)
      if (!sites_[k].all_finite())
        throw DataError("non-finite entry at site " + std::to_string(k + 1));
  }

 private:
  std::vector<SiteTensor> sites_;
};

/// Same shape as an Mpo; holds per-entry partial derivatives.
using MpoTangent = std::vector<SiteTensor>;

inline MpoTangent zero_tangent(const Mpo &m) {
  MpoTangent t;
  for (const auto &s : m.sites()) t.emplace_back(s.left_dim(), s.right_dim());
  return t;
}

/// Real 4x4 map on Pauli coefficient vectors.
class ProcessMatrix {
 public:
  ProcessMatrix() : m_(Eigen::Matrix4d::Identity()) {}
  explicit ProcessMatrix(const Eigen::Matrix4d &m) : m_(m) {
    Eigen::RowVector4d want(1, 0, 0, 0);
    if ((m_.row(0) - want).cwiseAbs().maxCoeff() > 1e-12)
      throw ParameterError("process matrix first row must be [1,0,0,0]");
    if (!m_.allFinite()) throw ParameterError("process matrix has non-finite entries");
  }

  const Eigen::Matrix4d &matrix() const { return m_; }
  double operator()(int i, int j) const { return m_(i, j); }

  /// Composition: (a * b) applies b first.
  friend ProcessMatrix operator*(const ProcessMatrix &a, const ProcessMatrix &b) {
    return ProcessMatrix(a.m_ * b.m_);
  }

  static ProcessMatrix identity() { return ProcessMatrix(); }

  /// Loss of the excited state with probability eps.
  static ProcessMatrix amplitude_damping(double eps) {
    check_probability(eps, "eps_ad");
    const double s = std::sqrt(1.0 - eps);
    Eigen::Matrix4d m;
    m << 1, 0, 0, 0,
         0, s, 0, 0,
         0, 0, s, 0,
         eps, 0, 0, 1.0 - eps;
    return ProcessMatrix(m);
  }

  /// Pure dephasing; equals a phase flip with probability eps/2.
  static ProcessMatrix dephasing(double eps) {
    check_probability(eps, "eps_pd");
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m(1, 1) = m(2, 2) = 1.0 - eps;
    return ProcessMatrix(m);
  }

  static ProcessMatrix phase_flip(double p) {
    check_probability(p, "phase flip probability");
    if (p > 0.5) throw ParameterError("phase flip probability above 0.5 has no dephasing equivalent");
    return dephasing(2.0 * p);
  }

  /// (x, y) -> (c x - s y, s x + c y)
  static ProcessMatrix z_rotation(double phi) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    const double c = std::cos(phi), s = std::sin(phi);
    m(1, 1) = c;
    m(1, 2) = -s;
    m(2, 1) = s;
    m(2, 2) = c;
    return ProcessMatrix(m);
  }

  /// Channel rho -> sum_k K rho K^dagger in the Pauli basis.
  static ProcessMatrix from_kraus(const std::vector<Eigen::Matrix2cd> &kraus) {
    Eigen::Matrix4d m;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        Complex acc = 0.0;
        for (const auto &k : kraus) acc += (pauli_matrix(i) * k * pauli_matrix(j) * k.adjoint()).trace();
        m(i, j) = 0.5 * acc.real();
      }
    return ProcessMatrix(m);
  }

  static ProcessMatrix from_unitary(const Eigen::Matrix2cd &u) { return from_kraus({u}); }

 private:
  static void check_probability(double p, const char *name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0,1]");
  }
  Eigen::Matrix4d m_;
};

/// Dense density matrix; qubit 1 is the most significant bit of the basis index.
struct DenseState {
  int n_qubits = 0;
  CMatrix matrix;
  static constexpr int kMaxQubits = 12;
};

inline void check_word(const Mpo &mpo, const PauliWord &w) {
  if (w.start_site < 1 || w.end_site() > mpo.size())
    throw RangeError("word " + w.str() + " at site " + std::to_string(w.start_site) +
                     " does not fit a chain of " + std::to_string(mpo.size()));
}

/// <P_word> for the represented operator.
inline double mpo_correlation(const Mpo &mpo, const PauliWord &w) {
  check_word(mpo, w);
  RowVector v = RowVector::Ones(1);
  for (int s = 1; s <= mpo.size(); ++s) {
    int p = 0;
    if (s >= w.start_site && s <= w.end_site()) p = w.indices[s - w.start_site];
    v = v * mpo.site(s)[p];
  }
  return v(0);
}

/// Evaluates all 4^L correlations of windows of a fixed chain. Identity
/// environments are cached so each window costs one tree walk.
class CorrelationEvaluator {
 public:
  explicit CorrelationEvaluator(const Mpo &mpo) : mpo_(mpo) {
    const int n = mpo.size();
    // left_[s] = A1^(0)...A_{s-1}^(0), right_[s] = A_s^(0)...A_N^(0)
    left_.assign(n + 2, RowVector());
    right_.assign(n + 2, Vector());
    left_[1] = RowVector::Ones(1);
    for (int s = 1; s <= n; ++s) left_[s + 1] = left_[s] * mpo.site(s)[0];
    right_[n + 1] = Vector::Ones(1);
    for (int s = n; s >= 1; --s) right_[s] = mpo.site(s)[0] * right_[s + 1];
  }

  const Mpo &mpo() const { return mpo_; }

  double operator()(const PauliWord &w) const {
    check_word(mpo_, w);
    RowVector v = left_[w.start_site];
    for (int k = 0; k < w.length(); ++k) v = v * mpo_.site(w.start_site + k)[w.indices[k]];
    return v.dot(right_[w.end_site() + 1]);
  }

  /// All 4^L correlations of the window starting at `start`, indexed by the
  /// base-4 word code with the first site most significant.
  std::vector<double> window(int start, int L) const {
    if (L < 1 || start < 1 || start + L - 1 > mpo_.size())
      throw RangeError("window [" + std::to_string(start) + ", " + std::to_string(start + L - 1) +
                       "] outside chain");
    std::vector<double> out(static_cast<size_t>(ipow(4, L)));
    std::vector<RowVector> stack(L + 1);
    stack[0] = left_[start];
    const Vector &r = right_[start + L];
    walk(start, L, 0, 0, stack, r, out);
    return out;
  }

 private:
  void walk(int start, int L, int depth, std::int64_t code, std::vector<RowVector> &stack,
            const Vector &r, std::vector<double> &out) const {
    if (depth == L) {
      out[code] = stack[L].dot(r);
      return;
    }
    const SiteTensor &t = mpo_.site(start + depth);
    for (int i = 0; i < 4; ++i) {
      stack[depth + 1] = stack[depth] * t[i];
      walk(start, L, depth + 1, code * 4 + i, stack, r, out);
    }
  }

  Mpo mpo_;
  std::vector<RowVector> left_;
  std::vector<Vector> right_;
};

/// Dense 2^N x 2^N density matrix.
inline DenseState mpo_to_dense(const Mpo &mpo) {
  const int n = mpo.size();
  if (n > DenseState::kMaxQubits)
    throw SizeError("dense conversion limited to " + std::to_string(DenseState::kMaxQubits) +
                    " qubits, got " + std::to_string(n));
  // Per-site operator-valued entries M[x][y] = sum_i A^(i) (P_i)_{xy} / 2.
  std::vector<std::array<CMatrix, 4>> local(n);
  for (int s = 0; s < n; ++s)
    for (int xy = 0; xy < 4; ++xy) {
      const int x = xy >> 1, y = xy & 1;
      CMatrix m = CMatrix::Zero(mpo[s].left_dim(), mpo[s].right_dim());
      for (int i = 0; i < 4; ++i) {
        const Complex p = pauli_matrix(i)(x, y);
        if (p != Complex(0.0)) m += 0.5 * p * mpo[s][i].cast<Complex>();
      }
      local[s][xy] = m;
    }
  const std::int64_t dim = std::int64_t(1) << n;
  DenseState out;
  out.n_qubits = n;
  out.matrix = CMatrix::Zero(dim, dim);
  std::vector<Eigen::RowVectorXcd> stack(n + 1);
  stack[0] = Eigen::RowVectorXcd::Ones(1);
  std::function<void(int, std::int64_t, std::int64_t)> rec = [&](int s, std::int64_t x,
                                                                std::int64_t y) {
    if (s == n) {
      out.matrix(x, y) = stack[n](0);
      return;
    }
    for (int xy = 0; xy < 4; ++xy) {
      const CMatrix &m = local[s][xy];
      if (m.size() && m.cwiseAbs().maxCoeff() == 0.0) continue;
      stack[s + 1] = stack[s] * m;
      rec(s + 1, (x << 1) | (xy >> 1), (y << 1) | (xy & 1));
    }
  };
  rec(0, 0, 0);
  return out;
}

/// All 4^N Pauli coefficients Tr[P rho] of a dense state, first qubit most
/// significant.
inline std::vector<double> pauli_coefficients(const DenseState &st) {
  const int n = st.n_qubits;
  if (n > DenseState::kMaxQubits) throw SizeError("dense state too large");
  const std::int64_t dim = std::int64_t(1) << n;
  if (st.matrix.rows() != dim || st.matrix.cols() != dim)
    throw ShapeError("dense matrix shape does not match n_qubits");
  // Interleave (x_s, y_s) pairs so that site s owns one base-4 digit.
  std::vector<Complex> t(static_cast<size_t>(dim * dim));
  for (std::int64_t x = 0; x < dim; ++x)
    for (std::int64_t y = 0; y < dim; ++y) {
      std::int64_t code = 0;
      for (int s = 0; s < n; ++s) {
        const int bx = (x >> (n - 1 - s)) & 1, by = (y >> (n - 1 - s)) & 1;
        code = code * 4 + (bx * 2 + by);
      }
      t[code] = st.matrix(x, y);
    }
  // coefficient_i = sum_xy (P_i)_{yx} rho_{xy}
  Eigen::Matrix4cd map;
  for (int i = 0; i < 4; ++i)
    for (int xy = 0; xy < 4; ++xy) map(i, xy) = pauli_matrix(i)(xy & 1, xy >> 1);
  std::vector<Complex> c = transform_axes(t, map, n);
  std::vector<double> out(c.size());
  for (size_t k = 0; k < c.size(); ++k) out[k] = c[k].real();
  return out;
}

/// Factor a Pauli coefficient tensor by successive truncated SVDs.
inline Mpo coefficients_to_mpo(const std::vector<double> &coeffs, int n, int max_bond,
                               double rtol = 1e-12) {
  if (max_bond < 1) throw ParameterError("max_bond must be >= 1");
  if (static_cast<std::int64_t>(coeffs.size()) != ipow(4, n))
    throw ShapeError("coefficient tensor size is not 4^N");
  std::vector<SiteTensor> sites;
  Matrix rest = Eigen::Map<const Matrix>(coeffs.data(), 1, coeffs.size());
  int dl = 1;
  for (int s = 1; s < n; ++s) {
    const std::int64_t cols = rest.size() / (dl * 4);
    // rows (l, i), columns remaining sites; `rest` is row-major 1-D data.
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> view(
        rest.data(), dl * 4, cols);
    Matrix m = view;
    Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector &sv = svd.singularValues();
    int k = 0;
    const double smax = sv.size() ? sv(0) : 0.0;
    while (k < sv.size() && k < max_bond && sv(k) > rtol * smax) ++k;
    k = std::max(k, 1);
    SiteTensor t(dl, k);
    const Matrix u = svd.matrixU().leftCols(k);
    for (int l = 0; l < dl; ++l)
      for (int i = 0; i < 4; ++i)
        for (int r = 0; r < k; ++r) t(l, i, r) = u(l * 4 + i, r);
    sites.push_back(t);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> next =
        sv.head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();
    rest = Eigen::Map<const Matrix>(next.data(), 1, next.size());
    dl = k;
  }
  SiteTensor last(dl, 1);
  for (int l = 0; l < dl; ++l)
    for (int i = 0; i < 4; ++i) last(l, i, 0) = rest(0, l * 4 + i);
  sites.push_back(last);
  return Mpo(std::move(sites));
}

inline Mpo dense_to_mpo(const DenseState &st, int max_bond, double rtol = 1e-12) {
  return coefficients_to_mpo(pauli_coefficients(st), st.n_qubits, max_bond, rtol);
}

inline Mpo apply_local_errors(const Mpo &mpo, const std::vector<ProcessMatrix> &channels) {
  if (static_cast<int>(channels.size()) != mpo.size())
    throw ShapeError("expected " + std::to_string(mpo.size()) + " channels, got " +
                     std::to_string(channels.size()));
  std::vector<SiteTensor> out;
  for (int s = 0; s < mpo.size(); ++s) out.push_back(mpo[s].mapped(channels[s].matrix()));
  return Mpo(std::move(out));
}

/// A_s <- A_s U, A_{s+1} <- U^-1 A_{s+1} across the bond after site `bond`.
inline Mpo gauge_transform(const Mpo &mpo, int bond, const Matrix &u) {
  if (bond < 1 || bond >= mpo.size()) throw RangeError("bond " + std::to_string(bond));
  const int d = mpo.site(bond).right_dim();
  if (u.rows() != d || u.cols() != d)
    throw ShapeError("gauge matrix must be " + std::to_string(d) + "x" + std::to_string(d));
  Eigen::JacobiSVD<Matrix> svd(u);
  const Vector &sv = svd.singularValues();
  if (sv(sv.size() - 1) == 0.0 || sv(0) / sv(sv.size() - 1) > 1e12)
    throw SingularityError("gauge matrix condition number exceeds 1e12");
  const Matrix uinv = u.fullPivLu().inverse();
  Mpo out = mpo;
  for (int i = 0; i < 4; ++i) {
    out.site(bond)[i] = mpo.site(bond)[i] * u;
    out.site(bond + 1)[i] = uinv * mpo.site(bond + 1)[i];
  }
  return out;
}

/// Gauge-fixed form with unit trace. See README for the parameterization.
inline Mpo to_standard_form(const Mpo &in) {
  const int n = in.size();
  const double tr = in.trace();
  if (!std::isfinite(tr) || std::abs(tr) < 1e-300)
    throw DegenerateInputError("MPO trace is zero");
  std::vector<SiteTensor> a = in.sites();
  if (n == 1) {
    SiteTensor t(1, 1);
    for (int i = 0; i < 4; ++i) t[i] = a[0][i] / tr;
    return Mpo({t});
  }
  // Absorb the last site: column b of A_{N-1} becomes A_{N-1} A_N^(b).
  {
    SiteTensor &prev = a[n - 2];
    const SiteTensor &last = a[n - 1];
    SiteTensor merged(prev.left_dim(), 4);
    for (int i = 0; i < 4; ++i)
      for (int b = 0; b < 4; ++b) merged[i].col(b) = prev[i] * last[b];
    prev = merged;
    SiteTensor fixed(4, 1);
    for (int j = 0; j < 4; ++j) fixed[j](j, 0) = 1.0;
    a[n - 1] = fixed;
  }
  // Right-to-left QR sweep of the identity slices.
  for (int s = n - 2; s >= 1; --s) {
    const Matrix &a0 = a[s][0];
    Eigen::HouseholderQR<Matrix> qr(a0);
    Matrix q = qr.householderQ();
    Matrix r = q.transpose() * a0;
    const int kmax = static_cast<int>(std::min(r.rows(), r.cols()));
    for (int k = 0; k < kmax; ++k)
      if (r(k, k) < 0.0) q.col(k) *= -1.0;
    for (int i = 0; i < 4; ++i) {
      a[s][i] = q.transpose() * a[s][i];
      a[s - 1][i] = a[s - 1][i] * q;
    }
    for (int c = 0; c < a[s][0].cols(); ++c)
      for (int rr = c + 1; rr < a[s][0].rows(); ++rr) a[s][0](rr, c) = 0.0;
  }
  // Rescale so leading identity entries are one.
  for (int s = 1; s <= n - 2; ++s) {
    const double d = a[s][0](0, 0);
    if (std::abs(d) < 1e-300) throw DegenerateInputError("zero pivot in standard form");
    for (int i = 0; i < 4; ++i) a[s][i] /= d;
  }
  const double d1 = a[0][0](0, 0);
  if (std::abs(d1) < 1e-300) throw DegenerateInputError("zero pivot in standard form");
  for (int i = 0; i < 4; ++i) a[0][i] /= d1;
  return Mpo(std::move(a));
}

/// Checks the structural constraints of the standard form.
inline bool is_standard_form(const Mpo &m, double tol = 1e-12) {
  const int n = m.size();
  if (n < 2) return std::abs(m[0][0](0, 0) - 1.0) <= tol;
  const SiteTensor &last = m[n - 1];
  if (last.left_dim() != 4) return false;
  for (int j = 0; j < 4; ++j)
    for (int r = 0; r < 4; ++r)
      if (std::abs(last[j](r, 0) - (r == j ? 1.0 : 0.0)) > tol) return false;
  if (std::abs(m[0][0](0, 0) - 1.0) > tol) return false;
  for (int s = 1; s <= n - 2; ++s) {
    const Matrix &a0 = m[s][0];
    if (std::abs(a0(0, 0) - 1.0) > tol) return false;
    for (int c = 0; c < a0.cols(); ++c)
      for (int r = c + 1; r < a0.rows(); ++r)
        if (std::abs(a0(r, c)) > tol) return false;
  }
  return true;
}

/// Overlap 2^-N sum_w T_w A_w, the fidelity when `target` is pure.
inline double mpo_fidelity(const Mpo &mpo, const Mpo &target) {
  if (mpo.size() != target.size()) throw ShapeError("fidelity needs chains of equal length");
  Matrix env = Matrix::Ones(1, 1);  // (D_T x D_A)
  for (int s = 0; s < mpo.size(); ++s) {
    Matrix next = Matrix::Zero(target[s].right_dim(), mpo[s].right_dim());
    for (int i = 0; i < 4; ++i) next.noalias() += target[s][i].transpose() * env * mpo[s][i];
    env = 0.5 * next;
  }
  return env(0, 0);
}

/// dF/dA for every entry of `mpo`.
inline MpoTangent fidelity_gradient(const Mpo &mpo, const Mpo &target) {
  const int n = mpo.size();
  if (n != target.size()) throw ShapeError("fidelity needs chains of equal length");
  std::vector<Matrix> left(n + 1), right(n + 1);
  left[0] = Matrix::Ones(1, 1);
  for (int s = 0; s < n; ++s) {
    Matrix next = Matrix::Zero(target[s].right_dim(), mpo[s].right_dim());
    for (int i = 0; i < 4; ++i) next.noalias() += target[s][i].transpose() * left[s] * mpo[s][i];
    left[s + 1] = 0.5 * next;
  }
  right[n] = Matrix::Ones(1, 1);
  for (int s = n - 1; s >= 0; --s) {
    Matrix next = Matrix::Zero(target[s].left_dim(), mpo[s].left_dim());
    for (int i = 0; i < 4; ++i) next.noalias() += target[s][i] * right[s + 1] * mpo[s][i].transpose();
    right[s] = 0.5 * next;
  }
  MpoTangent g = zero_tangent(mpo);
  for (int s = 0; s < n; ++s)
    for (int i = 0; i < 4; ++i)
      g[s][i] = 0.5 * left[s].transpose() * target[s][i] * right[s + 1];
  return g;
}

}  // namespace mpotomo
