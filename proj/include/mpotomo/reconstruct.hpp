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
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "mpotomo/correlations.hpp"
#include "mpotomo/mpo.hpp"

namespace mpotomo {

/// Four- and five-site correlation matrices. B[s-1] is B_s (16x16, rows
/// 4a+b over sites s, s+1; columns 4c+d over s+2, s+3); C[s-1][i] is
/// C_s^(i) with Pauli i on the middle site s+2.
struct CorrMatrices {
  int n_sites = 0;
  std::vector<Matrix> B, B_se;
  std::vector<std::array<Matrix, 4>> C, C_se;

  /// Bhat_1^(i)_{a, 4c+d} = <P_a P_i P_c P_d> on sites 1..4.
  Matrix first_boundary(int i, bool se = false) const {
    const Matrix &b = se ? B_se.front() : B.front();
    Matrix out(4, 16);
    for (int a = 0; a < 4; ++a) out.row(a) = b.row(4 * a + i);
    return out;
  }
  /// Bhat_{N-3}^(i)_{4a+b, c} = <P_a P_b P_i P_c> on sites N-3..N.
  Matrix last_boundary(int i, bool se = false) const {
    const Matrix &b = se ? B_se.back() : B.back();
    return b.middleCols(4 * i, 4);
  }
};

inline CorrMatrices build_corr_matrices(const CorrelationSet &c) {
  if (c.basis != CorrBasis::Pauli) throw StateError("correlation matrices need Pauli correlations");
  if (c.window < 4) throw RangeError("correlation matrices need windows of length >= 4");
  const int n = c.n_sites;
  if (n < 4) throw RangeError("correlation matrices need N >= 4");
  CorrMatrices cm;
  cm.n_sites = n;
  std::vector<std::string> missing;
  auto get = [&](int first, const std::vector<int> &w, double &v, double &s) {
    try {
      const Estimate e = c.local(first, w);
      if (!std::isfinite(e.value)) throw DataError("non-finite correlation");
      v = e.value;
      s = e.se;
    } catch (const CompletenessError &err) {
      missing.push_back(std::to_string(first) + ":" + err.missing().front());
      v = s = 0.0;
    }
  };
  for (int s = 1; s <= n - 3; ++s) {
    Matrix b(16, 16), bs(16, 16);
    for (int r = 0; r < 16; ++r)
      for (int col = 0; col < 16; ++col) get(s, {r / 4, r % 4, col / 4, col % 4}, b(r, col), bs(r, col));
    cm.B.push_back(b);
    cm.B_se.push_back(bs);
  }
  if (c.window >= 5)
    for (int s = 1; s <= n - 4; ++s) {
      std::array<Matrix, 4> m, ms;
      for (int i = 0; i < 4; ++i) {
        m[i].resize(16, 16);
        ms[i].resize(16, 16);
        for (int r = 0; r < 16; ++r)
          for (int col = 0; col < 16; ++col)
            get(s, {r / 4, r % 4, i, col / 4, col % 4}, m[i](r, col), ms[i](r, col));
      }
      cm.C.push_back(m);
      cm.C_se.push_back(ms);
    }
  if (!missing.empty()) throw CompletenessError("correlation windows incomplete", missing);
  return cm;
}

struct BondEstimate {
  int bond = 0;  // bond between sites bond and bond+1
  int dim = 0;
  Vector sigma;
  Vector sigma_se;
};

/// Singular values of B with first-order standard errors,
/// se(sigma_n)^2 = sum_ij (U_in V_jn)^2 se(B_ij)^2.
inline std::pair<Vector, Vector> singular_values_with_se(const Matrix &b, const Matrix &b_se) {
  Eigen::JacobiSVD<Matrix> svd(b, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Matrix &u = svd.matrixU(), &v = svd.matrixV();
  const Vector sv = svd.singularValues();
  Vector se(sv.size());
  const Matrix var = b_se.cwiseAbs2();
  for (int k = 0; k < sv.size(); ++k) {
    const Vector u2 = u.col(k).cwiseAbs2(), v2 = v.col(k).cwiseAbs2();
    se(k) = std::sqrt(u2.dot(var * v2));
  }
  return {sv, se};
}

/// Bond dimension between sites s+1 and s+2 from B_s: the number of
/// singular values exceeding k_sigma times their error. Exact data use a
/// relative floor of 1e-10 sigma_max instead.
inline std::vector<BondEstimate> estimate_bond_dims(const CorrMatrices &cm, double k_sigma = 5.0) {
  std::vector<BondEstimate> out;
  for (size_t s = 0; s < cm.B.size(); ++s) {
    BondEstimate e;
    e.bond = static_cast<int>(s) + 2;
    std::tie(e.sigma, e.sigma_se) = singular_values_with_se(cm.B[s], cm.B_se[s]);
    const double floor = 1e-10 * (e.sigma.size() ? e.sigma(0) : 0.0);
    for (int k = 0; k < e.sigma.size(); ++k) {
      const double thr = std::max(k_sigma * e.sigma_se(k), floor);
      if (e.sigma(k) > thr) ++e.dim;
    }
    out.push_back(e);
  }
  return out;
}

/// Truncated pseudoinverse keeping `rank` singular values (all above
/// rtol * sigma_max when rank < 0).
inline Matrix pinv(const Matrix &m, double rtol = 1e-10, int rank = -1) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector &sv = svd.singularValues();
  int k = 0;
  const double smax = sv.size() ? sv(0) : 0.0;
  if (rank >= 0) k = std::min<int>(rank, sv.size());
  else
    while (k < sv.size() && sv(k) > rtol * smax) ++k;
  Matrix out = Matrix::Zero(m.cols(), m.rows());
  for (int j = 0; j < k; ++j) out += svd.matrixV().col(j) * (1.0 / sv(j)) * svd.matrixU().col(j).transpose();
  return out;
}

struct SiteResidual {
  int site = 0;
  double norm = 0.0;          // Frobenius norm of B A - C over all slices
  double worst_column = 0.0;  // largest relative column residual
  int worst_pauli = 0;
  int worst_col_index = 0;
};

struct InversionOptions {
  double rtol = 1e-10;
  std::vector<int> ranks;      // optional per-equation truncation ranks
  double threshold = 1e-6;     // relative residual declaring no solution
};

struct InversionResult {
  bool solved = false;
  std::optional<Mpo> mpo;
  std::vector<SiteResidual> residuals;
  int offending_site = 0;
  double offending_residual = 0.0;
  double reproduction_error = 0.0;  // max |input - model| over the L-windows
  std::string message;
};

namespace detail {

inline SiteResidual solve_site(const Matrix &b, const std::array<Matrix, 4> &chat, int site, double rtol, int rank,
                               SiteTensor &out) {
  const Matrix bp = pinv(b, rtol, rank);
  SiteResidual res;
  res.site = site;
  out = SiteTensor(static_cast<int>(b.cols()), static_cast<int>(chat[0].cols()));
  double total = 0;
  for (int i = 0; i < 4; ++i) {
    out[i] = bp * chat[i];
    const Matrix r = b * out[i] - chat[i];
    total += r.squaredNorm();
    for (int c = 0; c < r.cols(); ++c) {
      const double cn = chat[i].col(c).norm();
      if (cn < 1e-12) continue;
      const double rel = r.col(c).norm() / cn;
      if (rel > res.worst_column) {
        res.worst_column = rel;
        res.worst_pauli = i;
        res.worst_col_index = c;
      }
    }
  }
  res.norm = std::sqrt(total);
  return res;
}

inline SiteTensor pauli_row() {
  SiteTensor t(1, 4);
  for (int i = 0; i < 4; ++i) t[i](0, i) = 1;
  return t;
}

inline SiteTensor pauli_column() {
  SiteTensor t(4, 1);
  for (int i = 0; i < 4; ++i) t[i](i, 0) = 1;
  return t;
}

inline double reproduction_error(const Mpo &m, const CorrelationSet &c) {
  CorrelationEvaluator ev(m);
  double err = 0;
  for (const auto &w : c.windows) {
    const auto v = ev.window(w.start, c.window);
    for (size_t k = 0; k < v.size(); ++k) err = std::max(err, std::abs(v[k] - w.value[k]));
  }
  return err;
}

}  // namespace detail

/// Explicit inversion from local correlations with windows of length L.
inline InversionResult invert_reconstruct(const CorrelationSet &corrs, int L, const InversionOptions &opt = {}) {
  if (corrs.basis != CorrBasis::Pauli) throw StateError("inversion expects Pauli correlations");
  if (L < 3 || L > 5) throw RangeError("inversion supports L = 3, 4, 5");
  if (corrs.window < L) throw RangeError("correlation windows shorter than L");
  const int n = corrs.n_sites;
  if (n < L) throw RangeError("chain shorter than L");
  auto corr = [&](int first, const std::vector<int> &w) { return corrs.local(first, w).value; };
  auto rank_for = [&](size_t eq) { return eq < opt.ranks.size() ? opt.ranks[eq] : -1; };

  std::vector<SiteTensor> sites(n);
  sites[0] = detail::pauli_row();
  sites[n - 1] = detail::pauli_column();
  InversionResult res;
  size_t eq = 0;

  if (L == 3) {
    // A_2 = Chat_1; B_{s-1} A_s = Chat_{s-1} for s = 3..N-1.
    auto bmat = [&](int s) {
      Matrix b(4, 4);
      for (int a = 0; a < 4; ++a)
        for (int c = 0; c < 4; ++c) b(a, c) = corr(s, {a, c});
      return b;
    };
    auto cmat = [&](int s) {
      std::array<Matrix, 4> m;
      for (int i = 0; i < 4; ++i) {
        m[i].resize(4, 4);
        for (int a = 0; a < 4; ++a)
          for (int c = 0; c < 4; ++c) m[i](a, c) = corr(s, {a, i, c});
      }
      return m;
    };
    if (n >= 3) {
      const auto c1 = cmat(1);
      SiteTensor t(4, 4);
      for (int i = 0; i < 4; ++i) t[i] = c1[i];
      sites[1] = t;
    }
    for (int s = 3; s <= n - 1; ++s)
      res.residuals.push_back(detail::solve_site(bmat(s - 1), cmat(s - 1), s, opt.rtol, rank_for(eq++), sites[s - 1]));
  } else if (L == 4) {
    // A_2 = Bhat_1 (4x4); B_{s-2} A_s = Chat_{s-2} with 16x4 matrices.
    auto bmat = [&](int s) {
      Matrix b(16, 4);
      for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 4; ++c) b(r, c) = corr(s, {r / 4, r % 4, c});
      return b;
    };
    auto cmat = [&](int s) {
      std::array<Matrix, 4> m;
      for (int i = 0; i < 4; ++i) {
        m[i].resize(16, 4);
        for (int r = 0; r < 16; ++r)
          for (int c = 0; c < 4; ++c) m[i](r, c) = corr(s, {r / 4, r % 4, i, c});
      }
      return m;
    };
    SiteTensor t(4, 4);
    for (int i = 0; i < 4; ++i)
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) t[i](a, b) = corr(1, {a, i, b});
    sites[1] = t;
    for (int s = 3; s <= n - 1; ++s)
      res.residuals.push_back(detail::solve_site(bmat(s - 2), cmat(s - 2), s, opt.rtol, rank_for(eq++), sites[s - 1]));
  } else {
    const CorrMatrices cm = build_corr_matrices(corrs);
    SiteTensor t(4, 16);
    for (int i = 0; i < 4; ++i) t[i] = cm.first_boundary(i);
    sites[1] = t;
    for (int s = 3; s <= n - 2; ++s)
      res.residuals.push_back(detail::solve_site(cm.B[s - 3], cm.C[s - 3], s, opt.rtol, rank_for(eq++), sites[s - 1]));
    if (n >= 4) {
      std::array<Matrix, 4> last;
      for (int i = 0; i < 4; ++i) last[i] = cm.last_boundary(i);
      res.residuals.push_back(detail::solve_site(cm.B[n - 4], last, n - 1, opt.rtol, rank_for(eq++), sites[n - 2]));
    }
  }

  for (const auto &r : res.residuals)
    if (r.worst_column > res.offending_residual) {
      res.offending_residual = r.worst_column;
      res.offending_site = r.site;
    }
  Mpo m(std::move(sites));
  res.reproduction_error = detail::reproduction_error(m, corrs);
  double scale = 0;
  for (const auto &w : corrs.windows)
    for (double v : w.value) scale = std::max(scale, std::abs(v));
  res.solved = res.offending_residual <= opt.threshold && res.reproduction_error <= opt.threshold * std::max(1.0, scale);
  if (!res.solved) {
    std::ostringstream os;
    if (res.offending_residual > opt.threshold)
      os << "no solution at site " << res.offending_site << ": relative column residual " << res.offending_residual;
    else
      os << "inversion does not reproduce the input correlations (max deviation " << res.reproduction_error << ")";
    res.message = os.str();
  }
  res.mpo = std::move(m);
  return res;
}

/// Compress the bonds of an L = 5 inversion result, left to right, using
/// truncated SVDs of B_s. targets[s-1] is the new dimension of the bond
/// between sites s+1 and s+2.
inline Mpo compress(const Mpo &mpo, const CorrMatrices &cm, const std::vector<int> &targets) {
  const int n = mpo.size();
  if (static_cast<int>(cm.B.size()) != n - 3 || static_cast<int>(targets.size()) != n - 3)
    throw ShapeError("compress needs one target per bond 2..N-2");
  Mpo out = mpo;
  for (int s = 1; s <= n - 3; ++s) {
    const int t = targets[s - 1];
    if (t < 1 || t > out.site(s + 1).right_dim()) throw RangeError("compression target exceeds bond dimension");
    Eigen::JacobiSVD<Matrix> svd(cm.B[s - 1], Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector &sv = svd.singularValues();
    if (sv(t - 1) <= 1e-14 * std::max(1.0, sv(0)))
      throw SingularityError("zero singular value inside compression target at bond " + std::to_string(s + 1));
    const Matrix v = svd.matrixV().leftCols(t);
    const Matrix su = sv.head(t).cwiseInverse().asDiagonal() * svd.matrixU().leftCols(t).transpose();
    SiteTensor left(out.site(s + 1).left_dim(), t);
    for (int i = 0; i < 4; ++i) left[i] = out.site(s + 1)[i] * v;
    std::array<Matrix, 4> rhs;
    for (int i = 0; i < 4; ++i) rhs[i] = s <= n - 4 ? cm.C[s - 1][i] : cm.last_boundary(i);
    // Bonds to the right are still uncompressed, so rhs keeps its full width.
    SiteTensor right(t, static_cast<int>(rhs[0].cols()));
    for (int i = 0; i < 4; ++i) right[i] = su * rhs[i];
    out.site(s + 1) = left;
    out.site(s + 2) = right;
  }
  return Mpo(out.sites());
}

struct Reconstructibility {
  std::vector<int> left_ranks;   // L_s for the sites in the condition
  std::vector<int> right_ranks;  // R_s
  std::vector<int> left_sites, right_sites;
  std::vector<int> bond_dims;
  bool reconstructible = false;
};

/// Ranks of the boundary-contracted products L_s, R_s of a known MPO. The
/// state must be given at minimal bond dimension.
inline Reconstructibility check_reconstructibility(const Mpo &truth, int L) {
  if (L < 3 || L > 5) throw RangeError("L must be 3, 4 or 5");
  const int n = truth.size();
  auto rank_of = [](const Matrix &m) {
    Eigen::JacobiSVD<Matrix> svd(m);
    const Vector &sv = svd.singularValues();
    int k = 0;
    while (k < sv.size() && sv(k) > 1e-10 * sv(0)) ++k;
    return k;
  };
  std::vector<RowVector> lenv(n + 2);
  std::vector<Vector> renv(n + 2);
  lenv[1] = RowVector::Ones(1);
  for (int s = 1; s <= n; ++s) lenv[s + 1] = lenv[s] * truth.site(s)[0];
  renv[n + 1] = Vector::Ones(1);
  for (int s = n; s >= 1; --s) renv[s] = truth.site(s)[0] * renv[s + 1];
  const int lw = L <= 3 ? 1 : 2;  // sites in the left block
  const int rw = L <= 4 ? 1 : 2;  // sites in the right block
  auto left = [&](int s) {
    const int rows = lw == 1 ? 4 : 16;
    const int D = truth.site(s + lw - 1).right_dim();
    Matrix m(rows, D);
    for (int r = 0; r < rows; ++r) {
      RowVector v = lenv[s];
      if (lw == 1) v = v * truth.site(s)[r];
      else v = v * truth.site(s)[r / 4] * truth.site(s + 1)[r % 4];
      m.row(r) = v;
    }
    return m;
  };
  auto right = [&](int s) {
    const int cols = rw == 1 ? 4 : 16;
    const int D = truth.site(s).left_dim();
    Matrix m(D, cols);
    for (int c = 0; c < cols; ++c) {
      Vector v = renv[s + rw];
      if (rw == 1) v = truth.site(s)[c] * v;
      else v = truth.site(s)[c / 4] * (truth.site(s + 1)[c % 4] * v);
      m.col(c) = v;
    }
    return m;
  };
  Reconstructibility r;
  r.bond_dims = truth.bond_dims();
  // Sites entering the condition for each window length.
  int l_lo, l_hi;
  if (L == 3) l_lo = 2, l_hi = n - 2;
  else l_lo = 1, l_hi = n - 3;
  r.reconstructible = true;
  for (int s = l_lo; s <= l_hi; ++s) {
    if (s + lw - 1 > n) continue;
    const Matrix m = left(s);
    const int k = rank_of(m);
    r.left_sites.push_back(s);
    r.left_ranks.push_back(k);
    if (k != m.cols()) r.reconstructible = false;
  }
  for (int s = 3; s <= n - 1; ++s) {
    if (s + rw - 1 > n) continue;
    const Matrix m = right(s);
    const int k = rank_of(m);
    r.right_sites.push_back(s);
    r.right_ranks.push_back(k);
    if (k != m.rows()) r.reconstructible = false;
  }
  return r;
}

}  // namespace mpotomo
