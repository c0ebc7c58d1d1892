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
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <array>
#include <vector>

#include <Eigen/Eigenvalues>

#include "json.hpp"
#include "mpotomo/correlations.hpp"
#include "mpotomo/mpo.hpp"
#include "mpotomo/mpo_io.hpp"
#include "mpotomo/parallel.hpp"

namespace mpotomo {

struct ParamIndex {
  int site;  // 1-based
  int pauli;
  int row;
  int col;
};

/// Free entries of a standard-form MPO, ordered by site, Pauli index, row,
/// column. Site 1 frees everything except the leading identity entry;
/// interior identity slices free their upper triangle minus (0,0); the last
/// site is fixed.
class ParameterLayout {
 public:
  ParameterLayout() = default;

  static ParameterLayout standard_form(const Mpo &m) {
    ParameterLayout p;
    const int n = m.size();
    p.lookup_.resize(n);
    for (int s = 1; s <= n; ++s) {
      const SiteTensor &t = m.site(s);
      for (int i = 0; i < 4; ++i) {
        Eigen::MatrixXi idx = Eigen::MatrixXi::Constant(t.left_dim(), t.right_dim(), -1);
        if (s < n || n == 1)
          for (int r = 0; r < t.left_dim(); ++r)
            for (int c = 0; c < t.right_dim(); ++c) {
              bool free = true;
              if (i == 0) {
                if (r == 0 && c == 0) free = false;
                if (s > 1 && r > c) free = false;
              }
              if (n == 1) free = i != 0;
              if (!free) continue;
              idx(r, c) = static_cast<int>(p.entries_.size());
              p.entries_.push_back({s, i, r, c});
            }
        p.lookup_[s - 1][i] = idx;
      }
    }
    return p;
  }

  int size() const { return static_cast<int>(entries_.size()); }
  const std::vector<ParamIndex> &entries() const { return entries_; }
  /// Parameter index of an entry, or -1 when pinned.
  int index(int site, int pauli, int row, int col) const { return lookup_[site - 1][pauli](row, col); }
  const Eigen::MatrixXi &slot(int site, int pauli) const { return lookup_[site - 1][pauli]; }

  Vector get(const Mpo &m) const {
    Vector v(size());
    for (int k = 0; k < size(); ++k) {
      const auto &e = entries_[k];
      v(k) = m.site(e.site)[e.pauli](e.row, e.col);
    }
    return v;
  }

  void set(Mpo &m, const Vector &v) const {
    if (v.size() != size()) throw ShapeError("parameter vector has wrong length");
    for (int k = 0; k < size(); ++k) {
      const auto &e = entries_[k];
      m.site(e.site)[e.pauli](e.row, e.col) = v(k);
    }
  }

  /// Restrict a full-shape gradient to the free entries.
  Vector flatten(const MpoTangent &g) const {
    if (static_cast<int>(g.size()) != static_cast<int>(lookup_.size())) throw ShapeError("gradient has wrong length");
    Vector v(size());
    for (int k = 0; k < size(); ++k) {
      const auto &e = entries_[k];
      const Matrix &m = g[e.site - 1][e.pauli];
      if (m.rows() != lookup_[e.site - 1][e.pauli].rows() || m.cols() != lookup_[e.site - 1][e.pauli].cols())
        throw ShapeError("gradient shape does not match the parameter layout");
      v(k) = m(e.row, e.col);
    }
    return v;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto &e : entries_) j.push_back({e.site, e.pauli, e.row, e.col});
    return j;
  }

 private:
  std::vector<ParamIndex> entries_;
  std::vector<std::array<Eigen::MatrixXi, 4>> lookup_;
};

struct FitOptions {
  int max_iterations = 200;
  double rel_tol = 1e-10;
  double lambda0 = 1e-3;
  double se_floor = 1e-9;
  double cov_cutoff = 1e-12;
  double step_cutoff = 1e-8;  // relative eigenvalue floor for LM steps (sloppy near-gauge modes)
  bool geodesic_acceleration = true;
  double acceleration_ratio = 0.75;  // reject steps whose correction exceeds this fraction
  double exact_sse = 1e-8;  // initial SSE at or below this counts as a fixed point
  int threads = 1;
  /// Per-site map from Pauli coefficients to the data basis. Defaults to
  /// the identity for Pauli data and F for Z-shifted data.
  std::optional<Eigen::Matrix4d> observation;
  std::function<void(int, const Mpo &, double)> on_iteration;
};

struct FitResult {
  Mpo mpo;
  ParameterLayout layout;
  Matrix covariance;
  double sse = 0.0;
  int dof = 0;
  int iterations = 0;
  bool converged = false;
  int n_residuals = 0;
  int rank = 0;
  double lambda = 0.0;
  std::vector<double> sse_history;
};

/// Weighted residuals of local correlations against an MPO and their
/// analytic Jacobian with respect to the free standard-form entries.
class ResidualModel {
 public:
  ResidualModel(const CorrelationSet &data, const ParameterLayout &layout, const FitOptions &opt)
      : data_(data), layout_(layout), threads_(opt.threads) {
    obs_ = opt.observation ? *opt.observation
                           : (data.basis == CorrBasis::ZShifted ? f_matrix() : Eigen::Matrix4d::Identity());
    if ((obs_.row(0) - Eigen::RowVector4d(1, 0, 0, 0)).cwiseAbs().maxCoeff() > 1e-14)
      throw ParameterError("observation map must keep the identity component");
    const std::int64_t per = data.rows_per_window();
    for (size_t w = 0; w < data.windows.size(); ++w) {
      const auto &cw = data.windows[w];
      for (std::int64_t r = 1; r < per; ++r) {  // skip the all-identity word
        if (!std::isfinite(cw.value[r]) || !std::isfinite(cw.se[r]))
          throw DataError("non-finite correlation in window " + std::to_string(cw.start));
        rows_.push_back({static_cast<int>(w), r});
      }
    }
    weights_.resize(rows_.size());
    for (size_t k = 0; k < rows_.size(); ++k) {
      const double se = std::max(data.windows[rows_[k].window].se[rows_[k].code], opt.se_floor);
      weights_(k) = 1.0 / se;
    }
  }

  int size() const { return static_cast<int>(rows_.size()); }
  const Vector &weights() const { return weights_; }

  /// r = (data - model) * weight; J = d(model * weight)/d(params).
  void evaluate(const Mpo &m, Vector &r, Matrix *jac) const {
    const int n = m.size();
    const int L = data_.window;
    r.resize(size());
    if (jac) jac->setZero(size(), layout_.size());
    // Observed site tensors and identity environments.
    std::vector<SiteTensor> obs;
    for (int s = 0; s < n; ++s) obs.push_back(m[s].mapped(obs_));
    std::vector<RowVector> lenv(n + 2);
    std::vector<Vector> renv(n + 2);
    lenv[1] = RowVector::Ones(1);
    for (int s = 1; s <= n; ++s) lenv[s + 1] = lenv[s] * m.site(s)[0];
    renv[n + 1] = Vector::Ones(1);
    for (int s = n; s >= 1; --s) renv[s] = m.site(s)[0] * renv[s + 1];

    const std::int64_t per = data_.rows_per_window() - 1;
    parallel_for(static_cast<std::int64_t>(data_.windows.size()), threads_, [&](std::int64_t w) {
      const int start = data_.windows[w].start;
      std::vector<RowVector> pre(L + 1);
      std::vector<Vector> suf(L + 1);
      for (std::int64_t k = 0; k < per; ++k) {
        const std::int64_t row = w * per + k;
        const std::int64_t code = rows_[row].code;
        const auto word = word_digits(code, L, 4);
        pre[0] = lenv[start];
        for (int j = 0; j < L; ++j) pre[j + 1] = pre[j] * obs[start - 1 + j][word[j]];
        suf[L] = renv[start + L];
        for (int j = L - 1; j >= 0; --j) suf[j] = obs[start - 1 + j][word[j]] * suf[j + 1];
        const double model = pre[L].dot(renv[start + L]);
        const double wt = weights_(row);
        r(row) = (data_.windows[w].value[code] - model) * wt;
        if (!jac) continue;
        Matrix &J = *jac;
        // Sites inside the window.
        for (int j = 0; j < L; ++j) {
          const int site = start + j;
          for (int i = 0; i < 4; ++i) {
            const double c = obs_(word[j], i);
            if (c == 0.0) continue;
            const auto &idx = lookup(site, i);
            if (idx.size() == 0) continue;
            for (int a = 0; a < idx.rows(); ++a) {
              const double pa = pre[j](a);
              if (pa == 0.0) continue;
              for (int b = 0; b < idx.cols(); ++b) {
                const int p = idx(a, b);
                if (p >= 0) J(row, p) += wt * c * pa * suf[j + 1](b);
              }
            }
          }
        }
        // Identity slices left of the window.
        Vector g = suf[0];
        for (int t = start - 1; t >= 1; --t) {
          const auto &idx = lookup(t, 0);
          for (int a = 0; a < idx.rows(); ++a) {
            const double la = lenv[t](a);
            if (la == 0.0) continue;
            for (int b = 0; b < idx.cols(); ++b) {
              const int p = idx(a, b);
              if (p >= 0) J(row, p) += wt * la * g(b);
            }
          }
          g = m.site(t)[0] * g;
        }
        // Identity slices right of the window.
        RowVector h = pre[L];
        for (int t = start + L; t <= n; ++t) {
          const auto &idx = lookup(t, 0);
          for (int a = 0; a < idx.rows(); ++a) {
            const double ha = h(a);
            if (ha == 0.0) continue;
            for (int b = 0; b < idx.cols(); ++b) {
              const int p = idx(a, b);
              if (p >= 0) J(row, p) += wt * ha * renv[t + 1](b);
            }
          }
          h = h * m.site(t)[0];
        }
      }
    });
    if (jac) *jac = -*jac;  // residual is data - model
  }

 private:
  struct Row {
    int window;
    std::int64_t code;
  };
  const Eigen::MatrixXi &lookup(int site, int pauli) const { return layout_.slot(site, pauli); }

  const CorrelationSet &data_;
  const ParameterLayout &layout_;
  int threads_;
  Eigen::Matrix4d obs_;
  std::vector<Row> rows_;
  Vector weights_;
};

namespace detail {

inline double sse_of(const Vector &r) { return r.squaredNorm(); }

struct Normal {
  Matrix h;
  Vector g;
};

inline Normal normal_equations(const Matrix &j, const Vector &r) {
  Normal ne;
  ne.h = Matrix::Zero(j.cols(), j.cols());
  ne.h.selfadjointView<Eigen::Lower>().rankUpdate(j.transpose());
  ne.h = ne.h.selfadjointView<Eigen::Lower>();
  ne.g = -(j.transpose() * r);
  return ne;
}

}  // namespace detail

/// Weighted least-squares fit of a standard-form MPO to local correlations
/// by Levenberg-Marquardt. The pinned entries never move.
inline FitResult gauss_newton_fit(const CorrelationSet &data, const Mpo &initial, const FitOptions &opt = {}) {
  initial.validate();
  if (initial.size() != data.n_sites) throw ShapeError("initial MPO and data disagree on the number of sites");
  if (initial.size() < 2) throw SizeError("fit needs at least two sites");
  if (!is_standard_form(initial, 1e-8)) throw StateError("initial MPO is not in standard form");

  FitResult res;
  res.layout = ParameterLayout::standard_form(initial);
  res.mpo = initial;
  const ParameterLayout &lay = res.layout;
  ResidualModel model(data, lay, opt);
  res.n_residuals = model.size();

  Vector params = lay.get(res.mpo);
  Vector r;
  Matrix jac;
  model.evaluate(res.mpo, r, &jac);
  double sse = detail::sse_of(r);
  if (!std::isfinite(sse)) throw DataError("residuals are not finite at the initial point");
  res.sse_history.push_back(sse);
  double lambda = opt.lambda0;

  if (sse <= opt.exact_sse) {
    res.converged = true;
  } else {
    // Gauge directions leave H singular; steps are restricted to the
    // eigenspace above a relative cutoff so that rounding noise in the null
    // space is not amplified by the small damping.
    auto ne = detail::normal_equations(jac, r);
    Eigen::SelfAdjointEigenSolver<Matrix> hs(ne.h);
    Vector proj_g = hs.eigenvectors().transpose() * ne.g;
    while (res.iterations < opt.max_iterations) {
      ++res.iterations;
      const Vector &ev = hs.eigenvalues();
      const double mu = lambda * std::max(ne.h.diagonal().mean(), 1e-300);
      const double cut = opt.step_cutoff * std::max(ev.maxCoeff(), 1e-300);
      auto solve = [&](const Vector &rhs) {
        Vector c = hs.eigenvectors().transpose() * rhs;
        for (int k = 0; k < ev.size(); ++k) c(k) = ev(k) > cut ? c(k) / (ev(k) + mu) : 0.0;
        return Vector(hs.eigenvectors() * c);
      };
      Vector scaled = Vector::Zero(ev.size());
      for (int k = 0; k < ev.size(); ++k)
        if (ev(k) > cut) scaled(k) = proj_g(k) / (ev(k) + mu);
      Vector step = hs.eigenvectors() * scaled;
      if (!step.allFinite()) throw DataError("non-finite LM step");
      Mpo trial = res.mpo;
      bool bent = false;
      if (opt.geodesic_acceleration) {
        // Second directional derivative of the residuals along the step,
        // used to bend the step along curved valleys.
        const double h = 0.1;
        lay.set(trial, params + h * step);
        Vector rh;
        model.evaluate(trial, rh, nullptr);
        const Vector rvv = (2.0 / h) * ((rh - r) / h - jac * step);
        const Vector acc = solve(-(jac.transpose() * rvv));
        bent = acc.allFinite() && 2.0 * acc.norm() > opt.acceleration_ratio * step.norm();
        if (acc.allFinite()) step += 0.5 * acc;
      }
      lay.set(trial, params + step);
      Vector rt;
      model.evaluate(trial, rt, nullptr);
      const double st = detail::sse_of(rt);
      if (std::isfinite(st) && st <= sse && !bent) {
        const double rel = (sse - st) / std::max(sse, 1e-300);
        params += step;
        res.mpo = std::move(trial);
        sse = st;
        lambda = std::max(lambda / 10.0, 1e-12);
        res.sse_history.push_back(sse);
        if (opt.on_iteration) opt.on_iteration(res.iterations, res.mpo, sse);
        if (rel < opt.rel_tol || sse <= opt.exact_sse) {
          res.converged = true;
          break;
        }
        model.evaluate(res.mpo, r, &jac);
        ne = detail::normal_equations(jac, r);
        hs.compute(ne.h);
        proj_g = hs.eigenvectors().transpose() * ne.g;
      } else {
        lambda *= 10.0;
        if (opt.on_iteration) opt.on_iteration(res.iterations, res.mpo, sse);
        if (lambda > 1e14) {  // no descent left at this point
          res.converged = true;
          break;
        }
      }
    }
    model.evaluate(res.mpo, r, &jac);
  }
  res.sse = sse;
  res.lambda = lambda;

  const auto ne = detail::normal_equations(jac, r);
  Eigen::SelfAdjointEigenSolver<Matrix> es(ne.h);
  const Vector ev = es.eigenvalues();
  const double cut = opt.cov_cutoff * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Vector inv = Vector::Zero(ev.size());
  for (int k = 0; k < ev.size(); ++k)
    if (ev(k) > cut) {
      inv(k) = 1.0 / ev(k);
      ++res.rank;
    }
  res.covariance = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  res.dof = res.n_residuals - res.rank;
  return res;
}

/// First-order standard error of a functional whose full-shape gradient is g.
inline double propagate_covariance(const FitResult &fit, const MpoTangent &g) {
  const Vector v = fit.layout.flatten(g);
  if (v.size() != fit.covariance.rows()) throw ShapeError("gradient does not match the covariance");
  const double var = v.dot(fit.covariance * v);
  return std::sqrt(std::max(var, 0.0));
}

/// Central-difference version for functionals without an analytic gradient.
inline Estimate propagate_covariance(const FitResult &fit, const std::function<double(const Mpo &)> &f,
                                     double step = 1e-6) {
  const Vector p0 = fit.layout.get(fit.mpo);
  Vector g(p0.size());
  Mpo m = fit.mpo;
  for (int k = 0; k < p0.size(); ++k) {
    Vector p = p0;
    p(k) += step;
    fit.layout.set(m, p);
    const double up = f(m);
    p(k) = p0(k) - step;
    fit.layout.set(m, p);
    const double dn = f(m);
    g(k) = (up - dn) / (2 * step);
  }
  const double var = g.dot(fit.covariance * g);
  return {f(fit.mpo), std::sqrt(std::max(var, 0.0))};
}

inline nlohmann::json fit_report_json(const FitResult &r) {
  return {{"sse", r.sse},
          {"dof", r.dof},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"n_residuals", r.n_residuals},
          {"rank", r.rank},
          {"n_parameters", r.layout.size()},
          {"sse_history", r.sse_history}};
}

/// Covariance as raw little-endian float64, row-major, with a JSON header.
inline void write_covariance(const std::string &bin_path, const std::string &header_path, const FitResult &r) {
  std::ofstream os(bin_path, std::ios::binary);
  if (!os) throw IoError("cannot open " + bin_path);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = r.covariance;
  os.write(reinterpret_cast<const char *>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size()));
  if (!os) throw IoError("write failed for " + bin_path);
  nlohmann::json h = {{"dtype", "float64"},
                      {"order", "row-major"},
                      {"endianness", "little"},
                      {"shape", {rm.rows(), rm.cols()}},
                      {"parameters", r.layout.to_json()}};
  write_json_file(header_path, h);
}

inline Matrix read_covariance(const std::string &bin_path, const std::string &header_path) {
  const auto h = read_json_file(header_path);
  if (!h.contains("shape") || !h["shape"].is_array() || h["shape"].size() != 2)
    throw ValidationError("covariance header lacks a shape");
  const int rows = h["shape"][0].get<int>(), cols = h["shape"][1].get<int>();
  std::ifstream is(bin_path, std::ios::binary);
  if (!is) throw IoError("cannot open " + bin_path);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  is.read(reinterpret_cast<char *>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size()));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(double) * rm.size()))
    throw ValidationError("covariance file is truncated");
  return rm;
}

/// Writes mpo.json, covariance.bin, covariance.json and fit_report.json into dir.
inline void write_fit_bundle(const std::string &dir, const FitResult &r) {
  write_mpo(dir + "/mpo.json", r.mpo);
  write_covariance(dir + "/covariance.bin", dir + "/covariance.json", r);
  write_json_file(dir + "/fit_report.json", fit_report_json(r));
}

inline FitResult read_fit_bundle(const std::string &dir) {
  FitResult r;
  r.mpo = read_mpo(dir + "/mpo.json");
  r.layout = ParameterLayout::standard_form(r.mpo);
  r.covariance = read_covariance(dir + "/covariance.bin", dir + "/covariance.json");
  if (r.covariance.rows() != r.layout.size() || r.covariance.cols() != r.layout.size())
    throw ValidationError("covariance shape does not match the MPO parameters");
  const auto rep = read_json_file(dir + "/fit_report.json");
  try {
    r.sse = rep.at("sse").get<double>();
    r.dof = rep.at("dof").get<int>();
    r.iterations = rep.at("iterations").get<int>();
    r.converged = rep.at("converged").get<bool>();
    r.n_residuals = rep.at("n_residuals").get<int>();
    r.rank = rep.at("rank").get<int>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("fit report: ") + e.what());
  }
  return r;
}

}  // namespace mpotomo
