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

// One line per acceptance criterion: "AC<k> PASS|FAIL <detail> [<seconds>s]".
// Exit status is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mpotomo/cli.hpp"
#include "oracles.hpp"

using namespace mpotomo;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string &what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

const ErrorModel kPaperModel = ErrorModel::uniform(5, 0.098, 0.092);
constexpr double kEta = 0.391;

ErrorModel paper_model(int n) { return ErrorModel::uniform(n, 0.098, 0.092); }

CorrelationSet aligned_zshifted(const Mpo &m, int L, double eta, std::int64_t shots, std::uint64_t seed) {
  const MomentTable t = synthesize_dataset(m, L, eta, shots, seed);
  return align_phases(correct_inefficiency(moments_to_zshifted(t), eta)).corrs;
}

/// The reconstruct command without the file handling.
FitResult reconstruct(const CorrelationSet &zs, int L, double k_sigma = 5.0) {
  const CorrelationSet pauli = zshifted_to_pauli(zs);
  const CorrMatrices cm = build_corr_matrices(pauli);
  const auto est = estimate_bond_dims(cm, k_sigma);
  const InversionResult inv = invert_reconstruct(pauli, L);
  const Mpo init = to_standard_form(compress(*inv.mpo, cm, cli::clamp_targets(est, *inv.mpo)));
  return gauss_newton_fit(zs, init);
}

CMatrix dense_noisy_cluster(int n, const ErrorModel &e) {
  CMatrix rho = oracle::projector(oracle::cluster_vector(n));
  for (int s = 0; s < n; ++s) {
    oracle::apply_kraus(rho, n, s, oracle::amplitude_damping(e.eps_ad[s]));
    oracle::apply_kraus(rho, n, s, oracle::phase_flip(0.5 * e.eps_pd[s]));
  }
  return rho;
}

std::vector<int> full_word(const PauliWord &w, int n) {
  std::vector<int> v(n, 0);
  for (int k = 0; k < w.length(); ++k) v[w.start_site - 1 + k] = w.indices[k];
  return v;
}

std::string num(double x, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, x);
  return buf;
}

// --- criteria -------------------------------------------------------------------

void ac1(Outcome &o) {
  for (int n : {6, 10}) {
    const auto res = invert_reconstruct(exact_correlations(ideal_cluster_mpo(n), 5), 5);
    const double f = res.mpo ? mpo_fidelity(*res.mpo, ideal_cluster_mpo(n)) : 0.0;
    o.detail << "N=" << n << " F=1-" << num(1.0 - f) << " ";
    o.require(res.solved && f >= 1.0 - 1e-9, "fidelity >= 1-1e-9 at N=" + std::to_string(n));
  }
}

void ac2(Outcome &o) {
  const auto res = invert_reconstruct(exact_correlations(ideal_cluster_mpo(6), 3), 3);
  int pauli = -1;
  double worst = 0.0;
  for (const auto &r : res.residuals)
    if (r.site == res.offending_site) {
      pauli = r.worst_pauli;
      worst = r.worst_column;
    }
  o.detail << "solved=" << res.solved << " site=" << res.offending_site << " residual=" << num(res.offending_residual, 6)
           << " column=" << pauli_letter(std::max(pauli, 0)) << " ";
  o.require(!res.solved, "no-solution reported");
  o.require(res.offending_residual >= 0.99 && worst >= 0.99, "residual >= 0.99");
  o.require(pauli == 1, "X-bearing column");
}

void ac3(Outcome &o) {
  const int n = 10;
  auto dims = [&](const CorrelationSet &zs) {
    std::vector<int> d;
    for (const auto &e : estimate_bond_dims(build_corr_matrices(zshifted_to_pauli(zs)), 5.0)) d.push_back(e.dim);
    return d;
  };
  auto all_equal = [](const std::vector<int> &d, int v) {
    for (int x : d)
      if (x != v) return false;
    return !d.empty();
  };
  const auto di = dims(aligned_zshifted(ideal_cluster_mpo(n), 5, kEta, 10'000'000, 31));
  const auto dn = dims(aligned_zshifted(noisy_cluster_model(n, paper_model(n)), 5, kEta, 10'000'000, 32));
  std::vector<int> d9;
  for (const auto &e : estimate_bond_dims(build_corr_matrices(exact_correlations(emit_mpo(build_random_protocol(8, 3, 5)), 5))))
    d9.push_back(e.dim);
  auto show = [](const std::vector<int> &d) {
    std::string s;
    for (int x : d) s += std::to_string(x);
    return s;
  };
  o.detail << "ideal=" << show(di) << " noisy=" << show(dn) << " d3=" << show(d9) << " ";
  o.require(all_equal(di, 4), "ideal D_s = 4");
  o.require(all_equal(dn, 4), "noisy D_s = 4");
  o.require(all_equal(d9, 9), "d=3 D_s = 9");
}

void ac4(Outcome &o) {
  const Mpo m = noisy_cluster_model(5, kPaperModel);
  const double f = mpo_fidelity(m, ideal_cluster_mpo(5));
  const double b = stabilizer_fidelity_bound(stabilizer_values(m));
  double ex = 0.0;
  for (double e : mean_excitations(m)) ex += e / 5;
  const CMatrix rho = dense_noisy_cluster(5, kPaperModel);
  const double fd = oracle::fidelity(oracle::cluster_vector(5), rho);
  o.detail << "F=" << num(f, 4) << " bound=" << num(b, 4) << " excitation=" << num(ex, 6)
           << " |F-dense|=" << num(std::abs(f - fd)) << " ";
  o.require(std::abs(f - 0.616) <= 0.05, "fidelity within 0.05 of 0.616");
  o.require(std::abs(b - 0.40) <= 0.10, "bound within 0.10 of 0.40");
  o.require(std::abs(ex - 0.451) <= 1e-12, "mean excitation 0.451");
  o.require(std::abs(f - fd) <= 1e-10, "MPO fidelity equals dense oracle");
}

void ac5(Outcome &o) {
  const int n = 5, L = 5, runs = 100;
  const Mpo truth = noisy_cluster_model(n, paper_model(n));
  const Mpo ideal = ideal_cluster_mpo(n);
  int fast = 0;
  double per_dof = 0.0, mean_se = 0.0, mean_f = 0.0, mean_f2 = 0.0;
  int max_it = 0;
  for (int k = 0; k < runs; ++k) {
    const FitResult fit = reconstruct(aligned_zshifted(truth, L, kEta, 10'000'000, 1000 + k), L);
    if (fit.converged && fit.iterations <= 50) ++fast;
    max_it = std::max(max_it, fit.iterations);
    per_dof += fit.sse / fit.dof / runs;
    const Estimate f = fidelity_estimate(fit, ideal);
    mean_se += f.se / runs;
    mean_f += f.value / runs;
    mean_f2 += f.value * f.value / runs;
  }
  const double sd = std::sqrt(std::max(0.0, (mean_f2 - mean_f * mean_f) * runs / (runs - 1)));
  const double ratio = mean_se / sd;
  o.detail << "converged<=50it=" << fast << "/" << runs << " max_it=" << max_it << " SSE/DOF=" << num(per_dof, 4)
           << " se/std=" << num(ratio, 3) << " ";
  o.require(fast >= 95, ">= 95 fits converge within 50 iterations");
  o.require(per_dof >= 0.8 && per_dof <= 1.2, "SSE/DOF mean in [0.8, 1.2]");
  o.require(ratio >= 0.7 && ratio <= 1.4, "se/std ratio in [0.7, 1.4]");
}

void ac6(Outcome &o) {
  const std::vector<int> sizes{5, 8, 10, 12};
  const int reps = 5;
  std::vector<double> y, s;
  for (int n : sizes) {
    const Mpo truth = noisy_cluster_model(n, paper_model(n));
    const Mpo ideal = ideal_cluster_mpo(n);
    std::vector<double> rel;
    for (int k = 0; k < reps; ++k) {
      const FitResult fit = reconstruct(aligned_zshifted(truth, 5, kEta, 10'000'000, 500 + 17 * n + k), 5);
      const Estimate f = fidelity_estimate(fit, ideal);
      rel.push_back(f.se / f.value);
    }
    double m = 0, v = 0;
    for (double r : rel) m += r / reps;
    for (double r : rel) v += (r - m) * (r - m) / (reps - 1);
    y.push_back(m);
    s.push_back(std::sqrt(v / reps));
    o.detail << "N=" << n << ":" << num(m, 4) << " ";
  }
  auto wls = [&](int degree, Vector &coef, Matrix &cov) {
    const int p = degree + 1, k = static_cast<int>(sizes.size());
    Matrix x(k, p);
    Vector w(k), yy(k);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < p; ++j) x(i, j) = std::pow(double(sizes[i]), j);
      w(i) = 1.0 / std::max(s[i] * s[i], 1e-300);
      yy(i) = y[i];
    }
    const Matrix a = x.transpose() * w.asDiagonal() * x;
    coef = a.ldlt().solve(x.transpose() * w.asDiagonal() * yy);
    const Vector r = yy - x * coef;
    const double chi2 = r.dot(w.asDiagonal() * r);
    const int dof = k - p;
    cov = a.inverse() * std::max(1.0, dof > 0 ? chi2 / dof : 1.0);
  };
  Vector lin, quad;
  Matrix clin, cquad;
  wls(1, lin, clin);
  wls(2, quad, cquad);
  const double c = quad(2), c_se = std::sqrt(cquad(2, 2));
  o.detail << "slope=" << num(lin(1), 4) << " quad=" << num(c, 3) << "+-" << num(c_se, 3) << " ";
  o.require(lin(1) > 0.0, "positive slope");
  o.require(std::abs(c) <= 2.0 * c_se, "quadratic term within 2 se of zero");
}

void ac7(Outcome &o) {
  const auto kNeg = EntanglementMeasure::Negativity, kCon = EntanglementMeasure::Concurrence;
  double worst_ideal = 0.0;
  for (int n : {4, 6, 8})
    for (int r = 1; r < n; ++r)
      for (int r2 = r + 1; r2 <= n; ++r2) {
        const auto p = paper_plan(n, r, r2);
        worst_ideal = std::max(worst_ideal, std::abs(localizable_entanglement(ideal_cluster_mpo(n), p, kNeg).value - 0.5));
        worst_ideal = std::max(worst_ideal, std::abs(localizable_entanglement(ideal_cluster_mpo(n), p, kCon).value - 1.0));
      }
  o.require(worst_ideal <= 1e-9, "ideal LE 0.5 / 1.0");

  const Mpo m6 = noisy_cluster_model(6, paper_model(6));
  const CMatrix rho6 = mpo_to_dense(m6).matrix;
  double worst_dense = 0.0;
  for (int r = 1; r < 6; ++r)
    for (int r2 = r + 1; r2 <= 6; ++r2) {
      const auto p = paper_plan(6, r, r2);
      const double dn = oracle::localizable(rho6, 6, r - 1, r2 - 1, p.axes, [](const CMatrix &x) { return oracle::negativity(x); });
      const double dc = oracle::localizable(rho6, 6, r - 1, r2 - 1, p.axes, [](const CMatrix &x) { return oracle::concurrence(x); });
      worst_dense = std::max(worst_dense, std::abs(localizable_entanglement(m6, p, kNeg).value - dn));
      worst_dense = std::max(worst_dense, std::abs(localizable_entanglement(m6, p, kCon).value - dc));
    }
  o.require(worst_dense <= 1e-10, "N=6 noisy LE equals dense oracle");

  const Mpo m12 = noisy_cluster_model(12, paper_model(12));
  const auto p12 = paper_plan(12, 3, 9);
  double worst_z = 0.0;
  bool unbiased = true;
  for (auto meas : {kNeg, kCon}) {
    const double exact = localizable_entanglement(m12, p12, meas).value;
    double mean = 0, se = 0;
    for (int seed = 0; seed < 20; ++seed) {
      const auto e = le_subset_estimate(m12, p12, meas, 1024, seed);
      if (std::abs(e.value - exact) > 3 * e.se_sampling) unbiased = false;
      mean += e.value / 20;
      se += e.se_sampling / 20;
    }
    const double z = std::abs(mean - exact) / (se / std::sqrt(20.0));
    worst_z = std::max(worst_z, z);
    if (z > 3.0) unbiased = false;
  }
  o.require(unbiased, "subset estimator within 3 sampling SE");

  double worst_sep = 0.0;
  for (int d : {1, 2, 3})
    for (auto meas : {kNeg, kCon}) {
      double ref = -1.0;
      for (int n = d + 3; n <= 10; ++n) {
        const double v = localizable_entanglement(noisy_cluster_model(n, ErrorModel::uniform(n, 0.1, 0.2)), paper_plan(n, 2, 2 + d), meas).value;
        if (ref < 0) ref = v;
        worst_sep = std::max(worst_sep, std::abs(v - ref));
      }
    }
  o.require(worst_sep <= 1e-9, "fixed-separation LE independent of N");
  o.detail << "ideal_dev=" << num(worst_ideal) << " dense_dev=" << num(worst_dense) << " subset_z=" << num(worst_z)
           << " sep_dev=" << num(worst_sep) << " ";
}

void ac8(Outcome &o) {
  std::mt19937_64 rng(2026);
  std::uniform_real_distribution<double> u(0.0, 0.3);
  int checked = 0, bad_f = 0, bad_c = 0;
  double min_gap_f = 1e9, min_gap_c = 1e9;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = trial < 25 ? 5 : 6;
    ErrorModel e;
    for (int s = 0; s < n; ++s) {
      e.eps_ad.push_back(u(rng));
      e.eps_pd.push_back(u(rng));
    }
    const CMatrix rho = dense_noisy_cluster(n, e);
    std::vector<double> stab;
    for (const auto &w : cluster_stabilizers(n).words) stab.push_back(oracle::expectation(rho, full_word(w, n)));
    const double fb = stabilizer_fidelity_bound(stab);
    const double f = oracle::fidelity(oracle::cluster_vector(n), rho);
    min_gap_f = std::min(min_gap_f, f - fb);
    if (fb > f + 1e-12) ++bad_f;
    for (int r = 1; r < n; ++r)
      for (int r2 = r + 1; r2 <= n; ++r2) {
        const auto p = paper_plan(n, r, r2);
        const double lc = oracle::localizable(rho, n, r - 1, r2 - 1, p.axes, [](const CMatrix &x) { return oracle::concurrence(x); });
        const double cb = stabilizer_concurrence_bound(stab, r2 - r).value;
        min_gap_c = std::min(min_gap_c, lc - cb);
        if (cb > lc + 1e-9) ++bad_c;
      }
    ++checked;
  }
  o.detail << "models=" << checked << " min(F-bound)=" << num(min_gap_f) << " min(LC-bound)=" << num(min_gap_c) << " ";
  o.require(bad_f == 0, "fidelity bound <= fidelity");
  o.require(bad_c == 0, "concurrence bound <= localizable concurrence");
}

void ac9(Outcome &o) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> g;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };

  // Residual Jacobian on random data around random standard-form MPOs.
  double worst_j = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 4 + trial % 3;
    const Mpo truth = noisy_cluster_model(n, ErrorModel::uniform(n, 0.05 + 0.005 * trial, 0.1));
    CorrelationSet data = exact_correlations(truth, 4);
    for (auto &w : data.windows)
      for (size_t k = 0; k < w.value.size(); ++k) {
        w.se[k] = 1e-2;
        w.value[k] += 1e-2 * g(rng);
      }
    Mpo at = to_standard_form(truth);
    const auto lay = ParameterLayout::standard_form(at);
    Vector p = lay.get(at);
    for (int k = 0; k < p.size(); ++k) p(k) += 0.05 * g(rng);
    lay.set(at, p);
    ResidualModel model(data, lay, FitOptions{});
    Vector r;
    Matrix jac;
    model.evaluate(at, r, &jac);
    const int col = static_cast<int>(rng() % p.size());
    const double h = 1e-6;
    Mpo up = at, dn = at;
    Vector pu = p, pd = p;
    pu(col) += h;
    pd(col) -= h;
    lay.set(up, pu);
    lay.set(dn, pd);
    Vector ru, rd;
    model.evaluate(up, ru, nullptr);
    model.evaluate(dn, rd, nullptr);
    const Vector fd = (ru - rd) / (2 * h);
    worst_j = std::max(worst_j, (fd - jac.col(col)).cwiseAbs().maxCoeff() / std::max(1.0, jac.col(col).cwiseAbs().maxCoeff()));
  }

  double worst_f = 0.0;
  const Mpo target = ideal_cluster_mpo(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Mpo m = oracle::random_mpo(5, 3, rng, 0.5);
    const MpoTangent grad = fidelity_gradient(m, target);
    const int s = static_cast<int>(rng() % 5), i = static_cast<int>(rng() % 4);
    const int l = static_cast<int>(rng() % m[s].left_dim()), r = static_cast<int>(rng() % m[s].right_dim());
    Mpo up = m, dn = m;
    up[s](l, i, r) += 1e-6;
    dn[s](l, i, r) -= 1e-6;
    worst_f = std::max(worst_f, rel(grad[s](l, i, r), (mpo_fidelity(up, target) - mpo_fidelity(dn, target)) / 2e-6));
  }

  double worst_s = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix b(16, 16);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) b(i, j) = g(rng);
    Eigen::JacobiSVD<Matrix> svd(b, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const int i = trial % 16, j = (5 * trial + 3) % 16, k = trial % 7;
    Matrix se = Matrix::Zero(16, 16);
    se(i, j) = 1.0;
    const double an = singular_values_with_se(b, se).second(k);  // |dsigma_k / dB_ij|
    Matrix bp = b, bm = b;
    bp(i, j) += 1e-6;
    bm(i, j) -= 1e-6;
    const double fd = (Eigen::JacobiSVD<Matrix>(bp).singularValues()(k) - Eigen::JacobiSVD<Matrix>(bm).singularValues()(k)) / 2e-6;
    worst_s = std::max(worst_s, rel(an, std::abs(fd)));
  }
  o.detail << "jacobian=" << num(worst_j) << " fidelity_grad=" << num(worst_f) << " sv_deriv=" << num(worst_s) << " ";
  o.require(worst_j < 1e-6, "residual Jacobian");
  o.require(worst_f < 1e-6, "fidelity gradient");
  o.require(worst_s < 1e-6, "singular-value derivative");
}

void ac10(Outcome &o) {
  double worst = 0.0;
  for (int n : {4, 5, 6}) {
    const int L = std::min(n, 5);
    const Mpo m = noisy_cluster_model(n, paper_model(n));
    const CorrelationSet truth = exact_correlations(m, L);
    const CorrelationSet back = zshifted_to_pauli(correct_inefficiency(moments_to_zshifted(exact_local_moments(m, L, kEta)), kEta));
    for (size_t w = 0; w < truth.windows.size(); ++w)
      for (size_t k = 0; k < truth.windows[w].value.size(); ++k)
        worst = std::max(worst, std::abs(truth.windows[w].value[k] - back.windows[w].value[k]));
  }
  const CorrelationSet z = pauli_to_zshifted(exact_correlations(noisy_cluster_model(5, kPaperModel), 5));
  const CorrelationSet lc = correct_inefficiency(transform_sites(z, std::vector<Eigen::Matrix4d>(5, zshifted_loss(kEta))), kEta);
  double round = 0.0;
  for (size_t w = 0; w < z.windows.size(); ++w)
    for (size_t k = 0; k < z.windows[w].value.size(); ++k)
      round = std::max(round, std::abs(z.windows[w].value[k] - lc.windows[w].value[k]));
  o.detail << "pipeline_dev=" << num(worst) << " loss_round_trip=" << num(round) << " ";
  o.require(worst <= 1e-10, "pipeline reproduces correlations");
  o.require(round <= 1e-12, "loss then correct is the identity");
}

}  // namespace

int main() {
  struct Criterion {
    const char *name;
    double budget;  // seconds
    std::function<void(Outcome &)> run;
  };
  const std::vector<Criterion> all{{"AC1", 10, ac1},  {"AC2", 1, ac2},   {"AC3", 30, ac3}, {"AC4", 60, ac4},
                                   {"AC5", 600, ac5}, {"AC6", 1200, ac6}, {"AC7", 600, ac7}, {"AC8", 300, ac8},
                                   {"AC9", 600, ac9}, {"AC10", 600, ac10}};
  int failed = 0;
  for (const auto &c : all) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception &e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "] ";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(secs <= c.budget, "runtime budget " + num(c.budget) + "s");
    if (!o.pass) ++failed;
    std::printf("%s %s %s[%.2fs]\n", c.name, o.pass ? "PASS" : "FAIL", o.detail.str().c_str(), secs);
    std::fflush(stdout);
  }
  return failed;
}
