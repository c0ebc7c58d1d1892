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

#include <random>
#include <sstream>

#include "catch_amalgamated.hpp"
#include "mpotomo/cluster.hpp"
#include "mpotomo/correlations.hpp"
#include "mpotomo/moments.hpp"
#include "oracles.hpp"

using namespace mpotomo;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Ladder operators truncated at K levels; products are formed there and then
// projected onto Fock 0, 1.
struct FockOps {
  static constexpr int K = 8;
  std::array<Eigen::Matrix2cd, 6> first, second;

  FockOps() {
    CMatrix a = CMatrix::Zero(K, K);
    for (int n = 1; n < K; ++n) a(n - 1, n) = std::sqrt(double(n));
    const CMatrix ad = a.adjoint();
    const CMatrix q = (a + ad) / std::sqrt(2.0);
    const CMatrix p = Complex(0, 1) * (ad - a) / std::sqrt(2.0);
    const CMatrix id = CMatrix::Identity(K, K);
    const std::array<CMatrix, 6> ops = {id, id, q, p, q * q, p * p};
    for (int m = 0; m < 6; ++m) {
      first[m] = ops[m].topLeftCorner(2, 2);
      second[m] = (ops[m] * ops[m]).topLeftCorner(2, 2);
    }
  }
};

const FockOps &fock() {
  static const FockOps f;
  return f;
}

double moment_expectation(const CMatrix &rho, const std::vector<int> &word, bool squared = false) {
  CMatrix op = CMatrix::Identity(1, 1);
  for (int m : word) op = oracle::kron(op, squared ? fock().second[m] : fock().first[m]);
  return (rho * op).trace().real();
}

CMatrix lossy_dense(CMatrix rho, int n, double eta) {
  for (int s = 0; s < n; ++s) oracle::apply_kraus(rho, n, s, oracle::amplitude_damping(1.0 - eta));
  return rho;
}

Mpo mpo_of(const CMatrix &rho) { return dense_to_mpo(oracle::as_state(rho), 64); }

}  // namespace

TEST_CASE("moment words", "[moments]") {
  CHECK(moment_word_string(word_code(std::vector<int>{Q0, P1, Q2}, 6), 3) == "Q0P1Q2");
  CHECK(parse_moment_word("Q0P1Q2") == std::vector<int>{Q0, P1, Q2});
  CHECK(parse_moment_word("P2P0") == std::vector<int>{P2, P0});
  CHECK_THROWS_AS(parse_moment_word("Q3"), ValidationError);
  CHECK_THROWS_AS(parse_moment_word("X1"), ValidationError);
  CHECK_THROWS_AS(parse_moment_word("Q"), ValidationError);
  CHECK(moment_setting(Q2) == 0);
  CHECK(moment_setting(P1) == 1);
}

TEST_CASE("moment maps agree with truncated Fock-space operators", "[moments]") {
  const Matrix mm = moment_map(), sq = moment_square_map();
  for (int m = 0; m < 6; ++m)
    for (int i = 0; i < 4; ++i) {
      // Expectation of the operator in the state (I + P_i)/2 minus that in I/2.
      const Eigen::Matrix2cd pi = oracle::pauli(i);
      const double direct = (fock().first[m] * pi).trace().real() / 2.0;
      const double direct2 = (fock().second[m] * pi).trace().real() / 2.0;
      CHECK_THAT(mm(m, i), WithinAbs(direct, 1e-13));
      CHECK_THAT(sq(m, i), WithinAbs(direct2, 1e-13));
    }
}

TEST_CASE("exact local moments", "[moments]") {
  const Mpo vac = product_mpo({Eigen::Vector4d(1, 0, 0, 1)});
  const Mpo one = product_mpo({Eigen::Vector4d(1, 0, 0, -1)});
  const auto tv = exact_local_moments(vac, 1, 1.0);
  CHECK_THAT(tv.windows[0].value[Q2], WithinAbs(0.5, 1e-15));
  CHECK_THAT(tv.windows[0].value[P2], WithinAbs(0.5, 1e-15));
  const auto t1 = exact_local_moments(one, 1, 1.0);
  CHECK_THAT(t1.windows[0].value[Q2] + t1.windows[0].value[P2], WithinAbs(3.0, 1e-15));

  const Mpo plus = product_mpo({Eigen::Vector4d(1, 1, 0, 0)});
  const auto tp = exact_local_moments(plus, 1, 0.391);
  CHECK_THAT(tp.windows[0].value[Q1], WithinAbs(std::sqrt(0.391) / std::sqrt(2.0), 1e-14));
  CHECK(tp.windows[0].se[Q1] == 0.0);

  std::mt19937_64 rng(41);
  for (double eta : {1.0, 0.6}) {
    const CMatrix rho = oracle::random_density(4, rng);
    const auto t = exact_local_moments(mpo_of(rho), 3, eta);
    REQUIRE(t.windows.size() == 2);
    const CMatrix lr = lossy_dense(rho, 4, eta);
    for (const auto &w : t.windows) {
      const std::vector<int> keep = {w.start - 1, w.start, w.start + 1};
      const CMatrix red = oracle::reduce(lr, 4, keep);
      for (std::int64_t r = 0; r < t.rows_per_window(); ++r)
        REQUIRE_THAT(w.value[r], WithinAbs(moment_expectation(red, word_digits(r, 3, 6)), 1e-12));
    }
  }
  CHECK_THROWS_AS(exact_local_moments(vac, 1, 0.0), ParameterError);
  CHECK_THROWS_AS(exact_local_moments(vac, 1, 1.2), ParameterError);
  CHECK_THROWS_AS(exact_local_moments(vac, 2, 1.0), RangeError);
}

TEST_CASE("synthesized datasets", "[moments]") {
  std::mt19937_64 rng(7);
  const CMatrix rho = oracle::random_density(3, rng);
  const Mpo m = mpo_of(rho);
  const double eta = 0.7;
  const auto exact = exact_local_moments(m, 2, eta);
  const auto big = synthesize_dataset(m, 2, eta, 1'000'000'000'000, 5);
  for (size_t w = 0; w < exact.windows.size(); ++w)
    for (std::int64_t r = 0; r < exact.rows_per_window(); ++r)
      CHECK_THAT(big.windows[w].value[r], WithinAbs(exact.windows[w].value[r], 1e-5));

  // Reported variance is the exact operator variance over shots.
  const std::int64_t shots = 10000;
  const auto a = synthesize_dataset(m, 2, eta, shots, 99);
  const CMatrix lr = lossy_dense(rho, 3, eta);
  for (const auto &w : a.windows) {
    const CMatrix red = oracle::reduce(lr, 3, {w.start - 1, w.start});
    for (std::int64_t r = 0; r < a.rows_per_window(); ++r) {
      const auto word = word_digits(r, 2, 6);
      const double mean = moment_expectation(red, word);
      const double var = moment_expectation(red, word, true) - mean * mean;
      REQUIRE_THAT(w.se[r] * w.se[r] * shots, WithinAbs(var, 1e-10));
      CHECK(w.shots[r] == shots);
    }
  }

  const auto b = synthesize_dataset(m, 2, eta, shots, 99);
  const auto c = synthesize_dataset(m, 2, eta, shots, 99, 3);
  for (size_t w = 0; w < a.windows.size(); ++w) {
    CHECK(a.windows[w].value == b.windows[w].value);
    CHECK(a.windows[w].value == c.windows[w].value);
  }
  CHECK_THROWS_AS(synthesize_dataset(m, 2, eta, 99, 1), ParameterError);
}

TEST_CASE("injected noise has the reported spread", "[moments][statistics]") {
  const Mpo m = ideal_cluster_mpo(3);
  const std::int64_t row = word_code(std::vector<int>{Q1, Q0}, 6);
  const std::int64_t row2 = word_code(std::vector<int>{Q2, P2}, 6);
  std::vector<double> v, v2;
  double se = 0, se2 = 0;
  for (int seed = 0; seed < 200; ++seed) {
    const auto t = synthesize_dataset(m, 2, 0.8, 1000, seed);
    v.push_back(t.windows[1].value[row]);
    v2.push_back(t.windows[1].value[row2]);
    se = t.windows[1].se[row];
    se2 = t.windows[1].se[row2];
  }
  auto stdev = [](const std::vector<double> &x) {
    double mu = 0;
    for (double e : x) mu += e;
    mu /= x.size();
    double s = 0;
    for (double e : x) s += (e - mu) * (e - mu);
    return std::sqrt(s / (x.size() - 1));
  };
  CHECK_THAT(stdev(v), WithinRel(se, 0.15));
  CHECK_THAT(stdev(v2), WithinRel(se2, 0.15));
}

TEST_CASE("quadrature sampling", "[moments][statistics]") {
  DenseState vac;
  vac.n_qubits = 1;
  vac.matrix = CMatrix::Zero(2, 2);
  vac.matrix(0, 0) = 1;
  const Matrix sv = sample_quadratures(vac, "q", 1'000'000, 3);
  const double mv = sv.col(0).mean();
  CHECK_THAT((sv.col(0).array() - mv).square().mean(), WithinAbs(0.5, 0.002));

  DenseState one = vac;
  one.matrix(0, 0) = 0;
  one.matrix(1, 1) = 1;
  const Matrix s1 = sample_quadratures(one, "p", 1'000'000, 4);
  CHECK_THAT(s1.col(0).array().square().mean(), WithinAbs(1.5, 0.005));

  DenseState big;
  big.n_qubits = 9;
  big.matrix = CMatrix::Identity(512, 512) / 512.0;
  CHECK_THROWS_AS(sample_quadratures(big, "qqqqqqqqq", 10, 1), SizeError);
  DenseState bad;
  bad.n_qubits = 1;
  bad.matrix = CMatrix::Identity(3, 3) / 3.0;
  CHECK_THROWS_AS(sample_quadratures(bad, "q", 10, 1), SizeError);
  CHECK_THROWS_AS(sample_quadratures(vac, "x", 10, 1), ParameterError);
}

TEST_CASE("two-mode samples reproduce the exact moments", "[moments][statistics]") {
  std::mt19937_64 rng(12);
  const CMatrix rho = oracle::random_density(2, rng);
  const auto exact = exact_local_moments(mpo_of(rho), 2, 1.0);
  const std::int64_t shots = 200000;
  int checked = 0;
  for (const std::string bases : {"qq", "qp", "pq", "pp"}) {
    const Matrix s = sample_quadratures(oracle::as_state(rho), bases, shots, 100 + checked);
    for (std::int64_t r = 0; r < 36; ++r) {
      const auto w = word_digits(r, 2, 6);
      bool match = true;
      for (int k = 0; k < 2; ++k)
        if (w[k] >= 2 && moment_setting(w[k]) != (bases[k] == 'p')) match = false;
      if (!match) continue;
      Vector prod = Vector::Ones(shots);
      for (int k = 0; k < 2; ++k) prod.array() *= s.col(k).array().pow(w[k] / 2);
      const double mean = prod.mean();
      const double se = std::sqrt((prod.array() - mean).square().sum() / (shots - 1) / shots);
      CHECK(std::abs(mean - exact.windows[0].value[r]) < 4 * se + 1e-12);
      ++checked;
    }
  }
  CHECK(checked == 4 * 16);
}

TEST_CASE("sampled moments converge as one over root shots", "[moments][statistics]") {
  std::mt19937_64 rng(8);
  const CMatrix rho = oracle::random_density(2, rng);
  const auto exact = exact_local_moments(mpo_of(rho), 2, 1.0);
  const std::int64_t rq = word_code(std::vector<int>{Q1, Q2}, 6);
  std::vector<double> rms;
  for (std::int64_t shots : {500, 2000, 8000}) {
    double ss = 0;
    const int seeds = 40;
    for (int seed = 0; seed < seeds; ++seed) {
      const Matrix s = sample_quadratures(oracle::as_state(rho), "qq", shots, 1000 * shots + seed);
      const double est = (s.col(0).array() * s.col(1).array().square()).mean();
      ss += std::pow(est - exact.windows[0].value[rq], 2);
    }
    rms.push_back(std::sqrt(ss / seeds));
  }
  CHECK(rms[0] / rms[1] > 1.3);
  CHECK(rms[0] / rms[1] < 3.0);
  CHECK(rms[1] / rms[2] > 1.3);
  CHECK(rms[1] / rms[2] < 3.0);
}

TEST_CASE("moment CSV round trip", "[moments][io]") {
  const auto t = synthesize_dataset(ideal_cluster_mpo(4), 2, 0.5, 1000, 1);
  std::stringstream ss;
  write_moment_csv(ss, t);
  MomentTable back = empty_moment_table(4, 2);
  read_moment_csv(ss, back);
  for (size_t w = 0; w < t.windows.size(); ++w) {
    CHECK(back.windows[w].value == t.windows[w].value);
    CHECK(back.windows[w].se == t.windows[w].se);
    CHECK(back.windows[w].shots == t.windows[w].shots);
  }
  std::stringstream part;
  write_moment_csv(part, t, [](int s, std::int64_t code) { return s == 2 && code < 6; });
  MomentTable some = empty_moment_table(4, 2);
  read_moment_csv(part, some);
  CHECK(some.windows[1].present[5] == 1);
  CHECK(some.windows[1].present[6] == 0);
  CHECK(some.windows[0].present[0] == 0);

  MomentTable x = empty_moment_table(4, 2);
  std::stringstream bad1("1,Q0Q1,0.1\n");
  CHECK_THROWS_AS(read_moment_csv(bad1, x), ValidationError);
  std::stringstream bad2("1,Q0Q7,0.1,0.1,10\n");
  CHECK_THROWS_AS(read_moment_csv(bad2, x), ValidationError);
  std::stringstream bad3("9,Q0Q1,0.1,0.1,10\n");
  CHECK_THROWS_AS(read_moment_csv(bad3, x), ValidationError);
  std::stringstream bad4("1,Q0Q1,abc,0.1,10\n");
  CHECK_THROWS_AS(read_moment_csv(bad4, x), ValidationError);
  std::stringstream bad5("1,Q0Q1,0.1,-1,10\n");
  CHECK_THROWS_AS(read_moment_csv(bad5, x), DataError);
}

// --- moment pipeline ----------------------------------------------------------

TEST_CASE("moments to z-shifted correlations", "[pipeline]") {
  const Mpo plus = product_mpo({Eigen::Vector4d(1, 1, 0, 1)});  // not positive, only linear maps matter
  const auto z = moments_to_zshifted(exact_local_moments(plus, 1, 1.0));
  CHECK(z.basis == CorrBasis::ZShifted);
  CHECK_THAT(z.windows[0].value[1], WithinAbs(1.0, 1e-15));
  CHECK_THAT(z.windows[0].value[3], WithinAbs(1.0, 1e-15));  // vacuum-like R3 = 2 - <Z>
  CHECK_THAT(z.windows[0].value[0], WithinAbs(1.0, 1e-15));

  const Mpo one = product_mpo({Eigen::Vector4d(1, 0, 0, -1)});
  const auto z1 = moments_to_zshifted(exact_local_moments(one, 1, 1.0));
  CHECK_THAT(z1.windows[0].value[3], WithinAbs(3.0, 1e-15));
  CHECK_THAT(zshifted_to_pauli(z1).windows[0].value[3], WithinAbs(-1.0, 1e-15));
}

TEST_CASE("pipeline exactness against the dense oracle", "[pipeline][property]") {
  std::mt19937_64 rng(19);
  for (int n = 2; n <= 6; ++n) {
    const CMatrix rho = oracle::random_density(n, rng);
    const Mpo m = mpo_of(rho);
    const int L = std::min(n, 3);
    const double eta = 0.3 + 0.1 * n;
    const auto z = moments_to_zshifted(exact_local_moments(m, L, std::min(eta, 1.0)));
    const auto p = zshifted_to_pauli(correct_inefficiency(z, std::min(eta, 1.0)));
    const auto truth = exact_correlations(m, L);
    for (size_t w = 0; w < p.windows.size(); ++w) {
      const int s0 = p.windows[w].start - 1;
      std::vector<int> keep;
      for (int k = 0; k < L; ++k) keep.push_back(s0 + k);
      const CMatrix red = oracle::reduce(rho, n, keep);
      for (std::int64_t r = 0; r < p.rows_per_window(); ++r) {
        REQUIRE_THAT(p.windows[w].value[r], WithinAbs(truth.windows[w].value[r], 1e-10));
        REQUIRE_THAT(p.windows[w].value[r], WithinAbs(oracle::expectation(red, word_digits(r, L, 4)), 1e-10));
      }
    }
  }
}

TEST_CASE("completeness of moment tables", "[pipeline]") {
  auto t = synthesize_dataset(ideal_cluster_mpo(3), 2, 1.0, 1000, 2);
  // Dropping one of the duplicated identity rows degrades but does not fail.
  const std::int64_t q0x = word_code(std::vector<int>{Q0, Q1}, 6), p0x = word_code(std::vector<int>{P0, Q1}, 6);
  const double both = moments_to_zshifted(t).windows[0].se[word_code({0, 1}, 4)];
  t.windows[0].present[p0x] = 0;
  const auto z = moments_to_zshifted(t);
  const double single = z.windows[0].se[word_code({0, 1}, 4)];
  CHECK_THAT(single, WithinAbs(std::sqrt(2.0) * t.windows[0].se[q0x], 1e-15));
  CHECK(single > both);
  t.windows[0].present[q0x] = 0;
  t.windows[1].present[word_code(std::vector<int>{Q2, P1}, 6)] = 0;
  try {
    moments_to_zshifted(t);
    FAIL("expected CompletenessError");
  } catch (const CompletenessError &e) {
    REQUIRE(e.missing().size() == 2);
    CHECK(e.missing()[0] == "window 1 Q0Q1");
    CHECK(e.missing()[1] == "window 2 Q2P1");
  }
}

TEST_CASE("inefficiency correction", "[pipeline]") {
  CorrelationSet c;
  c.basis = CorrBasis::ZShifted;
  c.n_sites = 1;
  c.window = 1;
  c.windows.push_back({1, {1.0, 0.5, 0.2, 1.4}, {0.0, 0.01, 0.02, 0.03}});
  const auto same = correct_inefficiency(c, 1.0);
  CHECK(same.windows[0].value == c.windows[0].value);
  const double eta = 0.391;
  const auto k = correct_inefficiency(c, eta);
  CHECK_THAT(k.windows[0].value[1], WithinAbs(0.5 / std::sqrt(eta), 1e-15));
  CHECK_THAT(k.windows[0].se[1], WithinAbs(0.01 / std::sqrt(eta), 1e-15));
  CHECK_THAT(k.windows[0].se[2], WithinAbs(0.02 / std::sqrt(eta), 1e-15));
  CHECK_THAT(k.windows[0].se[3], WithinAbs(0.03 / eta, 1e-15));
  CHECK_THAT(k.windows[0].value[3], WithinAbs((1.4 - (1 - eta)) / eta, 1e-14));

  // eta's own uncertainty enters to first order.
  const auto ke = correct_inefficiency(c, eta, 0.004);
  const double dx = -0.5 * 0.5 * std::pow(eta, -1.5) * 0.004;
  CHECK_THAT(ke.windows[0].se[1], WithinAbs(std::hypot(0.01 / std::sqrt(eta), dx), 1e-15));

  // Loss followed by correction is the identity.
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  CorrelationSet r;
  r.basis = CorrBasis::ZShifted;
  r.n_sites = 4;
  r.window = 3;
  for (int s = 1; s <= 2; ++s) {
    CorrWindow w{s, std::vector<double>(64), std::vector<double>(64, 0.0)};
    for (auto &v : w.value) v = g(rng);
    r.windows.push_back(w);
  }
  const auto lossy = transform_sites(r, std::vector<Eigen::Matrix4d>(4, zshifted_loss(0.45)));
  const auto back = correct_inefficiency(lossy, 0.45);
  for (size_t w = 0; w < r.windows.size(); ++w)
    for (size_t i = 0; i < 64; ++i) CHECK_THAT(back.windows[w].value[i], WithinAbs(r.windows[w].value[i], 1e-12));

  CHECK_THROWS_AS(correct_inefficiency(c, 0.0), ParameterError);
  CHECK_THROWS_AS(correct_inefficiency(zshifted_to_pauli(c), 0.5), StateError);
}

TEST_CASE("F is an involution and tags are enforced", "[pipeline][property]") {
  CHECK((f_matrix() * f_matrix() - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() == 0.0);
  const auto p = exact_correlations(ideal_cluster_mpo(5), 3);
  const auto twice = zshifted_to_pauli(zshifted_to_pauli(p, true), true);
  for (size_t w = 0; w < p.windows.size(); ++w)
    for (size_t i = 0; i < p.windows[w].value.size(); ++i)
      CHECK_THAT(twice.windows[w].value[i], WithinAbs(p.windows[w].value[i], 1e-15));
  CHECK_THROWS_AS(zshifted_to_pauli(p), StateError);
  CHECK_THROWS_AS(pauli_to_zshifted(pauli_to_zshifted(p)), StateError);

  CorrelationSet one;
  one.basis = CorrBasis::ZShifted;
  one.n_sites = 1;
  one.window = 1;
  one.windows.push_back({1, {1, 0, 0, 1}, {0, 0, 0, 0.1}});
  const auto pp = zshifted_to_pauli(one);
  CHECK(pp.windows[0].value == std::vector<double>{1, 0, 0, 1});
  CHECK(pp.independence_assumed);
  one.windows[0].se = {0.05, 0, 0, 0.1};
  CHECK_THAT(zshifted_to_pauli(one).windows[0].se[3], WithinAbs(std::sqrt(4 * 0.0025 + 0.01), 1e-15));
}

TEST_CASE("synthetic cluster data reproduces the unit correlations", "[pipeline][statistics]") {
  const Mpo m = ideal_cluster_mpo(5);
  const double eta = 0.391;
  const auto data = synthesize_dataset(m, 3, eta, 10'000'000, 2024);
  const auto p = zshifted_to_pauli(correct_inefficiency(moments_to_zshifted(data), eta));
  const auto truth = exact_correlations(m, 3);
  int unit = 0, within3 = 0, total = 0;
  for (size_t w = 0; w < p.windows.size(); ++w)
    for (std::int64_t r = 1; r < 64; ++r) {
      const double t = truth.windows[w].value[r];
      const double z = std::abs(p.windows[w].value[r] - t) / p.windows[w].se[r];
      ++total;
      if (z < 3) ++within3;
      if (std::abs(std::abs(t) - 1.0) < 1e-12) {
        ++unit;
        CHECK(z < 4);
      }
    }
  CHECK(unit > 0);
  CHECK(within3 >= 0.98 * total);
}

TEST_CASE("local estimates combine overlapping windows", "[pipeline]") {
  CorrelationSet c;
  c.n_sites = 3;
  c.window = 2;
  c.windows.push_back({1, std::vector<double>(16, 0.0), std::vector<double>(16, 0.0)});
  c.windows.push_back({2, std::vector<double>(16, 0.0), std::vector<double>(16, 0.0)});
  c.windows[0].value[word_code({0, 1}, 4)] = 0.4;
  c.windows[0].se[word_code({0, 1}, 4)] = 0.1;
  c.windows[1].value[word_code({1, 0}, 4)] = 0.7;
  c.windows[1].se[word_code({1, 0}, 4)] = 0.2;
  const Estimate e = c.local(2, {1});
  CHECK_THAT(e.value, WithinAbs((0.4 / 0.01 + 0.7 / 0.04) / (1 / 0.01 + 1 / 0.04), 1e-14));
  CHECK_THAT(e.se, WithinAbs(std::sqrt(1 / (1 / 0.01 + 1 / 0.04)), 1e-14));
  CHECK_THROWS_AS(c.local(1, {1, 1, 1}), RangeError);
}

TEST_CASE("phase alignment", "[pipeline]") {
  const int n = 6;
  const auto ideal = exact_correlations(ideal_cluster_mpo(n), 3);
  const auto a0 = align_phases(ideal);
  for (double a : a0.angles) CHECK_THAT(a, WithinAbs(0.0, 1e-12));

  std::vector<double> inject(n, 0.0);
  inject[2] = 0.3;
  const auto rotated = rotate_sites(ideal, inject);
  // A rotation of +0.3 turns X into cos X + sin Y.
  CHECK_THAT(rotated.local(2, {3, 2, 3}).value, WithinAbs(std::sin(0.3), 1e-14));
  const auto a = align_phases(rotated);
  CHECK_THAT(a.angles[2], WithinAbs(-0.3, 1e-10));
  for (int s = 1; s <= n; ++s) {
    auto [fy, wy] = stabilizer_pattern(s, n, 2);
    CHECK_THAT(a.corrs.local(fy, wy).value, WithinAbs(0.0, 1e-10));
  }
  CHECK(a.corrs.angles == a.angles);

  // Random rotations everywhere, including past the half plane.
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::vector<double> angles(n);
  for (auto &x : angles) x = u(rng);
  const auto noisy = exact_correlations(noisy_cluster_model(n, ErrorModel::uniform(n, 0.1, 0.2)), 3);
  const auto rn = rotate_sites(noisy, angles);
  const auto an = align_phases(rn);
  for (int s = 1; s <= n; ++s) {
    CHECK_THAT(std::remainder(an.angles[s - 1] + angles[s - 1], 2 * std::numbers::pi), WithinAbs(0.0, 1e-10));
    auto [fx, wx] = stabilizer_pattern(s, n, 1);
    CHECK(an.corrs.local(fx, wx).value >= rn.local(fx, wx).value - 1e-12);
  }

  const auto flat = exact_correlations(product_mpo(std::vector<Eigen::Vector4d>(4, Eigen::Vector4d(1, 0, 0, 1))), 3);
  CHECK_THROWS_AS(align_phases(flat), UndefinedPhaseError);
  // Z-shifted input is rotated in its own basis by the same angles.
  const auto az = align_phases(pauli_to_zshifted(rn));
  CHECK(az.corrs.basis == CorrBasis::ZShifted);
  const auto back = zshifted_to_pauli(az.corrs);
  for (int s = 1; s <= n; ++s) {
    CHECK_THAT(az.angles[s - 1], WithinAbs(an.angles[s - 1], 1e-12));
    auto [fx, wx] = stabilizer_pattern(s, n, 1);
    CHECK_THAT(back.local(fx, wx).value, WithinAbs(an.corrs.local(fx, wx).value, 1e-12));
  }
}

TEST_CASE("correlation CSV round trip", "[pipeline][io]") {
  const auto data = synthesize_dataset(ideal_cluster_mpo(4), 2, 0.5, 1000, 3);
  for (const auto &c : {moments_to_zshifted(data), zshifted_to_pauli(correct_inefficiency(moments_to_zshifted(data), 0.5))}) {
    std::stringstream ss;
    write_correlation_csv(ss, c);
    const auto back = read_correlation_csv(ss, correlation_metadata(c));
    CHECK(back.basis == c.basis);
    CHECK(back.eta == c.eta);
    for (size_t w = 0; w < c.windows.size(); ++w) {
      CHECK(back.windows[w].value == c.windows[w].value);
      CHECK(back.windows[w].se == c.windows[w].se);
    }
  }
  const auto meta = correlation_metadata(moments_to_zshifted(data));
  std::stringstream partial("window_start,word,value,se\n1,R0R0,1,0\n");
  CHECK_THROWS_AS(read_correlation_csv(partial, meta), CompletenessError);
  std::stringstream bad("1,R0R9,1,0\n");
  CHECK_THROWS_AS(read_correlation_csv(bad, meta), ValidationError);
  std::stringstream bad2("x,R0R0,1,0\n");
  CHECK_THROWS_AS(read_correlation_csv(bad2, meta), ValidationError);
  CHECK_THROWS_AS(read_correlation_csv(partial, nlohmann::json{{"basis", "other"}}), ValidationError);
}
