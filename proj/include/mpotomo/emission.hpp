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
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpotomo/mpo.hpp"
#include "mpotomo/rng.hpp"

namespace mpotomo {

/// Orthonormal Hermitian basis of d x d matrices under the trace inner
/// product. B_0 = I/sqrt(d), then symmetric and antisymmetric off-diagonal
/// elements for each pair j < k, then the diagonal generators.
inline std::vector<CMatrix> emitter_basis(int d) {
  if (d < 2 || d > 4) throw RangeError("emitter dimension must be 2..4");
  std::vector<CMatrix> b;
  b.push_back(CMatrix::Identity(d, d) / std::sqrt(double(d)));
  const double h = 1.0 / std::sqrt(2.0);
  const Complex I(0, 1);
  for (int j = 0; j < d; ++j)
    for (int k = j + 1; k < d; ++k) {
      CMatrix s = CMatrix::Zero(d, d), a = CMatrix::Zero(d, d);
      s(j, k) = s(k, j) = h;
      a(j, k) = -I * h;
      a(k, j) = I * h;
      b.push_back(s);
      b.push_back(a);
    }
  for (int l = 1; l < d; ++l) {
    CMatrix m = CMatrix::Zero(d, d);
    const double c = 1.0 / std::sqrt(double(l) * (l + 1));
    for (int j = 0; j < l; ++j) m(j, j) = c;
    m(l, l) = -c * l;
    b.push_back(m);
  }
  return b;
}

/// Coefficients c_k = Tr[B_k rho].
inline Vector emitter_coefficients(const CMatrix &rho) {
  const int d = static_cast<int>(rho.rows());
  const auto b = emitter_basis(d);
  Vector c(d * d);
  for (int k = 0; k < d * d; ++k) c(k) = (b[k] * rho).trace().real();
  return c;
}

/// Trace-preserving map on emitter coefficient vectors: c' = M c.
class EmitterChannel {
 public:
  EmitterChannel() = default;
  EmitterChannel(int d, Matrix m) : d_(d), m_(std::move(m)) {
    if (d_ < 2 || d_ > 4) throw RangeError("emitter dimension must be 2..4");
    if (m_.rows() != d_ * d_ || m_.cols() != d_ * d_) throw ShapeError("emitter channel must be d^2 x d^2");
    RowVector e0 = RowVector::Zero(d_ * d_);
    e0(0) = 1;
    if ((m_.row(0) - e0).cwiseAbs().maxCoeff() > 1e-10)
      throw ParameterError("emitter channel is not trace preserving");
  }

  static EmitterChannel identity(int d) { return EmitterChannel(d, Matrix::Identity(d * d, d * d)); }

  static EmitterChannel from_kraus(const std::vector<CMatrix> &kraus) {
    if (kraus.empty()) throw ParameterError("no Kraus operators");
    const int d = static_cast<int>(kraus[0].rows());
    const auto b = emitter_basis(d);
    Matrix m(d * d, d * d);
    for (int k = 0; k < d * d; ++k)
      for (int l = 0; l < d * d; ++l) {
        Complex acc = 0;
        for (const auto &op : kraus) acc += (b[k] * op * b[l] * op.adjoint()).trace();
        m(k, l) = acc.real();
      }
    return EmitterChannel(d, m);
  }

  static EmitterChannel from_unitary(const CMatrix &u) { return from_kraus({u}); }

  /// A qubit process matrix reused as an emitter channel (d = 2). The
  /// normalized basis is the Pauli basis up to a common factor, so the
  /// matrix carries over unchanged.
  static EmitterChannel from_process(const ProcessMatrix &p) { return EmitterChannel(2, p.matrix()); }

  int dim() const { return d_; }
  const Matrix &matrix() const { return m_; }

  friend EmitterChannel operator*(const EmitterChannel &a, const EmitterChannel &b) {
    if (a.d_ != b.d_) throw ShapeError("emitter dimensions differ");
    return EmitterChannel(a.d_, a.m_ * b.m_);
  }

 private:
  int d_ = 2;
  Matrix m_ = Matrix::Identity(4, 4);
};

/// Emission step with the photon starting in vacuum: slice i maps emitter
/// coefficients in (rows) to emitter coefficients out (columns) jointly with
/// photon Pauli component i.
class EmissionTensor {
 public:
  EmissionTensor() = default;
  EmissionTensor(int d, std::array<Matrix, 4> slices) : d_(d), slices_(std::move(slices)) { validate(); }

  /// From a unitary on emitter (x) photon, basis index e * 2 + p.
  static EmissionTensor from_unitary(const CMatrix &u, int d) {
    if (u.rows() != 2 * d || u.cols() != 2 * d) throw ShapeError("emission unitary must be 2d x 2d");
    const auto b = emitter_basis(d);
    CMatrix vac = CMatrix::Zero(2, 2);
    vac(0, 0) = 1;
    std::array<CMatrix, 4> p;
    for (int i = 0; i < 4; ++i) p[i] = pauli_matrix(i);
    std::array<Matrix, 4> s;
    for (auto &m : s) m = Matrix::Zero(d * d, d * d);
    for (int kin = 0; kin < d * d; ++kin) {
      const CMatrix out = u * kron(b[kin], vac) * u.adjoint();
      for (int i = 0; i < 4; ++i)
        for (int kout = 0; kout < d * d; ++kout)
          s[i](kin, kout) = (kron(b[kout], p[i]) * out).trace().real();
    }
    return EmissionTensor(d, s);
  }

  /// Apply a channel to the emitted photon.
  EmissionTensor with_photon_channel(const ProcessMatrix &e) const {
    std::array<Matrix, 4> s;
    for (int i = 0; i < 4; ++i) {
      s[i] = Matrix::Zero(slices_[0].rows(), slices_[0].cols());
      for (int j = 0; j < 4; ++j)
        if (e(i, j) != 0.0) s[i] += e(i, j) * slices_[j];
    }
    return EmissionTensor(d_, s);
  }

  int dim() const { return d_; }
  const Matrix &operator[](int i) const { return slices_[i]; }

  void validate() const {
    for (const auto &m : slices_)
      if (m.rows() != d_ * d_ || m.cols() != d_ * d_) throw ShapeError("emission slices must be d^2 x d^2");
    // Tracing out the photon must preserve the emitter trace.
    Vector e0 = Vector::Zero(d_ * d_);
    e0(0) = 1;
    if ((slices_[0].col(0) - e0).cwiseAbs().maxCoeff() > 1e-10)
      throw ParameterError("emission tensor is not trace preserving");
  }

  static CMatrix kron(const CMatrix &a, const CMatrix &b) {
    CMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
  }

 private:
  int d_ = 2;
  std::array<Matrix, 4> slices_;
};

/// Gate / emission schedule. Photon s is emitted by emissions[s-1] after
/// gates[s-1] acts on the emitter.
struct ProtocolSpec {
  int d = 2;
  Vector initial;  // emitter coefficients
  std::vector<EmitterChannel> gates;
  std::vector<EmissionTensor> emissions;
  bool disentangle = true;

  int n_photons() const { return static_cast<int>(emissions.size()); }

  void validate() const {
    if (emissions.empty()) throw ParameterError("protocol emits no photons");
    if (gates.size() != emissions.size()) throw ShapeError("gate and emission counts differ");
    if (initial.size() != d * d) throw ShapeError("initial emitter vector must have d^2 entries");
    if (std::abs(initial(0) - 1.0 / std::sqrt(double(d))) > 1e-10)
      throw ParameterError("initial emitter state must have unit trace");
    for (const auto &g : gates)
      if (g.dim() != d) throw ShapeError("gate dimension mismatch");
    for (const auto &e : emissions)
      if (e.dim() != d) throw ShapeError("emission dimension mismatch");
  }
};

/// Contract the protocol into an MPO over the photons; the emitter is traced
/// out after the final emission.
inline Mpo emit_mpo(const ProtocolSpec &p) {
  p.validate();
  const int n = p.n_photons();
  const int D = p.d * p.d;
  std::vector<SiteTensor> sites;
  for (int s = 0; s < n; ++s) {
    const Matrix gt = p.gates[s].matrix().transpose();
    const int dl = s == 0 ? 1 : D, dr = s == n - 1 ? 1 : D;
    SiteTensor t(dl, dr);
    for (int i = 0; i < 4; ++i) {
      Matrix m = gt * p.emissions[s][i];
      if (s == n - 1) m = Matrix(m.col(0) * std::sqrt(double(p.d)));
      if (s == 0) m = p.initial.transpose() * m;
      t[i] = m;
    }
    sites.push_back(t);
  }
  return Mpo(std::move(sites));
}

inline Eigen::Matrix2cd ry(double theta) {
  Eigen::Matrix2cd r;
  const double c = std::cos(theta / 2), s = std::sin(theta / 2);
  r << c, -s, s, c;
  return r;
}

/// Emitter-controlled emission: a photon is created only from |e>, and
/// the emitter is flipped afterwards: x|g> + y|e> -> x|e,0> + y|g,1>.
inline CMatrix conditional_emission_unitary() {
  CMatrix cnot = CMatrix::Zero(4, 4);
  cnot(0, 0) = cnot(1, 1) = cnot(2, 3) = cnot(3, 2) = 1;
  CMatrix xe = CMatrix::Zero(4, 4);
  xe(0, 2) = xe(2, 0) = xe(1, 3) = xe(3, 1) = 1;
  return xe * cnot;
}

/// State transfer to the photon leaving the emitter in |g>.
inline CMatrix transfer_emission_unitary() {
  CMatrix swap = CMatrix::Zero(4, 4);
  swap(0, 0) = swap(1, 2) = swap(2, 1) = swap(3, 3) = 1;
  return swap;
}

struct ClusterImperfections {
  std::vector<double> rotation_offsets;          // per step, radians
  std::vector<ProcessMatrix> emitter_errors;     // after each rotation
  std::vector<ProcessMatrix> photon_errors;      // on each emitted photon
  bool omit_rotations = false;                   // keep only the first rotation
  bool frame_correction = true;                  // Z relabels on photons 1 and N
};

/// Sequential-emission cluster protocol for a two-level emitter. Steps
/// 1..N-1 rotate by pi/2 and emit conditionally; the last step rotates and
/// transfers. The bare circuit yields Z_1 Z_N |C>, so a Z relabel is folded
/// into photons 1 and N unless disabled.
inline ProtocolSpec build_cluster_protocol(int n, const ClusterImperfections &imp = {}) {
  if (n < 2) throw RangeError("cluster protocol needs n >= 2");
  auto check = [n](size_t sz, const char *what) {
    if (sz != 0 && sz != static_cast<size_t>(n))
      throw ShapeError(std::string(what) + " must have n entries");
  };
  check(imp.rotation_offsets.size(), "rotation_offsets");
  check(imp.emitter_errors.size(), "emitter_errors");
  check(imp.photon_errors.size(), "photon_errors");
  ProtocolSpec p;
  p.d = 2;
  p.initial = emitter_coefficients((CMatrix(2, 2) << 1, 0, 0, 0).finished());
  const EmissionTensor cond = EmissionTensor::from_unitary(conditional_emission_unitary(), 2);
  const EmissionTensor xfer = EmissionTensor::from_unitary(transfer_emission_unitary(), 2);
  const ProcessMatrix zframe(Eigen::Vector4d(1, -1, -1, 1).asDiagonal().toDenseMatrix());
  for (int s = 0; s < n; ++s) {
    double theta = std::numbers::pi / 2;
    if (imp.omit_rotations && s > 0) theta = 0.0;
    if (!imp.rotation_offsets.empty()) theta += imp.rotation_offsets[s];
    EmitterChannel g = EmitterChannel::from_unitary(ry(theta));
    if (!imp.emitter_errors.empty()) g = EmitterChannel::from_process(imp.emitter_errors[s]) * g;
    p.gates.push_back(g);
    EmissionTensor e = s + 1 < n ? cond : xfer;
    ProcessMatrix ph;
    if (!imp.photon_errors.empty()) ph = imp.photon_errors[s];
    if (imp.frame_correction && (s == 0 || s == n - 1)) ph = zframe * ph;
    p.emissions.push_back(e.with_photon_channel(ph));
  }
  p.disentangle = true;
  return p;
}

/// Random d-level protocol: Haar-like gates and emission unitaries, with the
/// emitter left entangled at the end.
inline ProtocolSpec build_random_protocol(int n, int d, std::uint64_t seed) {
  if (n < 1) throw RangeError("need at least one photon");
  KeyedRng rng(seed, 0x5EED);
  auto haar = [&](int m) {
    CMatrix a(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) a(i, j) = Complex(rng.normal(), rng.normal());
    Eigen::HouseholderQR<CMatrix> qr(a);
    CMatrix q = qr.householderQ();
    CMatrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int k = 0; k < m; ++k) q.col(k) *= r(k, k) / std::abs(r(k, k));
    return q;
  };
  ProtocolSpec p;
  p.d = d;
  CMatrix g0 = CMatrix::Zero(d, d);
  g0(0, 0) = 1;
  p.initial = emitter_coefficients(g0);
  for (int s = 0; s < n; ++s) {
    p.gates.push_back(EmitterChannel::from_unitary(haar(d)));
    p.emissions.push_back(EmissionTensor::from_unitary(haar(2 * d), d));
  }
  p.disentangle = false;
  return p;
}

inline nlohmann::json protocol_to_json(const ProtocolSpec &p) {
  auto mat = [](const Matrix &m) {
    std::vector<double> v;
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
    return v;
  };
  nlohmann::json j;
  j["d"] = p.d;
  j["n_photons"] = p.n_photons();
  j["initial"] = std::vector<double>(p.initial.data(), p.initial.data() + p.initial.size());
  j["disentangle"] = p.disentangle;
  j["gates"] = nlohmann::json::array();
  for (const auto &g : p.gates) j["gates"].push_back(mat(g.matrix()));
  j["emissions"] = nlohmann::json::array();
  for (const auto &e : p.emissions) {
    nlohmann::json sl = nlohmann::json::array();
    for (int i = 0; i < 4; ++i) sl.push_back(mat(e[i]));
    j["emissions"].push_back(sl);
  }
  return j;
}

inline ProtocolSpec protocol_from_json(const nlohmann::json &j) {
  try {
    ProtocolSpec p;
    p.d = j.at("d").get<int>();
    const int D = p.d * p.d;
    auto mat = [D](const std::vector<double> &v) {
      if (static_cast<int>(v.size()) != D * D) throw ValidationError("matrix has wrong size");
      Matrix m(D, D);
      for (int i = 0; i < D; ++i)
        for (int k = 0; k < D; ++k) m(i, k) = v[i * D + k];
      return m;
    };
    const auto init = j.at("initial").get<std::vector<double>>();
    p.initial = Eigen::Map<const Vector>(init.data(), init.size());
    p.disentangle = j.value("disentangle", true);
    for (const auto &g : j.at("gates")) p.gates.emplace_back(p.d, mat(g.get<std::vector<double>>()));
    for (const auto &e : j.at("emissions")) {
      std::array<Matrix, 4> s;
      for (int i = 0; i < 4; ++i) s[i] = mat(e.at(i).get<std::vector<double>>());
      p.emissions.emplace_back(p.d, s);
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("malformed protocol JSON: ") + e.what());
  }
}

}  // namespace mpotomo
