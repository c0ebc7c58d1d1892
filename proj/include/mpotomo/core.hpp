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

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mpotomo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Complex = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string &what) : std::runtime_error(what) {}
};

#define MPOTOMO_DEFINE_ERROR(Name)                                        \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string &what) : Error(#Name ": " + what) {}  \
  };

MPOTOMO_DEFINE_ERROR(RangeError)
MPOTOMO_DEFINE_ERROR(ShapeError)
MPOTOMO_DEFINE_ERROR(SizeError)
MPOTOMO_DEFINE_ERROR(DegenerateInputError)
MPOTOMO_DEFINE_ERROR(SingularityError)
MPOTOMO_DEFINE_ERROR(ParameterError)
MPOTOMO_DEFINE_ERROR(DataError)
MPOTOMO_DEFINE_ERROR(StateError)
MPOTOMO_DEFINE_ERROR(NormalizationError)
MPOTOMO_DEFINE_ERROR(ValidationError)
MPOTOMO_DEFINE_ERROR(IoError)
MPOTOMO_DEFINE_ERROR(UndefinedPhaseError)

#undef MPOTOMO_DEFINE_ERROR

/// Raised when a table lacks rows that an operation needs. `missing` holds
/// the absent keys in the textual form used by the owning file format.
class CompletenessError : public Error {
 public:
  CompletenessError(const std::string &what, std::vector<std::string> missing)
      : Error("CompletenessError: " + what), missing_(std::move(missing)) {}
  const std::vector<std::string> &missing() const { return missing_; }

 private:
  std::vector<std::string> missing_;
};

/// Raised by iterative solvers that run out of iterations.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string &what, std::vector<double> last_iterate)
      : Error("ConvergenceError: " + what),
        last_iterate_(std::move(last_iterate)) {}
  const std::vector<double> &last_iterate() const { return last_iterate_; }

 private:
  std::vector<double> last_iterate_;
};

/// A value with its standard error.
struct Estimate {
  double value = 0.0;
  double se = 0.0;
};

inline std::int64_t ipow(std::int64_t base, int exp) {
  std::int64_t r = 1;
  for (int k = 0; k < exp; ++k) r *= base;
  return r;
}

}  // namespace mpotomo
