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
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mpotomo/core.hpp"

namespace mpotomo {

/// 2x2 Pauli matrix; 0=I, 1=X, 2=Y, 3=Z.
inline Eigen::Matrix2cd pauli_matrix(int i) {
  Eigen::Matrix2cd m;
  const Complex I(0.0, 1.0);
  switch (i) {
    case 0: m << 1, 0, 0, 1; break;
    case 1: m << 0, 1, 1, 0; break;
    case 2: m << 0, -I, I, 0; break;
    case 3: m << 1, 0, 0, -1; break;
    default: throw RangeError("Pauli index " + std::to_string(i));
  }
  return m;
}

inline char pauli_letter(int i) { return "IXYZ"[i & 3]; }

inline int pauli_from_letter(char c) {
  switch (c) {
    case 'I': return 0;
    case 'X': return 1;
    case 'Y': return 2;
    case 'Z': return 3;
    default: throw ParameterError(std::string("not a Pauli letter: ") + c);
  }
}

/// A Pauli string acting on consecutive sites starting at `start_site`
/// (1-based).
struct PauliWord {
  std::vector<int> indices;
  int start_site = 1;

  PauliWord() = default;
  PauliWord(std::vector<int> idx, int start) : indices(std::move(idx)), start_site(start) {
    for (int i : indices)
      if (i < 0 || i > 3) throw RangeError("Pauli index " + std::to_string(i));
    if (start_site < 1) throw RangeError("start_site must be >= 1");
  }

  /// Parse "XZY" style text.
  static PauliWord parse(std::string_view letters, int start = 1) {
    std::vector<int> idx;
    for (char c : letters) idx.push_back(pauli_from_letter(c));
    return PauliWord(std::move(idx), start);
  }

  /// Word of length n with single-site operators at given 1-based sites.
  static PauliWord sparse(int n, std::initializer_list<std::pair<int, int>> ops) {
    std::vector<int> idx(n, 0);
    for (auto [site, p] : ops) {
      if (site < 1 || site > n) throw RangeError("site " + std::to_string(site));
      idx[site - 1] = p;
    }
    return PauliWord(std::move(idx), 1);
  }

  int length() const { return static_cast<int>(indices.size()); }
  int end_site() const { return start_site + length() - 1; }

  std::string str() const {
    std::string s;
    for (int i : indices) s += pauli_letter(i);
    return s;
  }
};

/// Digits of `code` in base `base`, most significant first.
inline std::vector<int> word_digits(std::int64_t code, int length, int base) {
  std::vector<int> d(length);
  for (int k = length - 1; k >= 0; --k) {
    d[k] = static_cast<int>(code % base);
    code /= base;
  }
  return d;
}

template <class Digits>
inline std::int64_t word_code(const Digits &d, int base) {
  std::int64_t c = 0;
  for (auto x : d) c = c * base + x;
  return c;
}

inline std::int64_t word_code(std::initializer_list<int> d, int base) { return word_code<std::initializer_list<int>>(d, base); }

inline std::string pauli_word_string(std::int64_t code, int length) {
  std::string s;
  for (int d : word_digits(code, length, 4)) s += pauli_letter(d);
  return s;
}

/// Apply a per-axis linear map to a tensor stored in row-major order with
/// axis 0 most significant. Axis k has input dimension maps[k].cols() and
/// output dimension maps[k].rows().
template <class T, class M>
std::vector<T> transform_axes(const std::vector<T> &in, const std::vector<M> &maps) {
  const int L = static_cast<int>(maps.size());
  std::vector<std::int64_t> dims(L);
  std::int64_t total = 1;
  for (int k = 0; k < L; ++k) {
    dims[k] = maps[k].cols();
    total *= dims[k];
  }
  if (static_cast<std::int64_t>(in.size()) != total)
    throw ShapeError("tensor size does not match axis maps");
  std::vector<T> cur = in, next;
  for (int k = 0; k < L; ++k) {
    const M &m = maps[k];
    std::int64_t outer = 1, inner = 1;
    for (int j = 0; j < k; ++j) outer *= dims[j];
    for (int j = k + 1; j < L; ++j) inner *= dims[j];
    const std::int64_t din = m.cols(), dout = m.rows();
    next.assign(outer * dout * inner, T(0));
    for (std::int64_t o = 0; o < outer; ++o) {
      const T *src = cur.data() + o * din * inner;
      T *dst = next.data() + o * dout * inner;
      for (std::int64_t a = 0; a < dout; ++a)
        for (std::int64_t b = 0; b < din; ++b) {
          const auto c = m(a, b);
          if (c == decltype(c)(0)) continue;
          const T *s = src + b * inner;
          T *t = dst + a * inner;
          for (std::int64_t i = 0; i < inner; ++i) t[i] += c * s[i];
        }
    }
    dims[k] = dout;
    cur.swap(next);
  }
  return cur;
}

template <class T, class M>
std::vector<T> transform_axes(const std::vector<T> &in, const M &map, int L) {
  return transform_axes(in, std::vector<M>(L, map));
}

}  // namespace mpotomo
