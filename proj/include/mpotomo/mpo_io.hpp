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

#include <fstream>
#include <string>

#include "json.hpp"
#include "mpotomo/mpo.hpp"

namespace mpotomo {

inline nlohmann::json mpo_to_json(const Mpo &m) {
  nlohmann::json j;
  j["n_qubits"] = m.size();
  j["bonds"] = m.bond_dims();
  nlohmann::json sites = nlohmann::json::array();
  for (const auto &s : m.sites()) sites.push_back(s.flat());
  j["sites"] = sites;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto &s : m.sites()) shapes.push_back({s.left_dim(), 4, s.right_dim()});
  j["shapes"] = shapes;
  return j;
}

inline Mpo mpo_from_json(const nlohmann::json &j) {
  try {
    const int n = j.at("n_qubits").get<int>();
    const auto bonds = j.at("bonds").get<std::vector<int>>();
    const auto &sites = j.at("sites");
    if (n < 1) throw ValidationError("n_qubits must be >= 1");
    if (static_cast<int>(bonds.size()) != n - 1)
      throw ValidationError("bonds must have n_qubits - 1 entries");
    if (!sites.is_array() || static_cast<int>(sites.size()) != n)
      throw ValidationError("sites must have n_qubits entries");
    std::vector<SiteTensor> out;
    for (int s = 0; s < n; ++s) {
      const int dl = s == 0 ? 1 : bonds[s - 1];
      const int dr = s == n - 1 ? 1 : bonds[s];
      out.push_back(SiteTensor::from_flat(dl, dr, sites[s].get<std::vector<double>>()));
    }
    return Mpo(std::move(out));
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("malformed MPO JSON: ") + e.what());
  } catch (const ShapeError &e) {
    throw ValidationError(e.what());
  }
}

inline void write_json_file(const std::string &path, const nlohmann::json &j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
  if (!f) throw IoError("write failed: " + path);
}

inline nlohmann::json read_json_file(const std::string &path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void write_mpo(const std::string &path, const Mpo &m) { write_json_file(path, mpo_to_json(m)); }
inline Mpo read_mpo(const std::string &path) { return mpo_from_json(read_json_file(path)); }

}  // namespace mpotomo
