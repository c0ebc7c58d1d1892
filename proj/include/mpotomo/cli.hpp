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

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mpotomo/cluster.hpp"
#include "mpotomo/correlations.hpp"
#include "mpotomo/emission.hpp"
#include "mpotomo/entanglement.hpp"
#include "mpotomo/fit.hpp"
#include "mpotomo/moments.hpp"
#include "mpotomo/mpo_io.hpp"
#include "mpotomo/reconstruct.hpp"

namespace mpotomo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kConfigVersion = 1;

enum ExitCode { kOk = 0, kFailure = 1, kValidation = 2, kIncomplete = 3, kNonConvergence = 4 };

// --- Logging -----------------------------------------------------------------

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

class Logger {
 public:
  explicit Logger(LogLevel level = LogLevel::Info, std::ostream *os = &std::cerr) : level_(level), os_(os) {}

  /// Level from MPO_TOMO_LOG; unknown values fall back to info with a warning.
  static Logger from_env(std::ostream *os = &std::cerr) {
    const char *v = std::getenv("MPO_TOMO_LOG");
    if (!v || !*v) return Logger(LogLevel::Info, os);
    const std::string s(v);
    if (s == "error") return Logger(LogLevel::Error, os);
    if (s == "info") return Logger(LogLevel::Info, os);
    if (s == "debug") return Logger(LogLevel::Debug, os);
    Logger l(LogLevel::Info, os);
    l.info("MPO_TOMO_LOG=" + s + " not recognised, using info");
    return l;
  }

  LogLevel level() const { return level_; }
  void error(const std::string &m) const { put(LogLevel::Error, "error", m); }
  void info(const std::string &m) const { put(LogLevel::Info, "info", m); }
  void debug(const std::string &m) const { put(LogLevel::Debug, "debug", m); }

 private:
  void put(LogLevel l, const char *tag, const std::string &m) const {
    if (os_ && static_cast<int>(l) <= static_cast<int>(level_)) *os_ << "mpo-tomo [" << tag << "] " << m << "\n";
  }
  LogLevel level_;
  std::ostream *os_;
};

// --- Config ------------------------------------------------------------------

/// Reads one JSON object, remembering which keys were consumed so that the
/// rest can be reported as unknown.
class Fields {
 public:
  Fields(const json &j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + "expected an object");
  }

  bool has(const std::string &k) const { return j_.contains(k) && !j_.at(k).is_null(); }
  std::string key(const std::string &k) const { return path_.empty() ? k : path_ + "." + k; }

  const json &raw(const std::string &k) {
    used_.insert(k);
    return j_.at(k);
  }

  std::optional<Fields> section(const std::string &k) {
    used_.insert(k);
    if (!has(k)) return std::nullopt;
    return Fields(j_.at(k), key(k));
  }

  double number(const std::string &k, std::optional<double> def = std::nullopt) {
    used_.insert(k);
    if (!has(k)) return require(k, def);
    const json &v = j_.at(k);
    if (!v.is_number()) throw ValidationError(key(k) + ": expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ValidationError(key(k) + ": must be finite");
    return x;
  }

  std::int64_t integer(const std::string &k, std::optional<std::int64_t> def = std::nullopt) {
    used_.insert(k);
    if (!has(k)) return require(k, def);
    const json &v = j_.at(k);
    if (!v.is_number_integer()) throw ValidationError(key(k) + ": expected an integer");
    return v.get<std::int64_t>();
  }

  std::optional<std::uint64_t> seed(const std::string &k) {
    used_.insert(k);
    if (!has(k)) return std::nullopt;
    const json &v = j_.at(k);
    if (!v.is_number_unsigned()) throw ValidationError(key(k) + ": expected a nonnegative integer seed");
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string &k, bool def) {
    used_.insert(k);
    if (!has(k)) return def;
    const json &v = j_.at(k);
    if (!v.is_boolean()) throw ValidationError(key(k) + ": expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string &k, std::optional<std::string> def = std::nullopt) {
    used_.insert(k);
    if (!has(k)) return require(k, def);
    const json &v = j_.at(k);
    if (!v.is_string()) throw ValidationError(key(k) + ": expected a string");
    return v.get<std::string>();
  }

  std::string choice(const std::string &k, const std::vector<std::string> &allowed, const std::string &def) {
    const std::string s = text(k, def);
    for (const auto &a : allowed)
      if (a == s) return s;
    std::string list;
    for (const auto &a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw ValidationError(key(k) + ": '" + s + "' is not one of " + list);
  }

  /// A number broadcast to n entries, or an array of exactly n numbers.
  std::vector<double> per_site(const std::string &k, int n, double def) {
    used_.insert(k);
    if (!has(k)) return std::vector<double>(n, def);
    const json &v = j_.at(k);
    if (v.is_number()) return std::vector<double>(n, v.get<double>());
    if (!v.is_array()) throw ValidationError(key(k) + ": expected a number or an array of numbers");
    if (static_cast<int>(v.size()) != n)
      throw ValidationError(key(k) + ": expected " + std::to_string(n) + " entries, got " + std::to_string(v.size()));
    std::vector<double> out;
    for (const auto &x : v) {
      if (!x.is_number()) throw ValidationError(key(k) + ": entries must be numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }

  std::vector<std::string> texts(const std::string &k, const std::vector<std::string> &def) {
    used_.insert(k);
    if (!has(k)) return def;
    const json &v = j_.at(k);
    if (!v.is_array()) throw ValidationError(key(k) + ": expected an array of strings");
    std::vector<std::string> out;
    for (const auto &x : v) {
      if (!x.is_string()) throw ValidationError(key(k) + ": entries must be strings");
      out.push_back(x.get<std::string>());
    }
    return out;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ValidationError(key(it.key()) + ": unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }
  template <class T>
  T require(const std::string &k, const std::optional<T> &def) const {
    if (!def) throw ValidationError(key(k) + ": required");
    return *def;
  }

  const json &j_;
  std::string path_;
  std::set<std::string> used_;
};

struct StateConfig {
  std::string source = "cluster";  // cluster | emitter | random
  int n_sites = 0;
  std::optional<ErrorModel> errors;
  std::vector<double> rotation_offsets;
  int emitter_dim = 2;
  std::optional<std::uint64_t> seed;
};

struct MeasurementConfig {
  int window = 5;
  double eta = 1.0;
  double eta_se = 0.0;
  bool exact = false;
  std::int64_t shots = 0;
  std::optional<std::uint64_t> seed;
};

struct ReconstructConfig {
  double k_sigma = 5.0;
  bool align_phases = true;
  std::string fit_basis = "z-shifted";
  int max_iterations = 200;
  double rel_tol = 1e-10;
};

struct AnalyzeConfig {
  std::string target = "ideal_cluster";
  std::vector<std::string> measures{"negativity", "concurrence"};
  int exact_site_limit = 12;
  std::int64_t samples = 4096;
  std::optional<std::uint64_t> seed;
  int corner_states = 16;
};

struct RunConfig {
  int version = kConfigVersion;
  StateConfig state;
  MeasurementConfig measurement;
  ReconstructConfig reconstruct;
  AnalyzeConfig analyze;
  fs::path root;  // output root; relative paths below resolve against it
  fs::path data_dir, fit_dir, report_dir;
  fs::path config_dir;
};

namespace detail {

inline ErrorModel parse_error_model(Fields &f, int n) {
  if (f.has("eps_pd") && f.has("phase_flip"))
    throw ValidationError(f.key("phase_flip") + ": give either eps_pd or phase_flip, not both");
  ErrorModel m;
  m.eps_ad = f.per_site("eps_ad", n, 0.0);
  if (f.has("phase_flip")) {
    m.eps_pd = f.per_site("phase_flip", n, 0.0);
    for (double &e : m.eps_pd) e *= 2.0;
  } else {
    m.eps_pd = f.per_site("eps_pd", n, 0.0);
  }
  for (size_t k = 0; k < m.eps_ad.size(); ++k) {
    if (!(m.eps_ad[k] >= 0.0 && m.eps_ad[k] <= 1.0))
      throw ValidationError(f.key("eps_ad") + ": entry " + std::to_string(k + 1) + " outside [0, 1]");
    if (!(m.eps_pd[k] >= 0.0 && m.eps_pd[k] <= 1.0))
      throw ValidationError(f.key(f.has("phase_flip") ? "phase_flip" : "eps_pd") + ": entry " +
                            std::to_string(k + 1) + " outside the allowed range");
  }
  f.finish();
  return m;
}

inline fs::path resolve(const fs::path &root, const std::string &p) {
  const fs::path q(p);
  return q.is_absolute() ? q : root / q;
}

}  // namespace detail

/// Parses a config document. `out_override` replaces paths.root when set;
/// otherwise relative roots resolve against the config file's directory.
inline RunConfig parse_config(const json &doc, const fs::path &config_dir = ".",
                              const std::optional<fs::path> &out_override = std::nullopt) {
  Fields top(doc, "");
  RunConfig c;
  c.config_dir = config_dir;
  c.version = static_cast<int>(top.integer("version"));
  if (c.version != kConfigVersion)
    throw ValidationError("version: unsupported config version " + std::to_string(c.version) + " (expected " +
                          std::to_string(kConfigVersion) + ")");

  if (auto s = top.section("state")) {
    StateConfig &st = c.state;
    st.source = s->choice("source", {"cluster", "emitter", "random"}, "cluster");
    st.n_sites = static_cast<int>(s->integer("n_sites"));
    if (st.n_sites < 4 || st.n_sites > 62) throw ValidationError(s->key("n_sites") + ": must lie in [4, 62]");
    if (auto e = s->section("error_model")) {
      if (st.source == "random") throw ValidationError(s->key("error_model") + ": not used by the random source");
      st.errors = detail::parse_error_model(*e, st.n_sites);
    }
    if (s->has("rotation_offsets")) {
      if (st.source != "emitter") throw ValidationError(s->key("rotation_offsets") + ": only for the emitter source");
      st.rotation_offsets = s->per_site("rotation_offsets", st.n_sites, 0.0);
    }
    st.emitter_dim = static_cast<int>(s->integer("emitter_dim", 2));
    if (st.emitter_dim < 2 || st.emitter_dim > 4) throw ValidationError(s->key("emitter_dim") + ": must lie in [2, 4]");
    if (st.emitter_dim != 2 && st.source != "random")
      throw ValidationError(s->key("emitter_dim") + ": only the random source takes another dimension");
    st.seed = s->seed("seed");
    if (st.source == "random" && !st.seed) throw ValidationError(s->key("seed") + ": required for the random source");
    s->finish();
  }

  if (auto m = top.section("measurement")) {
    MeasurementConfig &me = c.measurement;
    me.window = static_cast<int>(m->integer("window", 5));
    if (me.window < 4 || me.window > 6) throw ValidationError(m->key("window") + ": must lie in [4, 6]");
    me.eta = m->number("eta", 1.0);
    if (!(me.eta > 0.0 && me.eta <= 1.0)) throw ValidationError(m->key("eta") + ": must lie in (0, 1]");
    me.eta_se = m->number("eta_se", 0.0);
    if (me.eta_se < 0.0) throw ValidationError(m->key("eta_se") + ": must be >= 0");
    me.exact = m->boolean("exact", false);
    if (me.exact) {
      if (m->has("shots")) throw ValidationError(m->key("shots") + ": not allowed with exact moments");
    } else {
      me.shots = m->integer("shots");
      if (me.shots < 100) throw ValidationError(m->key("shots") + ": must be >= 100 (got " + std::to_string(me.shots) + ")");
    }
    me.seed = m->seed("seed");
    if (!me.exact && !me.seed) throw ValidationError(m->key("seed") + ": required when sampling shots");
    m->finish();
  }

  if (auto r = top.section("reconstruct")) {
    ReconstructConfig &rc = c.reconstruct;
    rc.k_sigma = r->number("k_sigma", 5.0);
    if (rc.k_sigma <= 0.0) throw ValidationError(r->key("k_sigma") + ": must be > 0");
    rc.align_phases = r->boolean("align_phases", true);
    rc.fit_basis = r->choice("fit_basis", {"z-shifted", "pauli"}, "z-shifted");
    rc.max_iterations = static_cast<int>(r->integer("max_iterations", 200));
    if (rc.max_iterations < 0) throw ValidationError(r->key("max_iterations") + ": must be >= 0");
    rc.rel_tol = r->number("rel_tol", 1e-10);
    if (rc.rel_tol <= 0.0) throw ValidationError(r->key("rel_tol") + ": must be > 0");
    r->finish();
  }

  if (auto a = top.section("analyze")) {
    AnalyzeConfig &ac = c.analyze;
    ac.target = a->text("target", "ideal_cluster");
    ac.measures = a->texts("measures", ac.measures);
    if (ac.measures.empty()) throw ValidationError(a->key("measures") + ": needs at least one measure");
    for (const auto &m : ac.measures)
      if (m != "negativity" && m != "concurrence")
        throw ValidationError(a->key("measures") + ": unknown measure '" + m + "'");
    ac.exact_site_limit = static_cast<int>(a->integer("exact_site_limit", 12));
    if (ac.exact_site_limit < 2 || ac.exact_site_limit > kMaxExactLeSites)
      throw ValidationError(a->key("exact_site_limit") + ": must lie in [2, " + std::to_string(kMaxExactLeSites) + "]");
    ac.samples = a->integer("samples", 4096);
    if (ac.samples < 2) throw ValidationError(a->key("samples") + ": must be >= 2");
    ac.seed = a->seed("seed");
    ac.corner_states = static_cast<int>(a->integer("corner_states", 16));
    if (ac.corner_states < 1) throw ValidationError(a->key("corner_states") + ": must be >= 1");
    a->finish();
  }

  std::string root = "out", data = "data", fit = "fit", report = "report";
  if (auto p = top.section("paths")) {
    root = p->text("root", root);
    data = p->text("data", data);
    fit = p->text("fit", fit);
    report = p->text("report", report);
    p->finish();
  }
  top.finish();

  c.root = out_override ? *out_override : detail::resolve(config_dir, root);
  c.data_dir = detail::resolve(c.root, data);
  c.fit_dir = detail::resolve(c.root, fit);
  c.report_dir = detail::resolve(c.root, report);
  return c;
}

inline RunConfig load_config(const fs::path &path, const std::optional<fs::path> &out_override = std::nullopt) {
  if (!fs::exists(path)) throw IoError("config file " + path.string() + " not found");
  const json doc = read_json_file(path.string());
  return parse_config(doc, path.parent_path().empty() ? fs::path(".") : path.parent_path(), out_override);
}

// --- Shared helpers ----------------------------------------------------------

/// Setting word for a row: one Q or P per site.
inline std::string setting_word(std::int64_t code, int L) {
  std::string s;
  for (int d : word_digits(code, L, 6)) s += moment_setting(d) ? 'P' : 'Q';
  return s;
}

inline std::string setting_word_from_bits(int bits, int L) {
  std::string s;
  for (int k = L - 1; k >= 0; --k) s += ((bits >> k) & 1) ? 'P' : 'Q';
  return s;
}

inline std::string setting_file_name(const std::string &word) { return "setting_" + word + ".csv"; }

inline void ensure_dir(const fs::path &p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

inline void write_text_file(const fs::path &p, const std::string &s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << s;
  if (!f) throw IoError("write failed: " + p.string());
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

inline void require_config_section(bool present, const std::string &name, const std::string &cmd) {
  if (!present) throw ValidationError(name + ": required by " + cmd);
}

/// Truth MPO for the configured source.
struct Truth {
  Mpo mpo;
  std::optional<ProtocolSpec> protocol;
  std::optional<ErrorModel> errors;
};

inline Truth build_truth(const StateConfig &st) {
  Truth t;
  const int n = st.n_sites;
  if (st.source == "random") {
    t.protocol = build_random_protocol(n, st.emitter_dim, *st.seed);
    t.mpo = emit_mpo(*t.protocol);
    return t;
  }
  t.errors = st.errors ? *st.errors : ErrorModel::uniform(n, 0.0, 0.0);
  if (st.source == "cluster") {
    t.mpo = noisy_cluster_model(n, *t.errors);
    return t;
  }
  ClusterImperfections imp;
  imp.rotation_offsets = st.rotation_offsets;
  imp.photon_errors = t.errors->channels();
  t.protocol = build_cluster_protocol(n, imp);
  t.mpo = emit_mpo(*t.protocol);
  return t;
}

// --- simulate ----------------------------------------------------------------

/// Writes one CSV per measurement setting plus the truth MPO.
inline int cmd_simulate(const RunConfig &c, int threads, const Logger &log) {
  require_config_section(c.state.n_sites > 0, "state", "simulate");
  const MeasurementConfig &me = c.measurement;
  const int n = c.state.n_sites, L = me.window;
  if (L > n) throw ValidationError("measurement.window: exceeds state.n_sites");
  log.info("simulate: N=" + std::to_string(n) + " L=" + std::to_string(L) + " source=" + c.state.source);
  const Truth truth = build_truth(c.state);
  MomentTable table = me.exact ? exact_local_moments(truth.mpo, L, me.eta, threads)
                               : synthesize_dataset(truth.mpo, L, me.eta, me.shots, *me.seed, threads);
  ensure_dir(c.data_dir);
  const int settings = 1 << L;
  json files = json::array();
  for (int bits = 0; bits < settings; ++bits) {
    const std::string word = setting_word_from_bits(bits, L);
    std::ostringstream os;
    write_moment_csv(os, table, [&](int, std::int64_t code) { return setting_word(code, L) == word; });
    write_text_file(c.data_dir / setting_file_name(word), os.str());
    files.push_back(setting_file_name(word));
  }
  write_mpo((c.data_dir / "truth_mpo.json").string(), truth.mpo);
  if (truth.errors) write_json_file((c.data_dir / "error_model.json").string(), error_model_to_json(*truth.errors));
  if (truth.protocol) write_json_file((c.data_dir / "protocol.json").string(), protocol_to_json(*truth.protocol));
  json meta = {{"n_sites", n},
               {"window", L},
               {"eta", me.eta},
               {"eta_se", me.eta_se},
               {"exact", me.exact},
               {"shots", me.shots},
               {"seed", me.seed ? json(*me.seed) : json(nullptr)},
               {"source", c.state.source},
               {"settings", files}};
  write_json_file((c.data_dir / "dataset.json").string(), meta);
  log.info("simulate: wrote " + std::to_string(settings) + " setting files to " + c.data_dir.string());
  return kOk;
}

// --- reconstruct -------------------------------------------------------------

/// Reads every setting file; rows must belong to the file's setting and
/// appear once.
inline MomentTable read_setting_files(const fs::path &dir, int n, int L, const Logger &log) {
  MomentTable table = empty_moment_table(n, L);
  std::vector<std::string> missing;
  for (int bits = 0; bits < (1 << L); ++bits) {
    const std::string word = setting_word_from_bits(bits, L);
    if (!fs::exists(dir / setting_file_name(word))) missing.push_back(word);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto &w : missing) list += (list.empty() ? "" : ", ") + w;
    throw CompletenessError("missing measurement setting " + list + " in " + dir.string(), missing);
  }
  MomentTable part = empty_moment_table(n, L);
  for (int bits = 0; bits < (1 << L); ++bits) {
    const std::string word = setting_word_from_bits(bits, L);
    const fs::path p = dir / setting_file_name(word);
    std::ifstream is(p);
    if (!is) throw IoError("cannot read " + p.string());
    for (auto &w : part.windows) std::fill(w.present.begin(), w.present.end(), 0);
    read_moment_csv(is, part, p.filename().string());
    std::int64_t rows = 0;
    for (size_t wi = 0; wi < part.windows.size(); ++wi) {
      const auto &src = part.windows[wi];
      auto &dst = table.windows[wi];
      for (std::int64_t r = 0; r < table.rows_per_window(); ++r) {
        if (!src.present[r]) continue;
        if (setting_word(r, L) != word)
          throw ValidationError(p.filename().string() + ": row " + moment_word_string(r, L) + " at window " +
                                std::to_string(src.start) + " belongs to setting " + setting_word(r, L));
        if (dst.present[r])
          throw ValidationError(p.filename().string() + ": duplicate row " + moment_word_string(r, L));
        dst.value[r] = src.value[r];
        dst.se[r] = src.se[r];
        dst.shots[r] = src.shots[r];
        dst.present[r] = 1;
        ++rows;
      }
    }
    log.debug("read " + std::to_string(rows) + " rows from " + p.filename().string());
  }
  return table;
}

/// A stage log that is flushed to disk after every stage, so that a failure
/// leaves the decisions made so far.
class StageLog {
 public:
  StageLog(fs::path path, const Logger &log) : path_(std::move(path)), log_(log) { doc_["stages"] = json::array(); }
  void add(const std::string &name, json body) {
    body["stage"] = name;
    doc_["stages"].push_back(std::move(body));
    flush();
  }
  void fail(const std::string &name, const std::string &what) {
    log_.error("stage " + name + " failed");
    doc_["failed_stage"] = name;
    doc_["error"] = what;
    flush();
  }
  void set(const std::string &k, json v) {
    doc_[k] = std::move(v);
    flush();
  }
  const json &doc() const { return doc_; }

 private:
  void flush() const { write_json_file(path_.string(), doc_); }
  fs::path path_;
  const Logger &log_;
  json doc_;
};

/// Wraps a stage so that failures carry its name and reach the stage log.
template <class Fn>
auto run_stage(StageLog &log, const std::string &name, Fn &&fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error &e) {
    log.fail(name, e.what());
    throw;
  }
}

inline std::vector<int> clamp_targets(const std::vector<BondEstimate> &est, const Mpo &m) {
  std::vector<int> t;
  for (const auto &e : est) t.push_back(std::clamp(e.dim, 1, m.site(e.bond).right_dim()));
  return t;
}

inline int cmd_reconstruct(const RunConfig &c, int threads, const Logger &log) {
  require_config_section(c.state.n_sites > 0, "state.n_sites", "reconstruct");
  const int n = c.state.n_sites, L = c.measurement.window;
  if (L > n) throw ValidationError("measurement.window: exceeds state.n_sites");
  if (!fs::is_directory(c.data_dir)) throw IoError("data directory " + c.data_dir.string() + " not found");
  ensure_dir(c.fit_dir);
  StageLog stages(c.fit_dir / "stages.json", log);
  stages.set("n_sites", n);
  stages.set("window", L);

  const MomentTable table = run_stage(stages, "read", [&] { return read_setting_files(c.data_dir, n, L, log); });
  stages.add("read", {{"settings", 1 << L}, {"windows", table.windows.size()}});

  const CorrelationSet z = run_stage(stages, "conversion", [&] { return moments_to_zshifted(table); });
  stages.add("conversion", {{"basis", basis_name(z.basis)}, {"rows_per_window", z.rows_per_window()}});
  log.info("reconstruct: converted moments to Z-shifted correlations");

  const CorrelationSet zc = run_stage(stages, "inefficiency_correction", [&] {
    return correct_inefficiency(z, c.measurement.eta, c.measurement.eta_se);
  });
  stages.add("inefficiency_correction", {{"eta", c.measurement.eta}, {"eta_se", c.measurement.eta_se}});

  CorrelationSet aligned = zc;
  if (c.reconstruct.align_phases) {
    const AlignedCorrelations a = run_stage(stages, "phase_alignment", [&] { return align_phases(zc); });
    aligned = a.corrs;
    stages.add("phase_alignment", {{"applied", true}, {"angles", a.angles}});
  } else {
    stages.add("phase_alignment", {{"applied", false}});
  }
  const CorrelationSet pauli = zshifted_to_pauli(aligned);

  CorrMatrices cm;
  std::vector<BondEstimate> est;
  run_stage(stages, "bond_estimation", [&] {
    cm = build_corr_matrices(pauli);
    est = estimate_bond_dims(cm, c.reconstruct.k_sigma);
    return 0;
  });
  {
    json bonds = json::array();
    std::string dims;
    for (const auto &e : est) {
      bonds.push_back({{"bond", e.bond},
                       {"dim", e.dim},
                       {"sigma", std::vector<double>(e.sigma.data(), e.sigma.data() + e.sigma.size())},
                       {"sigma_se", std::vector<double>(e.sigma_se.data(), e.sigma_se.data() + e.sigma_se.size())}});
      dims += (dims.empty() ? "" : " ") + std::to_string(e.dim);
    }
    stages.add("bond_estimation", {{"k_sigma", c.reconstruct.k_sigma}, {"bonds", bonds}});
    log.info("reconstruct: estimated bond dimensions " + dims);
  }

  InversionResult inv;
  Mpo initial;
  run_stage(stages, "inversion", [&] {
    inv = invert_reconstruct(pauli, L);
    initial = to_standard_form(compress(*inv.mpo, cm, clamp_targets(est, *inv.mpo)));
    return 0;
  });
  {
    json res = json::array();
    for (const auto &r : inv.residuals)
      res.push_back({{"site", r.site},
                     {"norm", r.norm},
                     {"worst_column", r.worst_column},
                     {"worst_pauli", std::string(1, pauli_letter(r.worst_pauli))}});
    stages.add("inversion", {{"solved", inv.solved},
                             {"reproduction_error", inv.reproduction_error},
                             {"offending_site", inv.offending_site},
                             {"offending_residual", inv.offending_residual},
                             {"message", inv.message},
                             {"residuals", res},
                             {"initial_bond_dims", initial.bond_dims()}});
    if (!inv.solved) log.info("reconstruct: inversion residual above threshold, used as initial guess only");
  }

  FitOptions opt;
  opt.max_iterations = c.reconstruct.max_iterations;
  opt.rel_tol = c.reconstruct.rel_tol;
  opt.threads = threads;
  if (log.level() == LogLevel::Debug)
    opt.on_iteration = [&](int it, const Mpo &, double sse) {
      log.debug("fit iteration " + std::to_string(it) + " sse " + fmt(sse));
    };
  const CorrelationSet &fit_data = c.reconstruct.fit_basis == "pauli" ? pauli : aligned;
  const FitResult fit = run_stage(stages, "gauss_newton", [&] { return gauss_newton_fit(fit_data, initial, opt); });
  write_fit_bundle(c.fit_dir.string(), fit);
  {
    std::ofstream os(c.fit_dir / "correlations.csv");
    if (!os) throw IoError("cannot write correlations.csv");
    write_correlation_csv(os, pauli);
    write_json_file((c.fit_dir / "correlations.json").string(), correlation_metadata(pauli));
  }
  const double per_dof = fit.dof > 0 ? fit.sse / fit.dof : 0.0;
  stages.add("gauss_newton", {{"basis", basis_name(fit_data.basis)},
                              {"iterations", fit.iterations},
                              {"converged", fit.converged},
                              {"sse", fit.sse},
                              {"dof", fit.dof},
                              {"sse_per_dof", per_dof},
                              {"rank", fit.rank},
                              {"n_parameters", fit.layout.size()}});
  log.info("reconstruct: " + std::string(fit.converged ? "converged" : "did not converge") + " after " +
           std::to_string(fit.iterations) + " iterations, SSE/DOF " + fmt(per_dof));
  if (!fit.converged) {
    stages.fail("gauss_newton", "no convergence within " + std::to_string(opt.max_iterations) + " iterations");
    return kNonConvergence;
  }
  return kOk;
}

// --- analyze -----------------------------------------------------------------

/// Derivative of a Pauli correlation with respect to every MPO entry.
inline MpoTangent correlation_gradient(const Mpo &m, const PauliWord &w) {
  check_word(m, w);
  const int n = m.size();
  auto op = [&](int s) { return (s >= w.start_site && s <= w.end_site()) ? w.indices[s - w.start_site] : 0; };
  std::vector<RowVector> left(n + 2);
  std::vector<Vector> right(n + 2);
  left[1] = RowVector::Ones(1);
  for (int s = 1; s <= n; ++s) left[s + 1] = left[s] * m.site(s)[op(s)];
  right[n + 1] = Vector::Ones(1);
  for (int s = n; s >= 1; --s) right[s] = m.site(s)[op(s)] * right[s + 1];
  MpoTangent g = zero_tangent(m);
  for (int s = 1; s <= n; ++s) g[s - 1][op(s)] = left[s].transpose() * right[s + 1].transpose();
  return g;
}

inline void add_scaled(MpoTangent &acc, const MpoTangent &g, double a) {
  for (size_t k = 0; k < acc.size(); ++k)
    for (int i = 0; i < 4; ++i) acc[k][i] += a * g[k][i];
}

/// <i|rho|j> with site 1 as the most significant bit.
inline Complex density_element(const Mpo &m, std::uint64_t i, std::uint64_t j) {
  const int n = m.size();
  Eigen::RowVectorXcd v = Eigen::RowVectorXcd::Ones(1);
  for (int s = 1; s <= n; ++s) {
    const int x = static_cast<int>((i >> (n - s)) & 1), y = static_cast<int>((j >> (n - s)) & 1);
    CMatrix t = CMatrix::Zero(m.site(s).left_dim(), m.site(s).right_dim());
    for (int p = 0; p < 4; ++p) {
      const Complex c = pauli_matrix(p)(x, y);
      if (c != Complex(0.0)) t += 0.5 * c * m.site(s)[p].cast<Complex>();
    }
    v = v * t;
  }
  return v(0);
}

inline int cmd_analyze(const RunConfig &c, int threads, const Logger &log) {
  if (!fs::is_directory(c.fit_dir)) throw IoError("fit directory " + c.fit_dir.string() + " not found");
  for (const char *f : {"mpo.json", "covariance.bin", "covariance.json", "fit_report.json"})
    if (!fs::exists(c.fit_dir / f)) throw IoError("fit result incomplete: " + (c.fit_dir / f).string() + " not found");
  const FitResult fit = read_fit_bundle(c.fit_dir.string());
  const Mpo &m = fit.mpo;
  const int n = m.size();
  if (n > 62) throw SizeError("analysis supports at most 62 sites");
  const AnalyzeConfig &ac = c.analyze;
  if (n > ac.exact_site_limit && !ac.seed)
    throw ValidationError("analyze.seed: required when N exceeds analyze.exact_site_limit (subset sampling)");
  ensure_dir(c.report_dir);
  log.info("analyze: N=" + std::to_string(n) + " bonds up to " + std::to_string(m.max_bond()));

  json report;
  report["n_sites"] = n;
  report["fit"] = read_json_file((c.fit_dir / "fit_report.json").string());

  Mpo target;
  if (ac.target == "ideal_cluster") {
    target = ideal_cluster_mpo(n);
  } else {
    const fs::path tp = detail::resolve(c.config_dir, ac.target);
    if (!fs::exists(tp)) throw IoError("target MPO " + tp.string() + " not found");
    target = read_mpo(tp.string());
    if (target.size() != n) throw ValidationError("analyze.target: MPO has " + std::to_string(target.size()) + " sites");
  }
  const Estimate fid = fidelity_estimate(fit, target);
  report["fidelity"] = {{"target", ac.target}, {"value", fid.value}, {"se", fid.se}};

  // Stabilizers and the lower bound built from them.
  const StabilizerSet st = cluster_stabilizers(n);
  std::vector<double> sv, sse;
  std::vector<MpoTangent> sg;
  std::ostringstream stab_csv;
  stab_csv.precision(17);
  stab_csv << "index,start_site,word,value,se\n";
  CorrelationEvaluator ev(m);
  for (size_t k = 0; k < st.words.size(); ++k) {
    const PauliWord &w = st.words[k];
    sg.push_back(correlation_gradient(m, w));
    sv.push_back(ev(w));
    sse.push_back(propagate_covariance(fit, sg.back()));
    stab_csv << k + 1 << "," << w.start_site << "," << w.str() << "," << sv.back() << "," << sse.back() << "\n";
  }
  write_text_file(c.report_dir / "stabilizers.csv", stab_csv.str());
  const double bound = stabilizer_fidelity_bound(sv, sse);
  const auto bg = stabilizer_fidelity_bound_gradient(sv);
  MpoTangent bt = zero_tangent(m);
  for (size_t k = 0; k < sg.size(); ++k) add_scaled(bt, sg[k], bg[k]);
  report["fidelity_bound"] = {{"value", bound}, {"se", propagate_covariance(fit, bt)}};
  json stab = json::array();
  for (size_t k = 0; k < sv.size(); ++k)
    stab.push_back({{"index", k + 1}, {"start_site", st.words[k].start_site}, {"word", st.words[k].str()},
                    {"value", sv[k]}, {"se", sse[k]}});
  report["stabilizers"] = stab;
  {
    const auto ex = mean_excitations(m);
    double mean = 0.0;
    for (double e : ex) mean += e;
    report["mean_excitation"] = {{"per_site", ex}, {"mean", mean / n}};
  }

  // Localizable entanglement for every pair.
  const bool exact_le = n <= ac.exact_site_limit;
  report["le_method"] = exact_le ? "exact" : "subset";
  if (!exact_le) report["le_samples"] = std::min<std::uint64_t>(ac.samples, std::uint64_t{1} << (n - 2));
  json le_all = json::object();
  std::ostringstream dist_csv;
  dist_csv.precision(17);
  dist_csv << "measure,distance,pairs,mean,se_parameter,se_sampling,stabilizer_bound\n";
  for (const auto &name : ac.measures) {
    const EntanglementMeasure meas = measure_from_name(name);
    std::vector<std::vector<std::optional<LeResult>>> grid(n + 1, std::vector<std::optional<LeResult>>(n + 1));
    json pairs = json::array();
    LeOptions lo;
    lo.gradient = true;
    lo.fit = &fit;
    lo.threads = threads;
    for (int r = 1; r < n; ++r)
      for (int r2 = r + 1; r2 <= n; ++r2) {
        const MeasurementPlan plan = paper_plan(n, r, r2);
        LeResult res;
        if (exact_le) {
          res = localizable_entanglement(m, plan, meas, lo);
        } else {
          const std::uint64_t total = std::uint64_t{1} << (n - 2);
          const std::int64_t k = static_cast<std::int64_t>(std::min<std::uint64_t>(ac.samples, total));
          const std::uint64_t seed = *ac.seed + static_cast<std::uint64_t>(r) * 1000003u + static_cast<std::uint64_t>(r2);
          res = le_subset_estimate(m, plan, meas, k, seed, lo);
        }
        if (res.clamped_branches > 0)
          log.info("analyze: " + name + " pair (" + std::to_string(r) + "," + std::to_string(r2) + ") clamped " +
                   std::to_string(res.clamped_branches) + " branches, most negative raw " + fmt(res.most_negative_raw));
        pairs.push_back(le_report_json(res));
        grid[r][r2] = std::move(res);
      }
    le_all[name] = pairs;

    std::ostringstream mat;
    mat.precision(17);
    mat << "r";
    for (int r2 = 2; r2 <= n; ++r2) mat << "," << r2;
    mat << "\n";
    for (int r = 1; r < n; ++r) {
      mat << r;
      for (int r2 = 2; r2 <= n; ++r2) {
        mat << ",";
        if (r2 > r) mat << grid[r][r2]->value;
      }
      mat << "\n";
    }
    write_text_file(c.report_dir / ("le_matrix_" + name + ".csv"), mat.str());

    for (int d = 1; d < n; ++d) {
      MpoTangent g = zero_tangent(m);
      double mean = 0.0, samp = 0.0;
      const int count = n - d;
      for (int r = 1; r + d <= n; ++r) {
        const LeResult &res = *grid[r][r + d];
        mean += res.value / count;
        samp += res.se_sampling * res.se_sampling / (double(count) * count);
        add_scaled(g, res.gradient, 1.0 / count);
      }
      dist_csv << name << "," << d << "," << count << "," << mean << "," << propagate_covariance(fit, g) << ","
               << std::sqrt(samp) << ",";
      if (meas == EntanglementMeasure::Concurrence) dist_csv << stabilizer_concurrence_bound(sv, d).value;
      dist_csv << "\n";
    }
  }
  report["localizable_entanglement"] = le_all;
  write_text_file(c.report_dir / "le_distance.csv", dist_csv.str());

  // Corner blocks of the density matrix.
  {
    const std::uint64_t dim = std::uint64_t{1} << n;
    const std::uint64_t k = std::min<std::uint64_t>(static_cast<std::uint64_t>(ac.corner_states), dim);
    std::ostringstream os;
    os.precision(17);
    os << "block,row,col,magnitude,phase\n";
    for (int b = 0; b < 2; ++b) {
      const std::uint64_t base = b == 0 ? 0 : dim - k;
      for (std::uint64_t i = 0; i < k; ++i)
        for (std::uint64_t j = 0; j < k; ++j) {
          const Complex z = density_element(m, base + i, base + j);
          os << (b == 0 ? "first" : "last") << "," << base + i << "," << base + j << "," << std::abs(z) << ","
             << (std::abs(z) > 1e-14 ? std::arg(z) : 0.0) << "\n";
        }
    }
    write_text_file(c.report_dir / "density_corners.csv", os.str());
  }

  write_json_file((c.report_dir / "report.json").string(), report);
  log.info("analyze: fidelity " + fmt(fid.value) + " +- " + fmt(fid.se) + ", bound " + fmt(bound));
  return kOk;
}

// --- Dispatch ----------------------------------------------------------------

inline int exit_code_for(const std::exception &e) {
  if (dynamic_cast<const CompletenessError *>(&e)) return kIncomplete;
  if (dynamic_cast<const DataError *>(&e)) return kIncomplete;
  if (dynamic_cast<const UndefinedPhaseError *>(&e)) return kIncomplete;
  if (dynamic_cast<const ConvergenceError *>(&e)) return kNonConvergence;
  if (dynamic_cast<const SingularityError *>(&e)) return kNonConvergence;
  if (dynamic_cast<const DegenerateInputError *>(&e)) return kNonConvergence;
  if (dynamic_cast<const Error *>(&e)) return kValidation;
  return kFailure;
}

/// Runs one command and maps errors onto exit codes.
inline int run(const std::string &command, const fs::path &config, int threads,
               const std::optional<fs::path> &out, const Logger &log) {
  try {
    if (threads < 1) throw ValidationError("--threads: must be >= 1");
    const RunConfig c = load_config(config, out);
    if (command == "simulate") return cmd_simulate(c, threads, log);
    if (command == "reconstruct") return cmd_reconstruct(c, threads, log);
    if (command == "analyze") return cmd_analyze(c, threads, log);
    throw ValidationError("unknown command " + command);
  } catch (const std::exception &e) {
    log.error(command + ": " + e.what());
    if (const auto *ce = dynamic_cast<const CompletenessError *>(&e)) {
      for (const auto &w : ce->missing()) log.error("missing: " + w);
    }
    return exit_code_for(e);
  }
}

}  // namespace mpotomo::cli
