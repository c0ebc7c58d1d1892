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

#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mpotomo/cli.hpp"

int main(int argc, char **argv) {
  namespace cli = mpotomo::cli;
  CLI::App app{"Local-measurement MPO tomography of photonic cluster states"};
  app.require_subcommand(1);

  std::string config;
  int threads = 1;
  std::string out;
  for (const char *name : {"simulate", "reconstruct", "analyze"}) {
    CLI::App *sub = app.add_subcommand(name);
    sub->add_option("--config", config, "JSON run configuration")->required();
    sub->add_option("--threads", threads, "worker thread cap")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output root (overrides paths.root)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kValidation;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  const std::optional<cli::fs::path> out_dir = out.empty() ? std::nullopt : std::optional<cli::fs::path>(out);
  return cli::run(command, config, threads, out_dir, cli::Logger::from_env());
}
