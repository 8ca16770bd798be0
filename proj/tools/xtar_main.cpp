// Copyright 2026 The xtar Authors
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

// xtar command-line driver. Everything goes through the C API.

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xtar/xtar.h"

namespace {

constexpr int kUsageError = 2;
constexpr int kRunError = 1;

struct ConfigDeleter {
  void operator()(xtar_config* c) const { xtar_config_free(c); }
};
using ConfigPtr = std::unique_ptr<xtar_config, ConfigDeleter>;

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::string output;
  std::string checkpoint;
  std::size_t episode = 0;
  bool quiet = false;
};

int report_error(xtar_status s) {
  std::fprintf(stderr, "error: %s: %s\n", xtar_status_name(s), xtar_last_error());
  return s == XTAR_INVALID_ARGUMENT ? kUsageError : kRunError;
}

int usage_error(const std::string& message) {
  std::fprintf(stderr, "error: %s\n", message.c_str());
  return kUsageError;
}

// Builds the config from --config, then --set KEY=VALUE, then --output.
int build_config(const Options& o, ConfigPtr& out) {
  xtar_config* raw = nullptr;
  const xtar_status s = o.config_path.empty() ? xtar_config_new(&raw)
                                              : xtar_config_load(o.config_path.c_str(), &raw);
  if (s != XTAR_OK) return report_error(s);
  out.reset(raw);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) return usage_error("--set expects KEY=VALUE, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    if (const xtar_status st = xtar_config_set(out.get(), key.c_str(), value.c_str()); st != XTAR_OK)
      return report_error(st);
  }
  if (!o.output.empty()) {
    const std::string quoted = "\"" + o.output + "\"";
    if (const xtar_status st = xtar_config_set(out.get(), "output_dir", quoted.c_str()); st != XTAR_OK)
      return report_error(st);
  }
  return 0;
}

int finish(xtar_status s, char* summary, char* warnings, bool quiet) {
  if (warnings) {
    std::string w = warnings;
    std::size_t start = 0;
    while (start < w.size()) {
      const auto end = w.find('\n', start);
      std::fprintf(stderr, "warning: %s\n", w.substr(start, end - start).c_str());
      if (end == std::string::npos) break;
      start = end + 1;
    }
  }
  if (s == XTAR_OK && summary && !quiet) std::printf("%s\n", summary);
  xtar_string_free(summary);
  xtar_string_free(warnings);
  return s == XTAR_OK ? 0 : report_error(s);
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file (flat keys)");
  cmd->add_option("-s,--set", o.sets, "Override a config key, KEY=VALUE (repeatable)");
  cmd->add_option("-o,--output", o.output, "Output directory (sets output_dir)");
  cmd->add_flag("-q,--quiet", o.quiet, "Do not print summary.json");
}

void add_checkpoint(CLI::App* cmd, Options& o) {
  cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file (.xtck)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental few-shot learning with task-adaptive representations"};
  app.set_version_flag("--version", std::string(xtar_version()));
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset and write its manifest");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the backbone and base classifier");
  auto* meta = app.add_subcommand("meta-train", "Meta-train the configured modules from a pretrained checkpoint");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on episodes");
  auto* ablate = app.add_subcommand("ablate", "Meta-train and evaluate every cumulative stage set");
  auto* analyze = app.add_subcommand("analyze", "Clustering and entropy analysis against the baseline");
  auto* exportf = app.add_subcommand("export-features", "Write one episode's feature vectors");
  for (auto* cmd : {synth, pretrain, meta, eval, ablate, analyze, exportf}) add_common(cmd, o);
  for (auto* cmd : {meta, eval, ablate, analyze, exportf}) add_checkpoint(cmd, o);
  exportf->add_option("--episode", o.episode, "Episode index within the export stream");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return usage_error(e.what());
  }

  const bool needs_checkpoint =
      meta->parsed() || eval->parsed() || ablate->parsed() || analyze->parsed() || exportf->parsed();
  if (needs_checkpoint && o.checkpoint.empty()) return usage_error("missing required: checkpoint");

  ConfigPtr cfg;
  if (const int rc = build_config(o, cfg); rc != 0) return rc;

  char* summary = nullptr;
  char* warnings = nullptr;
  const char* ck = o.checkpoint.c_str();
  xtar_status s = XTAR_OK;
  if (synth->parsed()) s = xtar_run_synth(cfg.get(), &summary, &warnings);
  else if (pretrain->parsed()) s = xtar_run_pretrain(cfg.get(), &summary, &warnings);
  else if (meta->parsed()) s = xtar_run_meta_train(cfg.get(), ck, &summary, &warnings);
  else if (eval->parsed()) s = xtar_run_eval(cfg.get(), ck, &summary, &warnings);
  else if (ablate->parsed()) s = xtar_run_ablate(cfg.get(), ck, &summary, &warnings);
  else if (analyze->parsed()) s = xtar_run_analyze(cfg.get(), ck, &summary, &warnings);
  else if (exportf->parsed()) s = xtar_run_export(cfg.get(), ck, o.episode, &summary, &warnings);
  return finish(s, summary, warnings, o.quiet);
}
