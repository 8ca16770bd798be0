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

#include "xtar/xtar.h"

#include <cstring>
#include <exception>
#include <fstream>
#include <iterator>
#include <memory>
#include <new>
#include <string>

#include "xtar/error.hpp"
#include "xtar/experiment.hpp"

struct xtar_config {
  xtar::ExperimentConfig config;
  nlohmann::json overrides = nlohmann::json::object();
};

struct xtar_model {
  xtar::Checkpoint checkpoint;
};

namespace {

thread_local std::string g_last_error;

template <class Fn>
xtar_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return XTAR_OK;
  } catch (const xtar::Error& e) {
    g_last_error = e.what();
    return static_cast<xtar_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return XTAR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return XTAR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void need(const void* p, const char* what) {
  xtar::require(p != nullptr, xtar::ErrorCode::kInvalidArgument, std::string(what) + " is null");
}

// Keeps the user's keys so later overrides still resolve metric-dependent
// defaults.
void parse_config(const std::string& text, xtar_config** out) {
  need(out, "out");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    xtar::fail(xtar::ErrorCode::kInvalidArgument, std::string("config is not valid JSON: ") + e.what());
  }
  auto cfg = std::make_unique<xtar_config>();
  cfg->config = xtar::config_from_json(j);
  cfg->overrides = std::move(j);
  *out = cfg.release();
}

void emit(const xtar::RunResult& r, char** summary_out, char** warnings_out) {
  if (summary_out) *summary_out = dup_string(r.summary.dump(2));
  if (warnings_out) {
    std::string w;
    for (const auto& line : r.warnings) w += line + "\n";
    *warnings_out = dup_string(w);
  }
}

}  // namespace

extern "C" {

const char* xtar_version(void) { return "1.0.0"; }

const char* xtar_last_error(void) { return g_last_error.c_str(); }

const char* xtar_status_name(xtar_status s) {
  switch (s) {
    case XTAR_OK: return "ok";
    case XTAR_INVALID_ARGUMENT: return "invalid_argument";
    case XTAR_SHAPE_MISMATCH: return "shape_mismatch";
    case XTAR_NON_FINITE: return "non_finite";
    case XTAR_IO: return "io";
    case XTAR_CORRUPT: return "corrupt";
    case XTAR_VERSION_MISMATCH: return "version_mismatch";
    case XTAR_INSUFFICIENT_DATA: return "insufficient_data";
    case XTAR_STATE: return "state";
    case XTAR_INTERNAL: return "internal";
  }
  return "unknown";
}

void xtar_string_free(char* s) { delete[] s; }

xtar_status xtar_config_new(xtar_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new xtar_config;
  });
}

xtar_status xtar_config_load(const char* path, xtar_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    std::ifstream is(path);
    xtar::require(static_cast<bool>(is), xtar::ErrorCode::kIo, std::string("cannot read config ") + path);
    const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    parse_config(text, out);
  });
}

xtar_status xtar_config_from_json(const char* json, xtar_config** out) {
  return guarded([&] {
    need(json, "json");
    parse_config(json, out);
  });
}

xtar_status xtar_config_set(xtar_config* cfg, const char* key, const char* value_json) {
  return guarded([&] {
    need(cfg, "config");
    need(key, "key");
    need(value_json, "value");
    nlohmann::json value = nlohmann::json::parse(value_json, nullptr, false);
    if (value.is_discarded()) value = std::string(value_json);
    nlohmann::json next = cfg->overrides;
    next[key] = value;
    cfg->config = xtar::config_from_json(next);
    cfg->overrides = std::move(next);
  });
}

xtar_status xtar_config_to_json(const xtar_config* cfg, char** out) {
  return guarded([&] {
    need(cfg, "config");
    need(out, "out");
    *out = dup_string(xtar::to_json(cfg->config).dump(2));
  });
}

void xtar_config_free(xtar_config* cfg) { delete cfg; }

xtar_status xtar_run_synth(const xtar_config* cfg, char** summary_out, char** warnings_out) {
  return guarded([&] {
    need(cfg, "config");
    emit(xtar::run_synth(cfg->config), summary_out, warnings_out);
  });
}

xtar_status xtar_run_pretrain(const xtar_config* cfg, char** summary_out, char** warnings_out) {
  return guarded([&] {
    need(cfg, "config");
    emit(xtar::run_pretrain(cfg->config), summary_out, warnings_out);
  });
}

xtar_status xtar_run_meta_train(const xtar_config* cfg, const char* pretrained, char** summary_out,
                                char** warnings_out) {
  return guarded([&] {
    need(cfg, "config");
    need(pretrained, "checkpoint");
    emit(xtar::run_meta_train(cfg->config, pretrained), summary_out, warnings_out);
  });
}

xtar_status xtar_run_eval(const xtar_config* cfg, const char* checkpoint, char** summary_out,
                          char** warnings_out) {
  return guarded([&] {
    need(cfg, "config");
    need(checkpoint, "checkpoint");
    emit(xtar::run_eval(cfg->config, checkpoint), summary_out, warnings_out);
  });
}

xtar_status xtar_run_ablate(const xtar_config* cfg, const char* pretrained, char** summary_out,
                            char** warnings_out) {
  return guarded([&] {
    need(cfg, "config");
    need(pretrained, "checkpoint");
    emit(xtar::run_ablate(cfg->config, pretrained), summary_out, warnings_out);
  });
}

xtar_status xtar_run_analyze(const xtar_config* cfg, const char* checkpoint, char** summary_out,
                             char** warnings_out) {
  return guarded([&] {
    need(cfg, "config");
    need(checkpoint, "checkpoint");
    emit(xtar::run_analyze(cfg->config, checkpoint), summary_out, warnings_out);
  });
}

xtar_status xtar_run_export(const xtar_config* cfg, const char* checkpoint, size_t episode_index,
                            char** summary_out, char** warnings_out) {
  return guarded([&] {
    need(cfg, "config");
    need(checkpoint, "checkpoint");
    emit(xtar::run_export(cfg->config, checkpoint, episode_index), summary_out, warnings_out);
  });
}

xtar_status xtar_model_load(const char* checkpoint, xtar_model** out) {
  return guarded([&] {
    need(checkpoint, "checkpoint");
    need(out, "out");
    auto m = std::make_unique<xtar_model>();
    m->checkpoint = xtar::load_checkpoint(checkpoint);
    *out = m.release();
  });
}

xtar_status xtar_model_save(const xtar_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    xtar::save_checkpoint(path, model->checkpoint);
  });
}

xtar_status xtar_model_parameter_count(const xtar_model* model, size_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    std::size_t n = 0;
    for (const auto& [name, t] : model->checkpoint.params) n += t.size();
    *out = n;
  });
}

xtar_status xtar_model_evaluate(const xtar_model* model, const xtar_config* cfg, xtar_metrics* out) {
  return guarded([&] {
    need(model, "model");
    need(cfg, "config");
    need(out, "out");
    const xtar::DatasetSplits splits = xtar::load_data(cfg->config);
    const xtar::NetworkConfig net = xtar::network_config(cfg->config, splits);
    const xtar::MetricsReport r =
        xtar::evaluate(model->checkpoint.params, net, splits, xtar::eval_config(cfg->config));
    *out = {r.episodes, r.joint_accuracy, r.joint_ci95, r.base_individual,
            r.novel_individual, r.delta_a, r.delta_b, r.delta};
  });
}

void xtar_model_free(xtar_model* model) { delete model; }

}  // extern "C"
