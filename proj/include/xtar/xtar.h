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

#ifndef XTAR_XTAR_H
#define XTAR_XTAR_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define XTAR_API __declspec(dllexport)
#else
#define XTAR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum xtar_status {
  XTAR_OK = 0,
  XTAR_INVALID_ARGUMENT = 1,
  XTAR_SHAPE_MISMATCH = 2,
  XTAR_NON_FINITE = 3,
  XTAR_IO = 4,
  XTAR_CORRUPT = 5,
  XTAR_VERSION_MISMATCH = 6,
  XTAR_INSUFFICIENT_DATA = 7,
  XTAR_STATE = 8,
  XTAR_INTERNAL = 99
} xtar_status;

typedef struct xtar_config xtar_config;
typedef struct xtar_model xtar_model;

typedef struct xtar_metrics {
  size_t episodes;
  double joint_accuracy;
  double joint_ci95;
  double base_individual;
  double novel_individual;
  double delta_a;
  double delta_b;
  double delta;
} xtar_metrics;

XTAR_API const char* xtar_version(void);
/* Message of the last failed call on this thread; "" when none. */
XTAR_API const char* xtar_last_error(void);
XTAR_API const char* xtar_status_name(xtar_status s);
XTAR_API void xtar_string_free(char* s);

/* Configs start from defaults. */
XTAR_API xtar_status xtar_config_new(xtar_config** out);
XTAR_API xtar_status xtar_config_load(const char* path, xtar_config** out);
XTAR_API xtar_status xtar_config_from_json(const char* json, xtar_config** out);
/* `value_json` is a JSON literal; bare words are taken as strings. */
XTAR_API xtar_status xtar_config_set(xtar_config* cfg, const char* key, const char* value_json);
/* Resolved config; release with xtar_string_free. */
XTAR_API xtar_status xtar_config_to_json(const xtar_config* cfg, char** out);
XTAR_API void xtar_config_free(xtar_config* cfg);

/* Drivers. Each writes its files under the config's output_dir. The
   summary.json text is returned through `summary_out` when it is non-null
   (release with xtar_string_free); warnings go to `warnings_out` likewise,
   one per line. */
XTAR_API xtar_status xtar_run_synth(const xtar_config* cfg, char** summary_out, char** warnings_out);
XTAR_API xtar_status xtar_run_pretrain(const xtar_config* cfg, char** summary_out, char** warnings_out);
XTAR_API xtar_status xtar_run_meta_train(const xtar_config* cfg, const char* pretrained,
                                         char** summary_out, char** warnings_out);
XTAR_API xtar_status xtar_run_eval(const xtar_config* cfg, const char* checkpoint,
                                   char** summary_out, char** warnings_out);
XTAR_API xtar_status xtar_run_ablate(const xtar_config* cfg, const char* pretrained,
                                     char** summary_out, char** warnings_out);
XTAR_API xtar_status xtar_run_analyze(const xtar_config* cfg, const char* checkpoint,
                                      char** summary_out, char** warnings_out);
XTAR_API xtar_status xtar_run_export(const xtar_config* cfg, const char* checkpoint,
                                     size_t episode_index, char** summary_out, char** warnings_out);

/* In-memory models. */
XTAR_API xtar_status xtar_model_load(const char* checkpoint, xtar_model** out);
XTAR_API xtar_status xtar_model_save(const xtar_model* model, const char* path);
XTAR_API xtar_status xtar_model_parameter_count(const xtar_model* model, size_t* out);
XTAR_API xtar_status xtar_model_evaluate(const xtar_model* model, const xtar_config* cfg,
                                         xtar_metrics* out);
XTAR_API void xtar_model_free(xtar_model* model);

#ifdef __cplusplus
}
#endif

#endif
