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

#include "xtar/experiment.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "xtar/error.hpp"
#include "xtar/tensor_io.hpp"

namespace xtar {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ---------------------------------------------------------------

void ExperimentConfig::validate() const {
  require(n_way > 0 && k_shot > 0 && q_per_class > 0, ErrorCode::kInvalidArgument,
          "n_way, k_shot and q_per_class must be positive");
  require(pretrain_batch_size > 0, ErrorCode::kInvalidArgument, "pretrain_batch_size must be positive");
  require(meta_decay_every > 0, ErrorCode::kInvalidArgument, "meta_decay_every must be positive");
  require(val_every > 0, ErrorCode::kInvalidArgument, "val_every must be positive");
  require(eval_episodes > 0, ErrorCode::kInvalidArgument, "eval_episodes must be positive");
  require(analysis_episodes > 0 && analysis_q_per_class > 0, ErrorCode::kInvalidArgument,
          "analysis_episodes and analysis_q_per_class must be positive");
  require(pretrain_momentum >= 0 && meta_momentum >= 0 && pretrain_weight_decay >= 0 &&
              meta_weight_decay >= 0 && meta_lr >= 0,
          ErrorCode::kInvalidArgument, "rates, momenta and weight decays must be non-negative");
  if (metric == MetricMode::kEuclideanProjected)
    require(feature_dim > n_way, ErrorCode::kInvalidArgument,
            "euclidean projection needs feature_dim > n_way");
  if (data_manifest.empty())
    require(synthetic.cluster_spread > 0, ErrorCode::kInvalidArgument, "synth_spread must be positive");
  require(!output_dir.empty(), ErrorCode::kInvalidArgument, "output_dir must be set");
}

namespace {

using Setter = std::function<void(ExperimentConfig&, const json&)>;

std::size_t as_size(const std::string& key, const json& v) {
  require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0),
          ErrorCode::kInvalidArgument,
          "config key " + key + " needs a non-negative integer");
  return v.get<std::size_t>();
}

double as_double(const std::string& key, const json& v) {
  require(v.is_number(), ErrorCode::kInvalidArgument, "config key " + key + " needs a number");
  return v.get<double>();
}

bool as_bool(const std::string& key, const json& v) {
  require(v.is_boolean(), ErrorCode::kInvalidArgument, "config key " + key + " needs a boolean");
  return v.get<bool>();
}

std::string as_string(const std::string& key, const json& v) {
  require(v.is_string(), ErrorCode::kInvalidArgument, "config key " + key + " needs a string");
  return v.get<std::string>();
}

Shape as_shape(const std::string& key, const json& v) {
  require(v.is_array() && !v.empty(), ErrorCode::kInvalidArgument,
          "config key " + key + " needs a non-empty integer array");
  Shape s;
  for (const auto& e : v) s.push_back(as_size(key, e));
  return s;
}

#define XTAR_SIZE(key, member) \
  {key, [](ExperimentConfig& c, const json& v) { c.member = as_size(key, v); }}
#define XTAR_DOUBLE(key, member) \
  {key, [](ExperimentConfig& c, const json& v) { c.member = as_double(key, v); }}
#define XTAR_BOOL(key, member) \
  {key, [](ExperimentConfig& c, const json& v) { c.member = as_bool(key, v); }}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data_manifest",
       [](ExperimentConfig& c, const json& v) { c.data_manifest = as_string("data_manifest", v); }},
      XTAR_SIZE("synth_base_classes", synthetic.num_base_classes),
      XTAR_SIZE("synth_novel_train_classes", synthetic.novel_train_classes),
      XTAR_SIZE("synth_novel_val_classes", synthetic.novel_val_classes),
      XTAR_SIZE("synth_novel_test_classes", synthetic.novel_test_classes),
      XTAR_SIZE("synth_per_class", synthetic.per_class_count),
      {"synth_input_shape",
       [](ExperimentConfig& c, const json& v) {
         c.synthetic.input_shape = as_shape("synth_input_shape", v);
       }},
      XTAR_DOUBLE("synth_spread", synthetic.cluster_spread),
      XTAR_DOUBLE("synth_base_val_fraction", synthetic.base_val_fraction),
      XTAR_DOUBLE("synth_base_test_fraction", synthetic.base_test_fraction),
      XTAR_SIZE("synth_superclasses", synthetic.superclasses),
      XTAR_DOUBLE("synth_superclass_share", synthetic.superclass_share),
      {"backbone",
       [](ExperimentConfig& c, const json& v) {
         c.backbone = parse_backbone_kind(as_string("backbone", v));
       }},
      XTAR_SIZE("hidden", hidden),
      XTAR_SIZE("num_blocks", num_blocks),
      XTAR_SIZE("tap_index", tap_index),
      XTAR_SIZE("feature_dim", feature_dim),
      XTAR_SIZE("mergenet_depth", mergenet_depth),
      {"variant",
       [](ExperimentConfig& c, const json& v) { c.variant = parse_variant(as_string("variant", v)); }},
      {"metric",
       [](ExperimentConfig& c, const json& v) { c.metric = parse_metric(as_string("metric", v)); }},
      XTAR_DOUBLE("cosine_scale_init", cosine_scale_init),
      XTAR_BOOL("stage_metacnn", stages.metacnn),
      XTAR_BOOL("stage_mergenet", stages.mergenet),
      XTAR_BOOL("stage_tconnet", stages.tconnet),
      XTAR_SIZE("pretrain_epochs", pretrain_epochs),
      XTAR_SIZE("pretrain_batch_size", pretrain_batch_size),
      XTAR_DOUBLE("pretrain_lr", pretrain_lr),
      XTAR_DOUBLE("pretrain_momentum", pretrain_momentum),
      XTAR_DOUBLE("pretrain_weight_decay", pretrain_weight_decay),
      XTAR_SIZE("n_way", n_way),
      XTAR_SIZE("k_shot", k_shot),
      XTAR_SIZE("q_per_class", q_per_class),
      XTAR_BOOL("fake_novel", fake_novel),
      XTAR_SIZE("meta_episodes", meta_episodes),
      XTAR_DOUBLE("meta_lr", meta_lr),
      XTAR_DOUBLE("meta_momentum", meta_momentum),
      XTAR_DOUBLE("meta_weight_decay", meta_weight_decay),
      XTAR_SIZE("meta_decay_every", meta_decay_every),
      XTAR_DOUBLE("meta_decay_factor", meta_decay_factor),
      XTAR_SIZE("val_every", val_every),
      XTAR_SIZE("val_episodes", val_episodes),
      {"eval_phase",
       [](ExperimentConfig& c, const json& v) { c.eval_phase = parse_phase(as_string("eval_phase", v)); }},
      XTAR_SIZE("eval_episodes", eval_episodes),
      XTAR_SIZE("analysis_episodes", analysis_episodes),
      XTAR_SIZE("analysis_q_per_class", analysis_q_per_class),
      XTAR_SIZE("threads", threads),
      XTAR_SIZE("data_seed", data_seed),
      XTAR_SIZE("init_seed", init_seed),
      XTAR_SIZE("episode_seed", episode_seed),
      {"output_dir",
       [](ExperimentConfig& c, const json& v) { c.output_dir = as_string("output_dir", v); }},
  };
  return table;
}

#undef XTAR_SIZE
#undef XTAR_DOUBLE
#undef XTAR_BOOL

double resolved_pretrain_lr(const ExperimentConfig& c) {
  return c.pretrain_lr >= 0 ? c.pretrain_lr
                            : default_pretrain_config(c.metric).sgd.learning_rate;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  const SyntheticConfig& s = c.synthetic;
  return {{"data_manifest", c.data_manifest},
          {"synth_base_classes", s.num_base_classes},
          {"synth_novel_train_classes", s.novel_train_classes},
          {"synth_novel_val_classes", s.novel_val_classes},
          {"synth_novel_test_classes", s.novel_test_classes},
          {"synth_per_class", s.per_class_count},
          {"synth_input_shape", s.input_shape},
          {"synth_spread", s.cluster_spread},
          {"synth_base_val_fraction", s.base_val_fraction},
          {"synth_base_test_fraction", s.base_test_fraction},
          {"synth_superclasses", s.superclasses},
          {"synth_superclass_share", s.superclass_share},
          {"backbone", to_string(c.backbone)},
          {"hidden", c.hidden},
          {"num_blocks", c.num_blocks},
          {"tap_index", c.tap_index},
          {"feature_dim", c.feature_dim},
          {"mergenet_depth", c.mergenet_depth},
          {"variant", to_string(c.variant)},
          {"metric", to_string(c.metric)},
          {"cosine_scale_init", c.cosine_scale_init},
          {"stage_metacnn", c.stages.metacnn},
          {"stage_mergenet", c.stages.mergenet},
          {"stage_tconnet", c.stages.tconnet},
          {"pretrain_epochs", c.pretrain_epochs},
          {"pretrain_batch_size", c.pretrain_batch_size},
          {"pretrain_lr", resolved_pretrain_lr(c)},
          {"pretrain_momentum", c.pretrain_momentum},
          {"pretrain_weight_decay", c.pretrain_weight_decay},
          {"n_way", c.n_way},
          {"k_shot", c.k_shot},
          {"q_per_class", c.q_per_class},
          {"fake_novel", c.fake_novel},
          {"meta_episodes", c.meta_episodes},
          {"meta_lr", c.meta_lr},
          {"meta_momentum", c.meta_momentum},
          {"meta_weight_decay", c.meta_weight_decay},
          {"meta_decay_every", c.meta_decay_every},
          {"meta_decay_factor", c.meta_decay_factor},
          {"val_every", c.val_every},
          {"val_episodes", c.val_episodes},
          {"eval_phase", phase_name(c.eval_phase)},
          {"eval_episodes", c.eval_episodes},
          {"analysis_episodes", c.analysis_episodes},
          {"analysis_q_per_class", c.analysis_q_per_class},
          {"threads", c.threads},
          {"data_seed", c.data_seed},
          {"init_seed", c.init_seed},
          {"episode_seed", c.episode_seed},
          {"output_dir", c.output_dir}};
}

ExperimentConfig config_from_json(const json& j) {
  require(j.is_object(), ErrorCode::kInvalidArgument, "config must be a JSON object");
  ExperimentConfig c;
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    const auto it = table.find(key);
    require(it != table.end(), ErrorCode::kInvalidArgument, "unknown config key: " + key);
    it->second(c, value);
  }
  c.synthetic.seed = c.data_seed;
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidArgument, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  for (const char* key : {"output_dir", "threads", "eval_phase", "eval_episodes",
                          "analysis_episodes", "analysis_q_per_class"})
    j.erase(key);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

NetworkConfig network_config(const ExperimentConfig& c, const DatasetSplits& splits) {
  NetworkConfig n;
  n.input_shape = splits.input_shape();
  n.backbone = c.backbone;
  n.hidden = c.hidden;
  n.num_blocks = c.num_blocks;
  n.tap_index = c.tap_index;
  n.feature_dim = c.feature_dim;
  n.num_base_classes = splits.num_base_classes();
  n.n_way = c.n_way;
  n.mergenet_depth = c.mergenet_depth;
  n.variant = c.variant;
  n.metric = c.metric;
  n.cosine_scale_init = c.cosine_scale_init;
  n.validate();
  return n;
}

PretrainConfig pretrain_config(const ExperimentConfig& c) {
  PretrainConfig p;
  p.epochs = c.pretrain_epochs;
  p.batch_size = c.pretrain_batch_size;
  p.sgd.learning_rate = resolved_pretrain_lr(c);
  p.sgd.momentum = c.pretrain_momentum;
  p.sgd.weight_decay = c.pretrain_weight_decay;
  p.seed = derive_seed(c.init_seed, 1);
  return p;
}

MetaConfig meta_config(const ExperimentConfig& c) {
  MetaConfig m;
  m.episodes = c.meta_episodes;
  m.n_way = c.n_way;
  m.k_shot = c.k_shot;
  m.q_per_class = c.q_per_class;
  m.fake_novel = c.fake_novel;
  m.sgd = {.learning_rate = c.meta_lr,
           .momentum = c.meta_momentum,
           .weight_decay = c.meta_weight_decay,
           .decay_every = c.meta_decay_every,
           .decay_factor = c.meta_decay_factor};
  m.val_every = c.val_every;
  m.val_episodes = c.val_episodes;
  m.stages = c.stages;
  m.seed = derive_seed(c.episode_seed, 1);
  return m;
}

EvalConfig eval_config(const ExperimentConfig& c) {
  EvalConfig e;
  e.phase = c.eval_phase;
  e.episodes = c.eval_episodes;
  e.n_way = c.n_way;
  e.k_shot = c.k_shot;
  e.q_per_class = c.q_per_class;
  e.seed = derive_seed(c.episode_seed, 2);
  e.threads = c.threads;
  e.stages = c.stages;
  return e;
}

AnalysisConfig analysis_config(const ExperimentConfig& c) {
  return {.phase = c.eval_phase,
          .episodes = c.analysis_episodes,
          .n_way = c.n_way,
          .k_shot = c.k_shot,
          .q_per_class = c.analysis_q_per_class,
          .seed = derive_seed(c.episode_seed, 3),
          .threads = c.threads};
}

DatasetSplits load_data(const ExperimentConfig& c) {
  if (!c.data_manifest.empty()) return load_dataset(c.data_manifest);
  SyntheticConfig s = c.synthetic;
  s.seed = c.data_seed;
  return generate_synthetic(s);
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'X', 'T', 'C', 'K'};

void put_bytes(std::ostream& os, const std::string& s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }

std::string get_bytes(std::istream& is, std::uint64_t n) {
  std::string out;
  char buf[1 << 16];
  while (n > 0) {
    const auto chunk = static_cast<std::streamsize>(std::min<std::uint64_t>(n, sizeof buf));
    is.read(buf, chunk);
    require(is.gcount() == chunk, ErrorCode::kCorrupt, "unexpected end of data");
    out.append(buf, static_cast<std::size_t>(chunk));
    n -= static_cast<std::uint64_t>(chunk);
  }
  return out;
}

void put_records(std::ostream& os, const std::map<std::string, Tensor>& arrays) {
  le::put_u32(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    le::put_u32(os, static_cast<std::uint32_t>(name.size()));
    put_bytes(os, name);
    std::ostringstream buf;
    write_xtds(buf, t);
    const std::string bytes = buf.str();
    le::put_u64(os, bytes.size());
    put_bytes(os, bytes);
  }
}

std::map<std::string, Tensor> get_records(std::istream& is) {
  std::map<std::string, Tensor> out;
  const std::uint32_t count = le::get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_bytes(is, le::get_u32(is));
    std::istringstream buf(get_bytes(is, le::get_u64(is)));
    Tensor t = read_xtds(buf);
    require(buf.peek() == std::char_traits<char>::eof(), ErrorCode::kCorrupt,
            "array record " + name + " has trailing bytes");
    require(out.emplace(name, std::move(t)).second, ErrorCode::kCorrupt,
            "duplicate array record " + name);
  }
  return out;
}

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kMagic, 4);
  le::put_u32(os, kCheckpointVersion);
  le::put_u64(os, ck.config_hash);
  le::put_u64(os, ck.episode);
  le::put_u32(os, static_cast<std::uint32_t>(ck.config_json.size()));
  put_bytes(os, ck.config_json);
  put_records(os, ck.params);
  const SgdOptions& o = ck.optimizer.options;
  le::put_f64(os, o.learning_rate);
  le::put_f64(os, o.momentum);
  le::put_f64(os, o.weight_decay);
  le::put_u64(os, o.decay_every);
  le::put_f64(os, o.decay_factor);
  le::put_u64(os, ck.optimizer.step_count);
  put_records(os, ck.optimizer.velocity);
}

Checkpoint read_checkpoint(std::istream& is) {
  try {
    char magic[4];
    is.read(magic, 4);
    require(is.gcount() == 4 && std::equal(magic, magic + 4, kMagic), ErrorCode::kCorrupt,
            "bad magic");
    const std::uint32_t version = le::get_u32(is);
    require(version == kCheckpointVersion, ErrorCode::kVersionMismatch,
            "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.config_hash = le::get_u64(is);
    ck.episode = le::get_u64(is);
    ck.config_json = get_bytes(is, le::get_u32(is));
    ck.params = get_records(is);
    SgdOptions& o = ck.optimizer.options;
    o.learning_rate = le::get_f64(is);
    o.momentum = le::get_f64(is);
    o.weight_decay = le::get_f64(is);
    o.decay_every = le::get_u64(is);
    o.decay_factor = le::get_f64(is);
    ck.optimizer.step_count = le::get_u64(is);
    ck.optimizer.velocity = get_records(is);
    require(is.peek() == std::char_traits<char>::eof(), ErrorCode::kCorrupt, "trailing bytes");
    return ck;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kCorrupt) fail(ErrorCode::kCorrupt, std::string("corrupt checkpoint: ") + e.what());
    throw;
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write checkpoint " + path.string());
  write_checkpoint(os, ck);
  require(static_cast<bool>(os), ErrorCode::kIo, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot read checkpoint " + path.string());
  return read_checkpoint(is);
}

// ---- drivers --------------------------------------------------------------

namespace {

class RunWriter {
 public:
  RunWriter(const ExperimentConfig& c, std::string command)
      : out_(c.output_dir), command_(std::move(command)), start_(std::chrono::steady_clock::now()) {
    std::error_code ec;
    fs::create_directories(out_, ec);
    require(!ec && fs::is_directory(out_), ErrorCode::kIo,
            "cannot create output directory " + out_.string());
    started_ = timestamp();
    text("resolved-config.json", to_json(c).dump(2) + "\n");
  }

  const fs::path& dir() const { return out_; }

  void text(const std::string& name, const std::string& body) {
    const fs::path p = out_ / name;
    std::ofstream os(p, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + p.string());
    os << body;
    result_.files.push_back(p);
  }

  template <class Fn>
  void stream(const std::string& name, Fn&& fn) {
    std::ostringstream os;
    fn(os);
    text(name, os.str());
  }

  void checkpoint(const std::string& name, const Checkpoint& ck) {
    save_checkpoint(out_ / name, ck);
    result_.files.push_back(out_ / name);
  }

  void warn(std::string w) { result_.warnings.push_back(std::move(w)); }

  RunResult finish(json summary) {
    result_.summary = std::move(summary);
    text("summary.json", result_.summary.dump(2) + "\n");
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    text("run-info.json", json{{"command", command_},
                               {"started_at", started_},
                               {"finished_at", timestamp()},
                               {"wall_seconds", secs},
                               {"warnings", result_.warnings}}
                                  .dump(2) +
                              "\n");
    return std::move(result_);
  }

 private:
  static std::string timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  fs::path out_;
  std::string command_;
  std::chrono::steady_clock::time_point start_;
  std::string started_;
  RunResult result_;
};

Checkpoint open_checkpoint(const ExperimentConfig& c, const fs::path& path, RunWriter& w) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.config_hash != config_hash(c))
    w.warn("checkpoint " + path.string() + " was written under a different config");
  return ck;
}

Checkpoint make_checkpoint(const ExperimentConfig& c, ParamStore params, OptimizerState opt,
                           std::uint64_t episode) {
  Checkpoint ck;
  ck.params = std::move(params);
  ck.optimizer = std::move(opt);
  ck.episode = episode;
  ck.config_hash = config_hash(c);
  ck.config_json = to_json(c).dump();
  return ck;
}

json stages_json(const StageFlags& s) {
  return {{"metacnn", s.metacnn}, {"mergenet", s.mergenet}, {"tconnet", s.tconnet}};
}

std::string file_label(const StageFlags& s) {
  std::string l = stage_label(s);
  if (!l.empty() && l[0] == '+') l = l.substr(1);
  return l;
}

void write_loss_csv(std::ostream& os, const char* index, const std::vector<double>& losses) {
  os << index << ",loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i, losses[i]);
    os << buf;
  }
}

}  // namespace

RunResult run_synth(const ExperimentConfig& c) {
  c.validate();
  RunWriter w(c, "synth");
  const DatasetSplits splits = load_data(c);
  const fs::path manifest = w.dir() / "data" / "manifest.json";
  save_dataset(splits, manifest);
  json summary{{"manifest", manifest.string()}, {"num_base_classes", splits.num_base_classes()}};
  w.stream("splits.csv", [&](std::ostream& os) {
    os << "split,classes,samples\n";
    for (Split s : kAllSplits) {
      std::size_t n = 0;
      for (const auto& cls : splits[s]) n += cls.count();
      os << split_name(s) << ',' << splits[s].size() << ',' << n << '\n';
      summary["splits"][split_name(s)] = {{"classes", splits[s].size()}, {"samples", n}};
    }
  });
  return w.finish(summary);
}

RunResult run_pretrain(const ExperimentConfig& c) {
  c.validate();
  RunWriter w(c, "pretrain");
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  ParamStore params = init_params(net, c.init_seed);
  const PretrainConfig pc = pretrain_config(c);
  const PretrainReport report = pretrain(params, net, splits, pc);
  OptimizerState opt = make_optimizer(pc.sgd);
  opt.step_count = report.steps;
  w.checkpoint("pretrained.xtck", make_checkpoint(c, std::move(params), std::move(opt), 0));
  w.stream("pretrain-loss.csv", [&](std::ostream& os) { write_loss_csv(os, "step", report.loss_history); });
  return w.finish({{"pretrain", to_json(report)}, {"checkpoint", "pretrained.xtck"}});
}

RunResult run_meta_train(const ExperimentConfig& c, const fs::path& pretrained) {
  c.validate();
  RunWriter w(c, "meta-train");
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  Checkpoint ck = open_checkpoint(c, pretrained, w);
  const MetaTrainReport report = meta_train(ck.params, net, splits, meta_config(c));
  w.checkpoint("meta.xtck", make_checkpoint(c, std::move(ck.params), report.optimizer,
                                            report.loss_history.size()));
  w.stream("meta-loss.csv", [&](std::ostream& os) { write_loss_csv(os, "episode", report.loss_history); });
  return w.finish({{"stages", stages_json(c.stages)},
                   {"meta_train", to_json(report)},
                   {"checkpoint", "meta.xtck"}});
}

RunResult run_eval(const ExperimentConfig& c, const fs::path& checkpoint) {
  c.validate();
  RunWriter w(c, "eval");
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  const Checkpoint ck = open_checkpoint(c, checkpoint, w);
  const MetricsReport report = evaluate(ck.params, net, splits, eval_config(c));
  w.stream("episodes.csv", [&](std::ostream& os) { write_episode_csv(os, report.records); });
  return w.finish({{"stages", stages_json(c.stages)},
                   {"phase", phase_name(c.eval_phase)},
                   {"metrics", to_json(report)}});
}

RunResult run_ablate(const ExperimentConfig& c, const fs::path& pretrained) {
  c.validate();
  RunWriter w(c, "ablate");
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  const Checkpoint ck = open_checkpoint(c, pretrained, w);
  const auto prefixes = ablation_prefixes();
  const auto runs = run_ablation(ck.params, net, splits, meta_config(c), eval_config(c), prefixes);
  json summary{{"phase", phase_name(c.eval_phase)}, {"runs", json::array()}};
  std::ostringstream table;
  table << "method,metacnn,mergenet,tconnet,joint_accuracy,joint_ci95,delta_a,delta_b,delta\n";
  for (const auto& run : runs) {
    const std::string label = file_label(run.stages);
    w.checkpoint("ablate-" + label + ".xtck",
                 make_checkpoint(c, run.params, run.training.optimizer,
                                 run.training.loss_history.size()));
    w.stream("episodes-" + label + ".csv",
             [&](std::ostream& os) { write_episode_csv(os, run.metrics.records); });
    summary["runs"].push_back({{"method", stage_label(run.stages)},
                               {"stages", stages_json(run.stages)},
                               {"meta_train", to_json(run.training)},
                               {"metrics", to_json(run.metrics)}});
    char buf[256];
    const MetricsReport& m = run.metrics;
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  stage_label(run.stages).c_str(), run.stages.metacnn, run.stages.mergenet,
                  run.stages.tconnet, m.joint_accuracy, m.joint_ci95, m.delta_a, m.delta_b, m.delta);
    table << buf;
  }
  w.text("ablation.csv", table.str());
  return w.finish(summary);
}

RunResult run_analyze(const ExperimentConfig& c, const fs::path& checkpoint) {
  c.validate();
  RunWriter w(c, "analyze");
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  const Checkpoint ck = open_checkpoint(c, checkpoint, w);
  const AnalysisConfig ac = analysis_config(c);
  const AnalysisReport before = analyze(ck.params, net, splits, ac, {false, false, false}, SseMode::kBaseOnly);
  const AnalysisReport after = analyze(ck.params, net, splits, ac, c.stages, SseMode::kTar);
  const std::string base_name = to_string(c.variant);
  const std::string tar_name = "combined";
  w.stream("clusters.csv", [&](std::ostream& os) {
    write_cluster_table(os, base_name, before.clusters, tar_name, after.clusters);
  });
  w.stream("entropy.csv", [&](std::ostream& os) {
    write_entropy_table(os, base_name, before.entropy, tar_name, after.entropy);
  });
  w.stream("analysis-" + base_name + ".csv", [&](std::ostream& os) { write_analysis_csv(os, before.records); });
  w.stream("analysis-" + tar_name + ".csv", [&](std::ostream& os) { write_analysis_csv(os, after.records); });
  return w.finish({{"stages", stages_json(c.stages)},
                   {"phase", phase_name(c.eval_phase)},
                   {base_name, to_json(before)},
                   {tar_name, to_json(after)}});
}

RunResult run_export(const ExperimentConfig& c, const fs::path& checkpoint, std::size_t episode_index) {
  c.validate();
  RunWriter w(c, "export-features");
  const DatasetSplits splits = load_data(c);
  const NetworkConfig net = network_config(c, splits);
  const Checkpoint ck = open_checkpoint(c, checkpoint, w);
  const EpisodeSpec spec{.phase = c.eval_phase,
                         .n_way = c.n_way,
                         .k_shot = c.k_shot,
                         .q_per_class = c.q_per_class,
                         .fake_novel = false,
                         .balanced_base = false,
                         .feature_dim = net.feature_dim};
  const std::uint64_t seed = derive_seed(derive_seed(c.episode_seed, 4), episode_index);
  const Episode ep = sample_episode(splits, spec, seed);
  const std::string sub = "features-" + std::to_string(episode_index);
  const fs::path index = export_features(ck.params, net, ep, c.stages, w.dir() / sub);
  w.stream("labels.csv", [&](std::ostream& os) {
    os << "query,label,group\n";
    std::size_t q = 0;
    for (int l : ep.query_base.labels) os << q++ << ',' << l << ",base\n";
    for (int l : ep.query_novel.labels) os << q++ << ',' << l << ",novel\n";
  });
  return w.finish({{"episode", episode_index},
                   {"seed", seed},
                   {"stages", stages_json(c.stages)},
                   {"index", (fs::path(sub) / index.filename()).string()}});
}

}  // namespace xtar
