// SPDX-License-Identifier: Apache-2.0
//
// One JSON document describes a whole run: modalities, tasks, data
// synthesis, predictor, loss, optimizer schedule, evaluation and file paths.
// Unknown keys are rejected and every error names the offending field.
#pragma once

#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3jepa/data/dataset.hpp"
#include "m3jepa/eval/retrieval.hpp"
#include "m3jepa/loss/losses.hpp"
#include "m3jepa/model/moe.hpp"
#include "m3jepa/train/schedule.hpp"

namespace m3jepa {

using json = nlohmann::json;

struct PredictorConfig {
  std::string kind = "moe";  // moe | mlp | linear
  MoEConfig moe = MoEConfig::desk(2);
  bool adapters = false;
};

struct EvalConfig {
  std::vector<std::size_t> ks{1, 5, 10};
  RankMode mode = RankMode::cosine;
  std::size_t matrix_cap = 64;
  std::size_t latency_repeats = 3;
  std::size_t latency_queries = 32;
};

struct PathConfig {
  std::string dataset = "data.m3ds";
  std::string checkpoint = "model.m3jp";
  std::string log = "train.jsonl";
  std::string output = "out";
};

/// Per-modality noise scale override carried alongside the modality declaration.
struct ModalityEntry {
  ModalitySpec spec;
  std::optional<double> noise_std;
};

struct RunConfig {
  std::string name = "custom";
  std::uint64_t seed = 0;
  std::vector<ModalityEntry> modalities;
  std::vector<TaskSpec> tasks;
  SynthConfig synth;
  PredictorConfig predictor;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;
  PathConfig paths;

  ModalityRegistry registry() const {
    std::vector<ModalitySpec> specs;
    for (const auto& m : modalities) specs.push_back(m.spec);
    return ModalityRegistry(std::move(specs), tasks);
  }

  /// Synthesis settings with the run seed and per-modality noise applied.
  SynthConfig synth_config() const {
    SynthConfig s = synth;
    s.seed = seed;
    for (const auto& m : modalities)
      if (m.noise_std) s.noise_override[m.spec.id] = *m.noise_std;
    return s;
  }

  /// Optimizer settings with the run seed applied.
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  MoEConfig moe_config() const {
    MoEConfig m = predictor.moe;
    m.modalities = modalities.size();
    return m;
  }

  /// Cross-module checks; throws ValidationError naming the field.
  void validate() const {
    (void)registry();
    for (const auto& m : modalities) {
      if (m.noise_std && *m.noise_std < 0.0) {
        throw ValidationError("modalities[" + std::to_string(m.spec.id) + "].noise_std: must be >= 0");
      }
      if (m.spec.kind == ModalityKind::one_hot && m.spec.dim != synth.num_classes) {
        throw ValidationError("modalities[" + std::to_string(m.spec.id) + "].dim: one_hot dim " +
                              std::to_string(m.spec.dim) + " must equal synth.num_classes " +
                              std::to_string(synth.num_classes));
      }
    }
    if (tasks.empty()) throw ValidationError("tasks: at least one task is required");
    if (synth.latent_dim == 0) throw ValidationError("synth.latent_dim: must be >= 1");
    if (synth.noise_std < 0.0) throw ValidationError("synth.noise_std: must be >= 0");
    if (synth.num_train == 0) throw ValidationError("synth.num_train: must be >= 1");
    if (predictor.kind != "moe" && predictor.kind != "mlp" && predictor.kind != "linear") {
      throw ValidationError("predictor.kind: expected moe, mlp or linear, got '" + predictor.kind + "'");
    }
    moe_config().validate();
    loss.validate();
    auto t = train_config();
    t.validate();
    for (int id : t.task_order) {
      bool known = false;
      for (const auto& task : tasks) known = known || task.id == id;
      if (!known) throw ValidationError("train.task_order: unknown task id " + std::to_string(id));
    }
    if (t.batch_size < 2) throw ValidationError("train.batch_size: must be >= 2 (in-batch negatives)");
    if (t.batch_size > synth.num_train) {
      throw ValidationError("train.batch_size: " + std::to_string(t.batch_size) + " exceeds synth.num_train " +
                            std::to_string(synth.num_train));
    }
    for (auto k : eval.ks)
      if (k == 0) throw ValidationError("eval.ks: every K must be >= 1");
    if (eval.matrix_cap < 2) throw ValidationError("eval.matrix_cap: must be >= 2");
    if (eval.latency_repeats < 3) throw ValidationError("eval.latency_repeats: must be >= 3");
  }
};

namespace detail {

/// Strict reader over one JSON object: records consumed keys and rejects the rest.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ValidationError(where() + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError(field(key) + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.contains(k)) throw ValidationError(field(k) + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::vector<int> id_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path + ": expected a list of modality ids");
  std::vector<int> out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ValidationError(path + ": expected integer modality ids");
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  detail::Fields root(j, "");
  root.get("name", c.name);
  root.get("seed", c.seed);

  if (!root.has("modalities")) throw ValidationError("modalities: required");
  const auto& mods = root.at("modalities");
  if (!mods.is_array()) throw ValidationError("modalities: expected a list");
  for (std::size_t i = 0; i < mods.size(); ++i) {
    detail::Fields f(mods[i], "modalities[" + std::to_string(i) + "]");
    ModalityEntry e;
    std::string kind = "continuous";
    double noise = -1.0;
    f.get("id", e.spec.id);
    f.get("name", e.spec.name);
    f.get("dim", e.spec.dim);
    f.get("kind", kind);
    f.get("noise_std", noise);
    f.finish();
    if (kind == "one_hot") e.spec.kind = ModalityKind::one_hot;
    else if (kind != "continuous") throw ValidationError(f.field("kind") + ": expected continuous or one_hot");
    if (mods[i].contains("noise_std")) e.noise_std = noise;
    if (e.spec.name.empty()) e.spec.name = "m" + std::to_string(e.spec.id);
    c.modalities.push_back(e);
  }

  if (!root.has("tasks")) throw ValidationError("tasks: required");
  const auto& tasks = root.at("tasks");
  if (!tasks.is_array()) throw ValidationError("tasks: expected a list");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    detail::Fields f(tasks[i], "tasks[" + std::to_string(i) + "]");
    TaskSpec t;
    f.get("id", t.id);
    if (f.has("input")) t.inputs = detail::id_list(f.at("input"), f.field("input"));
    if (f.has("output")) t.outputs = detail::id_list(f.at("output"), f.field("output"));
    f.finish();
    c.tasks.push_back(t);
  }

  if (root.has("synth")) {
    detail::Fields f(root.at("synth"), "synth");
    f.get("latent_dim", c.synth.latent_dim);
    f.get("noise_std", c.synth.noise_std);
    f.get("num_train", c.synth.num_train);
    f.get("num_val", c.synth.num_val);
    f.get("num_test", c.synth.num_test);
    f.get("num_classes", c.synth.num_classes);
    f.finish();
  }

  if (root.has("predictor")) {
    detail::Fields f(root.at("predictor"), "predictor");
    auto& m = c.predictor.moe;
    f.get("kind", c.predictor.kind);
    f.get("experts_per_modality", m.experts_per_modality);
    f.get("top_k", m.top_k);
    f.get("gates", m.gates);
    f.get("hidden", m.hidden);
    f.get("expert_expansion", m.expansion);
    f.get("dropout", m.dropout);
    f.get("adapters", c.predictor.adapters);
    f.finish();
  }

  if (root.has("loss")) {
    detail::Fields f(root.at("loss"), "loss");
    f.get("alpha", c.loss.alpha);
    f.get("tau", c.loss.tau);
    f.get("symmetric_cl", c.loss.symmetric_cl);
    f.finish();
  }

  for (const auto& t : c.tasks) c.train.task_order.push_back(t.id);
  if (root.has("train")) {
    detail::Fields f(root.at("train"), "train");
    auto& t = c.train;
    std::string schedule = "agd";
    f.get("steps", t.steps);
    f.get("lr_init", t.lr_init);
    f.get("lr_final", t.lr_final);
    f.get("warmup_frac", t.warmup_frac);
    f.get("weight_decay", t.weight_decay);
    f.get("beta1", t.beta1);
    f.get("beta2", t.beta2);
    f.get("eps", t.adam_eps);
    f.get("batch_size", t.batch_size);
    f.get("schedule", schedule);
    f.get("task_order", t.task_order);
    f.get("checkpoint_interval", t.checkpoint_interval);
    f.finish();
    if (schedule == "joint") t.mode = ScheduleMode::joint;
    else if (schedule != "agd") throw ValidationError("train.schedule: expected agd or joint, got '" + schedule + "'");
  }

  if (root.has("eval")) {
    detail::Fields f(root.at("eval"), "eval");
    std::string mode = "cosine";
    f.get("ks", c.eval.ks);
    f.get("mode", mode);
    f.get("matrix_cap", c.eval.matrix_cap);
    f.get("latency_repeats", c.eval.latency_repeats);
    f.get("latency_queries", c.eval.latency_queries);
    f.finish();
    if (mode == "energy") c.eval.mode = RankMode::energy;
    else if (mode != "cosine") throw ValidationError("eval.mode: expected cosine or energy, got '" + mode + "'");
  }

  if (root.has("paths")) {
    detail::Fields f(root.at("paths"), "paths");
    f.get("dataset", c.paths.dataset);
    f.get("checkpoint", c.paths.checkpoint);
    f.get("log", c.paths.log);
    f.get("output", c.paths.output);
    f.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline json to_json(const RunConfig& c) {
  json mods = json::array();
  for (const auto& m : c.modalities) {
    json e{{"id", m.spec.id}, {"name", m.spec.name}, {"dim", m.spec.dim}, {"kind", to_string(m.spec.kind)}};
    if (m.noise_std) e["noise_std"] = *m.noise_std;
    mods.push_back(e);
  }
  json tasks = json::array();
  for (const auto& t : c.tasks) tasks.push_back({{"id", t.id}, {"input", t.inputs}, {"output", t.outputs}});
  const auto& m = c.predictor.moe;
  const auto& t = c.train;
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"modalities", mods},
      {"tasks", tasks},
      {"synth",
       {{"latent_dim", c.synth.latent_dim},
        {"noise_std", c.synth.noise_std},
        {"num_train", c.synth.num_train},
        {"num_val", c.synth.num_val},
        {"num_test", c.synth.num_test},
        {"num_classes", c.synth.num_classes}}},
      {"predictor",
       {{"kind", c.predictor.kind},
        {"experts_per_modality", m.experts_per_modality},
        {"top_k", m.top_k},
        {"gates", m.gates},
        {"hidden", m.hidden},
        {"expert_expansion", m.expansion},
        {"dropout", m.dropout},
        {"adapters", c.predictor.adapters}}},
      {"loss", {{"alpha", c.loss.alpha}, {"tau", c.loss.tau}, {"symmetric_cl", c.loss.symmetric_cl}}},
      {"train",
       {{"steps", t.steps},
        {"lr_init", t.lr_init},
        {"lr_final", t.lr_final},
        {"warmup_frac", t.warmup_frac},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.adam_eps},
        {"batch_size", t.batch_size},
        {"schedule", to_string(t.mode)},
        {"task_order", t.task_order},
        {"checkpoint_interval", t.checkpoint_interval}}},
      {"eval",
       {{"ks", c.eval.ks},
        {"mode", to_string(c.eval.mode)},
        {"matrix_cap", c.eval.matrix_cap},
        {"latency_repeats", c.eval.latency_repeats},
        {"latency_queries", c.eval.latency_queries}}},
      {"paths",
       {{"dataset", c.paths.dataset},
        {"checkpoint", c.paths.checkpoint},
        {"log", c.paths.log},
        {"output", c.paths.output}}},
  };
}

// ---- presets ---------------------------------------------------------------

namespace detail {

inline json modality(int id, const char* name, std::size_t dim, const char* kind = "continuous") {
  return {{"id", id}, {"name", name}, {"dim", dim}, {"kind", kind}};
}

inline json task(int id, std::vector<int> in, std::vector<int> out) {
  return {{"id", id}, {"input", in}, {"output", out}};
}

inline json desk_train(std::uint64_t steps) {
  return {{"steps", steps},         {"lr_init", 1e-3}, {"lr_final", 5.5e-6}, {"warmup_frac", 0.1},
          {"weight_decay", 0.005}, {"batch_size", 64}, {"schedule", "agd"}};
}

inline json desk_predictor() {
  return {{"kind", "moe"}, {"experts_per_modality", 4}, {"top_k", 2}, {"gates", 2},
          {"hidden", 64},  {"expert_expansion", 2},     {"dropout", 0.1}, {"adapters", false}};
}

inline json two_modal(const char* name, double noise) {
  return {{"name", name},
          {"seed", 0},
          {"modalities", {modality(1, "image", 32), modality(2, "text", 48)}},
          {"tasks", {task(1, {1}, {2}), task(2, {2}, {1})}},
          {"synth", {{"latent_dim", 16}, {"noise_std", noise}, {"num_train", 4096}, {"num_val", 0}, {"num_test", 512}}},
          {"predictor", desk_predictor()},
          {"loss", {{"alpha", 0.5}, {"tau", 0.07}, {"symmetric_cl", true}}},
          {"train", desk_train(3000)}};
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"tiny", "two-modal-clean", "two-modal-noisy", "three-modal-with-labels", "vqa-style", "paper-scale"};
}

inline json preset_json(const std::string& name) {
  using namespace detail;
  if (name == "two-modal-clean") return two_modal("two-modal-clean", 0.0);
  if (name == "two-modal-noisy") return two_modal("two-modal-noisy", 0.05);
  if (name == "tiny") {
    return {{"name", "tiny"},
            {"seed", 0},
            {"modalities", {modality(1, "image", 3), modality(2, "text", 5)}},
            {"tasks", {task(1, {1}, {2}), task(2, {2}, {1})}},
            {"synth", {{"latent_dim", 3}, {"noise_std", 0.05}, {"num_train", 32}, {"num_val", 0}, {"num_test", 16}}},
            {"predictor",
             {{"kind", "moe"}, {"experts_per_modality", 2}, {"top_k", 1}, {"gates", 2},
              {"hidden", 4}, {"expert_expansion", 2}, {"dropout", 0.1}, {"adapters", true}}},
            {"loss", {{"alpha", 0.5}, {"tau", 0.07}, {"symmetric_cl", true}}},
            {"train", {{"steps", 10}, {"lr_init", 1e-3}, {"lr_final", 5.5e-6}, {"batch_size", 4}}},
            {"eval", {{"ks", {1, 5}}}}};
  }
  if (name == "three-modal-with-labels") {
    return {{"name", name},
            {"seed", 0},
            {"modalities", {modality(1, "image", 32), modality(2, "text", 48), modality(3, "label", 10, "one_hot")}},
            {"tasks", {task(1, {1}, {2}), task(2, {2}, {1}), task(3, {1}, {3})}},
            {"synth",
             {{"latent_dim", 16}, {"noise_std", 0.05}, {"num_train", 16384}, {"num_val", 0}, {"num_test", 512},
              {"num_classes", 10}}},
            {"predictor", desk_predictor()},
            {"loss", {{"alpha", 0.5}, {"tau", 0.07}, {"symmetric_cl", true}}},
            {"train", desk_train(9000)}};
  }
  if (name == "vqa-style") {
    return {{"name", name},
            {"seed", 0},
            {"modalities", {modality(1, "image", 32), modality(2, "question", 24), modality(3, "answer", 16)}},
            {"tasks", {task(1, {1, 2}, {3}), task(2, {3}, {1, 2})}},
            {"synth", {{"latent_dim", 16}, {"noise_std", 0.05}, {"num_train", 4096}, {"num_val", 0}, {"num_test", 512}}},
            {"predictor", desk_predictor()},
            {"loss", {{"alpha", 0.5}, {"tau", 0.07}, {"symmetric_cl", true}}},
            {"train", desk_train(3000)}};
  }
  if (name == "paper-scale") {
    auto j = two_modal("paper-scale", 0.05);
    j["predictor"]["experts_per_modality"] = 12;
    j["predictor"]["top_k"] = 4;
    j["predictor"]["hidden"] = 2048;
    j["train"]["batch_size"] = 128;
    return j;
  }
  throw ValidationError("unknown preset '" + name + "'");
}

inline bool is_preset(const std::string& name) {
  for (const auto& p : preset_names())
    if (p == name) return true;
  return false;
}

/// Sets a dotted path ("train.steps") to `value`, parsed as JSON when possible and as a string otherwise.
inline void apply_override(json& j, const std::string& dotted, const std::string& value) {
  json v;
  try {
    v = json::parse(value);
  } catch (const json::exception&) {
    v = value;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ValidationError("override '" + dotted + "': empty path segment");
    if (dot == std::string::npos) {
      (*node)[key] = v;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object()) throw ValidationError("override '" + dotted + "': '" + key + "' is not an object");
    start = dot + 1;
  }
}

/// Loads a config file, or a preset when `source` names one.
inline json load_config_json(const std::string& source) {
  if (is_preset(source)) return preset_json(source);
  std::ifstream in(source);
  if (!in) throw IoError("cannot open config '" + source + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config '" + source + "' is not valid JSON: " + e.what());
  }
}

/// M3JEPA_SEED, when set, replaces the configured seed.
inline void apply_seed_env(json& j) {
  if (const char* s = std::getenv("M3JEPA_SEED"); s != nullptr && *s != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(s, &used);
      if (used != std::string(s).size()) throw std::invalid_argument(s);
      j["seed"] = v;
    } catch (const std::exception&) {
      throw ValidationError(std::string("M3JEPA_SEED: not an unsigned integer: ") + s);
    }
  }
}

}  // namespace m3jepa
