// SPDX-License-Identifier: Apache-2.0
//
// Whole-run helpers shared by the command-line tool and the acceptance
// suite: build data and model from a RunConfig, train, evaluate, and the
// α-sweep and ablation harnesses.
#pragma once

#include <cstdio>
#include <iomanip>
#include <sstream>

#include "m3jepa/config/run_config.hpp"
#include "m3jepa/model/mlp.hpp"
#include "m3jepa/train/trainer.hpp"

namespace m3jepa {

inline Dataset make_dataset(const RunConfig& cfg) { return generate(cfg.synth_config(), cfg.registry()); }

inline std::unique_ptr<Predictor> make_predictor(const RunConfig& cfg, const ModalityRegistry& reg) {
  if (cfg.predictor.kind == "linear") return std::make_unique<LinearPredictor>(reg, cfg.seed);
  if (cfg.predictor.kind == "mlp") {
    return std::make_unique<MlpPredictor>(reg, moe_parameter_count(cfg.moe_config(), reg), cfg.predictor.moe.dropout,
                                          cfg.seed);
  }
  return std::make_unique<MoEPredictor>(cfg.moe_config(), reg, cfg.seed);
}

inline Model make_model(const RunConfig& cfg) {
  const auto reg = cfg.registry();
  return Model(reg, make_predictor(cfg, reg), cfg.predictor.adapters);
}

struct RunEval {
  std::vector<TaskEval> tasks;

  /// Mean over tasks of R@K (classification tasks contribute their R@K over classes).
  double mean_r_at(std::size_t k) const {
    double s = 0.0;
    for (const auto& t : tasks) s += t.r_at.at(k);
    return s / static_cast<double>(tasks.size());
  }
  const TaskEval& task(int id) const {
    for (const auto& t : tasks)
      if (t.task == id) return t;
    throw PreconditionError("no evaluation for task " + std::to_string(id));
  }
};

inline RunEval evaluate(const Model& model, const Dataset& ds, const RunConfig& cfg, Split split = Split::test) {
  RunEval ev;
  auto ks = cfg.eval.ks;
  if (std::find(ks.begin(), ks.end(), 1) == ks.end()) ks.insert(ks.begin(), 1);
  for (const auto& t : cfg.tasks) ev.tasks.push_back(evaluate_task(model, ds, t, split, cfg.loss, ks, cfg.eval.mode));
  return ev;
}

inline json to_json(const TaskEval& t) {
  json r = json::object();
  for (const auto& [k, v] : t.r_at) r[std::to_string(k)] = v;
  json j{{"task", t.task}, {"direction", t.direction}, {"r_at", r}, {"energy_mean", t.energy_mean}};
  if (t.classification) {
    j["classification"] = {{"accuracy", t.metrics.accuracy},
                           {"precision", t.metrics.precision},
                           {"recall", t.metrics.recall},
                           {"f1", t.metrics.f1}};
  }
  return j;
}

inline json to_json(const TimingStats& t) { return {{"mean_s", t.mean}, {"p95_s", t.p95}, {"samples_s", t.samples}}; }

/// Report document: task-averaged r_at and energy, first classification task, optional latency.
inline json report_json(const RunEval& ev, const std::optional<LatencyReport>& latency) {
  json r_at = json::object();
  for (const auto& [k, _] : ev.tasks.front().r_at) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& t : ev.tasks)
      if (t.r_at.contains(k)) s += t.r_at.at(k), ++n;
    r_at[std::to_string(k)] = s / static_cast<double>(n);
  }
  json cls = json::object();
  double energy = 0.0;
  json tasks = json::array();
  for (const auto& t : ev.tasks) {
    energy += t.energy_mean;
    tasks.push_back(to_json(t));
    if (t.classification && cls.empty()) cls = to_json(t)["classification"];
  }
  json lat = json::object();
  if (latency) {
    lat = {{"cached", to_json(latency->cached)},
           {"full", to_json(latency->full)},
           {"speedup", latency->speedup()},
           {"queries", latency->queries},
           {"candidates", latency->candidates},
           {"cached_candidate_forwards_per_query", latency->cached_forwards_per_query},
           {"full_candidate_forwards_per_query", latency->full_forwards_per_query},
           {"identical_scores", latency->identical_scores}};
  }
  return {{"r_at", r_at},
          {"classification", cls},
          {"latency", lat},
          {"energy_mean", energy / static_cast<double>(ev.tasks.size())},
          {"tasks", tasks}};
}

struct RunOutcome {
  TrainResult train;
  RunEval eval;
  std::size_t parameters = 0;
};

/// Fresh model, full training run, test-split evaluation.
inline RunOutcome run_experiment(const RunConfig& cfg, const Dataset& ds, const TrainIo& io = {}) {
  auto model = make_model(cfg);
  RunOutcome out;
  out.parameters = model.parameter_count();
  out.train = train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()), io);
  out.eval = evaluate(model, ds, cfg);
  return out;
}

// ---- α sweep ---------------------------------------------------------------

struct AlphaRow {
  double alpha = 0.0;
  double r_at_1 = 0.0;
  bool operator==(const AlphaRow&) const = default;
};

inline std::vector<AlphaRow> alpha_sweep(const RunConfig& base, const Dataset& ds, const std::vector<double>& alphas) {
  if (alphas.empty()) throw PreconditionError("alpha sweep: no alpha values");
  for (double a : alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("alpha sweep: alpha " + std::to_string(a) + " outside [0, 1]");
  std::vector<AlphaRow> rows;
  for (double a : alphas) {
    auto cfg = base;
    cfg.loss.alpha = a;
    rows.push_back({a, run_experiment(cfg, ds).eval.mean_r_at(1)});
  }
  return rows;
}

inline std::string alpha_csv(const std::vector<AlphaRow>& rows) {
  std::ostringstream os;
  os << "alpha,r_at_1\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.alpha << ',' << r.r_at_1 << '\n';
  return os.str();
}

inline std::vector<AlphaRow> parse_alpha_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "alpha,r_at_1") throw FormatError("alpha CSV: missing header");
  std::vector<AlphaRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("alpha CSV: malformed row '" + line + "'");
    rows.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return rows;
}

// ---- ablations -------------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::size_t parameters = 0;
  double mean_r_at_1 = 0.0;
  std::vector<std::pair<std::string, double>> per_task;  // direction → R@1
};

struct Ablation {
  std::string kind;
  std::vector<AblationRow> rows;
};

/// Parses "moe-vs-mlp", "agd-vs-joint", "topk:[2,4,6]" or "experts:2,8,12" into variant configs.
inline std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig& base, const std::string& which) {
  std::vector<std::pair<std::string, RunConfig>> out;
  if (which == "moe-vs-mlp") {
    auto mlp = base;
    mlp.predictor.kind = "mlp";
    auto moe = base;
    moe.predictor.kind = "moe";
    out = {{"moe", moe}, {"mlp", mlp}};
  } else if (which == "agd-vs-joint") {
    auto agd = base, joint = base;
    agd.train.mode = ScheduleMode::agd;
    joint.train.mode = ScheduleMode::joint;
    out = {{"agd", agd}, {"joint", joint}};
  } else if (which.rfind("topk:", 0) == 0 || which.rfind("experts:", 0) == 0) {
    const bool topk = which[0] == 't';
    std::string list = which.substr(which.find(':') + 1);
    std::erase_if(list, [](char c) { return c == '[' || c == ']' || c == ' '; });
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t v = 0;
      try {
        std::size_t used = 0;
        v = std::stoul(item, &used);
        if (used != item.size() || v == 0) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ValidationError("ablate: '" + item + "' is not a positive integer");
      }
      auto cfg = base;
      cfg.predictor.kind = "moe";
      if (topk) cfg.predictor.moe.top_k = v;
      else cfg.predictor.moe.experts_per_modality = v;
      cfg.validate();
      out.emplace_back((topk ? "K=" : "N=") + std::to_string(v), cfg);
    }
    if (out.empty()) throw ValidationError("ablate: empty value list in '" + which + "'");
  } else {
    throw ValidationError("ablate: expected moe-vs-mlp, agd-vs-joint, topk:<list> or experts:<list>, got '" + which + "'");
  }
  return out;
}

/// Runs every variant from the same seed on the same dataset.
inline Ablation run_ablation(const RunConfig& base, const Dataset& ds, const std::string& which) {
  Ablation a;
  a.kind = which;
  for (const auto& [name, cfg] : ablation_variants(base, which)) {
    const auto res = run_experiment(cfg, ds);
    AblationRow row{name, res.parameters, res.eval.mean_r_at(1), {}};
    for (const auto& t : res.eval.tasks) row.per_task.emplace_back(t.direction, t.r_at.at(1));
    a.rows.push_back(std::move(row));
  }
  return a;
}

inline std::string ablation_table(const Ablation& a) {
  std::ostringstream os;
  os << "variant,parameters,mean_r_at_1";
  for (const auto& [dir, _] : a.rows.front().per_task) os << ",r_at_1[" << dir << "]";
  os << "\n" << std::setprecision(6) << std::fixed;
  for (const auto& r : a.rows) {
    os << r.variant << ',' << r.parameters << ',' << r.mean_r_at_1;
    for (const auto& [_, v] : r.per_task) os << ',' << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace m3jepa
