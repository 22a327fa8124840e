// SPDX-License-Identifier: Apache-2.0
//
// Alternating gradient descent over directional tasks. In agd mode step i
// trains task_order[i mod T] on that task's own batch stream; in joint mode
// every task's loss on one shared batch is summed into a single update.
#pragma once

#include <fstream>
#include <functional>
#include <optional>

#include "json.hpp"

#include "m3jepa/loss/losses.hpp"
#include "m3jepa/train/checkpoint.hpp"

namespace m3jepa {

struct LogRecord {
  std::uint64_t step = 0;
  int task = 0;
  LossReport report;
  double lr = 0.0;
};

inline nlohmann::json to_json(const LogRecord& r) {
  return {{"step", r.step}, {"task", r.task},   {"l_reg", r.report.l_reg}, {"l_cl", r.report.l_cl},
          {"total", r.report.total}, {"mi_lb", r.report.mi_lower_bound}, {"lr", r.lr}};
}

inline TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng.seed(derive_seed(cfg.seed, {stream::kDropout}));
  return s;
}

/// Seed of the batch stream feeding slot `slot` of the task order (joint mode uses one stream).
inline std::uint64_t batch_stream_seed(const TrainConfig& cfg, std::size_t slot) {
  return derive_seed(cfg.seed, {stream::kBatches, static_cast<std::uint64_t>(slot)});
}

/// Applies the optimizer to every learnable leaf on `tape` and clears their gradients.
inline void apply_update(Model& model, const Tape& tape, TrainState& state, const TrainConfig& cfg) {
  const double lr = lr_at(state.step, cfg);
  for (auto [name, p] : model.named_parameters()) {
    if (!tape.touched(p)) continue;
    adam_update(p, state.moments[name], lr, cfg);
    p.zero_grad();
  }
}

namespace detail {
inline void require_finite_loss(const LossReport& r, std::uint64_t step, int task, const Batch& b) {
  if (std::isfinite(r.total) && std::isfinite(r.l_reg) && std::isfinite(r.l_cl)) return;
  std::string rows;
  for (std::size_t i = 0; i < b.rows.size() && i < 16; ++i) rows += (i ? "," : "") + std::to_string(b.rows[i]);
  if (b.rows.size() > 16) rows += ",...";
  throw NumericError("non-finite loss at step " + std::to_string(step) + " (task " + std::to_string(task) +
                     "), batch rows [" + rows + "]");
}
}  // namespace detail

/// One forward/backward/update on `batch` for `task`.
inline LossReport train_step(TrainState& state, Model& model, const Batch& batch, const TaskSpec& task,
                             const LossConfig& loss_cfg, const TrainConfig& cfg) {
  Tape tape;
  LossTerms terms;
  {
    TapeScope scope(tape);
    auto pred = model.forward(batch, task, Mode::train, &state.rng);
    terms = compute_losses(pred, model.target(batch, task), loss_cfg);
  }
  detail::require_finite_loss(terms.report, state.step, task.id, batch);
  tape.backward(terms.total);
  apply_update(model, tape, state, cfg);
  state.step += 1;
  return terms.report;
}

/// Summed losses of every task on one shared batch, one update.
inline std::vector<LossReport> joint_step(TrainState& state, Model& model, const Batch& batch,
                                          const std::vector<TaskSpec>& tasks, const LossConfig& loss_cfg,
                                          const TrainConfig& cfg) {
  Tape tape;
  std::vector<LossReport> reports;
  NArray total;
  {
    TapeScope scope(tape);
    for (const auto& task : tasks) {
      auto pred = model.forward(batch, task, Mode::train, &state.rng);
      auto terms = compute_losses(pred, model.target(batch, task), loss_cfg);
      detail::require_finite_loss(terms.report, state.step, task.id, batch);
      total = total.defined() ? add(total, terms.total) : terms.total;
      reports.push_back(terms.report);
    }
  }
  tape.backward(total);
  apply_update(model, tape, state, cfg);
  state.step += 1;
  return reports;
}

struct TrainIo {
  std::string log_path;         // JSON lines; empty disables the file
  std::string checkpoint_path;  // empty disables checkpoints
  std::string config_json = "{}";
  std::size_t flush_every = 50;
  std::optional<std::uint64_t> stop_after;  // pause once this step is reached; the schedule still spans cfg.steps
  std::function<void(const LogRecord&)> on_record;
};

struct TrainResult {
  TrainState state;
  std::vector<LogRecord> log;
};

inline std::string checkpoint_json(const std::string& run_json, const TrainState& s) {
  nlohmann::json j;
  j["run"] = nlohmann::json::parse(run_json);
  nlohmann::json rolling = nlohmann::json::object();
  for (const auto& [t, v] : s.rolling) rolling[std::to_string(t)] = v;
  j["rolling"] = rolling;
  return j.dump();
}

/// Model parameters and full training state from a checkpoint.
inline TrainState resume_from(const Checkpoint& c, Model& model) {
  restore_parameters(c, model);
  auto s = restore_state(c);
  auto j = nlohmann::json::parse(c.config_json, nullptr, false);
  if (j.is_object() && j.contains("rolling")) {
    for (const auto& [k, v] : j["rolling"].items()) s.rolling[std::stoi(k)] = v.get<double>();
  }
  return s;
}

/// Runs from state.step up to cfg.steps (or io.stop_after, if earlier).
inline TrainResult train(Model& model, const Dataset& ds, const LossConfig& loss_cfg, const TrainConfig& cfg,
                         TrainState state, const TrainIo& io = {}) {
  cfg.validate();
  loss_cfg.validate();
  std::vector<TaskSpec> order;
  for (int id : cfg.task_order) order.push_back(model.registry().task(id));
  const std::size_t T = order.size();

  std::vector<BatchStream> streams;
  if (cfg.mode == ScheduleMode::agd) {
    for (std::size_t j = 0; j < T; ++j)
      streams.emplace_back(ds, Split::train, cfg.batch_size, batch_stream_seed(cfg, j), true);
  } else {
    streams.emplace_back(ds, Split::train, cfg.batch_size, batch_stream_seed(cfg, 0), true);
  }

  std::ofstream log;
  if (!io.log_path.empty()) {
    log.open(io.log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open log '" + io.log_path + "'");
  }
  auto checkpoint = [&] {
    if (!io.checkpoint_path.empty())
      save_checkpoint(model, state, checkpoint_json(io.config_json, state), io.checkpoint_path);
  };

  TrainResult result;
  auto emit = [&](std::uint64_t step, int task, const LossReport& r, double lr) {
    LogRecord rec{step, task, r, lr};
    if (auto it = state.rolling.find(task); it == state.rolling.end()) state.rolling[task] = r.total;
    else it->second = 0.9 * it->second + 0.1 * r.total;
    if (log) log << to_json(rec).dump() << '\n';
    if (io.on_record) io.on_record(rec);
    result.log.push_back(rec);
  };

  const std::uint64_t stop = io.stop_after ? std::min(*io.stop_after, cfg.steps) : cfg.steps;
  if (state.step == 0) checkpoint();
  while (state.step < stop) {
    const std::uint64_t i = state.step;
    const double lr = lr_at(i, cfg);
    if (cfg.mode == ScheduleMode::agd) {
      const std::size_t slot = task_slot(i, T);
      const auto batch = streams[slot].batch(i / T);
      emit(i, order[slot].id, train_step(state, model, batch, order[slot], loss_cfg, cfg), lr);
    } else {
      const auto batch = streams[0].batch(i);
      const auto reports = joint_step(state, model, batch, order, loss_cfg, cfg);
      for (std::size_t t = 0; t < T; ++t) emit(i, order[t].id, reports[t], lr);
    }
    if (log && state.step % io.flush_every == 0) log.flush();
    if (cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 && state.step < stop)
      checkpoint();
  }
  if (log) log.flush();
  if (stop > 0 || state.step > 0) checkpoint();
  result.state = std::move(state);
  return result;
}

/// |mean total loss of the first task − that of the second| over the last W records of each.
inline double convergence_gap(const std::vector<LogRecord>& log, std::size_t window = 20) {
  if (window == 0) throw PreconditionError("convergence_gap: window must be >= 1");
  std::vector<int> tasks;
  for (const auto& r : log)
    if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
  if (tasks.size() != 2) throw PreconditionError("convergence_gap: needs exactly two tasks in the log");
  if (log.size() < 4) throw PreconditionError("convergence_gap: log needs at least 2T = 4 records");
  double mean[2] = {0.0, 0.0};
  for (int k = 0; k < 2; ++k) {
    std::size_t n = 0;
    for (auto it = log.rbegin(); it != log.rend() && n < window; ++it) {
      if (it->task != tasks[k]) continue;
      mean[k] += it->report.total;
      ++n;
    }
    mean[k] /= static_cast<double>(n);
  }
  return std::abs(mean[0] - mean[1]);
}

}  // namespace m3jepa
