// SPDX-License-Identifier: Apache-2.0
//
// m3jepa: data generation, training, evaluation, gradient checks, α sweeps
// and ablations, all driven by one JSON run config (or a preset name).
// Extra "--section.key=value" arguments override config fields.
//
// Exit codes: 0 success, 1 validation error, 2 runtime/numeric error, 3 I/O error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "m3jepa/data/m3ds.hpp"
#include "m3jepa/experiments/gradcheck.hpp"
#include "m3jepa/experiments/runner.hpp"

using namespace m3jepa;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

RunConfig load(const Common& c, const std::function<void(json&)>& tweak = {}) {
  auto j = load_config_json(c.config);
  for (const auto& o : c.overrides) {
    if (o.rfind("--", 0) != 0 || o.find('=') == std::string::npos) {
      throw ValidationError("unrecognized argument '" + o + "' (overrides look like --train.steps=100)");
    }
    const auto eq = o.find('=');
    apply_override(j, o.substr(2, eq - 2), o.substr(eq + 1));
  }
  apply_seed_env(j);
  if (tweak) tweak(j);
  return parse_run_config(j);
}

Dataset load_or_fail(const RunConfig& cfg) {
  if (!std::filesystem::exists(cfg.paths.dataset)) {
    throw IoError("dataset '" + cfg.paths.dataset + "' not found; run gen-data first");
  }
  auto ds = load_dataset(cfg.paths.dataset);
  std::vector<ModalitySpec> expect;
  for (const auto& m : cfg.modalities) expect.push_back(m.spec);
  if (ds.modalities != expect) throw ValidationError("dataset modalities do not match the config");
  return ds;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

int cmd_gen_data(const Common& c) {
  const auto cfg = load(c);
  const auto ds = make_dataset(cfg);
  ensure_parent(cfg.paths.dataset);
  save_dataset(ds, cfg.paths.dataset);
  std::cout << "wrote " << cfg.paths.dataset << ": " << ds.num_samples << " samples (train "
            << ds.split_size(Split::train) << ", val " << ds.split_size(Split::val) << ", test "
            << ds.split_size(Split::test) << ")\n";
  for (const auto& m : ds.modalities)
    std::cout << "  modality " << m.id << " " << m.name << ": dim " << m.dim << " (" << to_string(m.kind) << ")\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& schedule, bool resume, std::optional<std::uint64_t> until) {
  const auto cfg = load(c, [&](json& j) {
    if (!schedule.empty()) j["train"]["schedule"] = schedule;
  });
  const auto ds = load_or_fail(cfg);
  auto model = make_model(cfg);
  auto state = initial_state(cfg.train_config());
  if (resume) {
    state = resume_from(read_checkpoint(cfg.paths.checkpoint), model);
    std::cout << "resuming at step " << state.step << "\n";
  }
  ensure_parent(cfg.paths.checkpoint);
  ensure_parent(cfg.paths.log);
  TrainIo io;
  io.log_path = cfg.paths.log;
  io.checkpoint_path = cfg.paths.checkpoint;
  io.config_json = to_json(cfg).dump();
  io.stop_after = until;
  const auto res = train(model, ds, cfg.loss, cfg.train_config(), std::move(state), io);
  std::cout << "trained to step " << res.state.step << " of " << cfg.train.steps << " (" << to_string(cfg.train.mode) << "), checkpoint "
            << cfg.paths.checkpoint << "\n";
  std::map<int, const LogRecord*> last;
  for (const auto& r : res.log) last[r.task] = &r;
  for (const auto& [task, r] : last) {
    std::cout << "  task " << task << ": total " << r->report.total << " (reg " << r->report.l_reg << ", cl "
              << r->report.l_cl << ")\n";
  }
  if (cfg.train.mode == ScheduleMode::agd && cfg.train.task_order.size() == 2 && res.log.size() >= 4) {
    std::cout << "  convergence gap (W=20): " << convergence_gap(res.log, 20) << "\n";
  }
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& mode, const std::string& out,
             const std::string& sim_csv, bool latency) {
  const auto cfg = load(c, [&](json& j) {
    if (!mode.empty()) j["eval"]["mode"] = mode;
  });
  const auto ds = load_or_fail(cfg);
  auto model = make_model(cfg);
  restore_parameters(read_checkpoint(checkpoint.empty() ? cfg.paths.checkpoint : checkpoint), model);
  const auto ev = evaluate(model, ds, cfg);
  std::optional<LatencyReport> lat;
  if (latency) {
    const auto& task = cfg.tasks.front();
    const auto index = build_index(model, ds, task, Split::test);
    auto queries = split_rows(ds, Split::test);
    if (queries.size() > cfg.eval.latency_queries) queries.resize(cfg.eval.latency_queries);
    lat = latency_harness(model, ds, task, Split::test, index, queries, cfg.eval.latency_repeats, cfg.loss);
  }
  const auto report = report_json(ev, lat);
  const std::string path = out.empty() ? cfg.paths.output + "/report.json" : out;
  ensure_parent(path);
  write_text(path, report.dump(2) + "\n");
  for (const auto& t : ev.tasks) {
    std::cout << "task " << t.task << " (" << t.direction << ")";
    for (const auto& [k, v] : t.r_at) std::cout << "  R@" << k << " " << v;
    if (t.classification) std::cout << "  acc " << t.metrics.accuracy << "  f1 " << t.metrics.f1;
    std::cout << "\n";
  }
  if (!sim_csv.empty()) {
    const auto s = similarity_matrix(model, ds, cfg.tasks.front(), Split::test, cfg.eval.matrix_cap);
    ensure_parent(sim_csv);
    write_similarity_csv(s, sim_csv);
  }
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_gradcheck(const Common& c) {
  const auto cfg = load(c);
  const auto rep = run_gradcheck(cfg);
  std::cout << "dropout: " << (rep.dropout_disabled ? "off" : "ON") << "\n";
  std::cout << std::left << std::setw(12) << "family" << std::setw(9) << "tensors" << std::setw(14) << "max_rel_err"
            << std::setw(14) << "max_|grad|" << "result\n";
  for (const auto& f : rep.families) {
    std::cout << std::left << std::setw(12) << f.family << std::setw(9) << f.tensors << std::setw(14)
              << f.max_rel_error << std::setw(14) << f.max_abs_gradient << (f.passed ? "PASS" : "FAIL") << "\n";
  }
  return rep.passed() ? 0 : 2;
}

int cmd_sweep_alpha(const Common& c, const std::string& alphas_text, const std::string& out) {
  const auto cfg = load(c);
  std::vector<double> alphas;
  std::stringstream ss(alphas_text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      alphas.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ValidationError("--alphas: '" + item + "' is not a number");
    }
  }
  const auto ds = make_dataset(cfg);
  const auto csv = alpha_csv(alpha_sweep(cfg, ds, alphas));
  const std::string path = out.empty() ? cfg.paths.output + "/alpha_sweep.csv" : out;
  ensure_parent(path);
  write_text(path, csv);
  std::cout << csv;
  return 0;
}

int cmd_ablate(const Common& c, const std::string& which, const std::string& out) {
  const auto cfg = load(c);
  const auto ds = make_dataset(cfg);
  const auto table = ablation_table(run_ablation(cfg, ds, which));
  if (!out.empty()) {
    ensure_parent(out);
    write_text(out, table);
  }
  std::cout << table;
  return 0;
}

int cmd_export_sim(const Common& c, const std::string& checkpoint, int task, const std::string& out) {
  const auto cfg = load(c);
  const auto ds = load_or_fail(cfg);
  auto model = make_model(cfg);
  if (!checkpoint.empty() || std::filesystem::exists(cfg.paths.checkpoint))
    restore_parameters(read_checkpoint(checkpoint.empty() ? cfg.paths.checkpoint : checkpoint), model);
  const TaskSpec spec = task == 0 ? cfg.tasks.front() : cfg.registry().task(task);
  const auto s = similarity_matrix(model, ds, spec, Split::test, cfg.eval.matrix_cap);
  const std::string path = out.empty() ? cfg.paths.output + "/similarity.csv" : out;
  ensure_parent(path);
  write_similarity_csv(s, path);
  std::cout << "wrote " << s.rows << "x" << s.cols << " matrix to " << path << ", margin " << s.margin() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m3jepa: multi-gate mixture-of-experts latent alignment on synthetic modalities"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "m3jepa 0.1.0");

  Common common;
  auto add_common = [&](CLI::App* sub, bool required) {
    auto* opt = sub->add_option("config", common.config, "run config file or preset name");
    if (required) opt->required();
    sub->allow_extras();
  };

  std::string schedule, checkpoint, mode, out, sim_csv, alphas = "0,0.25,0.5,0.75,1", which;
  bool resume = false, latency = false;
  int task = 0;

  auto* gen = app.add_subcommand("gen-data", "generate and save the synthetic dataset");
  auto* tr = app.add_subcommand("train", "train a predictor");
  tr->add_option("--schedule", schedule, "agd or joint")->check(CLI::IsMember({"agd", "joint"}));
  tr->add_flag("--resume", resume, "continue from the configured checkpoint");
  std::optional<std::uint64_t> until;
  tr->add_option("--until", until, "pause after this step (resume later with --resume)");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "checkpoint path (default: paths.checkpoint)");
  ev->add_option("--mode", mode, "cosine or energy ranking")->check(CLI::IsMember({"cosine", "energy"}));
  ev->add_option("--out", out, "report path (default: <paths.output>/report.json)");
  ev->add_option("--sim-csv", sim_csv, "also export the similarity matrix of the first task");
  ev->add_flag("--latency", latency, "run the cached-vs-full latency harness");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check per parameter family");
  auto* sw = app.add_subcommand("sweep-alpha", "train one model per alpha and report R@1");
  sw->add_option("--alphas", alphas, "comma-separated alpha values")->capture_default_str();
  sw->add_option("--out", out, "CSV path (default: <paths.output>/alpha_sweep.csv)");
  auto* ab = app.add_subcommand("ablate", "paired ablation runs");
  add_common(ab, true);
  ab->add_option("which", which, "moe-vs-mlp | agd-vs-joint | topk:<list> | experts:<list>")->required();
  ab->add_option("--out", out, "CSV path");
  auto* ex = app.add_subcommand("export-sim", "export a similarity matrix CSV");
  ex->add_option("--checkpoint", checkpoint, "checkpoint path (default: paths.checkpoint if present)");
  ex->add_option("--task", task, "task id (default: first task)");
  ex->add_option("--out", out, "CSV path (default: <paths.output>/similarity.csv)");

  for (auto* sub : {gen, tr, ev, sw, ex}) add_common(sub, true);
  add_common(gc, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  for (auto* sub : app.get_subcommands()) common.overrides = sub->remaining();
  if (common.config.empty()) common.config = "tiny";

  try {
    if (gen->parsed()) return cmd_gen_data(common);
    if (tr->parsed()) return cmd_train(common, schedule, resume, until);
    if (ev->parsed()) return cmd_eval(common, checkpoint, mode, out, sim_csv, latency);
    if (gc->parsed()) return cmd_gradcheck(common);
    if (sw->parsed()) return cmd_sweep_alpha(common, alphas, out);
    if (ab->parsed()) return cmd_ablate(common, which, out);
    if (ex->parsed()) return cmd_export_sim(common, checkpoint, task, out);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
