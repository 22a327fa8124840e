// SPDX-License-Identifier: Apache-2.0
//
// End-to-end gradient check of the training loss against central finite
// differences, grouped by parameter family. Runs in eval mode, so dropout
// is off for every evaluation.
#pragma once

#include "m3jepa/core/gradcheck.hpp"
#include "m3jepa/experiments/runner.hpp"

namespace m3jepa {

struct FamilyCheck {
  std::string family;
  std::size_t tensors = 0;
  double max_rel_error = 0.0;
  double max_abs_gradient = 0.0;  // 0 when the loss does not depend on the family (e.g. gates at K=1)
  bool passed = false;
};

struct GradcheckReport {
  std::vector<FamilyCheck> families;
  bool dropout_disabled = true;
  double tolerance = 1e-4;
  bool passed() const {
    for (const auto& f : families)
      if (!f.passed) return false;
    return !families.empty();
  }
};

inline std::string parameter_family(const std::string& name) {
  for (const char* f : {"expert.", "in_proj.", "out_proj.", "tag.", "adapter.", "mlp.", "linear."})
    if (name.rfind(f, 0) == 0) return std::string(f).substr(0, std::string(f).size() - 1);
  if (name.rfind("gate.", 0) == 0) return name.substr(0, name.rfind('.'));  // gate.1, gate.2
  return name;
}

/// Worst relative error per family over every task, on one batch of the training split.
inline void check_model_gradients(Model& model, const Batch& batch, const RunConfig& cfg, double eps,
                                  GradcheckReport& report) {
  std::map<std::string, FamilyCheck> fam;
  std::vector<std::string> order;
  for (const auto& task : cfg.tasks) {
    const auto target = model.target(batch, task);
    auto loss = [&] {
      return compute_losses(model.forward(batch, task, Mode::eval, nullptr), target, cfg.loss).total;
    };
    for (auto& [_, p] : model.named_parameters()) p.zero_grad();
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(loss());
    }
    for (auto [name, p] : model.named_parameters()) {
      if (!tape.touched(p)) continue;
      const std::vector<double> analytic(p.grad().begin(), p.grad().end());
      const auto numeric = finite_diff_grad([&] { return loss().item(); }, p, eps);
      const auto f = parameter_family(name);
      if (!fam.contains(f)) order.push_back(f);
      auto& fc = fam[f];
      fc.family = f;
      fc.tensors += 1;
      fc.max_rel_error = std::max(fc.max_rel_error, relative_error(analytic, numeric.data()));
      for (double g : analytic) fc.max_abs_gradient = std::max(fc.max_abs_gradient, std::abs(g));
    }
  }
  for (const auto& f : order) {
    auto fc = fam[f];
    fc.passed = fc.max_rel_error < report.tolerance;
    report.families.push_back(fc);
  }
}

/// Checks the configured MoE predictor (with adapters) and the parameter-matched MLP baseline.
inline GradcheckReport run_gradcheck(RunConfig cfg, double eps = 1e-5) {
  if (cfg.predictor.moe.hidden > 8 || cfg.predictor.moe.experts_per_modality > 2) {
    throw ValidationError("gradcheck: needs a tiny configuration (predictor.hidden <= 8, experts_per_modality <= 2)");
  }
  GradcheckReport report;
  const auto ds = make_dataset(cfg);
  const auto batch = make_batch(ds, epoch_batches(ds, Split::train, cfg.train.batch_size, cfg.seed, 0, true).front());

  cfg.predictor.kind = "moe";
  cfg.predictor.adapters = true;
  auto moe = make_model(cfg);
  check_model_gradients(moe, batch, cfg, eps, report);

  const auto reg = cfg.registry();
  const auto budget = moe_parameter_count(cfg.moe_config(), reg);
  Model mlp(reg, std::make_unique<MlpPredictor>(reg, mlp_hidden_for_budget(reg, budget), cfg.predictor.moe.dropout,
                                                cfg.seed, 0),
            false);
  check_model_gradients(mlp, batch, cfg, eps, report);
  return report;
}

}  // namespace m3jepa
