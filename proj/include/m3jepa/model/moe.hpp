// SPDX-License-Identifier: Apache-2.0
//
// Multi-gate top-K mixture-of-experts predictor.
//
// A task's concatenated input embedding is projected to the shared width h.
// The gate input adds the learnable tags of the task's input modalities to
// that projection; each of the two gates scores all M·N experts with a
// task-agnostic matrix, keeps the K best and renormalizes their weights.
// Experts act on the projected input (w_out · gelu(w_in · e)), and each
// gate's mixture is mapped to the task's output space by a per-output-set
// projection.
#pragma once

#include <array>
#include <map>

#include "m3jepa/core/seed.hpp"
#include "m3jepa/model/predictor.hpp"

namespace m3jepa {

struct MoEConfig {
  std::size_t modalities = 2;            // M
  std::size_t experts_per_modality = 4;  // N
  std::size_t top_k = 2;                 // K
  std::size_t gates = 2;                 // L
  std::size_t hidden = 64;               // h
  std::size_t expansion = 2;             // r; expert hidden width is r·h
  double dropout = 0.1;

  std::size_t total_experts() const { return modalities * experts_per_modality; }
  std::size_t expert_width() const { return expansion * hidden; }

  void validate() const {
    if (modalities == 0 || experts_per_modality == 0) throw ValidationError("predictor: need at least one expert");
    if (top_k < 1 || top_k > total_experts()) {
      throw ValidationError("predictor.top_k: K=" + std::to_string(top_k) + " must lie in [1, M·N=" +
                            std::to_string(total_experts()) + "]");
    }
    if (gates != 2) throw ValidationError("predictor.gates: L must be 2 (one gate per loss term)");
    if (hidden < 1) throw ValidationError("predictor.hidden: must be >= 1");
    if (expansion < 1) throw ValidationError("predictor.expert_expansion: must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("predictor.dropout: must lie in [0, 1)");
  }

  /// Desk-scale defaults for M modalities.
  static MoEConfig desk(std::size_t m) { return MoEConfig{m, 4, 2, 2, 64, 2, 0.1}; }
  static MoEConfig full_scale(std::size_t m) { return MoEConfig{m, 12, 4, 2, 2048, 2, 0.1}; }
};

/// Closed-form learnable-parameter count of MoEPredictor for a task set.
inline std::size_t moe_parameter_count(const MoEConfig& cfg, const ModalityRegistry& reg) {
  const std::size_t e = cfg.total_experts(), h = cfg.hidden, w = cfg.expert_width();
  std::size_t n = e * (h * w + w * h) + cfg.gates * e * h + reg.size() * h;
  for (const auto& in : reg.distinct_inputs()) n += reg.dim_of(in) * h;
  for (const auto& out : reg.distinct_outputs()) n += h * reg.dim_of(out);
  return n;
}

class MoEPredictor final : public Predictor {
 public:
  MoEPredictor(MoEConfig cfg, const ModalityRegistry& registry, std::uint64_t seed)
      : cfg_(cfg), registry_(registry) {
    cfg_.modalities = registry.size();
    cfg_.validate();
    std::mt19937_64 rng(derive_seed(seed, {stream::kInit}));
    const std::size_t h = cfg_.hidden, w = cfg_.expert_width();
    for (std::size_t n = 0; n < cfg_.total_experts(); ++n) {
      params_.add(expert_name(n, "w_in"), normal_init({h, w}, 1.0 / std::sqrt(double(h)), rng));
      params_.add(expert_name(n, "w_out"), normal_init({w, h}, 1.0 / std::sqrt(double(w)), rng));
    }
    for (std::size_t l = 1; l <= cfg_.gates; ++l)
      params_.add(gate_name(l), normal_init({cfg_.total_experts(), h}, 1.0 / std::sqrt(double(h)), rng));
    for (const auto& m : registry.modalities())
      params_.add("tag." + std::to_string(m.id), normal_init({h}, 0.02, rng));
    for (const auto& in : registry.distinct_inputs()) {
      const auto d = registry.dim_of(in);
      params_.add("in_proj." + modality_signature(in), normal_init({d, h}, 1.0 / std::sqrt(double(d)), rng));
    }
    for (const auto& out : registry.distinct_outputs()) {
      params_.add("out_proj." + modality_signature(out),
                  normal_init({h, registry.dim_of(out)}, 1.0 / std::sqrt(double(h)), rng));
    }
  }

  static std::string expert_name(std::size_t n, const char* which) {
    return "expert." + std::to_string(n) + "." + which;
  }
  static std::string gate_name(std::size_t l) { return "gate." + std::to_string(l) + ".g"; }

  const MoEConfig& config() const { return cfg_; }
  const ParameterSet& parameters() const override { return params_; }
  ParameterSet& parameters() override { return params_; }
  std::string kind() const override { return "moe"; }

  const NArray& gate_matrix(std::size_t l) const { return params_.get(gate_name(l)); }
  const NArray& in_proj(const TaskSpec& t) const { return lookup("in_proj." + modality_signature(t.inputs), t); }
  const NArray& out_proj(const TaskSpec& t) const { return lookup("out_proj." + modality_signature(t.outputs), t); }

  /// Routing of a single concatenated input through gate l ∈ {1, 2}.
  GateDecision gate_forward(const NArray& e_x, const TaskSpec& task, std::size_t l) const {
    check_gate(l);
    detail::require_registered(registry_, task);
    auto x = detail::as_batch(e_x, registry_.input_dim(task), "gate_forward");
    if (x.rows() != 1) throw DimensionError("gate_forward: expects a single sample");
    auto [h, u] = project(x, task);
    return decisions(route(u, l)).front();
  }

  /// w_out · dropout(gelu(w_in · e_h)) for one expert; rows of a matrix are independent samples.
  NArray expert_forward(const NArray& e_h, std::size_t n, Mode mode, std::mt19937_64* rng) const {
    if (n >= cfg_.total_experts()) {
      throw PreconditionError("expert index " + std::to_string(n) + " out of range [0, " +
                              std::to_string(cfg_.total_experts()) + ")");
    }
    const bool vec = e_h.rank() == 1;
    auto x = detail::as_batch(e_h, cfg_.hidden, "expert_forward");
    auto a = gelu(matmul(x, params_.get(expert_name(n, "w_in"))));
    if (mode == Mode::train && cfg_.dropout > 0.0) {
      if (rng == nullptr) throw PreconditionError("expert_forward: train mode with dropout needs an rng");
      a = dropout(a, cfg_.dropout, *rng);
    }
    return detail::unbatch(matmul(a, params_.get(expert_name(n, "w_out"))), vec);
  }

  Prediction forward(const NArray& e_x, const TaskSpec& task, Mode mode, std::mt19937_64* rng) const override {
    detail::require_registered(registry_, task);
    const bool vec = e_x.rank() == 1;
    auto x = detail::as_batch(e_x, registry_.input_dim(task), "predict");
    const std::size_t batch = x.rows(), k = cfg_.top_k, experts = cfg_.total_experts();
    auto [h, u] = project(x, task);
    std::array<Routing, 2> routing{route(u, 1), route(u, 2)};

    // Rows of h each expert must process, shared by both gates.
    std::vector<std::vector<std::size_t>> members(experts);
    std::array<std::vector<Route>, 2> routes;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t e = routing[l].selected[b][j];
          if (members[e].empty() || members[e].back() != b) members[e].push_back(b);
          routes[l].push_back(Route{e, members[e].size() - 1});
        }
      }
    }
    std::vector<NArray> outputs(experts);
    for (std::size_t e = 0; e < experts; ++e) {
      if (!members[e].empty()) outputs[e] = expert_forward(gather_rows(h, members[e]), e, mode, rng);
    }
    const auto& proj = out_proj(task);
    Prediction p;
    p.out_a = detail::unbatch(matmul(mix_experts(outputs, routing[0].renorm, routes[0]), proj), vec);
    p.out_b = detail::unbatch(matmul(mix_experts(outputs, routing[1].renorm, routes[1]), proj), vec);
    p.gate_a = decisions(routing[0]);
    p.gate_b = decisions(routing[1]);
    return p;
  }

 private:
  struct Routing {
    NArray logits;
    NArray dense;
    std::vector<std::vector<std::size_t>> selected;
    NArray renorm;
  };

  const NArray& lookup(const std::string& name, const TaskSpec& t) const {
    if (!params_.contains(name)) {
      throw PreconditionError("task " + std::to_string(t.id) + " is not registered with this predictor (" + name + ")");
    }
    return params_.get(name);
  }

  void check_gate(std::size_t l) const {
    if (l < 1 || l > cfg_.gates) throw PreconditionError("gate index must be 1 or 2");
  }

  /// (projected input, gate input = projection + Σ input-modality tags)
  std::pair<NArray, NArray> project(const NArray& x, const TaskSpec& task) const {
    NArray h = matmul(x, in_proj(task));
    NArray tags = params_.get("tag." + std::to_string(task.inputs.front()));
    for (std::size_t i = 1; i < task.inputs.size(); ++i) tags = add(tags, params_.get("tag." + std::to_string(task.inputs[i])));
    return {h, add_row(h, tags)};
  }

  Routing route(const NArray& u, std::size_t l) const {
    Routing r;
    r.logits = matmul(u, transpose(gate_matrix(l)));
    r.dense = softmax(r.logits);
    const std::size_t e = cfg_.total_experts();
    for (std::size_t b = 0; b < u.rows(); ++b)
      r.selected.push_back(top_k_indices(r.dense.data().subspan(b * e, e), cfg_.top_k));
    r.renorm = normalize_rows_l1(take_along_rows(r.dense, r.selected));
    return r;
  }

  std::vector<GateDecision> decisions(const Routing& r) const {
    const std::size_t e = cfg_.total_experts(), k = cfg_.top_k;
    std::vector<GateDecision> out(r.selected.size());
    for (std::size_t b = 0; b < out.size(); ++b) {
      auto row = [&](const NArray& a, std::size_t w) {
        auto s = a.data().subspan(b * w, w);
        return std::vector<double>(s.begin(), s.end());
      };
      out[b] = GateDecision{row(r.logits, e), row(r.dense, e), r.selected[b], row(r.renorm, k)};
    }
    return out;
  }

  MoEConfig cfg_;
  ModalityRegistry registry_;
  ParameterSet params_;
};

/// Per-expert selection frequency (sums to K) and mean entropy of the dense gate weights.
struct Utilization {
  std::vector<double> frequency;
  double mean_entropy = 0.0;
  std::size_t decisions = 0;
};

inline Utilization expert_utilization(std::span<const GateDecision> decisions) {
  if (decisions.empty()) throw PreconditionError("expert_utilization: empty decision stream");
  Utilization u;
  u.frequency.assign(decisions.front().dense_weights.size(), 0.0);
  for (const auto& d : decisions) {
    for (auto e : d.selected) u.frequency[e] += 1.0;
    double h = 0.0;
    for (double p : d.dense_weights)
      if (p > 0.0) h -= p * std::log(p);
    u.mean_entropy += h;
  }
  const double n = static_cast<double>(decisions.size());
  for (auto& f : u.frequency) f /= n;
  u.mean_entropy /= n;
  u.decisions = decisions.size();
  return u;
}

/// Total-variation distance between two utilization profiles (each normalized to a distribution).
inline double utilization_tv_distance(const Utilization& a, const Utilization& b) {
  double sa = 0.0, sb = 0.0, tv = 0.0;
  for (double f : a.frequency) sa += f;
  for (double f : b.frequency) sb += f;
  for (std::size_t i = 0; i < a.frequency.size(); ++i) tv += std::abs(a.frequency[i] / sa - b.frequency[i] / sb);
  return 0.5 * tv;
}

}  // namespace m3jepa
