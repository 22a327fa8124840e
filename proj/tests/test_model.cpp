// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "m3jepa/core/gradcheck.hpp"
#include "m3jepa/loss/losses.hpp"
#include "m3jepa/model/mlp.hpp"
#include "m3jepa/model/model.hpp"
#include "m3jepa/model/moe.hpp"

using namespace m3jepa;

namespace {

ModalityRegistry toy_registry(std::size_t d1 = 3, std::size_t d2 = 5) {
  return ModalityRegistry({{1, "a", d1, ModalityKind::continuous}, {2, "b", d2, ModalityKind::continuous}},
                          {{1, {1}, {2}}, {2, {2}, {1}}});
}

MoEConfig toy_config(std::size_t k) { return MoEConfig{2, 2, k, 2, 4, 2, 0.0}; }

NArray random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  NArray a(Shape{r, c});
  for (auto& v : a.data()) v = n(rng);
  return a;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Row vector times matrix, written out directly.
std::vector<double> vecmat(const std::vector<double>& v, const NArray& m) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += v[i] * m.at(i, j);
  return out;
}

std::vector<double> expert_ref(const MoEPredictor& p, std::size_t n, const std::vector<double>& h) {
  auto a = vecmat(h, p.parameters().get(MoEPredictor::expert_name(n, "w_in")));
  for (auto& v : a) v = gelu_ref(v);
  return vecmat(a, p.parameters().get(MoEPredictor::expert_name(n, "w_out")));
}

// Dense-gate mixture of every expert for one sample, then the output projection.
std::vector<double> dense_mixture_ref(const MoEPredictor& p, const TaskSpec& t, const std::vector<double>& x,
                                      std::size_t gate) {
  const auto h = vecmat(x, p.in_proj(t));
  auto u = h;
  for (int m : t.inputs) {
    const auto& tag = p.parameters().get("tag." + std::to_string(m));
    for (std::size_t i = 0; i < u.size(); ++i) u[i] += tag.at(i);
  }
  const auto& g = p.gate_matrix(gate);
  const std::size_t e = g.rows();
  std::vector<double> logits(e, 0.0);
  for (std::size_t n = 0; n < e; ++n)
    for (std::size_t i = 0; i < u.size(); ++i) logits[n] += g.at(n, i) * u[i];
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& l : logits) z += (l = std::exp(l - mx));
  std::vector<double> mix(h.size(), 0.0);
  for (std::size_t n = 0; n < e; ++n) {
    const auto y = expert_ref(p, n, h);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += logits[n] / z * y[i];
  }
  return vecmat(mix, p.out_proj(t));
}

Batch random_batch(const ModalityRegistry& reg, std::size_t b, std::mt19937_64& rng) {
  Batch out;
  for (const auto& m : reg.modalities()) out.modality.push_back(random_matrix(b, m.dim, rng));
  out.rows.resize(b);
  std::iota(out.rows.begin(), out.rows.end(), 0);
  return out;
}

double max_rel_error_over_parameters(Model& model, const Batch& batch, const TaskSpec& task,
                                     const LossConfig& lc, const std::string& prefix) {
  // Targets are stop-gradient inputs to the loss, so they stay fixed under perturbation.
  const auto target = model.target(batch, task);
  auto loss = [&] { return compute_losses(model.forward(batch, task, Mode::eval, nullptr), target, lc).total; };
  double worst = 0.0;
  for (auto [name, p] : model.named_parameters()) {
    if (name.rfind(prefix, 0) != 0) continue;
    for (auto& [_, q] : model.named_parameters()) q.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(loss());
    }
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    const auto numeric = finite_diff_grad([&] { return loss().item(); }, p, 1e-5);
    worst = std::max(worst, relative_error(analytic, numeric.data()));
  }
  return worst;
}

}  // namespace

TEST(Gating, OneHotRoutingLimit) {
  const std::vector<double> logits{10, -10, -10, -10};
  const auto d = gate_decision_from_logits(logits, 1);
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{0}));
  ASSERT_EQ(d.renorm_weights.size(), 1u);
  EXPECT_NEAR(d.renorm_weights[0], 1.0, 1e-4);
}

TEST(Gating, EqualLogitsBreakTiesByLowestIndex) {
  const auto d = gate_decision_from_logits(std::vector<double>{0.3, 0.3, 0.3, 0.3}, 2);
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(d.renorm_weights[0], 0.5);
  EXPECT_DOUBLE_EQ(d.renorm_weights[1], 0.5);
}

// Exhaustive oracle: the best K-subset by total weight, lowest indices on ties.
TEST(Gating, TopKMatchesSubsetOracle) {
  const std::vector<double> w{0.5, 0.2, 0.2, 0.1};
  const auto sel = top_k_indices(w, 2);
  double best = -1.0;
  std::pair<std::size_t, std::size_t> arg;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j)
      if (w[i] + w[j] > best) best = w[i] + w[j], arg = {i, j};
  EXPECT_EQ(sel, (std::vector<std::size_t>{arg.first, arg.second}));
  const std::vector<double> logits{std::log(0.5), std::log(0.2), std::log(0.2), std::log(0.1)};
  const auto d = gate_decision_from_logits(logits, 2);
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(d.renorm_weights[0], 5.0 / 7.0, 1e-12);
  EXPECT_NEAR(d.renorm_weights[1], 2.0 / 7.0, 1e-12);
  EXPECT_THROW(top_k_indices(w, 5), PreconditionError);
  EXPECT_THROW(top_k_indices(w, 0), PreconditionError);
}

TEST(Gating, GateForwardAgreesWithValueLevelRouting) {
  const auto reg = toy_registry();
  MoEPredictor p(toy_config(2), reg, 3);
  std::mt19937_64 rng(4);
  const auto x = random_matrix(1, 3, rng).reshaped({3});
  for (std::size_t l : {1u, 2u}) {
    const auto d = p.gate_forward(x, reg.task(1), l);
    const auto ref = gate_decision_from_logits(d.logits, 2);
    EXPECT_EQ(d.selected, ref.selected);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(d.renorm_weights[i], ref.renorm_weights[i], 1e-15);
  }
  EXPECT_THROW(p.gate_forward(x, reg.task(1), 3), PreconditionError);
  EXPECT_THROW(p.gate_forward(random_matrix(1, 4, rng).reshaped({4}), reg.task(1), 1), DimensionError);
}

TEST(MoE, ConfigValidation) {
  EXPECT_THROW(MoEConfig({2, 2, 5, 2, 4, 2, 0.0}).validate(), ValidationError);
  EXPECT_THROW(MoEConfig({2, 2, 1, 3, 4, 2, 0.0}).validate(), ValidationError);
  EXPECT_THROW(MoEConfig({2, 2, 1, 2, 4, 2, 1.0}).validate(), ValidationError);
  EXPECT_NO_THROW(MoEConfig::full_scale(2).validate());
}

TEST(MoE, ParameterCountMatchesClosedForm) {
  const auto reg = toy_registry();
  const auto cfg = toy_config(1);
  MoEPredictor p(cfg, reg, 1);
  // 4 experts × (4·8 + 8·4) + 2 gates × 4·4 + 2 tags × 4 + in (3 + 5)·4 + out 4·(5 + 3)
  const std::size_t by_hand = 4 * 64 + 2 * 16 + 2 * 4 + 8 * 4 + 4 * 8;
  EXPECT_EQ(p.parameters().count(), by_hand);
  EXPECT_EQ(moe_parameter_count(cfg, reg), by_hand);
  EXPECT_TRUE(p.parameters().contains("in_proj.1"));
  EXPECT_TRUE(p.parameters().contains("out_proj.2"));
  EXPECT_TRUE(p.parameters().contains("gate.2.g"));
  EXPECT_TRUE(p.parameters().contains("expert.3.w_out"));
}

TEST(MoE, ExpertForwardMatchesStraightLine) {
  const auto reg = toy_registry();
  MoEPredictor p(toy_config(1), reg, 9);
  std::mt19937_64 rng(2);
  const auto h = random_matrix(1, 4, rng).reshaped({4});
  for (std::size_t n = 0; n < 4; ++n) {
    const auto y = p.expert_forward(h, n, Mode::eval, nullptr);
    const auto ref = expert_ref(p, n, h.values());
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-12);
  }
  EXPECT_EQ(p.expert_forward(NArray(Shape{4}), 0, Mode::eval, nullptr).values(), std::vector<double>(4, 0.0));
  EXPECT_THROW(p.expert_forward(h, 4, Mode::eval, nullptr), PreconditionError);
}

TEST(MoE, DenseLimitEqualsFullMixture) {
  const auto reg = toy_registry();
  MoEPredictor p(toy_config(4), reg, 5);
  std::mt19937_64 rng(6);
  const auto x = random_matrix(1, 5, rng).reshaped({5});
  const auto out = p.forward(x, reg.task(2), Mode::eval, nullptr);
  const auto ref_a = dense_mixture_ref(p, reg.task(2), x.values(), 1);
  const auto ref_b = dense_mixture_ref(p, reg.task(2), x.values(), 2);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(out.out_a.at(i), ref_a[i], 1e-12);
    EXPECT_NEAR(out.out_b.at(i), ref_b[i], 1e-12);
  }
}

TEST(MoE, BatchRowsMatchSingleSampleForwards) {
  const auto reg = toy_registry();
  MoEPredictor p(toy_config(2), reg, 5);
  std::mt19937_64 rng(8);
  const auto x = random_matrix(6, 3, rng);
  const auto batch = p.forward(x, reg.task(1), Mode::eval, nullptr);
  for (std::size_t b = 0; b < 6; ++b) {
    const auto row = NArray::vector({x.at(b, 0), x.at(b, 1), x.at(b, 2)});
    const auto single = p.forward(row, reg.task(1), Mode::eval, nullptr);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(batch.out_a.at(b, i), single.out_a.at(i), 1e-14);
    EXPECT_EQ(batch.gate_b[b].selected, single.gate_b[0].selected);
  }
}

TEST(MoE, IdenticalGatesGiveIdenticalOutputs) {
  const auto reg = toy_registry();
  MoEPredictor p(toy_config(2), reg, 11);
  auto& g1 = p.parameters().get("gate.1.g");
  auto& g2 = p.parameters().get("gate.2.g");
  std::copy(g1.data().begin(), g1.data().end(), g2.data().begin());
  std::mt19937_64 rng(1);
  const auto out = p.forward(random_matrix(4, 3, rng), reg.task(1), Mode::eval, nullptr);
  EXPECT_EQ(out.out_a.values(), out.out_b.values());
}

TEST(MoE, EvalForwardIsDeterministic) {
  const auto reg = toy_registry();
  MoEPredictor p(MoEConfig{2, 2, 2, 2, 4, 2, 0.5}, reg, 11);
  std::mt19937_64 rng(1);
  const auto x = random_matrix(4, 3, rng);
  EXPECT_EQ(p.forward(x, reg.task(1), Mode::eval, nullptr).out_a.values(),
            p.forward(x, reg.task(1), Mode::eval, nullptr).out_a.values());
  EXPECT_THROW(p.forward(x, reg.task(1), Mode::train, nullptr), PreconditionError);
  std::mt19937_64 d1(3), d2(3);
  EXPECT_EQ(p.forward(x, reg.task(1), Mode::train, &d1).out_a.values(),
            p.forward(x, reg.task(1), Mode::train, &d2).out_a.values());
}

TEST(MoE, GateMatricesAreSharedAcrossTasks) {
  const auto reg = toy_registry();
  MoEPredictor p(toy_config(2), reg, 2);
  std::mt19937_64 rng(3);
  Tape t1, t2;
  {
    TapeScope s(t1);
    p.forward(random_matrix(2, 3, rng), reg.task(1), Mode::eval, nullptr);
  }
  {
    TapeScope s(t2);
    p.forward(random_matrix(2, 5, rng), reg.task(2), Mode::eval, nullptr);
  }
  for (std::size_t l : {1u, 2u}) {
    EXPECT_TRUE(t1.touched(p.gate_matrix(l)));
    EXPECT_TRUE(t2.touched(p.gate_matrix(l)));
  }
  EXPECT_TRUE(t1.touched(p.parameters().get("in_proj.1")));
  EXPECT_FALSE(t1.touched(p.parameters().get("in_proj.2")));
  EXPECT_FALSE(t2.touched(p.parameters().get("tag.1")));
  EXPECT_THROW(p.forward(random_matrix(2, 3, rng), TaskSpec{9, {1}, {1}}, Mode::eval, nullptr), PreconditionError);
}

TEST(MoE, ExpertPermutationLeavesOutputUnchanged) {
  const auto reg = toy_registry();
  MoEPredictor p(toy_config(2), reg, 21), q(toy_config(2), reg, 21);
  const std::vector<std::size_t> perm{2, 0, 3, 1};  // q's expert n is p's expert perm[n]
  for (std::size_t n = 0; n < 4; ++n) {
    for (const char* w : {"w_in", "w_out"}) {
      const auto& src = p.parameters().get(MoEPredictor::expert_name(perm[n], w));
      auto& dst = q.parameters().get(MoEPredictor::expert_name(n, w));
      std::copy(src.data().begin(), src.data().end(), dst.data().begin());
    }
    for (std::size_t l : {1u, 2u}) {
      const auto& src = p.gate_matrix(l);
      auto& dst = q.parameters().get(MoEPredictor::gate_name(l));
      for (std::size_t i = 0; i < 4; ++i) dst.at(n, i) = src.at(perm[n], i);
    }
  }
  std::mt19937_64 rng(5);
  const auto x = random_matrix(8, 3, rng);
  const auto a = p.forward(x, reg.task(1), Mode::eval, nullptr);
  const auto b = q.forward(x, reg.task(1), Mode::eval, nullptr);
  for (std::size_t i = 0; i < a.out_a.size(); ++i) {
    EXPECT_NEAR(a.out_a.at(i), b.out_a.at(i), 1e-12);
    EXPECT_NEAR(a.out_b.at(i), b.out_b.at(i), 1e-12);
  }
}

class MoEGradient : public ::testing::TestWithParam<std::tuple<std::size_t, std::string>> {};

TEST_P(MoEGradient, EveryFamilyMatchesFiniteDifferences) {
  const auto [k, family] = GetParam();
  const auto reg = toy_registry();
  Model model(reg, std::make_unique<MoEPredictor>(toy_config(k), reg, 17), true);
  std::mt19937_64 rng(23);
  // Perturb adapters away from identity so their gradients are generic.
  for (auto [name, p] : model.named_parameters())
    if (name.rfind("adapter", 0) == 0)
      for (auto& v : p.data()) v += 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
  const auto batch = random_batch(reg, 4, rng);
  LossConfig lc;
  for (int t : {1, 2}) EXPECT_LT(max_rel_error_over_parameters(model, batch, reg.task(t), lc, family), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Families, MoEGradient,
                         ::testing::Combine(::testing::Values(1u, 2u),
                                            ::testing::Values("expert.", "gate.", "tag.", "in_proj.", "out_proj.",
                                                              "adapter.")));

TEST(Mlp, BudgetMatchedWithinTwoPercent) {
  ModalityRegistry reg({{1, "a", 32, ModalityKind::continuous}, {2, "b", 48, ModalityKind::continuous}},
                       {{1, {1}, {2}}, {2, {2}, {1}}});
  const auto budget = moe_parameter_count(MoEConfig::desk(2), reg);
  MlpPredictor mlp(reg, budget, 0.1, 1);
  const double rel = std::abs(double(mlp.parameters().count()) - double(budget)) / double(budget);
  EXPECT_LT(rel, 0.02);
  // Each task key owns in·H + H·out parameters.
  EXPECT_EQ(mlp.parameters().count(), mlp.hidden() * (80 + 80));
  try {
    MlpPredictor(reg, 50, 0.1, 1);
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("160 vs 50"), std::string::npos);
  }
}

TEST(Mlp, ZeroWeightsGiveZeroOutputAndGradientsCheck) {
  const auto reg = toy_registry();
  auto pred = std::make_unique<MlpPredictor>(reg, 6, 0.0, 3, 0);
  MlpPredictor zero(reg, 6, 0.0, 3, 0);
  for (auto& [_, p] : zero.parameters().entries()) std::fill(p.data().begin(), p.data().end(), 0.0);
  std::mt19937_64 rng(4);
  const auto out = zero.forward(random_matrix(3, 3, rng), reg.task(1), Mode::eval, nullptr);
  EXPECT_EQ(out.out_a.values(), std::vector<double>(15, 0.0));
  EXPECT_TRUE(out.out_a.same_storage(out.out_b));

  Model model(reg, std::move(pred), false);
  const auto batch = random_batch(reg, 4, rng);
  for (int t : {1, 2}) EXPECT_LT(max_rel_error_over_parameters(model, batch, reg.task(t), LossConfig{}, "mlp."), 1e-4);
}

TEST(Utilization, FrequenciesAndEntropy) {
  std::vector<GateDecision> same(5, gate_decision_from_logits(std::vector<double>{3, 1, 0, 0}, 2));
  auto u = expert_utilization(same);
  EXPECT_DOUBLE_EQ(u.frequency[0], 1.0);
  EXPECT_DOUBLE_EQ(u.frequency[1], 1.0);
  EXPECT_DOUBLE_EQ(std::accumulate(u.frequency.begin(), u.frequency.end(), 0.0), 2.0);
  std::vector<GateDecision> uniform(3, gate_decision_from_logits(std::vector<double>(6, 0.7), 3));
  EXPECT_NEAR(expert_utilization(uniform).mean_entropy, std::log(6.0), 1e-9);
  EXPECT_THROW(expert_utilization(std::vector<GateDecision>{}), PreconditionError);
  EXPECT_DOUBLE_EQ(utilization_tv_distance(u, u), 0.0);
}
