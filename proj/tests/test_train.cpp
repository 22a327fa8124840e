// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "m3jepa/experiments/runner.hpp"

using namespace m3jepa;

namespace {

RunConfig tiny(std::uint64_t steps = 10) {
  auto j = preset_json("tiny");
  j["train"]["steps"] = steps;
  return parse_run_config(j);
}

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "m3jepa_test_train";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

LogRecord rec(int task, double total) {
  LogRecord r;
  r.task = task;
  r.report.total = total;
  return r;
}

}  // namespace

TEST(Schedule, TaskForStepCyclesThroughOrder) {
  const std::vector<int> two{1, 2}, three{3, 1, 2};
  for (std::uint64_t i = 0; i < 12; ++i) {
    EXPECT_EQ(task_for_step(i, two), i % 2 == 0 ? 1 : 2);
    EXPECT_EQ(task_for_step(i, three), three[i % 3]);
  }
  EXPECT_THROW(task_slot(0, 0), PreconditionError);
}

TEST(Schedule, WarmupThenCosine) {
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.lr_init = 1e-3;
  cfg.lr_final = 1e-5;
  cfg.warmup_frac = 0.1;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 0.0);
  EXPECT_NEAR(lr_at(5, cfg), 0.5e-3, 1e-18);
  EXPECT_NEAR(lr_at(10, cfg), 1e-3, 1e-18);
  EXPECT_NEAR(lr_at(55, cfg), 0.5 * (1e-3 + 1e-5), 1e-15);
  EXPECT_NEAR(lr_at(100, cfg), 1e-5, 1e-18);
  EXPECT_NEAR(lr_at(500, cfg), 1e-5, 1e-18);
  for (std::uint64_t i = 10; i < 100; ++i) EXPECT_LE(lr_at(i + 1, cfg), lr_at(i, cfg));
  for (std::uint64_t i = 0; i < 10; ++i) EXPECT_LT(lr_at(i, cfg), lr_at(i + 1, cfg));
}

TEST(Schedule, ContinuousAtWarmupBoundary) {
  TrainConfig cfg;
  cfg.steps = 3000;
  const double w = cfg.warmup_frac * 3000;
  EXPECT_NEAR(lr_at(static_cast<std::uint64_t>(w) - 1, cfg), cfg.lr_init * (w - 1) / w, 1e-15);
  EXPECT_NEAR(lr_at(static_cast<std::uint64_t>(w), cfg), cfg.lr_init, 1e-15);
}

TEST(Schedule, ConfigValidation) {
  TrainConfig cfg;
  cfg.task_order = {1};
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.warmup_frac = 1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.lr_final = 1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.task_order.clear();
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Adam, ThreeStepsAgainstHandComputation) {
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  const double lr = 0.1;
  NArray p(Shape{2}, std::vector<double>{1.0, -2.0});
  p.set_requires_grad(true);
  const double grads[3][2] = {{0.5, -1.0}, {-0.2, 0.3}, {0.1, 0.0}};
  AdamMoments s;

  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 3; ++t) {
    std::copy(grads[t - 1], grads[t - 1] + 2, p.grad().begin());
    adam_update(p, s, lr, cfg);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] = x[i] - lr * 0.01 * x[i] - lr * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(p.at(0), x[0], 1e-12) << "step " << t;
    EXPECT_NEAR(p.at(1), x[1], 1e-12) << "step " << t;
  }
  EXPECT_EQ(s.t, 3u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  NArray p(Shape{3}, std::vector<double>{0.0, 0.0, 0.0});
  p.set_requires_grad(true);
  p.grad()[0] = 1e-3;
  p.grad()[1] = -50.0;
  AdamMoments s;
  adam_update(p, s, 0.01, cfg);
  EXPECT_NEAR(p.at(0), -0.01, 1e-6);
  EXPECT_NEAR(p.at(1), 0.01, 1e-9);
  EXPECT_EQ(p.at(2), 0.0);
}

TEST(Adam, ZeroGradientWithoutDecayLeavesParameters) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  NArray p(Shape{2}, std::vector<double>{0.3, -0.7});
  p.set_requires_grad(true);
  AdamMoments s;
  for (int i = 0; i < 5; ++i) adam_update(p, s, 0.1, cfg);
  EXPECT_EQ(p.at(0), 0.3);
  EXPECT_EQ(p.at(1), -0.7);
}

TEST(TrainStep, UpdatesOnlyParametersTheTaskTouched) {
  auto cfg = tiny();
  cfg.predictor.moe.dropout = 0.0;
  const auto ds = make_dataset(cfg);
  auto model = make_model(cfg);
  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, p] : model.named_parameters()) before[name] = p.values();

  auto state = initial_state(cfg.train_config());
  BatchStream stream(ds, Split::train, 4, 1, true);
  train_step(state, model, stream.batch(0), cfg.registry().task(1), cfg.loss, cfg.train_config());

  for (const auto& [name, p] : model.named_parameters()) {
    const bool other_task = name == "in_proj.2" || name == "out_proj.1" || name == "tag.2";
    if (other_task) {
      EXPECT_EQ(p.values(), before[name]) << name;
      EXPECT_FALSE(state.moments.contains(name)) << name;
    }
    for (double g : p.grad()) EXPECT_EQ(g, 0.0) << name;
  }
  EXPECT_NE(model.named_parameters().front().second.values(), before.begin()->second);
  EXPECT_TRUE(state.moments.contains("in_proj.1"));
  EXPECT_EQ(state.step, 1u);
}

TEST(TrainStep, NonFiniteInputIsReported) {
  auto cfg = tiny();
  auto ds = make_dataset(cfg);
  ds.embeddings[0][0] = std::nan("");
  auto model = make_model(cfg);
  auto state = initial_state(cfg.train_config());
  EXPECT_THROW(train_step(state, model, make_batch(ds, {0, 1, 2}), cfg.registry().task(1), cfg.loss,
                          cfg.train_config()),
               NumericError);
}

TEST(TrainStep, NonFiniteLossMessageNamesStepTaskAndRows) {
  LossReport r;
  r.total = INFINITY;
  Batch b;
  b.rows = {4, 9};
  try {
    detail::require_finite_loss(r, 7, 2, b);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 7"), std::string::npos) << msg;
    EXPECT_NE(msg.find("task 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,9]"), std::string::npos) << msg;
  }
}

TEST(Train, LossDecreasesOnMirroredTasks) {
  auto cfg = tiny(60);
  cfg.predictor.moe.dropout = 0.0;
  cfg.train.lr_init = cfg.train.lr_final = 1e-2;
  cfg.train.warmup_frac = 0.0;
  cfg.train.batch_size = 8;
  const auto ds = make_dataset(cfg);
  auto model = make_model(cfg);
  const auto res = train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()));
  ASSERT_EQ(res.log.size(), 60u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += res.log[i].report.total;
    last += res.log[50 + i].report.total;
  }
  EXPECT_LT(last, first);
}

TEST(Train, AgdAlternatesAndJointLogsEveryTask) {
  auto cfg = tiny(6);
  const auto ds = make_dataset(cfg);
  auto model = make_model(cfg);
  auto res = train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()));
  ASSERT_EQ(res.log.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(res.log[i].step, i);
    EXPECT_EQ(res.log[i].task, i % 2 == 0 ? 1 : 2);
  }
  cfg.train.mode = ScheduleMode::joint;
  auto joint_model = make_model(cfg);
  res = train(joint_model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()));
  ASSERT_EQ(res.log.size(), 12u);
  EXPECT_EQ(res.state.step, 6u);
  EXPECT_EQ(res.log[0].step, res.log[1].step);
}

TEST(Train, DeterministicLogsAndCheckpointBytes) {
  const auto cfg = tiny(8);
  const auto ds = make_dataset(cfg);
  std::vector<std::vector<LogRecord>> logs;
  std::vector<std::string> bytes;
  for (int run = 0; run < 2; ++run) {
    auto model = make_model(cfg);
    TrainIo io;
    io.checkpoint_path = temp_path("det" + std::to_string(run) + ".m3jp");
    logs.push_back(train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()), io).log);
    bytes.push_back(file_bytes(io.checkpoint_path));
  }
  ASSERT_EQ(logs[0].size(), logs[1].size());
  for (std::size_t i = 0; i < logs[0].size(); ++i) EXPECT_EQ(logs[0][i].report.total, logs[1][i].report.total);
  EXPECT_FALSE(bytes[0].empty());
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Train, ZeroStepsWritesOnlyTheInitialCheckpoint) {
  const auto cfg = tiny(0);
  const auto ds = make_dataset(cfg);
  auto model = make_model(cfg);
  TrainIo io;
  io.checkpoint_path = temp_path("zero.m3jp");
  io.log_path = temp_path("zero.jsonl");
  std::filesystem::remove(io.checkpoint_path);
  const auto res = train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()), io);
  EXPECT_TRUE(res.log.empty());
  EXPECT_TRUE(file_bytes(io.log_path).empty());
  const auto c = read_checkpoint(io.checkpoint_path);
  EXPECT_EQ(c.step, 0u);
  EXPECT_TRUE(c.optimizer.empty());
  for (const auto& [name, p] : model.named_parameters()) {
    ASSERT_NE(c.find(name), nullptr) << name;
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(c.find(name)->data[i], double(float(p.at(i))));
  }
}

TEST(Checkpoint, RoundTripRestoresModelAndState) {
  const auto cfg = tiny(6);
  const auto ds = make_dataset(cfg);
  auto model = make_model(cfg);
  TrainIo io;
  io.checkpoint_path = temp_path("rt.m3jp");
  io.config_json = to_json(cfg).dump();
  const auto res = train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()), io);

  const auto c = read_checkpoint(io.checkpoint_path);
  auto fresh = make_model(cfg);
  const auto state = resume_from(c, fresh);
  EXPECT_EQ(state.step, 6u);
  EXPECT_EQ(state.rng, res.state.rng);
  EXPECT_EQ(state.rolling, res.state.rolling);
  ASSERT_EQ(state.moments.size(), res.state.moments.size());
  for (const auto& [name, s] : res.state.moments) {
    const auto& r = state.moments.at(name);
    EXPECT_EQ(r.t, s.t) << name;
    for (std::size_t i = 0; i < s.m.size(); ++i) EXPECT_EQ(r.m[i], double(float(s.m[i]))) << name;
  }
  const auto a = model.named_parameters(), b = fresh.named_parameters();
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].second.size(); ++i)
      EXPECT_EQ(b[k].second.at(i), double(float(a[k].second.at(i)))) << a[k].first;

  const auto again = encode_checkpoint(c);
  binio::Reader r(again.bytes());
  const auto c2 = decode_checkpoint(r);
  EXPECT_EQ(encode_checkpoint(c2).bytes(), again.bytes());
  EXPECT_EQ(nlohmann::json::parse(c.config_json)["run"]["name"], "tiny");
}

TEST(Checkpoint, ShapeMismatchNamesTheTensor) {
  const auto cfg = tiny();
  auto model = make_model(cfg);
  const auto c = make_checkpoint(model, initial_state(cfg.train_config()), "{}");
  auto wider = cfg;
  wider.predictor.moe.hidden = 6;
  auto other = make_model(wider);
  try {
    restore_parameters(c, other);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("expert.0.w_in"), std::string::npos) << e.what();
  }
  auto no_adapters = cfg;
  no_adapters.predictor.adapters = false;
  auto smaller = make_model(no_adapters);
  EXPECT_THROW(restore_parameters(c, smaller), DimensionError);
}

TEST(ConvergenceGap, WorkedExamples) {
  std::vector<LogRecord> equal, apart;
  for (int i = 0; i < 30; ++i) {
    equal.push_back(rec(1 + i % 2, 1.0));
    apart.push_back(rec(1 + i % 2, i % 2 == 0 ? 1.0 : 0.5));
  }
  EXPECT_DOUBLE_EQ(convergence_gap(equal), 0.0);
  EXPECT_DOUBLE_EQ(convergence_gap(apart), 0.5);
  EXPECT_THROW(convergence_gap({rec(1, 1), rec(2, 1)}), PreconditionError);
  EXPECT_THROW(convergence_gap({rec(1, 1), rec(1, 1), rec(1, 1), rec(1, 1)}), PreconditionError);
}

TEST(ConvergenceGap, UsesOnlyTheLastWindow) {
  std::vector<LogRecord> log;
  for (int i = 0; i < 100; ++i) log.push_back(rec(1 + i % 2, i < 60 ? (i % 2 ? 5.0 : 1.0) : 2.0));
  EXPECT_DOUBLE_EQ(convergence_gap(log, 20), 0.0);
  EXPECT_GT(convergence_gap(log, 50), 0.0);
}

// Input modality rotated after training: updating only the adapters restores retrieval.
TEST(Adapter, TrainedAdapterRecoversRotatedInputs) {
  auto cfg = parse_run_config(preset_json("two-modal-noisy"));
  cfg.predictor.adapters = true;
  cfg.synth.num_train = 1024;
  cfg.synth.num_test = 256;
  cfg.train.steps = 600;
  const auto ds = make_dataset(cfg);
  auto model = make_model(cfg);
  train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config()));

  const std::size_t d = ds.spec(1).dim;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> q(d, std::vector<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (auto& v : q[i]) v = normal(rng);
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += q[i][k] * q[j][k];
      for (std::size_t k = 0; k < d; ++k) q[i][k] -= dot * q[j][k];
    }
    double n = 0;
    for (auto v : q[i]) n += v * v;
    for (auto& v : q[i]) v /= std::sqrt(n);
  }
  auto rotated = ds;
  for (std::size_t s = 0; s < ds.num_samples; ++s) {
    for (std::size_t i = 0; i < d; ++i) {
      double v = 0;
      for (std::size_t k = 0; k < d; ++k) v += q[i][k] * ds.embeddings[0][s * d + k];
      rotated.embeddings[0][s * d + i] = v;
    }
  }

  const TaskSpec task = cfg.registry().task(1);
  auto r_at_1 = [&] { return evaluate_task(model, rotated, task, Split::test, cfg.loss, {1}, RankMode::cosine).r_at.at(1); };
  const double before = evaluate_task(model, ds, task, Split::test, cfg.loss, {1}, RankMode::cosine).r_at.at(1);
  const double frozen = r_at_1();

  std::vector<std::pair<NArray, std::vector<double>>> predictor;
  for (auto& [name, p] : model.named_parameters())
    if (name.rfind("adapter.", 0) != 0) predictor.emplace_back(p, std::vector<double>(p.data().begin(), p.data().end()));
  auto tc = cfg.train_config();
  tc.lr_init = tc.lr_final = 1e-2;
  tc.warmup_frac = 0.0;
  tc.weight_decay = 0.0;
  auto state = initial_state(tc);
  BatchStream stream(rotated, Split::train, tc.batch_size, 11, true);
  for (std::uint64_t i = 0; i < 600; ++i) {
    train_step(state, model, stream.batch(i), task, cfg.loss, tc);
    for (auto& [p, values] : predictor) std::copy(values.begin(), values.end(), p.data().begin());
  }
  const double adapted = r_at_1();
  EXPECT_LT(frozen, before);
  EXPECT_GT(adapted, frozen) << "before " << before << ", frozen " << frozen << ", adapted " << adapted;
}

TEST(MiBound, NonIncreasingInNoiseOnSeedAveragedRuns) {
  std::vector<double> bound;
  for (double noise : {0.0, 0.2, 0.5}) {
    double mean = 0.0;
    for (std::uint64_t seed : {0, 1, 2}) {
      auto cfg = parse_run_config(preset_json("two-modal-noisy"));
      cfg.seed = seed;
      cfg.synth.noise_std = noise;
      cfg.synth.num_train = 1024;
      cfg.synth.num_test = 64;
      cfg.train.steps = 300;
      const auto ds = make_dataset(cfg);
      auto model = make_model(cfg);
      const auto log = train(model, ds, cfg.loss, cfg.train_config(), initial_state(cfg.train_config())).log;
      for (std::size_t i = log.size() - 40; i < log.size(); ++i) mean += log[i].report.mi_lower_bound / 120.0;
    }
    bound.push_back(mean);
  }
  EXPECT_GE(bound[0], bound[1]);
  EXPECT_GE(bound[1], bound[2]);
}
