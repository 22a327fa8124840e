// SPDX-License-Identifier: Apache-2.0
//
// Candidate indexing, ranking and per-task evaluation. Candidates of a task
// are the output-side embeddings of a split; when the output is a single
// one_hot modality they are the class indicator vectors instead, and
// retrieval at rank 1 is classification.
#pragma once

#include <chrono>
#include <numeric>

#include "m3jepa/eval/metrics.hpp"
#include "m3jepa/loss/losses.hpp"
#include "m3jepa/model/model.hpp"

namespace m3jepa {

enum class RankMode { cosine, energy };

inline const char* to_string(RankMode m) { return m == RankMode::energy ? "energy" : "cosine"; }

/// Counts candidate-side embedding computations (one per candidate).
struct ForwardCounter {
  std::size_t candidate_forwards = 0;
};

struct CandidateIndex {
  int task = 0;
  std::vector<int> modalities;
  bool classes = false;
  std::size_t dim = 0;
  std::vector<std::size_t> ids;  // dataset rows, or class ids
  std::vector<double> vectors;   // ids.size() × dim
  std::vector<double> norms;

  std::size_t size() const { return ids.size(); }
  std::span<const double> vector(std::size_t i) const { return std::span<const double>(vectors).subspan(i * dim, dim); }
  bool operator==(const CandidateIndex&) const = default;
};

/// True when the task's candidates are class indicators.
inline bool is_classification(const Dataset& ds, const TaskSpec& task) {
  return task.outputs.size() == 1 && ds.spec(task.outputs.front()).kind == ModalityKind::one_hot;
}

namespace detail {

inline double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double cosine_score(std::span<const double> q, double q_norm, std::span<const double> c, double c_norm) {
  if (q_norm == 0.0 || c_norm == 0.0) throw DegenerateVectorError("cosine ranking: zero-norm vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) dot += q[i] * c[i];
  return dot / (q_norm * c_norm);
}

}  // namespace detail

/// Adapted, concatenated output-side embeddings of `ids` (split rows or class ids).
inline NArray candidate_embeddings(const Model& model, const Dataset& ds, const TaskSpec& task,
                                   const std::vector<std::size_t>& ids, bool classes, ForwardCounter* counter) {
  NoGradScope off;
  std::vector<NArray> parts;
  for (int m : task.outputs) {
    NArray raw = classes ? NArray(Shape{ids.size(), ds.spec(m).dim}) : ds.gather(m, ids);
    if (classes)
      for (std::size_t i = 0; i < ids.size(); ++i) raw.at(i, ids[i]) = 1.0;
    parts.push_back(model.embed(raw, m));
  }
  if (counter) counter->candidate_forwards += ids.size();
  return concat(parts).detach();
}

inline std::vector<std::size_t> split_rows(const Dataset& ds, Split split) {
  const auto [b, e] = ds.range(split);
  std::vector<std::size_t> rows(e - b);
  std::iota(rows.begin(), rows.end(), b);
  return rows;
}

inline CandidateIndex build_index(const Model& model, const Dataset& ds, const TaskSpec& task, Split split,
                                  ForwardCounter* counter = nullptr) {
  CandidateIndex idx;
  idx.task = task.id;
  idx.modalities = task.outputs;
  idx.classes = is_classification(ds, task);
  if (idx.classes) {
    idx.ids.resize(ds.spec(task.outputs.front()).dim);
    std::iota(idx.ids.begin(), idx.ids.end(), 0);
  } else {
    idx.ids = split_rows(ds, split);
  }
  if (idx.ids.empty()) throw PreconditionError(std::string("build_index: empty ") + to_string(split) + " split");
  const auto emb = candidate_embeddings(model, ds, task, idx.ids, idx.classes, counter);
  idx.dim = emb.cols();
  idx.vectors = emb.values();
  for (std::size_t i = 0; i < idx.size(); ++i) idx.norms.push_back(detail::norm_of(idx.vector(i)));
  return idx;
}

/// Eval-mode predictions for dataset rows.
inline Prediction predict_rows(const Model& model, const Dataset& ds, const TaskSpec& task,
                               const std::vector<std::size_t>& rows) {
  NoGradScope off;
  return model.forward(make_batch(ds, rows), task, Mode::eval, nullptr);
}

/// Score of every candidate for one query; higher is better (energy mode negates the energy).
inline std::vector<double> candidate_scores(std::span<const double> pred_a, std::span<const double> pred_b,
                                            const CandidateIndex& index, RankMode mode, const LossConfig& lc) {
  if (pred_a.size() != index.dim) throw DimensionError("retrieve: prediction dim does not match the index");
  std::vector<double> s(index.size());
  const double qn = detail::norm_of(pred_a);
  for (std::size_t c = 0; c < index.size(); ++c) {
    s[c] = mode == RankMode::cosine ? detail::cosine_score(pred_a, qn, index.vector(c), index.norms[c])
                                    : -pair_energy(pred_a, pred_b, index.vector(c), lc);
  }
  return s;
}

/// Candidate ids, best first; equal scores keep the lower id first.
inline std::vector<std::size_t> rank_candidates(const std::vector<double>& scores, const CandidateIndex& index) {
  std::vector<std::size_t> pos(scores.size());
  std::iota(pos.begin(), pos.end(), 0);
  std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> ids;
  for (auto p : pos) ids.push_back(index.ids[p]);
  return ids;
}

/// Ranks the index for one query (given as its eval-mode gate outputs).
inline std::vector<std::size_t> retrieve(std::span<const double> pred_a, std::span<const double> pred_b,
                                         const TaskSpec& task, const CandidateIndex& index, RankMode mode,
                                         const LossConfig& lc) {
  if (task.id != index.task || task.outputs != index.modalities) {
    throw PreconditionError("retrieve: index was built for task " + std::to_string(index.task) + ", not " +
                            std::to_string(task.id));
  }
  return rank_candidates(candidate_scores(pred_a, pred_b, index, mode, lc), index);
}

/// Scores of one query with every candidate embedding recomputed from scratch.
inline std::vector<double> uncached_scores(std::span<const double> pred_a, std::span<const double> pred_b,
                                           const Model& model, const Dataset& ds, const TaskSpec& task, Split split,
                                           RankMode mode, const LossConfig& lc, ForwardCounter* counter) {
  const auto fresh = build_index(model, ds, task, split, counter);
  return candidate_scores(pred_a, pred_b, fresh, mode, lc);
}

/// All queries of a split against an index.
inline SimilarityMatrix score_matrix(const Prediction& pred, const CandidateIndex& index, RankMode mode,
                                     const LossConfig& lc, std::string direction) {
  SimilarityMatrix s;
  s.rows = pred.out_a.rows();
  s.cols = index.size();
  s.direction = std::move(direction);
  const std::size_t d = index.dim;
  for (std::size_t r = 0; r < s.rows; ++r) {
    const auto a = pred.out_a.data().subspan(r * d, d);
    const auto b = pred.out_b.data().subspan(r * d, d);
    const auto row = candidate_scores(a, b, index, mode, lc);
    s.values.insert(s.values.end(), row.begin(), row.end());
  }
  return s;
}

struct TaskEval {
  int task = 0;
  std::string direction;
  bool classification = false;
  std::map<std::size_t, double> r_at;
  ClassMetrics metrics;  // classification tasks only
  double energy_mean = 0.0;
};

inline std::string direction_of(const TaskSpec& t) {
  return modality_signature(t.inputs) + ">" + modality_signature(t.outputs);
}

/// Retrieval (or classification) metrics of one task on one split.
inline TaskEval evaluate_task(const Model& model, const Dataset& ds, const TaskSpec& task, Split split,
                              const LossConfig& lc, std::vector<std::size_t> ks, RankMode mode) {
  const auto rows = split_rows(ds, split);
  if (rows.empty()) throw PreconditionError(std::string("evaluate: empty ") + to_string(split) + " split");
  const auto index = build_index(model, ds, task, split);
  const auto pred = predict_rows(model, ds, task, rows);
  const auto scores = score_matrix(pred, index, mode, lc, direction_of(task));

  TaskEval ev;
  ev.task = task.id;
  ev.direction = direction_of(task);
  ev.classification = index.classes;
  std::vector<std::size_t> truth(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) truth[i] = index.classes ? ds.label(task.outputs.front(), rows[i]) : i;
  std::erase_if(ks, [&](std::size_t k) { return k > index.size(); });
  ev.r_at = recall_at_k(scores, truth, ks);
  if (index.classes) {
    std::vector<std::size_t> predicted(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::vector<double> row(scores.values.begin() + static_cast<std::ptrdiff_t>(r * scores.cols),
                              scores.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * scores.cols));
      predicted[r] = rank_candidates(row, index).front();
    }
    ev.metrics = classify_metrics(predicted, truth, index.size());
  }
  const std::size_t d = index.dim;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t c = index.classes ? truth[r] : r;
    ev.energy_mean += pair_energy(pred.out_a.data().subspan(r * d, d), pred.out_b.data().subspan(r * d, d),
                                  index.vector(c), lc);
  }
  ev.energy_mean /= static_cast<double>(rows.size());
  return ev;
}

/// Cosine similarity matrix of the first `cap` split rows against their own candidates.
inline SimilarityMatrix similarity_matrix(const Model& model, const Dataset& ds, const TaskSpec& task, Split split,
                                          std::size_t cap) {
  if (is_classification(ds, task)) throw PreconditionError("similarity matrix needs a retrieval task");
  auto rows = split_rows(ds, split);
  if (rows.size() > cap) rows.resize(cap);
  if (rows.empty()) throw PreconditionError("similarity matrix: empty split");
  CandidateIndex index;
  index.task = task.id;
  index.modalities = task.outputs;
  index.ids = rows;
  const auto emb = candidate_embeddings(model, ds, task, rows, false, nullptr);
  index.dim = emb.cols();
  index.vectors = emb.values();
  for (std::size_t i = 0; i < index.size(); ++i) index.norms.push_back(detail::norm_of(index.vector(i)));
  return score_matrix(predict_rows(model, ds, task, rows), index, RankMode::cosine, LossConfig{}, direction_of(task));
}

struct TimingStats {
  std::vector<double> samples;  // seconds per query, one per repeat
  double mean = 0.0;
  double p95 = 0.0;
};

inline TimingStats summarize(std::vector<double> samples) {
  TimingStats t;
  t.samples = samples;
  t.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
  std::sort(samples.begin(), samples.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(samples.size())));
  t.p95 = samples[std::max<std::size_t>(rank, 1) - 1];
  return t;
}

struct LatencyReport {
  TimingStats cached;
  TimingStats full;
  std::size_t queries = 0;
  std::size_t candidates = 0;
  double cached_forwards_per_query = 0.0;
  double full_forwards_per_query = 0.0;
  bool identical_scores = true;

  double speedup() const { return cached.mean > 0.0 ? full.mean / cached.mean : 0.0; }
};

/// Times per-query retrieval against a prebuilt index versus recomputing every candidate.
/// One warmup pass over the queries is run and discarded.
inline LatencyReport latency_harness(const Model& model, const Dataset& ds, const TaskSpec& task, Split split,
                                     const CandidateIndex& index, const std::vector<std::size_t>& queries,
                                     std::size_t repeats, const LossConfig& lc = {}) {
  if (repeats < 3) throw PreconditionError("latency_harness: repeats must be >= 3");
  if (queries.empty()) throw PreconditionError("latency_harness: no queries");
  using clock = std::chrono::steady_clock;
  LatencyReport rep;
  rep.queries = queries.size();
  rep.candidates = index.size();
  ForwardCounter cached_count, full_count;
  volatile std::size_t sink = 0;

  // The cached path never embeds candidates, so cached_count stays at zero by construction.
  auto cached_pass = [&](bool check) {
    for (auto q : queries) {
      const auto p = predict_rows(model, ds, task, {q});
      const auto s = candidate_scores(p.out_a.data(), p.out_b.data(), index, RankMode::cosine, lc);
      sink = sink + rank_candidates(s, index).front();
      if (check) {
        ForwardCounter scratch;
        const auto f = uncached_scores(p.out_a.data(), p.out_b.data(), model, ds, task, split, RankMode::cosine, lc,
                                       &scratch);
        rep.identical_scores = rep.identical_scores && f == s;
      }
    }
  };
  auto full_pass = [&](ForwardCounter* counter) {
    for (auto q : queries) {
      const auto p = predict_rows(model, ds, task, {q});
      const auto s = uncached_scores(p.out_a.data(), p.out_b.data(), model, ds, task, split, RankMode::cosine, lc,
                                     counter);
      sink = sink + rank_candidates(s, index).front();
    }
  };

  cached_pass(true);
  full_pass(nullptr);
  std::vector<double> cached, full;
  for (std::size_t r = 0; r < repeats; ++r) {
    auto t0 = clock::now();
    cached_pass(false);
    auto t1 = clock::now();
    full_pass(&full_count);
    auto t2 = clock::now();
    const double n = static_cast<double>(queries.size());
    cached.push_back(std::chrono::duration<double>(t1 - t0).count() / n);
    full.push_back(std::chrono::duration<double>(t2 - t1).count() / n);
  }
  const double total = static_cast<double>(repeats * queries.size());
  rep.cached_forwards_per_query = static_cast<double>(cached_count.candidate_forwards) / total;
  rep.full_forwards_per_query = static_cast<double>(full_count.candidate_forwards) / total;
  rep.cached = summarize(cached);
  rep.full = summarize(full);
  return rep;
}

}  // namespace m3jepa
