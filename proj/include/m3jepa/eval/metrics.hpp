// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "m3jepa/core/error.hpp"

namespace m3jepa {

/// Cosine similarities of predictions (rows) against candidates (columns).
struct SimilarityMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::string direction;  // e.g. "1>2"

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  /// mean(diagonal) − mean(off-diagonal); needs a square matrix.
  double margin() const {
    if (rows != cols || rows < 2) throw PreconditionError("similarity margin needs a square matrix of size >= 2");
    double diag = 0.0, off = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) (r == c ? diag : off) += at(r, c);
    return diag / static_cast<double>(rows) - off / static_cast<double>(rows * (cols - 1));
  }
};

/// Number of candidates ranked ahead of column `truth` in row r. Equal scores count against the query.
inline std::size_t rank_of(const SimilarityMatrix& s, std::size_t r, std::size_t truth) {
  const double own = s.at(r, truth);
  std::size_t ahead = 0;
  for (std::size_t c = 0; c < s.cols; ++c)
    if (c != truth && s.at(r, c) >= own) ++ahead;
  return ahead;
}

/// Fraction of rows whose true candidate `truth[r]` is within the top K.
inline std::map<std::size_t, double> recall_at_k(const SimilarityMatrix& s, const std::vector<std::size_t>& truth,
                                                 const std::vector<std::size_t>& ks) {
  if (s.rows == 0) throw PreconditionError("recall_at_k: empty matrix");
  if (truth.size() != s.rows) throw DimensionError("recall_at_k: one true column per row is required");
  std::vector<std::size_t> ranks(s.rows);
  for (std::size_t r = 0; r < s.rows; ++r) ranks[r] = rank_of(s, r, truth.at(r));
  std::map<std::size_t, double> out;
  for (auto k : ks) {
    if (k == 0 || k > s.cols) {
      throw PreconditionError("recall_at_k: K=" + std::to_string(k) + " outside [1, " + std::to_string(s.cols) + "]");
    }
    std::size_t hits = 0;
    for (auto r : ranks) hits += r < k;
    out[k] = static_cast<double>(hits) / static_cast<double>(s.rows);
  }
  return out;
}

/// Index-aligned form: the true match of row r is column r.
inline std::map<std::size_t, double> recall_at_k(const SimilarityMatrix& s, const std::vector<std::size_t>& ks) {
  if (s.rows != s.cols) throw PreconditionError("recall_at_k: needs a square, index-aligned matrix");
  std::vector<std::size_t> diag(s.rows);
  for (std::size_t r = 0; r < s.rows; ++r) diag[r] = r;
  return recall_at_k(s, diag, ks);
}

struct ClassMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t classes_averaged = 0;

  bool operator==(const ClassMetrics&) const = default;
};

/// Accuracy and macro precision/recall/F1 over the classes occurring in predictions or truth.
/// Per-class F1 is averaged; a class with no predicted (or true) samples has precision (or recall) 0.
inline ClassMetrics classify_metrics(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                                     std::size_t num_classes) {
  if (pred.empty()) throw PreconditionError("classify_metrics: empty input");
  if (pred.size() != truth.size()) throw DimensionError("classify_metrics: prediction/truth length mismatch");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= num_classes || truth[i] >= num_classes) throw PreconditionError("classify_metrics: label out of range");
    if (pred[i] == truth[i]) {
      ++tp[pred[i]];
      ++correct;
    } else {
      ++fp[pred[i]];
      ++fn[truth[i]];
    }
  }
  ClassMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    const double p = tp[c] + fp[c] ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c]) : 0.0;
    const double r = tp[c] + fn[c] ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fn[c]) : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    ++m.classes_averaged;
  }
  const double n = static_cast<double>(m.classes_averaged);
  m.precision /= n;
  m.recall /= n;
  m.f1 /= n;
  return m;
}

/// CSV with a header row, one row per query, and a trailing "# margin,<value>" line.
inline void write_similarity_csv(const SimilarityMatrix& s, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "# direction," << s.direction << "\n";
  out << "query";
  for (std::size_t c = 0; c < s.cols; ++c) out << ",c" << c;
  out << "\n" << std::setprecision(9);
  for (std::size_t r = 0; r < s.rows; ++r) {
    out << r;
    for (std::size_t c = 0; c < s.cols; ++c) out << ',' << static_cast<float>(s.at(r, c));
    out << "\n";
  }
  if (s.rows == s.cols && s.rows >= 2) out << "# margin," << std::setprecision(17) << s.margin() << "\n";
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline SimilarityMatrix read_similarity_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  SimilarityMatrix s;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# direction,", 0) == 0) {
      s.direction = line.substr(12);
      continue;
    }
    if (line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!header) {
      header = true;
      s.cols = cells.size() - 1;
      continue;
    }
    if (cells.size() != s.cols + 1) throw FormatError("similarity CSV: ragged row in '" + path + "'");
    for (std::size_t c = 1; c < cells.size(); ++c) s.values.push_back(static_cast<float>(std::stod(cells[c])));
    ++s.rows;
  }
  if (!header) throw FormatError("similarity CSV: missing header in '" + path + "'");
  return s;
}

}  // namespace m3jepa
