// SPDX-License-Identifier: Apache-2.0
#include "sevnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace sevnet {

namespace {

void check_table(std::span<const double> scores, std::int64_t rows,
                 std::int64_t cols) {
  if (rows < 1 || cols < 1 || static_cast<std::int64_t>(scores.size()) != rows * cols)
    throw std::invalid_argument("metrics: score table does not match dimensions");
}

// Position of `target` in the descending order of one row.
std::int64_t rank_in_row(const double* row, std::int64_t cols, std::int64_t target) {
  std::int64_t rank = 0;
  for (std::int64_t j = 0; j < cols; ++j)
    if (row[j] > row[target] || (row[j] == row[target] && j < target)) ++rank;
  return rank;
}

void check_labels(std::span<const std::int64_t> labels, std::int64_t rows,
                  std::int64_t cols) {
  if (static_cast<std::int64_t>(labels.size()) != rows)
    throw std::invalid_argument("metrics: label count does not match rows");
  for (auto l : labels)
    if (l < 0 || l >= cols) throw std::invalid_argument("metrics: label out of range");
}

}  // namespace

double topk_accuracy(std::span<const double> scores, std::int64_t rows,
                     std::int64_t cols, std::span<const std::int64_t> labels,
                     std::int64_t k) {
  check_table(scores, rows, cols);
  check_labels(labels, rows, cols);
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < rows; ++i)
    if (rank_in_row(scores.data() + i * cols, cols, labels[i]) < k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(rows);
}

double mean_class_accuracy(std::span<const double> scores, std::int64_t rows,
                           std::int64_t cols, std::span<const std::int64_t> labels) {
  check_table(scores, rows, cols);
  check_labels(labels, rows, cols);
  std::vector<std::int64_t> seen(cols, 0), correct(cols, 0);
  for (std::int64_t i = 0; i < rows; ++i) {
    ++seen[labels[i]];
    if (rank_in_row(scores.data() + i * cols, cols, labels[i]) == 0) ++correct[labels[i]];
  }
  double acc = 0;
  std::int64_t classes = 0;
  for (std::int64_t c = 0; c < cols; ++c) {
    if (seen[c] == 0) continue;
    acc += static_cast<double>(correct[c]) / static_cast<double>(seen[c]);
    ++classes;
  }
  return acc / static_cast<double>(classes);
}

double average_precision(std::span<const double> scores,
                         std::span<const double> positives) {
  if (scores.size() != positives.size())
    throw std::invalid_argument("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  double sum = 0;
  std::int64_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (positives[order[r]] == 0.0) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) return std::numeric_limits<double>::quiet_NaN();
  return sum / static_cast<double>(hits);
}

double mean_average_precision(std::span<const double> scores, std::int64_t rows,
                              std::int64_t cols, std::span<const double> targets) {
  check_table(scores, rows, cols);
  if (targets.size() != scores.size())
    throw std::invalid_argument("mean_average_precision: target table mismatch");
  std::vector<double> col_scores(rows), col_pos(rows);
  double total = 0;
  std::int64_t classes = 0;
  for (std::int64_t c = 0; c < cols; ++c) {
    for (std::int64_t i = 0; i < rows; ++i) {
      col_scores[i] = scores[i * cols + c];
      col_pos[i] = targets[i * cols + c];
    }
    const double ap = average_precision(col_scores, col_pos);
    if (std::isnan(ap)) continue;
    total += ap;
    ++classes;
  }
  if (classes == 0) return std::numeric_limits<double>::quiet_NaN();
  return total / static_cast<double>(classes);
}

}  // namespace sevnet
