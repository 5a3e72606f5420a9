// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

namespace sevnet {

// Score tables are row-major N x K. Ties rank the lower class/sample index
// first, so every metric is a deterministic function of the table.

/// Fraction of rows whose label is among the k highest-scoring classes.
double topk_accuracy(std::span<const double> scores, std::int64_t rows,
                     std::int64_t cols, std::span<const std::int64_t> labels,
                     std::int64_t k);

/// Mean over classes present in `labels` of per-class top-1 accuracy.
double mean_class_accuracy(std::span<const double> scores, std::int64_t rows,
                           std::int64_t cols, std::span<const std::int64_t> labels);

/// Non-interpolated average precision of one ranked column: the mean, over
/// positives, of precision at the positive's rank. NaN without positives.
double average_precision(std::span<const double> scores,
                         std::span<const double> positives);

/// Mean AP over classes with at least one positive; targets are N x K 0/1.
double mean_average_precision(std::span<const double> scores, std::int64_t rows,
                              std::int64_t cols, std::span<const double> targets);

}  // namespace sevnet
