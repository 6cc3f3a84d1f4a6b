// SPDX-License-Identifier: Apache-2.0
//
// Training losses over predicted spectra and the evaluation metrics.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xtal2dos/autodiff.hpp"

namespace xtal2dos {

inline constexpr double kProbabilityFloor = 1e-10;

enum class LossKind { kKl, kGeneralizedKl, kMse };

LossKind parse_loss_kind(const std::string& name);
std::string loss_kind_name(LossKind kind);

// Differentiable losses. prediction is [rows, l_y]; target holds rows * l_y
// values. The result is the mean over rows of the per-row loss.

/// sum_i y_i ln(y_i / max(yhat_i, eps)), with 0 ln 0 = 0. DomainError on y < 0.
ad::Var kl_loss(ad::Var prediction, std::span<const double> target, double eps = kProbabilityFloor);
/// sum_i [y_i ln(y_i / yhat_i) - y_i + yhat_i], yhat clamped at eps.
ad::Var generalized_kl_loss(ad::Var prediction, std::span<const double> target, double eps = kProbabilityFloor);
/// Mean squared error per row.
ad::Var mse_loss(ad::Var prediction, std::span<const double> target);
ad::Var loss(LossKind kind, ad::Var prediction, std::span<const double> target);

// Plain metrics on one spectrum.

double kl_divergence(std::span<const double> y, std::span<const double> y_hat, double eps = kProbabilityFloor);
double generalized_kl_divergence(std::span<const double> y, std::span<const double> y_hat,
                                 double eps = kProbabilityFloor);
/// nullopt when y is constant.
std::optional<double> r_squared(std::span<const double> y, std::span<const double> y_hat);
double mae(std::span<const double> y, std::span<const double> y_hat);
double mse(std::span<const double> y, std::span<const double> y_hat);
/// Both inputs normalized to unit mass, then bin_width * sum_k |CDF_y(k) - CDF_yhat(k)|.
/// nullopt when either input has zero mass. DomainError on negative entries.
std::optional<double> wasserstein(std::span<const double> y, std::span<const double> y_hat, double bin_width = 1.0);

struct SampleMetrics {
  std::string id;
  std::optional<double> r2;
  double mae = 0.0;
  double mse = 0.0;
  std::optional<double> wd;
};

/// Aggregates are means over per-sample values; flagged (nullopt) entries are
/// excluded and an aggregate with no valid entries is itself nullopt.
struct MetricReport {
  std::optional<double> r2;
  std::optional<double> mae;
  std::optional<double> mse;
  std::optional<double> wd;
  std::vector<SampleMetrics> per_sample;

  /// {"r2", "mae", "mse", "wd", "per_sample": [{"id", "r2", "mae", "mse", "wd"}]},
  /// flagged values as null.
  std::string to_json(int indent = 2) const;
};

MetricReport make_report(std::vector<SampleMetrics> samples);
SampleMetrics sample_metrics(std::string id, std::span<const double> y, std::span<const double> y_hat,
                             double bin_width = 1.0);

}  // namespace xtal2dos
