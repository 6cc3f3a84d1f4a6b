// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/losses_metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "xtal2dos/error.hpp"
#include "xtal2dos/ops.hpp"

namespace xtal2dos {

LossKind parse_loss_kind(const std::string& name) {
  if (name == "kl") return LossKind::kKl;
  if (name == "generalized_kl") return LossKind::kGeneralizedKl;
  if (name == "mse") return LossKind::kMse;
  throw ConfigError("unknown loss '" + name + "' (expected kl, generalized_kl or mse)");
}

std::string loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::kKl: return "kl";
    case LossKind::kGeneralizedKl: return "generalized_kl";
    case LossKind::kMse: return "mse";
  }
  return "?";
}

namespace {

void check_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": sizes differ (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

void check_non_negative(std::span<const double> y, const char* what) {
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] >= 0.0)) {
      throw DomainError(std::string(what) + ": target entry " + std::to_string(i) + " is " + std::to_string(y[i]) +
                        "; must be non-negative");
    }
  }
}

double entropy_term(std::span<const double> y) {
  double s = 0.0;
  for (double v : y) {
    if (v > 0.0) s += v * std::log(v);
  }
  return s;
}

}  // namespace

ad::Var kl_loss(ad::Var prediction, std::span<const double> target, double eps) {
  check_sizes(prediction.size(), target.size(), "kl_loss");
  check_non_negative(target, "kl_loss");
  auto& tape = prediction.tape();
  const double rows = static_cast<double>(prediction.rows());
  ad::Var y = tape.constant(prediction.shape(), {target.begin(), target.end()});
  ad::Var cross = ad::sum(ad::mul(y, ad::log(ad::clamp_min(prediction, eps))));
  return ad::scale(ad::add_scalar(ad::scale(cross, -1.0), entropy_term(target)), 1.0 / rows);
}

ad::Var generalized_kl_loss(ad::Var prediction, std::span<const double> target, double eps) {
  check_sizes(prediction.size(), target.size(), "generalized_kl_loss");
  check_non_negative(target, "generalized_kl_loss");
  auto& tape = prediction.tape();
  const double rows = static_cast<double>(prediction.rows());
  double y_mass = 0.0;
  for (double v : target) y_mass += v;
  ad::Var y = tape.constant(prediction.shape(), {target.begin(), target.end()});
  ad::Var clamped = ad::clamp_min(prediction, eps);
  ad::Var cross = ad::sum(ad::mul(y, ad::log(clamped)));
  ad::Var total = ad::add(ad::scale(cross, -1.0), ad::sum(clamped));
  return ad::scale(ad::add_scalar(total, entropy_term(target) - y_mass), 1.0 / rows);
}

ad::Var mse_loss(ad::Var prediction, std::span<const double> target) {
  check_sizes(prediction.size(), target.size(), "mse_loss");
  auto& tape = prediction.tape();
  ad::Var diff = ad::sub(prediction, tape.constant(prediction.shape(), {target.begin(), target.end()}));
  return ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(prediction.size()));
}

ad::Var loss(LossKind kind, ad::Var prediction, std::span<const double> target) {
  switch (kind) {
    case LossKind::kKl: return kl_loss(prediction, target);
    case LossKind::kGeneralizedKl: return generalized_kl_loss(prediction, target);
    case LossKind::kMse: return mse_loss(prediction, target);
  }
  throw ConfigError("unknown loss kind");
}

double kl_divergence(std::span<const double> y, std::span<const double> y_hat, double eps) {
  check_sizes(y.size(), y_hat.size(), "kl_divergence");
  check_non_negative(y, "kl_divergence");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] > 0.0) s += y[i] * (std::log(y[i]) - std::log(std::max(y_hat[i], eps)));
  }
  return s;
}

double generalized_kl_divergence(std::span<const double> y, std::span<const double> y_hat, double eps) {
  check_sizes(y.size(), y_hat.size(), "generalized_kl_divergence");
  check_non_negative(y, "generalized_kl_divergence");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double q = std::max(y_hat[i], eps);
    if (y[i] > 0.0) s += y[i] * (std::log(y[i]) - std::log(q));
    s += q - y[i];
  }
  return s;
}

std::optional<double> r_squared(std::span<const double> y, std::span<const double> y_hat) {
  check_sizes(y.size(), y_hat.size(), "r_squared");
  if (y.empty()) return std::nullopt;
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  if (ss_tot == 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

double mae(std::span<const double> y, std::span<const double> y_hat) {
  check_sizes(y.size(), y_hat.size(), "mae");
  if (y.empty()) throw DimensionError("mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double mse(std::span<const double> y, std::span<const double> y_hat) {
  check_sizes(y.size(), y_hat.size(), "mse");
  if (y.empty()) throw DimensionError("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

std::optional<double> wasserstein(std::span<const double> y, std::span<const double> y_hat, double bin_width) {
  check_sizes(y.size(), y_hat.size(), "wasserstein");
  check_non_negative(y, "wasserstein");
  check_non_negative(y_hat, "wasserstein");
  double mass_y = 0.0;
  double mass_q = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    mass_y += y[i];
    mass_q += y_hat[i];
  }
  if (mass_y == 0.0 || mass_q == 0.0) return std::nullopt;
  double cdf_y = 0.0;
  double cdf_q = 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    cdf_y += y[i] / mass_y;
    cdf_q += y_hat[i] / mass_q;
    s += std::abs(cdf_y - cdf_q);
  }
  return bin_width * s;
}

SampleMetrics sample_metrics(std::string id, std::span<const double> y, std::span<const double> y_hat,
                             double bin_width) {
  SampleMetrics m;
  m.id = std::move(id);
  m.r2 = r_squared(y, y_hat);
  m.mae = mae(y, y_hat);
  m.mse = mse(y, y_hat);
  bool negative = false;
  for (std::size_t i = 0; i < y.size(); ++i) negative = negative || y[i] < 0.0 || y_hat[i] < 0.0;
  // Signed predictions (mse head) have no transport distance.
  if (!negative) m.wd = wasserstein(y, y_hat, bin_width);
  return m;
}

namespace {

template <typename Get>
std::optional<double> mean_of(const std::vector<SampleMetrics>& samples, Get get) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& m : samples) {
    const std::optional<double> v = get(m);
    if (v) {
      s += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

MetricReport make_report(std::vector<SampleMetrics> samples) {
  MetricReport r;
  r.r2 = mean_of(samples, [](const SampleMetrics& m) { return m.r2; });
  r.mae = mean_of(samples, [](const SampleMetrics& m) { return std::optional<double>(m.mae); });
  r.mse = mean_of(samples, [](const SampleMetrics& m) { return std::optional<double>(m.mse); });
  r.wd = mean_of(samples, [](const SampleMetrics& m) { return m.wd; });
  r.per_sample = std::move(samples);
  return r;
}

std::string MetricReport::to_json(int indent) const {
  nlohmann::ordered_json j;
  j["r2"] = optional_json(r2);
  j["mae"] = optional_json(mae);
  j["mse"] = optional_json(mse);
  j["wd"] = optional_json(wd);
  auto rows = nlohmann::ordered_json::array();
  for (const auto& m : per_sample) {
    nlohmann::ordered_json row;
    row["id"] = m.id;
    row["r2"] = optional_json(m.r2);
    row["mae"] = m.mae;
    row["mse"] = m.mse;
    row["wd"] = optional_json(m.wd);
    rows.push_back(std::move(row));
  }
  j["per_sample"] = std::move(rows);
  return j.dump(indent);
}

}  // namespace xtal2dos
