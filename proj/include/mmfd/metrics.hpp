#pragma once

#include <cmath>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "mmfd/sample.hpp"
#include "mmfd/tensor.hpp"

namespace mmfd {

/// Binary classification metrics; "fake" (1) is the positive class for the
/// raw counts. accuracy/precision/recall/f1 are macro averages over
/// {real, fake}: precision and recall are unweighted means of the per-class
/// values and f1 is the unweighted mean of the per-class F1 scores.
struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double precision_fake = 0.0;
  double recall_fake = 0.0;
  double f1_fake = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t n() const { return tp + fp + tn + fn; }
  bool operator==(const MetricsReport&) const = default;
};

namespace detail {
inline double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}
inline double harmonic(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }
}  // namespace detail

inline MetricsReport metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  MetricsReport m;
  m.tp = tp;
  m.fp = fp;
  m.tn = tn;
  m.fn = fn;
  m.accuracy = detail::ratio(tp + tn, m.n());
  m.precision_fake = detail::ratio(tp, tp + fp);
  m.recall_fake = detail::ratio(tp, tp + fn);
  m.f1_fake = detail::harmonic(m.precision_fake, m.recall_fake);
  const double precision_real = detail::ratio(tn, tn + fn);
  const double recall_real = detail::ratio(tn, tn + fp);
  m.precision = (precision_real + m.precision_fake) / 2.0;
  m.recall = (recall_real + m.recall_fake) / 2.0;
  m.f1 = (detail::harmonic(precision_real, recall_real) + m.f1_fake) / 2.0;
  return m;
}

inline MetricsReport compute_metrics(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ShapeError("compute_metrics: prediction/label count mismatch");
  if (predictions.empty()) throw InputError("compute_metrics: no predictions");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool pred_fake = predictions[i] == kLabelFake;
    const bool is_fake = labels[i] == kLabelFake;
    if (pred_fake && is_fake) ++tp;
    else if (pred_fake) ++fp;
    else if (is_fake) ++fn;
    else ++tn;
  }
  return metrics_from_counts(tp, fp, tn, fn);
}

inline void to_json(nlohmann::json& j, const MetricsReport& m) {
  j = nlohmann::json{{"accuracy", m.accuracy},
                     {"precision", m.precision},
                     {"recall", m.recall},
                     {"f1", m.f1},
                     {"averaging", "macro"},
                     {"precision_fake", m.precision_fake},
                     {"recall_fake", m.recall_fake},
                     {"f1_fake", m.f1_fake},
                     {"tp", m.tp},
                     {"fp", m.fp},
                     {"tn", m.tn},
                     {"fn", m.fn},
                     {"n", m.n()}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& m) {
  m = metrics_from_counts(j.at("tp").get<std::size_t>(), j.at("fp").get<std::size_t>(), j.at("tn").get<std::size_t>(),
                          j.at("fn").get<std::size_t>());
}

}  // namespace mmfd
