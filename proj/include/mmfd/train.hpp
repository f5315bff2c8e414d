#pragma once

// Cross-entropy training with AdamW, chronological splitting and
// validation-based model selection.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfd/checkpoint.hpp"
#include "mmfd/metrics.hpp"
#include "mmfd/optim.hpp"

namespace mmfd {

/// -log softmax(logits)[label] for a two-way logit vector.
inline Tensor cross_entropy(const Tensor& logits, int label) {
  if (label != kLabelReal && label != kLabelFake)
    throw InputError("cross_entropy: label " + std::to_string(label) + " is not in {0, 1}");
  if (logits.numel() != 2) throw ShapeError("cross_entropy: expected 2 logits, got shape " + shape_str(logits.shape()));
  const double a = logits[0], b = logits[1];
  if (!std::isfinite(a) || !std::isfinite(b)) throw NumericError("cross_entropy: non-finite logits");
  const double mx = std::max(a, b);
  const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
  const double p0 = std::exp(a - lse), p1 = std::exp(b - lse);
  const double loss = lse - (label == 0 ? a : b);
  return detail::make_result({1}, {loss}, {logits}, [logits, p0, p1, label](detail::Node& n) {
    const double g = n.grad[0];
    auto& lg = logits.node()->grad_buffer();
    lg[0] += g * (p0 - (label == 0 ? 1.0 : 0.0));
    lg[1] += g * (p1 - (label == 1 ? 1.0 : 0.0));
  });
}

struct Splits {
  std::vector<MultimodalSample> train, val, test;
};

/// Sorts by timestamp (stable) and cuts floor(0.70 n) / floor(0.15 n) / rest.
inline Splits chronological_split(std::vector<MultimodalSample> samples) {
  const std::size_t n = samples.size();
  if (n < 3) throw InputError("chronological_split: need at least 3 samples, got " + std::to_string(n));
  std::stable_sort(samples.begin(), samples.end(),
                   [](const MultimodalSample& a, const MultimodalSample& b) { return a.timestamp < b.timestamp; });
  // integer arithmetic avoids 0.7*n rounding surprises
  const std::size_t n_train = n * 70 / 100;
  const std::size_t n_val = n * 15 / 100;
  Splits s;
  auto it = std::make_move_iterator(samples.begin());
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(it + static_cast<std::ptrdiff_t>(n_train), it + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(it + static_cast<std::ptrdiff_t>(n_train + n_val), std::make_move_iterator(samples.end()));
  return s;
}

/// Argmax of a [2] logit pair; a tie goes to real.
inline int predicted_class(const Tensor& logits) { return logits[1] > logits[0] ? kLabelFake : kLabelReal; }

/// Argmax class per sample, no dropout, no graph.
inline std::vector<int> predict(const FusionModel& model, const std::vector<PreparedSample>& samples) {
  NoGradGuard guard;
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& p : samples) {
    out.push_back(predicted_class(model.forward(p)));
  }
  return out;
}

inline std::vector<PreparedSample> prepare_all(const std::vector<MultimodalSample>& samples, const ModelConfig& c) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(prepare(s, c));
  return out;
}

inline MetricsReport evaluate_prepared(const FusionModel& model, const std::vector<PreparedSample>& samples) {
  if (samples.empty()) throw InputError("evaluate: no samples");
  std::vector<int> labels;
  for (const auto& p : samples) labels.push_back(p.sample->label);
  return compute_metrics(predict(model, samples), labels);
}

inline MetricsReport evaluate(const FusionModel& model, const std::vector<MultimodalSample>& samples) {
  if (samples.empty()) throw InputError("evaluate: no samples");
  return evaluate_prepared(model, prepare_all(samples, model.config()));
}

inline MetricsReport evaluate(const Checkpoint& ck, const std::vector<MultimodalSample>& samples) {
  return evaluate(*instantiate(ck), samples);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean per-sample loss over the epoch
  MetricsReport validation;
};

struct TrainHistory {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"validation", r.validation}};
}
inline void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<std::size_t>();
  r.train_loss = j.at("train_loss").get<double>();
  r.validation = j.at("validation").get<MetricsReport>();
}
inline void to_json(nlohmann::json& j, const TrainHistory& h) {
  j = {{"config", h.config}, {"seed", h.seed}, {"epochs", h.epochs}};
  j["best_epoch"] = h.best_epoch ? nlohmann::json(*h.best_epoch) : nlohmann::json(nullptr);
}
inline void from_json(const nlohmann::json& j, TrainHistory& h) {
  h.config = j.at("config").get<ModelConfig>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.epochs = j.at("epochs").get<std::vector<EpochRecord>>();
  h.best_epoch.reset();
  if (!j.at("best_epoch").is_null()) h.best_epoch = j.at("best_epoch").get<std::size_t>();
}

/// Index of the highest validation accuracy, earliest on ties.
inline std::optional<std::size_t> select_best_epoch(const std::vector<EpochRecord>& epochs) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < epochs.size(); ++i)
    if (!best || epochs[i].validation.accuracy > epochs[*best].validation.accuracy) best = i;
  return best;
}

class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, double loss)
      : NumericError("training diverged: non-finite loss " + std::to_string(loss) + " at epoch " +
                     std::to_string(epoch) + ", batch " + std::to_string(batch)),
        epoch(epoch),
        batch(batch),
        loss(loss) {}
  std::size_t epoch, batch;
  double loss;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline AdamWOptions adamw_options(const ModelConfig& c) {
  return {c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay};
}

/// Mini-batch AdamW on `train`, validating after every epoch. Returns the
/// parameters of the best validation epoch (the initialization when
/// epochs == 0).
inline TrainResult train(const ModelConfig& config, const std::vector<MultimodalSample>& train_set,
                         const std::vector<MultimodalSample>& val_set, const EpochCallback& on_epoch = {}) {
  config.validate();
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (config.epochs > 0 && (train_set.empty() || val_set.empty()))
    throw InputError("train: training and validation splits must be non-empty");

  FusionModel model(config);
  TrainResult result;
  result.history.config = config;
  result.history.seed = config.seed;
  result.checkpoint = snapshot(model);
  if (config.epochs == 0) return result;

  const auto prepared_train = prepare_all(train_set, config);
  const auto prepared_val = prepare_all(val_set, config);
  const auto& params = model.params().all();
  AdamWState opt = make_adamw_state(params, adamw_options(config));
  std::vector<std::size_t> order(prepared_train.size());
  const double best_sentinel = -1.0;
  double best_acc = best_sentinel;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler(config.seed, {0x5348554646ULL, epoch});
    shuffler.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      model.params().zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        Rng drop(config.seed, {0x44524f50ULL, epoch, idx});
        ForwardContext ctx{true, config.dropout, &drop};
        const PreparedSample& p = prepared_train[idx];
        Tensor logits;
        try {
          logits = model.forward(p, ctx);
        } catch (const NumericError&) {
          // non-finite activations inside the network
          throw DivergenceError(epoch, batch_index, std::numeric_limits<double>::quiet_NaN());
        }
        if (!std::isfinite(logits[0]) || !std::isfinite(logits[1]))
          throw DivergenceError(epoch, batch_index, logits[0] + logits[1]);
        Tensor loss = cross_entropy(logits, p.sample->label);
        const double l = loss.item();
        if (!std::isfinite(l)) throw DivergenceError(epoch, batch_index, l);
        loss_sum += l;
        backward(scale(loss, inv_b));
      }
      adamw_step(params, opt);
    }
    model.params().zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.validation = evaluate_prepared(model, prepared_val);
    result.history.epochs.push_back(rec);
    if (rec.validation.accuracy > best_acc) {
      best_acc = rec.validation.accuracy;
      result.history.best_epoch = epoch;
      result.checkpoint = snapshot(model);
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace mmfd
