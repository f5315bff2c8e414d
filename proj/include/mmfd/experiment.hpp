#pragma once

// Experiment plans and result tables: modality ablations, audio-encoder
// comparisons and misalignment sweeps. The CLI is a thin layer over this.

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfd/checkpoint.hpp"
#include "mmfd/config.hpp"
#include "mmfd/datagen.hpp"
#include "mmfd/train.hpp"

namespace mmfd {

inline constexpr const char* kToolVersion = "0.1.0";

class PlanError : public ConfigError {
 public:
  explicit PlanError(const std::string& m) : ConfigError("plan: " + m) {}
};

struct Variant {
  ModalityMask mask;
  AudioEncoderKind audio_encoder = AudioEncoderKind::none;

  std::string id() const {
    return audio_encoder == AudioEncoderKind::none ? mask.label() : mask.label() + "/" + to_string(audio_encoder);
  }
  bool operator==(const Variant&) const = default;
};

/// "text+audio", "text+audio:w2v", "all". Audio without an explicit
/// encoder takes `default_encoder`.
inline Variant parse_variant(const std::string& spec, AudioEncoderKind default_encoder) {
  const auto colon = spec.find(':');
  const std::string mods = spec.substr(0, colon);
  Variant v;
  v.mask = {false, false, false, false};
  if (mods == "all") {
    v.mask = {};
  } else {
    std::size_t pos = 0;
    while (pos <= mods.size()) {
      const auto plus = mods.find('+', pos);
      const std::string m = mods.substr(pos, plus == std::string::npos ? std::string::npos : plus - pos);
      if (m == "text") v.mask.text = true;
      else if (m == "audio") v.mask.audio = true;
      else if (m == "video") v.mask.video = true;
      else if (m == "social") v.mask.social = true;
      else throw PlanError("unknown modality '" + m + "' in variant '" + spec + "'");
      if (plus == std::string::npos) break;
      pos = plus + 1;
    }
  }
  if (colon != std::string::npos) {
    try {
      v.audio_encoder = audio_encoder_from_string(spec.substr(colon + 1));
    } catch (const ConfigError&) {
      throw PlanError("unknown audio encoder in variant '" + spec + "'");
    }
    if (v.mask.audio && v.audio_encoder == AudioEncoderKind::none)
      throw PlanError("variant '" + spec + "' requests audio without an encoder");
    if (!v.mask.audio && v.audio_encoder != AudioEncoderKind::none)
      throw PlanError("variant '" + spec + "' names an audio encoder but not the audio modality");
  } else if (v.mask.audio) {
    if (default_encoder == AudioEncoderKind::none) throw PlanError("variant '" + spec + "' requests audio without an encoder");
    v.audio_encoder = default_encoder;
  }
  return v;
}

struct ExperimentPlan {
  std::optional<std::string> corpus_path;  // otherwise generated from corpus_spec
  CorpusSpec corpus_spec;
  ModelConfig base;
  std::vector<Variant> variants;
  std::vector<long> shifts;  // misalignment sweeps only
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = ".";

  void validate() const {
    if (seeds.empty()) throw PlanError("at least one seed is required");
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (std::size_t j = i + 1; j < seeds.size(); ++j)
        if (seeds[i] == seeds[j]) throw PlanError("seed " + std::to_string(seeds[i]) + " listed twice");
    if (variants.empty()) throw PlanError("no variants");
    for (std::size_t i = 0; i < variants.size(); ++i) {
      const auto& v = variants[i];
      if (!v.mask.any()) throw PlanError("variant " + std::to_string(i) + " enables no modality");
      if (v.mask.audio != (v.audio_encoder != AudioEncoderKind::none))
        throw PlanError("variant '" + v.id() + "' requests audio without an encoder");
      for (std::size_t j = 0; j < i; ++j)
        if (variants[j] == v) throw PlanError("variant '" + v.id() + "' listed twice");
    }
  }
};

struct ResultRow {
  Variant variant;
  std::optional<long> shift;
  std::uint64_t seed = 0;
  MetricsReport metrics;
  std::optional<std::size_t> best_epoch;
  double seconds = 0.0;

  std::string id() const {
    if (!shift) return variant.id();
    return variant.id() + "@shift" + (*shift >= 0 ? "+" : "") + std::to_string(*shift);
  }
};

struct Aggregate {
  std::string id;
  Variant variant;
  std::size_t count = 0;
  MetricsReport mean;  // only the four headline fields are filled
  MetricsReport stddev;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  /// One aggregate per distinct row id, in first-appearance order. The
  /// spread is the sample standard deviation (0 for a single seed).
  std::vector<Aggregate> aggregates() const {
    std::vector<Aggregate> out;
    for (const auto& r : rows) {
      if (std::any_of(out.begin(), out.end(), [&](const Aggregate& a) { return a.id == r.id(); })) continue;
      Aggregate a;
      a.id = r.id();
      a.variant = r.variant;
      std::vector<const MetricsReport*> ms;
      for (const auto& q : rows)
        if (q.id() == a.id) ms.push_back(&q.metrics);
      a.count = ms.size();
      auto stat = [&](double MetricsReport::*f, double& mean, double& sd) {
        double s = 0.0;
        for (auto* m : ms) s += m->*f;
        mean = s / static_cast<double>(ms.size());
        double ss = 0.0;
        for (auto* m : ms) ss += (m->*f - mean) * (m->*f - mean);
        sd = ms.size() > 1 ? std::sqrt(ss / static_cast<double>(ms.size() - 1)) : 0.0;
      };
      stat(&MetricsReport::accuracy, a.mean.accuracy, a.stddev.accuracy);
      stat(&MetricsReport::f1, a.mean.f1, a.stddev.f1);
      stat(&MetricsReport::precision, a.mean.precision, a.stddev.precision);
      stat(&MetricsReport::recall, a.mean.recall, a.stddev.recall);
      out.push_back(a);
    }
    return out;
  }
};

// ------------------------------------------------------------- formatting

/// Fixed 4-place decimal, independent of the C locale.
inline std::string fixed4(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 4);
  return std::string(buf, r.ptr);
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline constexpr const char* kCsvHeader = "variant,audio_encoder,audio,text,video,social,seed,accuracy,f1,precision,recall";

inline std::string to_csv(const ResultTable& t) {
  auto line = [](const std::string& id, const Variant& v, const std::string& seed, double acc, double f1, double p,
                 double r) {
    const auto& m = v.mask;
    return id + "," + to_string(v.audio_encoder) + "," + (m.audio ? "1" : "0") + "," + (m.text ? "1" : "0") + "," +
           (m.video ? "1" : "0") + "," + (m.social ? "1" : "0") + "," + seed + "," + fixed4(acc) + "," + fixed4(f1) +
           "," + fixed4(p) + "," + fixed4(r) + "\n";
  };
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : t.rows)
    out += line(r.id(), r.variant, std::to_string(r.seed), r.metrics.accuracy, r.metrics.f1, r.metrics.precision,
                r.metrics.recall);
  for (const auto& a : t.aggregates())
    out += line(a.id, a.variant, "mean", a.mean.accuracy, a.mean.f1, a.mean.precision, a.mean.recall);
  return out;
}

inline nlohmann::json variant_json(const Variant& v) {
  return {{"id", v.id()}, {"modalities", v.mask}, {"audio_encoder", to_string(v.audio_encoder)}};
}

/// Provenance block shared by every report.
inline nlohmann::json provenance(const std::string& command, const ModelConfig& config, const CorpusSpec& spec,
                                 const std::vector<std::uint64_t>& seeds) {
  return {{"tool", "mmfd"},
          {"version", kToolVersion},
          {"command", command},
          {"config_hash", hex64(fnv1a(nlohmann::json(config).dump()))},
          {"corpus_spec_hash", hex64(fnv1a(nlohmann::json(spec).dump()))},
          {"seeds", seeds}};
}

inline nlohmann::json report_json(const ResultTable& t, const nlohmann::json& prov) {
  nlohmann::json rows = nlohmann::json::array(), aggs = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json j{{"id", r.id()}, {"variant", variant_json(r.variant)}, {"seed", r.seed}, {"metrics", r.metrics}};
    j["shift"] = r.shift ? nlohmann::json(*r.shift) : nlohmann::json(nullptr);
    j["best_epoch"] = r.best_epoch ? nlohmann::json(*r.best_epoch) : nlohmann::json(nullptr);
    rows.push_back(j);
  }
  for (const auto& a : t.aggregates()) {
    auto four = [](const MetricsReport& m) {
      return nlohmann::json{{"accuracy", m.accuracy}, {"f1", m.f1}, {"precision", m.precision}, {"recall", m.recall}};
    };
    aggs.push_back({{"id", a.id}, {"variant", variant_json(a.variant)}, {"count", a.count}, {"mean", four(a.mean)},
                    {"std", four(a.stddev)}});
  }
  return {{"provenance", prov}, {"rows", rows}, {"aggregates", aggs}};
}

/// Wall-clock figures live apart from the reports so those stay byte-stable.
inline nlohmann::json timing_json(const ResultTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  double total = 0.0;
  for (const auto& r : t.rows) {
    rows.push_back({{"id", r.id()}, {"seed", r.seed}, {"seconds", r.seconds}});
    total += r.seconds;
  }
  return {{"rows", rows}, {"total_seconds", total}};
}

// ------------------------------------------------------------- execution

inline Corpus load_or_generate(const ExperimentPlan& plan) {
  if (!plan.corpus_path) return {plan.corpus_spec, generate_corpus(plan.corpus_spec)};
  Corpus c = load_corpus(*plan.corpus_path);
  if (!c.spec) throw PlanError("corpus " + *plan.corpus_path + " carries no generation spec; its geometry is unknown");
  return c;
}

inline ModelConfig variant_config(const ExperimentPlan& plan, const CorpusSpec& spec, const Variant& v,
                                  std::uint64_t seed) {
  ModelConfig c = adapt_config(plan.base, spec);
  c.modalities = v.mask;
  c.audio_encoder = v.audio_encoder;
  c.seed = seed;
  c.validate();
  return c;
}

using Progress = std::function<void(const std::string&)>;

struct TrainedArm {
  Checkpoint checkpoint;
  TrainHistory history;
  double seconds = 0.0;
};

inline TrainedArm train_arm(const ModelConfig& c, const Splits& splits, const std::string& label,
                            const Progress& progress) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cb = [&](const EpochRecord& e) {
    if (progress)
      progress(label + " epoch " + std::to_string(e.epoch) + " loss " + fixed4(e.train_loss) + " val_acc " +
               fixed4(e.validation.accuracy));
  };
  TrainResult r = train(c, splits.train, splits.val, cb);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(r.checkpoint), std::move(r.history), secs};
}

/// Retrains one model per (variant, seed) and scores it on the test split.
/// Rows are ordered by variant, then seed.
inline ResultTable run_ablation(const ExperimentPlan& plan, const Corpus& corpus, const Progress& progress = {}) {
  plan.validate();
  const CorpusSpec& spec = *corpus.spec;
  const Splits splits = chronological_split(corpus.samples);
  ResultTable t;
  for (const auto& v : plan.variants)
    for (auto seed : plan.seeds) {
      const ModelConfig c = variant_config(plan, spec, v, seed);
      const std::string label = v.id() + " seed " + std::to_string(seed);
      TrainedArm arm = train_arm(c, splits, label, progress);
      ResultRow row{v, std::nullopt, seed, evaluate(arm.checkpoint, splits.test), arm.history.best_epoch, arm.seconds};
      if (progress) progress(label + " test_acc " + fixed4(row.metrics.accuracy));
      t.rows.push_back(row);
    }
  return t;
}

/// Expands each audio-bearing mask into a vgg arm and a w2v arm.
inline std::vector<Variant> encoder_arms(const std::vector<Variant>& masks) {
  std::vector<Variant> out;
  for (const auto& m : masks) {
    if (!m.mask.audio) throw PlanError("compare-audio: variant '" + m.mask.label() + "' has no audio modality");
    for (auto e : {AudioEncoderKind::vgg, AudioEncoderKind::w2v}) {
      Variant v{m.mask, e};
      if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    }
  }
  return out;
}

inline void validate_shifts(const std::vector<long>& shifts, const CorpusSpec& spec) {
  if (shifts.empty()) throw PlanError("misalignment sweep needs at least one shift");
  const auto units = static_cast<long>(spec.waveform_hops);
  for (long s : shifts)
    if (s < -units || s > units)
      throw PlanError("shift " + std::to_string(s) + " exceeds the audio length of " + std::to_string(units) +
                      " hop units");
}

/// Default sweep: 0 to half the waveform in steps of a quarter of that.
inline std::vector<long> default_shifts(const CorpusSpec& spec) {
  const auto half = static_cast<long>(spec.waveform_hops / 2);
  std::vector<long> out{0};
  const long step = std::max(1L, half / 4);
  for (long s = step; s < half; s += step) out.push_back(s);
  if (half > 0) out.push_back(half);
  return out;
}

struct SweepResult {
  ResultTable table;
  std::vector<std::pair<long, double>> curve;  // shift, mean accuracy over seeds
};

/// Trains on aligned data, then scores the test split with its audio
/// circularly shifted by each entry of plan.shifts.
inline SweepResult run_misalignment(const ExperimentPlan& plan, const Corpus& corpus, const Progress& progress = {}) {
  plan.validate();
  const CorpusSpec& spec = *corpus.spec;
  validate_shifts(plan.shifts, spec);
  for (const auto& v : plan.variants)
    if (!v.mask.audio) throw PlanError("misalign: variant '" + v.id() + "' has no audio to shift");
  const Splits splits = chronological_split(corpus.samples);
  SweepResult out;
  std::vector<std::vector<double>> acc(plan.shifts.size());
  for (const auto& v : plan.variants)
    for (auto seed : plan.seeds) {
      const ModelConfig c = variant_config(plan, spec, v, seed);
      const std::string label = v.id() + " seed " + std::to_string(seed);
      TrainedArm arm = train_arm(c, splits, label, progress);
      const auto model = instantiate(arm.checkpoint);
      for (std::size_t k = 0; k < plan.shifts.size(); ++k) {
        std::vector<MultimodalSample> shifted;
        shifted.reserve(splits.test.size());
        for (const auto& s : splits.test) shifted.push_back(inject_misalignment(s, plan.shifts[k], spec.hop));
        ResultRow row{v, plan.shifts[k], seed, evaluate(*model, shifted), arm.history.best_epoch,
                      k == 0 ? arm.seconds : 0.0};
        if (progress) progress(row.id() + " seed " + std::to_string(seed) + " test_acc " + fixed4(row.metrics.accuracy));
        acc[k].push_back(row.metrics.accuracy);
        out.table.rows.push_back(row);
      }
    }
  for (std::size_t k = 0; k < plan.shifts.size(); ++k) {
    double s = 0.0;
    for (double a : acc[k]) s += a;
    out.curve.emplace_back(plan.shifts[k], s / static_cast<double>(acc[k].size()));
  }
  return out;
}

inline std::string curve_csv(const std::vector<std::pair<long, double>>& curve) {
  std::string out = "shift,accuracy\n";
  for (const auto& [s, a] : curve) out += std::to_string(s) + "," + fixed4(a) + "\n";
  return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) { binio::write_file(p.string(), s); }

}  // namespace mmfd
