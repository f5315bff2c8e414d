// mmfd: corpus generation, training, evaluation and experiment tables.
//
// Exit codes: 0 success, 1 usage error, 2 validation or plan error,
// 3 numeric failure (divergence, gradient check above threshold).

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mmfd/experiment.hpp"
#include "mmfd/grad_check.hpp"

namespace fs = std::filesystem;
using namespace mmfd;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitPlan = 2, kExitNumeric = 3;

json read_json_file(const std::string& path) {
  const std::string text = binio::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// Flags that describe where the corpus comes from. A plan file may set the
// same fields; explicit flags win.
struct CorpusFlags {
  std::string path, spec_file;
  std::optional<std::size_t> n_samples, n_topics;
  std::optional<double> noise, fake_fraction;
  std::optional<std::uint64_t> seed;
  bool social_signal = false;

  void add(CLI::App* app, bool with_path = true) {
    if (with_path) app->add_option("--corpus", path, "Corpus file written by 'mmfd gen'");
    app->add_option("--corpus-spec", spec_file, "JSON corpus spec used when no --corpus is given");
    app->add_option("--n-samples", n_samples, "Posts to generate");
    app->add_option("--topics", n_topics, "Hidden topic codes");
    app->add_option("--noise", noise, "White-noise std on audio and frames");
    app->add_option("--fake-fraction", fake_fraction, "Share of fake posts");
    app->add_option("--corpus-seed", seed, "Generator seed");
    app->add_flag("--social-signal", social_signal, "Leak the label into comment tokens");
  }

  CorpusSpec spec(CorpusSpec s) const {
    if (!spec_file.empty()) s = read_json_file(spec_file).get<CorpusSpec>();
    if (n_samples) s.n_samples = *n_samples;
    if (n_topics) s.n_topics = *n_topics;
    if (noise) s.noise_level = *noise;
    if (fake_fraction) s.fake_fraction = *fake_fraction;
    if (seed) s.seed = *seed;
    if (social_signal) s.social_signal = true;
    return s;
  }
};

struct ConfigFlags {
  std::string file, audio_encoder;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr, dropout;

  void add(CLI::App* app) {
    app->add_option("--config", file, "JSON model config; missing fields keep their defaults");
    app->add_option("--audio-encoder", audio_encoder, "Default audio encoder (vgg, w2v)");
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--batch-size", batch_size, "Mini-batch size");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--dropout", dropout, "Dropout rate");
  }

  ModelConfig apply(ModelConfig c) const {
    if (!file.empty()) read_json_file(file).get_to(c);
    if (!audio_encoder.empty()) c.audio_encoder = audio_encoder_from_string(audio_encoder);
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (lr) c.lr = *lr;
    if (dropout) c.dropout = *dropout;
    return c;
  }
};

struct PlanFlags {
  std::string plan_file, out;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<long> shifts;
  bool quiet = false;
  CorpusFlags corpus;
  ConfigFlags config;

  void add(CLI::App* app, bool with_shifts) {
    app->add_option("--plan", plan_file, "JSON experiment plan");
    app->add_option("--out", out, "Output directory");
    app->add_option("--variants", variants, "Modality masks, e.g. text,text+audio:w2v")->delimiter(',');
    app->add_option("--seeds", seeds, "Model seeds, one run per seed")->delimiter(',');
    if (with_shifts) app->add_option("--shifts", shifts, "Audio shifts in hop units")->delimiter(',');
    app->add_flag("--quiet", quiet, "No progress output");
    corpus.add(app);
    config.add(app);
  }

  ExperimentPlan build(const std::vector<std::string>& default_variants) const {
    ExperimentPlan p;
    std::vector<std::string> variant_specs = default_variants;
    if (!plan_file.empty()) {
      const json j = read_json_file(plan_file);
      try {
        if (j.contains("corpus")) {
          if (j.at("corpus").is_string()) p.corpus_path = j.at("corpus").get<std::string>();
          else p.corpus_spec = j.at("corpus").get<CorpusSpec>();
        }
        if (j.contains("config")) j.at("config").get_to(p.base);
        if (j.contains("variants")) variant_specs = j.at("variants").get<std::vector<std::string>>();
        if (j.contains("seeds")) p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("shifts")) p.shifts = j.at("shifts").get<std::vector<long>>();
        if (j.contains("out")) p.out_dir = j.at("out").get<std::string>();
      } catch (const json::exception& e) {
        throw PlanError(plan_file + ": " + e.what());
      }
    }
    if (!corpus.path.empty()) p.corpus_path = corpus.path;
    p.corpus_spec = corpus.spec(p.corpus_spec);
    p.base = config.apply(p.base);
    if (!variants.empty()) variant_specs = variants;
    if (!seeds.empty()) p.seeds = seeds;
    if (!shifts.empty()) p.shifts = shifts;
    if (!out.empty()) p.out_dir = out;
    for (const auto& v : variant_specs) p.variants.push_back(parse_variant(v, p.base.audio_encoder));
    return p;
  }

  Progress progress() const {
    if (quiet) return {};
    return [](const std::string& m) { std::cerr << m << std::endl; };
  }
};

void write_table(const fs::path& dir, const std::string& command, const ExperimentPlan& plan, const CorpusSpec& spec,
                 const ResultTable& t) {
  fs::create_directories(dir);
  write_text(dir / "results.csv", to_csv(t));
  const json report = report_json(t, provenance(command, adapt_config(plan.base, spec), spec, plan.seeds));
  write_text(dir / "report.json", report.dump(2) + "\n");
  write_text(dir / "timing.json", timing_json(t).dump(2) + "\n");
}

// ------------------------------------------------------------------ verbs

int cmd_gen(const CorpusFlags& f, const std::string& out) {
  const CorpusSpec spec = f.spec(CorpusSpec{});
  const Corpus c{spec, generate_corpus(spec)};
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_corpus(c, out);
  std::cout << "wrote " << c.samples.size() << " posts (" << fake_count(spec) << " fake) to " << out << "\n";
  return kExitOk;
}

Corpus corpus_from(const CorpusFlags& f) {
  if (!f.path.empty()) {
    Corpus c = load_corpus(f.path);
    if (!c.spec) throw PlanError("corpus " + f.path + " carries no generation spec; its geometry is unknown");
    return c;
  }
  const CorpusSpec spec = f.spec(CorpusSpec{});
  return {spec, generate_corpus(spec)};
}

int cmd_train(const CorpusFlags& cf, const ConfigFlags& mf, std::uint64_t seed, const std::string& out, bool quiet) {
  const Corpus corpus = corpus_from(cf);
  ModelConfig c = adapt_config(mf.apply(ModelConfig{}), *corpus.spec);
  c.seed = seed;
  if (!c.modalities.audio) c.audio_encoder = AudioEncoderKind::none;
  c.validate();
  const Splits splits = chronological_split(corpus.samples);
  Progress progress;
  if (!quiet) progress = [](const std::string& m) { std::cerr << m << std::endl; };
  const TrainedArm arm = train_arm(c, splits, "train", progress);

  const fs::path dir(out);
  fs::create_directories(dir);
  save_checkpoint(arm.checkpoint, (dir / "checkpoint.bin").string());
  json h = arm.history;
  h["provenance"] = provenance("train", c, *corpus.spec, {seed});
  write_text(dir / "history.json", h.dump(2) + "\n");
  write_text(dir / "timing.json", json{{"seconds", arm.seconds}}.dump(2) + "\n");
  if (arm.history.best_epoch)
    std::cout << "best epoch " << *arm.history.best_epoch << " val_acc "
              << fixed4(arm.history.epochs[*arm.history.best_epoch].validation.accuracy) << "\n";
  else
    std::cout << "no training epochs; wrote the initial parameters\n";
  return kExitOk;
}

int cmd_eval(const CorpusFlags& cf, const std::string& ck_path, const std::string& split, long shift,
             const std::string& out) {
  const Checkpoint ck = load_checkpoint(ck_path);
  const Corpus corpus = corpus_from(cf);
  const Splits splits = chronological_split(corpus.samples);
  std::vector<MultimodalSample> set;
  if (split == "train") set = splits.train;
  else if (split == "val") set = splits.val;
  else if (split == "test") set = splits.test;
  else set = corpus.samples;
  if (shift != 0) {
    validate_shifts({shift}, *corpus.spec);
    for (auto& s : set) s = inject_misalignment(std::move(s), shift, corpus.spec->hop);
  }
  const MetricsReport m = evaluate(ck, set);
  json report{{"provenance", provenance("eval", ck.config, *corpus.spec, {ck.config.seed})},
              {"checkpoint", ck_path},
              {"split", split},
              {"shift", shift},
              {"metrics", m}};
  if (out.empty()) {
    std::cout << report.dump(2) << "\n";
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_text(out, report.dump(2) + "\n");
    std::cout << split << " accuracy " << fixed4(m.accuracy) << " f1 " << fixed4(m.f1) << "\n";
  }
  return kExitOk;
}

int cmd_ablate(const PlanFlags& f) {
  const ExperimentPlan plan = f.build({"text", "text+audio", "text+video", "text+audio+video", "all"});
  plan.validate();
  const Corpus corpus = load_or_generate(plan);
  const ResultTable t = run_ablation(plan, corpus, f.progress());
  write_table(plan.out_dir, "ablate", plan, *corpus.spec, t);
  std::cout << to_csv(t);
  return kExitOk;
}

int cmd_compare_audio(const PlanFlags& f) {
  ExperimentPlan plan = f.build({"text+audio"});
  plan.variants = encoder_arms(plan.variants);
  plan.validate();
  const Corpus corpus = load_or_generate(plan);
  const ResultTable t = run_ablation(plan, corpus, f.progress());
  write_table(plan.out_dir, "compare-audio", plan, *corpus.spec, t);
  std::cout << to_csv(t);
  return kExitOk;
}

int cmd_misalign(const PlanFlags& f) {
  ExperimentPlan plan = f.build({"text+audio+video"});
  plan.validate();
  const Corpus corpus = load_or_generate(plan);
  if (plan.shifts.empty()) plan.shifts = default_shifts(*corpus.spec);
  const SweepResult r = run_misalignment(plan, corpus, f.progress());
  write_table(plan.out_dir, "misalign", plan, *corpus.spec, r.table);
  write_text(fs::path(plan.out_dir) / "curve.csv", curve_csv(r.curve));
  std::cout << curve_csv(r.curve);
  return kExitOk;
}

struct GradcheckFlags {
  std::string model = "fusion", config_file, audio_encoder, out;
  double threshold = 1e-3;
  std::uint64_t seed = 0;
};

// Small posts for the finite-difference check: short sequences keep the
// sweep over every parameter cheap.
CorpusSpec gradcheck_corpus(std::uint64_t seed) {
  CorpusSpec s;
  s.n_samples = 2;
  s.n_topics = 2;
  s.seed = seed;
  s.text_len = 6;
  s.user_len = 3;
  s.max_comment_len = 3;
  s.vocab_size = 64;
  s.waveform_hops = 8;
  s.window_end = 4;
  s.n_frames = 4;
  return s;
}

int cmd_gradcheck(const GradcheckFlags& f) {
  GradReport r;
  json prov;
  if (f.model == "linear") {
    ParamSet ps(f.seed);
    Linear lin(ps, "linear", 5, 2);
    Rng rng(f.seed, {0x4c494eULL});
    std::vector<double> xv(5);
    for (auto& v : xv) v = rng.normal();
    const Tensor x({1, 5}, xv);
    r = grad_check([&] { return cross_entropy(reshape(lin(x), {2}), kLabelFake); }, ps.all());
    prov = {{"tool", "mmfd"}, {"version", kToolVersion}, {"command", "gradcheck"}, {"seeds", {f.seed}}};
  } else if (f.model == "fusion") {
    ModelConfig c = ModelConfig::minimal();
    if (!f.config_file.empty()) read_json_file(f.config_file).get_to(c);
    if (!f.audio_encoder.empty()) c.audio_encoder = audio_encoder_from_string(f.audio_encoder);
    const CorpusSpec spec = gradcheck_corpus(f.seed);
    c = adapt_config(c, spec);
    c.seed = f.seed;
    c.dropout = 0.0;
    c.validate();
    FusionModel model(c);
    // Off the init point: zero biases leave relu inputs exactly on the kink,
    // where a central difference reads half a slope.
    Rng rng(f.seed, {0x4a4954ULL});
    for (const auto& np : model.params().all()) {
      Tensor t = np.second;
      for (auto& v : t.mutable_values()) v += 0.05 * rng.uniform(-1.0, 1.0);
    }
    const auto samples = generate_corpus(spec);
    std::vector<PreparedSample> prepared;
    for (const auto& s : samples) prepared.push_back(prepare(s, c));
    auto loss = [&] {
      Tensor total = cross_entropy(model.forward(prepared[0]), samples[0].label);
      for (std::size_t i = 1; i < prepared.size(); ++i)
        total = add(total, cross_entropy(model.forward(prepared[i]), samples[i].label));
      return scale(total, 1.0 / static_cast<double>(prepared.size()));
    };
    r = grad_check(loss, model.params().all());
    prov = provenance("gradcheck", c, spec, {f.seed});
  } else {
    throw PlanError("gradcheck: unknown model '" + f.model + "' (fusion, linear)");
  }
  const bool pass = r.max_rel_err < f.threshold;
  const json report{{"provenance", prov},        {"model", f.model},          {"checked", r.checked},
                    {"max_abs_err", r.max_abs_err}, {"max_rel_err", r.max_rel_err}, {"worst_param", r.worst_param},
                    {"threshold", f.threshold},  {"pass", pass}};
  if (!f.out.empty()) write_text(f.out, report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return pass ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal misinformation detection: corpus, training and experiment tables"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
  CorpusFlags gen_flags;
  std::string gen_out;
  gen_flags.add(gen, false);
  gen->add_option("--out", gen_out, "Corpus file to write")->required();

  auto* train_cmd = app.add_subcommand("train", "Train one model and write its best checkpoint");
  CorpusFlags train_corpus;
  ConfigFlags train_config;
  std::uint64_t train_seed = 0;
  std::string train_out;
  bool train_quiet = false;
  train_corpus.add(train_cmd);
  train_config.add(train_cmd);
  train_cmd->add_option("--seed", train_seed, "Model seed");
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_flag("--quiet", train_quiet, "No progress output");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a split");
  CorpusFlags eval_corpus;
  std::string eval_ck, eval_split = "test", eval_out;
  long eval_shift = 0;
  eval_corpus.add(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_ck, "Checkpoint file")->required();
  eval_cmd->add_option("--split", eval_split, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval_cmd->add_option("--shift", eval_shift, "Circular audio shift in hop units");
  eval_cmd->add_option("--out", eval_out, "Report file (default: stdout)");

  auto* ablate = app.add_subcommand("ablate", "Retrain per modality combination");
  PlanFlags ablate_flags;
  ablate_flags.add(ablate, false);

  auto* compare = app.add_subcommand("compare-audio", "vgg against w2v per modality mask");
  PlanFlags compare_flags;
  compare_flags.add(compare, false);

  auto* misalign = app.add_subcommand("misalign", "Accuracy under shifted test audio");
  PlanFlags misalign_flags;
  misalign_flags.add(misalign, true);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  GradcheckFlags gc_flags;
  gc->add_option("--model", gc_flags.model, "fusion or linear");
  gc->add_option("--config", gc_flags.config_file, "JSON overrides on the minimal config");
  gc->add_option("--audio-encoder", gc_flags.audio_encoder, "vgg or w2v");
  gc->add_option("--threshold", gc_flags.threshold, "Largest acceptable relative error");
  gc->add_option("--seed", gc_flags.seed, "Parameter and data seed");
  gc->add_option("--out", gc_flags.out, "Also write the report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_flags, gen_out);
    if (train_cmd->parsed()) return cmd_train(train_corpus, train_config, train_seed, train_out, train_quiet);
    if (eval_cmd->parsed()) return cmd_eval(eval_corpus, eval_ck, eval_split, eval_shift, eval_out);
    if (ablate->parsed()) return cmd_ablate(ablate_flags);
    if (compare->parsed()) return cmd_compare_audio(compare_flags);
    if (misalign->parsed()) return cmd_misalign(misalign_flags);
    if (gc->parsed()) return cmd_gradcheck(gc_flags);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const OracleInvalidError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    // config, plan, input, parse and I/O failures
    std::cerr << "error: " << e.what() << "\n";
    return kExitPlan;
  }
  return kExitUsage;
}
