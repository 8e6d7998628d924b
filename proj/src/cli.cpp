#include "dport/cli.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dport/errors.hpp"
#include "dport/pipeline.hpp"
#include "dport/plots.hpp"
#include "dport/util.hpp"

namespace dport::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kPartitionStream = 8;
constexpr std::uint64_t kBootstrapStream = 9;

struct Paths {
  fs::path gp_train, gp_test, sp, generic, stats;
  fs::path vocab, lm_pretrained, vocab_finetuned, lm_finetuned, classifier, classifier_vocab;

  explicit Paths(const RunConfig& c)
      : gp_train(c.data_dir / "gp_train.jsonl"),
        gp_test(c.data_dir / "gp_test.jsonl"),
        sp(c.data_dir / "sp.jsonl"),
        generic(c.data_dir / "generic.txt"),
        stats(c.data_dir / "stats.json"),
        vocab(c.model_dir / "vocab.json"),
        lm_pretrained(c.model_dir / "lm_pretrained.bin"),
        vocab_finetuned(c.model_dir / "vocab_finetuned.json"),
        lm_finetuned(c.model_dir / "lm_finetuned.bin"),
        classifier(c.model_dir / "classifier.bin"),
        classifier_vocab(c.model_dir / "classifier_vocab.json") {}
};

void need(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) {
    throw MissingArtifact("missing " + p.string() + "; run `" + producer + "` first");
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << text;
  if (!out) throw ValidationError("write failed for " + p.string());
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw ValidationError("cannot create directory " + p.string());
}

nlohmann::json hashes(const std::vector<fs::path>& files) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : files) j[f.filename().string()] = sha256_file(f);
  return j;
}

void write_manifest(const fs::path& dir, const std::string& stage, const RunConfig& cfg,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                    std::chrono::steady_clock::time_point started, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json m{{"stage", stage},
                   {"created_utc", utc_timestamp()},
                   {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()},
                   {"seed", cfg.seed},
                   {"config_sha256", cfg.hash()},
                   {"inputs", hashes(inputs)},
                   {"outputs", hashes(outputs)}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_json(dir / (stage + "_manifest.json"), m);
}

nlohmann::json trace_json(const std::vector<PerplexityPoint>& trace) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& p : trace) {
    nlohmann::json row{{"epoch", p.epoch}, {"train_ppl", p.train_ppl}};
    if (p.valid_ppl) row["valid_ppl"] = *p.valid_ppl;
    j.push_back(row);
  }
  return j;
}

std::string cell(const nlohmann::json& v) {
  if (v.is_number()) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << v.get<double>();
    return s.str();
  }
  if (v.is_object() && v.contains("undefined")) return "n/a";
  if (v.is_null()) return "";
  return v.dump();
}

}  // namespace

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::pretrain_lm: return "pretrain-lm";
    case Stage::finetune_lm: return "finetune-lm";
    case Stage::train_clf: return "train-clf";
  }
  return "pretrain-lm";
}

Stage parse_stage(std::string_view s) {
  for (auto st : {Stage::pretrain_lm, Stage::finetune_lm, Stage::train_clf}) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

// -- synth ------------------------------------------------------------------------------

nlohmann::json cmd_synth(const RunConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  const Paths p(cfg);
  make_dir(cfg.data_dir);
  auto [gp, sp] = gp_sp_pair(cfg.gp, cfg.sp);
  auto [train, test] = partition_speaker_disjoint(gp, cfg.test_fraction, derive_seed(cfg.seed, kPartitionStream));
  save_corpus(train, p.gp_train);
  save_corpus(test, p.gp_test);
  save_corpus(sp, p.sp);
  std::string generic;
  for (const auto& d : generate_generic_text(cfg.generic)) generic += d + "\n";
  write_text(p.generic, generic);
  const nlohmann::json stats{{"gp_train", corpus_stats(train).to_json()},
                             {"gp_test", corpus_stats(test).to_json()},
                             {"sp", corpus_stats(sp).to_json()}};
  write_json(p.stats, stats);
  write_manifest(cfg.data_dir, "synth", cfg, {}, {p.gp_train, p.gp_test, p.sp, p.generic, p.stats}, started,
                 {{"spec_sha256", {{"gp", cfg.gp.hash()}, {"sp", cfg.sp.hash()}}},
                  {"age_overlap", overlap_coefficient(cfg.gp.age, cfg.sp.age)}});
  return {{"stage", "synth"},
          {"data_dir", cfg.data_dir.string()},
          {"sessions", {{"gp_train", train.session_count()}, {"gp_test", test.session_count()}, {"sp", sp.session_count()}}},
          {"stats", stats}};
}

// -- train ------------------------------------------------------------------------------

nlohmann::json cmd_train(const RunConfig& cfg, Stage stage, bool skip_finetune) {
  const auto started = std::chrono::steady_clock::now();
  const Paths p(cfg);
  make_dir(cfg.model_dir);
  const std::string name(to_string(stage));
  nlohmann::json summary{{"stage", name}};

  if (stage == Stage::pretrain_lm) {
    need(p.generic, "synth");
    const auto generic = DocumentSource::from_lines(p.generic);
    const auto out = pretrain_language_model(generic, cfg.vocab, cfg.lm);
    out.vocab.save(p.vocab);
    out.params.save(p.lm_pretrained);
    const auto trace_path = cfg.model_dir / "pretrain_trace.csv";
    write_text(trace_path, perplexity_trace_csv(out.trace));
    const nlohmann::json metrics{{"vocab_size", out.vocab.size()},
                                 {"vocab_sha256", out.vocab.hash()},
                                 {"trace", trace_json(out.trace)}};
    const auto metrics_path = cfg.model_dir / "pretrain_metrics.json";
    write_json(metrics_path, metrics);
    write_manifest(cfg.model_dir, "pretrain", cfg, {p.generic}, {p.vocab, p.lm_pretrained, trace_path, metrics_path},
                   started);
    summary["metrics"] = metrics;
  } else if (stage == Stage::finetune_lm) {
    need(p.lm_pretrained, "train --stage pretrain-lm");
    need(p.vocab, "train --stage pretrain-lm");
    need(p.gp_train, "synth");
    const auto pretrained = LMParams::load(p.lm_pretrained);
    const auto vocab = Vocabulary::load(p.vocab);
    const Corpus train = load_corpus(p.gp_train);
    const CorpusSource target(train);
    std::optional<Corpus> held;
    std::optional<CorpusSource> held_src;
    if (fs::exists(p.gp_test)) {
      held = load_corpus(p.gp_test);
      held_src.emplace(*held);
    }
    const auto out = finetune_language_model(pretrained, vocab, target, cfg.finetune,
                                             held_src ? &*held_src : nullptr);
    out.vocab.save(p.vocab_finetuned);
    out.params.save(p.lm_finetuned);
    const auto trace_path = cfg.model_dir / "finetune_trace.csv";
    write_text(trace_path, perplexity_trace_csv(out.trace));
    const nlohmann::json metrics{{"added_tokens", out.added_tokens},
                                 {"target_ppl_before", out.target_ppl_before},
                                 {"target_ppl_after", out.target_ppl_after},
                                 {"trace", trace_json(out.trace)}};
    const auto metrics_path = cfg.model_dir / "finetune_metrics.json";
    write_json(metrics_path, metrics);
    std::vector<fs::path> inputs{p.lm_pretrained, p.vocab, p.gp_train};
    if (held) inputs.push_back(p.gp_test);
    write_manifest(cfg.model_dir, "finetune", cfg, inputs, {p.vocab_finetuned, p.lm_finetuned, trace_path, metrics_path},
                   started);
    summary["metrics"] = metrics;
  } else {
    const fs::path lm_path = skip_finetune ? p.lm_pretrained : p.lm_finetuned;
    const fs::path vocab_path = skip_finetune ? p.vocab : p.vocab_finetuned;
    if (!skip_finetune && !fs::exists(p.lm_finetuned)) {
      throw MissingArtifact("missing " + p.lm_finetuned.string() +
                            "; run `train --stage finetune-lm` first or pass --skip-finetune");
    }
    need(lm_path, "train --stage pretrain-lm");
    need(vocab_path, skip_finetune ? "train --stage pretrain-lm" : "train --stage finetune-lm");
    need(p.gp_train, "synth");
    const auto lm = LMParams::load(lm_path);
    const auto vocab = Vocabulary::load(vocab_path);
    const Corpus train = load_corpus(p.gp_train);
    const Classifier clf = train_session_classifier(lm, vocab, train, cfg.classifier);
    clf.save(p.classifier);
    vocab.save(p.classifier_vocab);
    const auto records = join_predictions(predict_corpus(clf, vocab, train), train);
    const auto fit = summarize(records, "gp_train");
    nlohmann::json metrics{{"skip_finetune", skip_finetune},
                           {"train_sessions", fit.size},
                           {"train_roc_auc", fit.roc_auc.to_json()}};
    if (fit.rmse) metrics["train_rmse"] = *fit.rmse;
    const auto metrics_path = cfg.model_dir / "classifier_metrics.json";
    write_json(metrics_path, metrics);
    write_manifest(cfg.model_dir, "classifier", cfg, {lm_path, vocab_path, p.gp_train},
                   {p.classifier, p.classifier_vocab, metrics_path}, started);
    summary["metrics"] = metrics;
  }
  return summary;
}

// -- predict ----------------------------------------------------------------------------

std::vector<PredictTarget> default_predict_targets(const RunConfig& cfg) {
  const Paths p(cfg);
  return {{"gp_test", p.gp_test}, {"sp", p.sp}};
}

nlohmann::json cmd_predict(const RunConfig& cfg, const std::vector<PredictTarget>& targets) {
  const auto started = std::chrono::steady_clock::now();
  const Paths p(cfg);
  need(p.classifier, "train --stage train-clf");
  need(p.classifier_vocab, "train --stage train-clf");
  const Classifier clf = Classifier::load(p.classifier);
  const auto vocab = Vocabulary::load(p.classifier_vocab);
  make_dir(cfg.report_dir);
  nlohmann::json summary{{"stage", "predict"}, {"outputs", nlohmann::json::object()}};
  std::vector<fs::path> inputs{p.classifier, p.classifier_vocab}, outputs;
  for (const auto& t : targets) {
    need(t.corpus, "synth");
    const Corpus corpus = load_corpus(t.corpus);
    const auto rows = predict_corpus(clf, vocab, corpus);
    const auto out = cfg.report_dir / ("predictions_" + t.name + ".csv");
    save_predictions_csv(rows, out);
    inputs.push_back(t.corpus);
    outputs.push_back(out);
    summary["outputs"][t.name] = {{"path", out.string()}, {"sessions", rows.size()}};
  }
  write_manifest(cfg.report_dir, "predict", cfg, inputs, outputs, started);
  return summary;
}

// -- evaluate ---------------------------------------------------------------------------

std::vector<EvaluateTarget> default_evaluate_targets(const RunConfig& cfg) {
  std::vector<EvaluateTarget> out;
  for (const auto& t : default_predict_targets(cfg)) {
    out.push_back({t.name, cfg.report_dir / ("predictions_" + t.name + ".csv"), t.corpus});
  }
  return out;
}

EvaluateResult cmd_evaluate(const RunConfig& cfg, const std::vector<EvaluateTarget>& targets) {
  const auto started = std::chrono::steady_clock::now();
  EvaluateOptions opts;
  opts.sweep_thresholds = parse_sweep(cfg.sweep);
  opts.bootstrap_resamples = cfg.bootstrap_resamples;
  opts.alpha = cfg.alpha;
  opts.eer_mode = cfg.eer_mode;
  opts.seed = derive_seed(cfg.seed, kBootstrapStream);

  EvaluateResult res;
  res.summary = {{"stage", "evaluate"}, {"reports", nlohmann::json::object()}};
  std::vector<fs::path> inputs, outputs;
  for (const auto& t : targets) {
    need(t.predictions, "predict");
    need(t.corpus, "synth");
    const auto records = join_predictions(load_predictions_csv(t.predictions), load_corpus(t.corpus));
    const auto rep = evaluate_records(records, opts);
    const fs::path dir = cfg.report_dir / t.name;
    make_dir(dir);
    std::vector<fs::path> written{dir / "evaluation.json", dir / "global.csv"};
    write_json(written[0], rep.to_json());
    write_text(written[1], rep.global_csv());
    for (const auto& [key, sub] : rep.subgroups) {
      written.push_back(dir / ("subgroup_" + std::string(to_string(key)) + ".csv"));
      write_text(written.back(), sub.to_csv());
    }
    if (rep.sweep) {
      written.push_back(dir / "age_sweep.csv");
      write_text(written.back(), rep.sweep->to_csv());
    }
    if (cfg.plots) {
      if (!rep.roc.empty()) {
        written.push_back(dir / "roc.svg");
        write_text(written.back(), roc_svg(rep.roc, "ROC " + t.name));
      }
      if (rep.sweep) {
        written.push_back(dir / "age_sweep.svg");
        write_text(written.back(), age_sweep_svg(*rep.sweep, "Age threshold analysis " + t.name));
      }
    }
    inputs.push_back(t.predictions);
    inputs.push_back(t.corpus);
    outputs.insert(outputs.end(), written.begin(), written.end());
    res.global_flagged = res.global_flagged || rep.global_flagged();
    res.any_flagged = res.any_flagged || !rep.flags.empty();
    res.summary["reports"][t.name] = {{"dir", dir.string()},
                                      {"roc_auc", rep.global.roc_auc.to_json()},
                                      {"specificity_at_eer", rep.global.specificity_at_eer.to_json()},
                                      {"sensitivity_at_eer", rep.global.sensitivity_at_eer.to_json()},
                                      {"consistency", rep.consistency.to_json()},
                                      {"flags", rep.flags}};
  }
  make_dir(cfg.report_dir);
  write_manifest(cfg.report_dir, "evaluate", cfg, inputs, outputs, started);
  return res;
}

// -- report -----------------------------------------------------------------------------

nlohmann::json cmd_report(const RunConfig& cfg, std::ostream& out) {
  std::vector<std::pair<std::string, std::optional<double>>> bars;
  nlohmann::json summary{{"stage", "report"}, {"reports", nlohmann::json::object()}};
  std::ostringstream md;
  bool any = false;
  for (const auto& t : default_evaluate_targets(cfg)) {
    const fs::path path = cfg.report_dir / t.name / "evaluation.json";
    if (!fs::exists(path)) continue;
    any = true;
    std::ifstream in(path);
    const auto j = nlohmann::json::parse(in);
    const auto& g = j.at("global");
    md << "## " << t.name << "\n\n";
    md << "| size | ROC AUC | spec at EER | sens at EER | RMSE | MAE |\n|---|---|---|---|---|---|\n";
    md << "| " << g.at("size") << " | " << cell(g.at("roc_auc")) << " | " << cell(g.at("specificity_at_eer")) << " | "
       << cell(g.at("sensitivity_at_eer")) << " | " << cell(g.value("rmse", nlohmann::json())) << " | "
       << cell(g.value("mae", nlohmann::json())) << " |\n\n";
    for (const auto& [key, sub] : j.at("subgroups").items()) {
      if (sub.at("rows").empty()) continue;
      md << "### by " << key << "\n\n| " << key << " | size | ROC AUC | spec at EER | sens at EER |\n|---|---|---|---|---|\n";
      for (const auto& r : sub.at("rows")) {
        md << "| " << r.at("group").get<std::string>() << " | " << r.at("size") << " | " << cell(r.at("roc_auc")) << " | "
           << cell(r.at("specificity_at_eer")) << " | " << cell(r.at("sensitivity_at_eer")) << " |\n";
      }
      md << "\n";
    }
    const auto& cons = j.at("consistency");
    auto auc_of = [](const nlohmann::json& v) -> std::optional<double> {
      if (v.is_number()) return v.get<double>();
      return std::nullopt;
    };
    bars.emplace_back(t.name, auc_of(g.at("roc_auc")));
    if (cons.at("inconsistent").at("size").get<std::size_t>() > 0) {
      bars.emplace_back(t.name + " consistent", auc_of(cons.at("consistent").at("roc_auc")));
      bars.emplace_back(t.name + " inconsistent", auc_of(cons.at("inconsistent").at("roc_auc")));
    }
    summary["reports"][t.name] = {{"roc_auc", g.at("roc_auc")}, {"consistency", cons}};
  }
  if (!any) throw MissingArtifact("no evaluation reports under " + cfg.report_dir.string() + "; run `evaluate` first");
  write_text(cfg.report_dir / "report.md", md.str());
  if (cfg.plots) write_text(cfg.report_dir / "portability.svg", svg_bar_chart("ROC AUC by test set", "ROC AUC", bars));
  out << md.str();
  return summary;
}

// -- entry point ------------------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Depression-classifier portability experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool json = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Run configuration (TOML or JSON)")->required();
    sub->add_option("--seed", seed, std::string("Global seed (default from ") + kSeedEnvVar + ")");
    sub->add_flag("--json", json, "Print a JSON summary on stdout");
  };

  auto* synth = app.add_subcommand("synth", "Generate the GP/SP corpus pair and generic text");
  common(synth);

  auto* train = app.add_subcommand("train", "Run one training stage");
  common(train);
  std::string stage_name;
  bool skip_finetune = false;
  train->add_option("--stage", stage_name, "pretrain-lm | finetune-lm | train-clf")
      ->required()
      ->check(CLI::IsMember({"pretrain-lm", "finetune-lm", "train-clf"}));
  train->add_flag("--skip-finetune", skip_finetune, "Train the classifier on the pretrained LM");

  auto* predict = app.add_subcommand("predict", "Score corpora with the trained classifier");
  common(predict);
  std::vector<std::string> corpora;
  predict->add_option("--corpus", corpora, "name=path.jsonl (repeatable); default GP test and SP");

  auto* evaluate = app.add_subcommand("evaluate", "Compute metric reports from predictions");
  common(evaluate);
  std::string predictions_path, corpus_path, eval_name = "custom";
  std::optional<std::string> sweep, eer_mode;
  std::optional<std::size_t> bootstrap;
  bool strict = false, no_plots = false;
  evaluate->add_option("--predictions", predictions_path, "Predictions CSV");
  evaluate->add_option("--corpus", corpus_path, "Corpus JSONL the predictions refer to");
  evaluate->add_option("--name", eval_name, "Report name for --predictions");
  evaluate->add_option("--sweep", sweep, "Age thresholds start:stop:step");
  evaluate->add_option("--bootstrap", bootstrap, "Bootstrap resamples (0 disables)");
  evaluate->add_option("--eer-mode", eer_mode, "per_subgroup | global");
  evaluate->add_flag("--strict", strict, "Exit 2 when any metric is flagged");
  evaluate->add_flag("--no-plots", no_plots, "Skip SVG output");

  auto* report = app.add_subcommand("report", "Print report tables and write the comparison chart");
  common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  auto emit = [&](const nlohmann::json& summary) {
    if (json) {
      out << summary.dump() << "\n";
    } else {
      for (const auto& [k, v] : summary.items()) out << k << ": " << v.dump() << "\n";
    }
  };

  try {
    auto default_seed = seed ? seed : seed_from_env();
    RunConfig cfg = load_run_config(config_path, default_seed);
    if (seed) {
      cfg.seed = *seed;
      cfg.propagate_seed();
    }
    if (synth->parsed()) {
      emit(cmd_synth(cfg));
    } else if (train->parsed()) {
      emit(cmd_train(cfg, parse_stage(stage_name), skip_finetune));
    } else if (predict->parsed()) {
      std::vector<PredictTarget> targets;
      for (const auto& c : corpora) {
        const auto eq = c.find('=');
        if (eq == std::string::npos) {
          targets.push_back({fs::path(c).stem().string(), c});
        } else {
          targets.push_back({c.substr(0, eq), c.substr(eq + 1)});
        }
      }
      emit(cmd_predict(cfg, targets.empty() ? default_predict_targets(cfg) : targets));
    } else if (evaluate->parsed()) {
      if (sweep) cfg.sweep = *sweep;
      if (bootstrap) cfg.bootstrap_resamples = *bootstrap;
      if (eer_mode) cfg.eer_mode = parse_eer_mode(*eer_mode);
      if (no_plots) cfg.plots = false;
      cfg.validate();
      std::vector<EvaluateTarget> targets;
      if (!predictions_path.empty() || !corpus_path.empty()) {
        if (predictions_path.empty() || corpus_path.empty()) {
          throw ConfigError("--predictions and --corpus must be given together");
        }
        targets.push_back({eval_name, predictions_path, corpus_path});
      } else {
        targets = default_evaluate_targets(cfg);
      }
      const auto res = cmd_evaluate(cfg, targets);
      emit(res.summary);
      if (res.global_flagged || (strict && res.any_flagged)) return 2;
    } else if (report->parsed()) {
      std::ostringstream tables;
      const auto summary = cmd_report(cfg, tables);
      if (json) {
        emit(summary);
      } else {
        out << tables.str();
      }
    }
  } catch (const DegenerateInput& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const UndefinedMetric& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace dport::cli
