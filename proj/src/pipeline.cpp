#include "dport/pipeline.hpp"

#include <cmath>
#include <sstream>

#include "dport/errors.hpp"
#include "dport/util.hpp"

namespace dport {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

PretrainOutput pretrain_language_model(const TextSource& generic, const VocabOptions& vocab_opts,
                                       const LMConfig& config) {
  PretrainOutput out;
  out.vocab = build_vocab(generic, vocab_opts.max_size, vocab_opts.min_freq);
  auto res = train_lm(generic, out.vocab, config);
  out.params = std::move(res.params);
  out.trace = std::move(res.trace);
  return out;
}

FinetuneOutput finetune_language_model(const LMParams& pretrained, const Vocabulary& vocab,
                                       const TextSource& target, const FinetuneConfig& config,
                                       const TextSource* held_out) {
  FinetuneOutput out;
  out.vocab = vocab;
  LMParams start = pretrained;
  if (config.extend_min_freq > 0) {
    out.added_tokens = extend_vocabulary(start, out.vocab, target, config.extend_min_freq);
  }
  const TextSource& probe = held_out ? *held_out : target;
  const std::size_t batch = config.options.batch_size;
  out.target_ppl_before = perplexity(start, out.vocab, probe, batch);
  out.params = finetune_lm(start, out.vocab, target, config.schedule, config.options, &out.trace);
  out.target_ppl_after = perplexity(out.params, out.vocab, probe, batch);
  return out;
}

Classifier train_session_classifier(const LMParams& lm, const Vocabulary& vocab, const Corpus& train,
                                    const ClassifierConfig& config) {
  const CorpusSource source(train);
  return train_classifier(lm, config.head, source, vocab, config.schedule, config.options);
}

std::vector<PredictionRow> predict_corpus(const Classifier& clf, const Vocabulary& vocab, const Corpus& corpus) {
  std::vector<PredictionRow> rows;
  for (const auto& subj : corpus.subjects) {
    for (const auto& s : subj.sessions) {
      const auto p = predict_session(clf, vocab, s, clf.text_mode);
      rows.push_back({s.session_id, subj.subject_id, p.score_dep_plus, p.phq_estimate, s.phq8_score});
    }
  }
  return rows;
}

EvaluationReport evaluate_records(const std::vector<PredictionRecord>& records, const EvaluateOptions& opts) {
  if (records.empty()) throw ValidationError("no prediction records to evaluate");
  EvaluationReport rep;
  rep.global = summarize(records, "all");
  if (rep.global.roc_auc.defined()) {
    rep.roc = roc_curve(records);
  } else {
    rep.flags.push_back("global roc_auc undefined (" + rep.global.roc_auc.flag + ")");
  }
  for (auto key : {GroupKey::age_bucket, GroupKey::gender, GroupKey::ethnicity, GroupKey::consistency}) {
    auto r = subgroup_report(records, key, opts.eer_mode);
    for (const auto& row : r.rows) {
      if (!row.roc_auc.defined()) {
        rep.flags.push_back(std::string(to_string(key)) + "=" + row.group + " roc_auc undefined (" + row.roc_auc.flag + ")");
      }
    }
    rep.subgroups.emplace(key, std::move(r));
  }
  rep.consistency = consistency_split_eval(records);
  for (const auto* side : {&rep.consistency.consistent, &rep.consistency.inconsistent}) {
    if (!side->roc_auc.defined()) {
      rep.flags.push_back(std::string(side == &rep.consistency.consistent ? "consistent" : "inconsistent") +
                          " stratum roc_auc undefined (" + side->roc_auc.flag + ")");
    }
  }
  if (!opts.sweep_thresholds.empty()) {
    try {
      rep.sweep = age_threshold_sweep(records, opts.sweep_thresholds);
    } catch (const ValidationError& e) {
      rep.flags.push_back(std::string("age sweep skipped: ") + e.what());
    }
  }
  if (opts.bootstrap_resamples > 0) {
    std::vector<Metric> metrics{Metric::auc};
    if (rep.global.rmse) {
      metrics.push_back(Metric::rmse);
      metrics.push_back(Metric::mae);
    }
    for (auto m : metrics) {
      try {
        rep.bootstrap.emplace(std::string(to_string(m)),
                              bootstrap_ci(records, m, opts.bootstrap_resamples, opts.alpha, opts.seed));
      } catch (const UndefinedMetric& e) {
        rep.flags.push_back(std::string(to_string(m)) + " bootstrap undefined: " + e.what());
      }
    }
  }
  return rep;
}

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json g{{"size", global.size},
                   {"positives", global.positives},
                   {"negatives", global.negatives},
                   {"roc_auc", global.roc_auc.to_json()},
                   {"specificity_at_eer", global.specificity_at_eer.to_json()},
                   {"sensitivity_at_eer", global.sensitivity_at_eer.to_json()}};
  if (global.rmse) g["rmse"] = *global.rmse;
  if (global.mae) g["mae"] = *global.mae;
  nlohmann::json sub = nlohmann::json::object();
  for (const auto& [k, r] : subgroups) sub[std::string(to_string(k))] = r.to_json();
  nlohmann::json roc_json = nlohmann::json::array();
  for (const auto& p : roc) {
    roc_json.push_back({p.fpr, p.tpr, std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json("inf")});
  }
  nlohmann::json boot = nlohmann::json::object();
  for (const auto& [k, b] : bootstrap) boot[k] = b.to_json();
  nlohmann::json j{{"global", g},
                   {"subgroups", sub},
                   {"consistency", consistency.to_json()},
                   {"roc", roc_json},
                   {"bootstrap", boot},
                   {"flags", flags}};
  j["age_sweep"] = sweep ? sweep->to_json() : nlohmann::json(nullptr);
  return j;
}

std::string EvaluationReport::global_csv() const {
  std::ostringstream out;
  out << "size,positives,negatives,roc_auc,specificity_at_eer,sensitivity_at_eer,rmse,mae\n";
  out << global.size << ',' << global.positives << ',' << global.negatives << ',' << global.roc_auc.to_csv() << ','
      << global.specificity_at_eer.to_csv() << ',' << global.sensitivity_at_eer.to_csv() << ','
      << (global.rmse ? format_double(*global.rmse) : "") << ',' << (global.mae ? format_double(*global.mae) : "")
      << '\n';
  return out.str();
}

}  // namespace dport
