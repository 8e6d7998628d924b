#include "dport/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "dport/errors.hpp"
#include "dport/util.hpp"

namespace dport {

namespace {

const std::set<std::string> kScheduleKeys = {"lr_max", "cut_frac", "ratio", "layer_decay", "unfreeze_per_epoch"};
const std::set<std::string> kLmFinetuneKeys = {"epochs", "batch_size", "bptt_len", "grad_clip", "gradual_unfreeze"};
const std::set<std::string> kHeadKeys = {"hidden", "task", "lambda_regression"};
const std::set<std::string> kClfOptionKeys = {"epochs",        "batch_size",          "max_tokens",
                                              "momentum",      "grad_clip",           "gradual_unfreeze",
                                              "text_mode",     "dropconnect_p",       "variational_input_p",
                                              "variational_hidden_p", "embedding_dropout_p", "optimizer", "adam_beta2"};

const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError("missing required field '" + path + "'");
  return j.at(key);
}

nlohmann::json section(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key)) return nlohmann::json::object();
  const auto& s = j.at(key);
  if (!s.is_object()) throw ConfigError("'" + key + "' must be a table");
  return s;
}

// Splits `j` by key set; keys outside every set are rejected.
nlohmann::json take(const nlohmann::json& j, const std::set<std::string>& keys) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [k, v] : j.items()) {
    if (keys.count(k)) out[k] = v;
  }
  return out;
}

void reject_outside(const nlohmann::json& j, const std::vector<const std::set<std::string>*>& sets,
                    const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    bool known = false;
    for (const auto* s : sets) known = known || s->count(k);
    if (!known) throw ConfigError("unknown key '" + where + "." + k + "'");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

nlohmann::json parse_toml(const std::string& text, const std::string& source_name) {
  toml::table tbl;
  try {
    tbl = toml::parse(text, source_name);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source_name << ":" << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  std::ostringstream js;
  js << toml::json_formatter{tbl};
  return nlohmann::json::parse(js.str());
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  if (path.extension() == ".json") {
    try {
      return nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
  return parse_toml(buf.str(), path.string());
}

void RunConfig::propagate_seed() {
  gp.seed = derive_seed(seed, 1);
  sp.seed = derive_seed(seed, 2);
  generic.seed = derive_seed(seed, 3);
  lm.seed = derive_seed(seed, 4);
  finetune.options.seed = derive_seed(seed, 5);
  classifier.options.seed = derive_seed(seed, 6);
  const auto lexicon_seed = derive_seed(seed, 7);
  gp.lexicon.seed = sp.lexicon.seed = generic.lexicon.seed = lexicon_seed;
}

void RunConfig::validate() const {
  if (data_dir.empty() || model_dir.empty() || report_dir.empty()) throw ConfigError("paths must be non-empty");
  gp.validate();
  sp.validate();
  generic.validate();
  if (!(gp.lexicon == sp.lexicon) || !(gp.lexicon == generic.lexicon)) {
    throw ConfigError("synth.gp, synth.sp and synth.generic must share one lexicon");
  }
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("synth.test_fraction must lie in (0,1)");
  LMConfig probe = lm;
  probe.vocab_size = std::max<std::size_t>(probe.vocab_size, 16);
  probe.validate();
  finetune.schedule.with_total_steps(100).validate();
  classifier.schedule.with_total_steps(100).validate();
  parse_sweep(sweep);
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("evaluate.alpha must lie in (0,1)");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json fin = finetune.schedule.to_json();
  fin.erase("total_steps");
  const auto fin_opts = finetune.options.to_json();
  for (const auto& [k, v] : fin_opts.items()) {
    if (k != "seed") fin[k] = v;
  }
  fin["extend_min_freq"] = finetune.extend_min_freq;
  nlohmann::json clf = classifier.schedule.to_json();
  clf.erase("total_steps");
  const auto head = classifier.head.to_json();
  for (const auto& [k, v] : head.items()) clf[k] = v;
  const auto clf_opts = classifier.options.to_json();
  for (const auto& [k, v] : clf_opts.items()) {
    if (k != "seed") clf[k] = v;
  }
  nlohmann::json lm_json = lm.to_json();
  lm_json.erase("vocab_size");
  lm_json.erase("seed");
  auto strip_seed = [](nlohmann::json s) {
    s.erase("seed");
    s["lexicon"].erase("seed");
    return s;
  };
  return {{"seed", seed},
          {"paths", {{"data", data_dir.string()}, {"models", model_dir.string()}, {"reports", report_dir.string()}}},
          {"synth",
           {{"test_fraction", test_fraction},
            {"gp", strip_seed(gp.to_json())},
            {"sp", strip_seed(sp.to_json())},
            {"generic", strip_seed(generic.to_json())}}},
          {"vocab", {{"max_size", vocab.max_size}, {"min_freq", vocab.min_freq}}},
          {"lm", lm_json},
          {"finetune", fin},
          {"classifier", clf},
          {"evaluate",
           {{"sweep", sweep},
            {"bootstrap_resamples", bootstrap_resamples},
            {"alpha", alpha},
            {"eer_mode", std::string(to_string(eer_mode))},
            {"plots", plots}}}};
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                               std::optional<std::uint64_t> default_seed) {
  if (!j.is_object()) throw ConfigError("config root must be a table");
  for (const auto& [k, _] : j.items()) {
    static const std::set<std::string> top = {"seed", "paths", "synth", "vocab", "lm", "finetune", "classifier", "evaluate"};
    if (!top.count(k)) throw ConfigError("unknown key '" + k + "'");
  }
  RunConfig c;
  try {
    if (j.contains("seed")) {
      c.seed = j.at("seed").get<std::uint64_t>();
    } else if (default_seed) {
      c.seed = *default_seed;
    } else {
      throw ConfigError(std::string("missing required field 'seed' (or set ") + kSeedEnvVar + ")");
    }

    const auto& paths = require(j, "paths", "paths");
    c.data_dir = resolve(base_dir, require(paths, "data", "paths.data").get<std::string>());
    c.model_dir = resolve(base_dir, require(paths, "models", "paths.models").get<std::string>());
    c.report_dir = resolve(base_dir, require(paths, "reports", "paths.reports").get<std::string>());

    const auto synth = section(j, "synth");
    static const std::set<std::string> synth_keys = {"test_fraction", "gp", "sp", "generic"};
    reject_outside(synth, {&synth_keys}, "synth");
    c.test_fraction = synth.value("test_fraction", c.test_fraction);
    if (synth.contains("gp")) {
      require(synth["gp"], "n_subjects", "synth.gp.n_subjects");
      c.gp = SynthSpec::from_json(synth["gp"], c.gp);
    }
    if (synth.contains("sp")) {
      require(synth["sp"], "n_subjects", "synth.sp.n_subjects");
      c.sp = SynthSpec::from_json(synth["sp"], c.sp);
    }
    if (synth.contains("generic")) c.generic = GenericTextSpec::from_json(synth["generic"], c.generic);

    const auto vocab = section(j, "vocab");
    static const std::set<std::string> vocab_keys = {"max_size", "min_freq"};
    reject_outside(vocab, {&vocab_keys}, "vocab");
    c.vocab.max_size = vocab.value("max_size", c.vocab.max_size);
    c.vocab.min_freq = vocab.value("min_freq", c.vocab.min_freq);

    c.lm = LMConfig::from_json(section(j, "lm"), c.lm);

    const auto fin = section(j, "finetune");
    static const std::set<std::string> extend_key = {"extend_min_freq"};
    reject_outside(fin, {&kScheduleKeys, &kLmFinetuneKeys, &extend_key}, "finetune");
    c.finetune.schedule = FinetuneSchedule::from_json(take(fin, kScheduleKeys), c.finetune.schedule);
    c.finetune.options = LMFinetuneOptions::from_json(take(fin, kLmFinetuneKeys), c.finetune.options);
    c.finetune.extend_min_freq = fin.value("extend_min_freq", c.finetune.extend_min_freq);

    const auto clf = section(j, "classifier");
    reject_outside(clf, {&kScheduleKeys, &kHeadKeys, &kClfOptionKeys}, "classifier");
    c.classifier.schedule = FinetuneSchedule::from_json(take(clf, kScheduleKeys), c.classifier.schedule);
    c.classifier.head = HeadConfig::from_json(take(clf, kHeadKeys), c.classifier.head);
    c.classifier.options = ClassifierTrainOptions::from_json(take(clf, kClfOptionKeys), c.classifier.options);

    const auto ev = section(j, "evaluate");
    static const std::set<std::string> eval_keys = {"sweep", "bootstrap_resamples", "alpha", "eer_mode", "plots"};
    reject_outside(ev, {&eval_keys}, "evaluate");
    c.sweep = ev.value("sweep", c.sweep);
    c.bootstrap_resamples = ev.value("bootstrap_resamples", c.bootstrap_resamples);
    c.alpha = ev.value("alpha", c.alpha);
    if (ev.contains("eer_mode")) c.eer_mode = parse_eer_mode(ev["eer_mode"].get<std::string>());
    c.plots = ev.value("plots", c.plots);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.propagate_seed();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> default_seed) {
  return run_config_from_json(read_config_file(path), path.parent_path(), default_seed);
}

std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv(kSeedEnvVar);
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const auto s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw ConfigError(std::string(kSeedEnvVar) + " must be a non-negative integer");
  return s;
}

}  // namespace dport
