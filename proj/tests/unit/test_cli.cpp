#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = std::string(DPORT_CLI) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyConfig = R"(seed = 3
[paths]
data = "data"
models = "models"
reports = "reports"
[synth]
test_fraction = 0.3
[synth.gp]
n_subjects = 60
words_scale = 0.03
signal_strength = 0.1
[synth.sp]
n_subjects = 30
words_scale = 0.03
signal_strength = 0.1
[synth.generic]
n_documents = 20
words_per_document = 40
[vocab]
max_size = 400
[lm]
embed_dim = 8
hidden_dim = 8
n_layers = 1
bptt_len = 10
batch_size = 4
epochs = 1
[finetune]
epochs = 1
batch_size = 4
bptt_len = 10
[classifier]
epochs = 1
batch_size = 8
max_tokens = 60
hidden = 8
[evaluate]
sweep = "50:90:1"
bootstrap_resamples = 20
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("dport_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "run.toml";
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("missing required fields are config errors") {
  const fs::path dir = fresh_dir("missing");
  const fs::path cfg = write_config(dir, "seed = 1\n");
  const auto r = run_cli("synth --config " + cfg.string(), dir);
  CHECK(r.code == 1);
  CHECK(r.out.find("paths") != std::string::npos);

  CHECK(run_cli("synth", dir).code == 1);
  CHECK(run_cli("train --stage bogus --config " + cfg.string(), dir).code == 1);
}

TEST_CASE("classifier stage requires a fine-tuned model") {
  const fs::path dir = fresh_dir("order");
  const fs::path cfg = write_config(dir, kTinyConfig);
  REQUIRE(run_cli("synth --config " + cfg.string(), dir).code == 0);
  const auto r = run_cli("train --stage train-clf --config " + cfg.string(), dir);
  CHECK(r.code == 1);
}

TEST_CASE("full tiny pipeline is deterministic and reports a 41-row sweep") {
  std::string first_predictions;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = fresh_dir("pipe" + std::to_string(rep));
    const fs::path cfg = write_config(dir, kTinyConfig);
    for (const char* stage : {"synth", "train --stage pretrain-lm", "train --stage finetune-lm",
                              "train --stage train-clf", "predict"}) {
      const auto r = run_cli(std::string(stage) + " --json --config " + cfg.string(), dir);
      REQUIRE_MESSAGE(r.code == 0, stage << ": " << r.out);
      CHECK(r.out.find('{') == 0);
    }
    const auto ev = run_cli("evaluate --json --no-plots --config " + cfg.string(), dir);
    CHECK_MESSAGE(ev.code != 1, ev.out);
    const std::string sweep = slurp(dir / "reports" / "sp" / "age_sweep.csv");
    CHECK(std::count(sweep.begin(), sweep.end(), '\n') == 42);
    const std::string preds = slurp(dir / "reports" / "predictions_sp.csv");
    CHECK(!preds.empty());
    if (rep == 0) first_predictions = preds;
    else CHECK(preds == first_predictions);
    CHECK(run_cli("report --config " + cfg.string(), dir).code == 0);
  }
}

TEST_CASE("seed comes from the environment when the config has none") {
  const fs::path dir = fresh_dir("env");
  std::string text = kTinyConfig;
  text.erase(0, text.find('\n') + 1);
  const fs::path cfg = write_config(dir, text);
  CHECK(run_cli("synth --config " + cfg.string(), dir).code == 1);
  CHECK(run_cli("synth --seed 4 --config " + cfg.string(), dir).code == 0);
  const std::string a = slurp(dir / "data" / "sp.jsonl");
  fs::remove_all(dir / "data");
  ::setenv("DPORT_SEED", "4", 1);
  CHECK(run_cli("synth --config " + cfg.string(), dir).code == 0);
  ::unsetenv("DPORT_SEED");
  CHECK(slurp(dir / "data" / "sp.jsonl") == a);
}

TEST_CASE("evaluation without positives exits with the degenerate code") {
  const fs::path dir = fresh_dir("degenerate");
  const fs::path cfg = write_config(dir, kTinyConfig);
  std::ofstream(dir / "corpus.jsonl")
      << R"({"session_id":"a","subject_id":"p","phq8_score":2,"age":70,"responses":[{"prompt_topic":"t","text":"x y"}]})"
      << "\n"
      << R"({"session_id":"b","subject_id":"q","phq8_score":4,"age":72,"responses":[{"prompt_topic":"t","text":"y z"}]})"
      << "\n";
  std::ofstream(dir / "preds.csv") << "session_id,subject_id,score_dep_plus,phq_estimate,true_phq,true_class\n"
                                   << "a,p,0.3,,2,dep-\n"
                                   << "b,q,0.6,,4,dep-\n";
  const auto r = run_cli("evaluate --no-plots --config " + cfg.string() + " --predictions " + (dir / "preds.csv").string() +
                             " --corpus " + (dir / "corpus.jsonl").string(),
                         dir);
  CHECK(r.code == 2);
}

}  // TEST_SUITE
