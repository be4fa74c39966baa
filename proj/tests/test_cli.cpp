#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "doctest.h"
#include "sevdet/synth/synth.hpp"
#include "test_util.hpp"

using namespace sevdet;
using sevdet::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> synth_args(const fs::path& out, const std::string& seed = "1") {
  return {"--seed", seed, "synth", "--out", out.string(), "--image-size", "16",
          "--train", "2", "--val", "1", "--test", "1"};
}

/// Every regular file under `root`, relative path -> contents.
std::vector<std::pair<std::string, std::string>> tree(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), root).generic_string(), test::read_file(e.path()));
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Dataset plus one-epoch 16 px models, trained once and shared by the tests.
struct TinyWorkflow {
  TempDir dir{"cli_workflow"};
  fs::path data = dir / "data";
  fs::path vae = dir / "vae.ckpt";
  fs::path cls = dir / "cls.ckpt";
  fs::path fg = dir / "fg.ckpt";
  bool ok = true;

  TinyWorkflow() {
    ok &= run_cli(synth_args(data)).code == 0;
    const std::vector<std::string> common{"--data", data.string(), "--epochs", "1", "--image-size", "16"};
    auto with = [&](std::vector<std::string> head, const fs::path& out) {
      head.insert(head.end(), common.begin(), common.end());
      head.push_back("--out");
      head.push_back(out.string());
      return head;
    };
    ok &= run_cli(with({"train", "vae", "--latent", "4"}, vae)).code == 0;
    ok &= run_cli(with({"train", "classifier"}, cls)).code == 0;
    ok &= run_cli(with({"train", "finegrain", "--batch", "4"}, fg)).code == 0;
  }

  std::vector<std::string> detect(const fs::path& frames, const fs::path& log) const {
    return {"detect", "--frames", frames.string(), "--vae", vae.string(), "--classifier", cls.string(),
            "--finegrain", fg.string(), "--log", log.string(), "--vae-threshold", "1e9"};
  }
};

const TinyWorkflow& workflow() {
  static const TinyWorkflow w;
  return w;
}

}  // namespace

TEST_CASE("help exits zero and usage errors exit two") {
  const auto help = run_cli({"--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("synth") != std::string::npos);
  CHECK(help.out.find("detect") != std::string::npos);
  const auto sub_help = run_cli({"train", "classifier", "--help"});
  CHECK(sub_help.code == cli::kExitOk);
  CHECK(sub_help.out.find("--taxonomy") != std::string::npos);

  CHECK(run_cli({}).code == cli::kExitUsage);
  CHECK(run_cli({"frobnicate"}).code == cli::kExitUsage);
  CHECK(run_cli({"synth", "--bogus", "1"}).code == cli::kExitUsage);
  CHECK(run_cli({"synth", "--train", "many"}).code == cli::kExitUsage);
  const auto missing = run_cli({"synth"});
  CHECK(missing.code == cli::kExitUsage);
  CHECK(missing.err.find("--out") != std::string::npos);
}

TEST_CASE("synth is reproducible for a seed and writes the requested counts") {
  TempDir a("cli_synth_a"), b("cli_synth_b"), c("cli_synth_c");
  const auto r = run_cli(synth_args(a / "d"));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("wrote 48 images") != std::string::npos);
  REQUIRE(run_cli(synth_args(b / "d")).code == 0);
  CHECK(tree(a / "d") == tree(b / "d"));
  REQUIRE(run_cli(synth_args(c / "d", "2")).code == 0);
  CHECK(tree(a / "d") != tree(c / "d"));
  const auto m = synth::read_manifest(a / "d");
  CHECK(m.count(synth::SynthClass::RedCard, synth::Split::Train) == 2);
  CHECK(m.count(synth::SynthClass::NonSoccer, synth::Split::Test) == 1);
}

TEST_CASE("synth can plant a match") {
  TempDir dir("cli_match");
  auto args = synth_args(dir / "d");
  for (const char* s : {"--match", "", "--match-length", "400", "--match-events", "2"}) args.emplace_back(s);
  args[args.size() - 5] = (dir / "m").string();
  REQUIRE(run_cli(args).code == 0);
  CHECK(synth::read_ground_truth(dir / "m" / synth::kGroundTruthName).size() == 2);
  CHECK(fs::exists(dir / "m" / synth::frame_file_name(399)));
}

TEST_CASE("config files fill unset flags and flags win") {
  TempDir dir("cli_config");
  test::write_file(dir / "cfg.json", R"({"out": ")" + (dir / "d").generic_string() +
                                         R"(", "image-size": 16, "train": 3, "val": 1, "test": 1})");
  REQUIRE(run_cli({"synth", "--config", (dir / "cfg.json").string(), "--train", "1"}).code == 0);
  const auto m = synth::read_manifest(dir / "d");
  CHECK(m.count(synth::SynthClass::Tackle, synth::Split::Train) == 1);
  CHECK(m.count(synth::SynthClass::Tackle, synth::Split::Val) == 1);

  test::write_file(dir / "bad.json", R"({"out": "x", "colour": "red"})");
  const auto bad = run_cli({"synth", "--config", (dir / "bad.json").string()});
  CHECK(bad.code == cli::kExitUsage);
  CHECK(bad.err.find("colour") != std::string::npos);
  test::write_file(dir / "broken.json", "{");
  CHECK(run_cli({"synth", "--config", (dir / "broken.json").string()}).code == cli::kExitUsage);
  CHECK(run_cli({"synth", "--config", (dir / "absent.json").string()}).code == cli::kExitUsage);
}

TEST_CASE("training is reproducible for a seed") {
  const auto& w = workflow();
  REQUIRE(w.ok);
  TempDir dir("cli_retrain");
  const auto r = run_cli({"train", "classifier", "--data", w.data.string(), "--epochs", "1", "--image-size", "16",
                          "--out", (dir / "cls.ckpt").string()});
  REQUIRE(r.code == 0);
  CHECK(test::read_file(dir / "cls.ckpt") == test::read_file(w.cls));
  CHECK(fs::exists(dir / "cls.ckpt.metrics.csv"));
  CHECK(run_cli({"train", "classifier", "--data", w.data.string(), "--taxonomy", "eleven", "--out",
                 (dir / "x.ckpt").string()})
            .code == cli::kExitUsage);
  CHECK(run_cli({"train", "vae", "--data", (dir / "missing").string(), "--out", (dir / "v.ckpt").string()}).code ==
        cli::kExitFailure);
}

TEST_CASE("detect handles empty and malformed frame directories") {
  const auto& w = workflow();
  REQUIRE(w.ok);
  TempDir dir("cli_detect");
  fs::create_directories(dir / "empty");
  const auto empty = run_cli(w.detect(dir / "empty", dir / "empty.jsonl"));
  CHECK(empty.code == 0);
  CHECK(fs::exists(dir / "empty.jsonl"));
  CHECK(test::read_file(dir / "empty.jsonl").empty());

  synth::SynthSpec spec = synth::SynthSpec::uniform(1, 16, {1, 1, 1});
  synth::MatchPlan plan;
  plan.length = 40;
  synth::plant_match(spec, plan, dir / "frames");
  const auto ok = run_cli(w.detect(dir / "frames", dir / "log.jsonl"));
  CHECK(ok.code == 0);
  CHECK(ok.out.find("40 frames") != std::string::npos);

  test::write_file(dir / "frames" / synth::kFramesManifest, "0\t0\n2\t0.066\n1\t0.033\n");
  const auto bad = run_cli(w.detect(dir / "frames", dir / "log2.jsonl"));
  CHECK(bad.code == cli::kExitFailure);
  CHECK(bad.err.find("frame 1") != std::string::npos);

  auto uncalibrated = w.detect(dir / "frames", dir / "log3.jsonl");
  uncalibrated.back() = "0";
  CHECK(run_cli(uncalibrated).code == cli::kExitUsage);
}

TEST_CASE("calibrate writes a pipeline config that sweep reads") {
  const auto& w = workflow();
  REQUIRE(w.ok);
  TempDir dir("cli_calibrate");
  const auto cal = run_cli({"calibrate", "--data", w.data.string(), "--vae", w.vae.string(), "--classifier",
                            w.cls.string(), "--out", (dir / "pipe.json").string(), "--report",
                            (dir / "report.txt").string()});
  REQUIRE(cal.code == 0);
  const std::string json = test::read_file(dir / "pipe.json");
  CHECK(json.find("\"vae-threshold\"") != std::string::npos);
  CHECK(json.find("\"softmax-tau\"") != std::string::npos);
  const auto sweep = run_cli({"sweep", "--data", w.data.string(), "--vae", w.vae.string(), "--classifier",
                              w.cls.string(), "--pipeline", (dir / "pipe.json").string(), "--csv",
                              (dir / "sweep.csv").string(), "--taus", "0.9,0.5"});
  CHECK(sweep.code == 0);
  CHECK(test::read_file(dir / "sweep.csv").rfind("threshold,", 0) == 0);
  CHECK(run_cli({"sweep", "--data", w.data.string(), "--vae", w.vae.string(), "--classifier", w.cls.string(),
                 "--vae-threshold", "10", "--taus", "0.9,0.9"})
            .code != 0);
  // Detect accepts the calibrate output as its config file.
  auto det = w.detect(w.data.parent_path() / "none", dir / "log.jsonl");
  det.resize(det.size() - 2);
  det.push_back("--config");
  det.push_back((dir / "pipe.json").string());
  fs::create_directories(w.data.parent_path() / "none");
  CHECK(run_cli(det).code == 0);
}

TEST_CASE("eval scores prediction files") {
  TempDir dir("cli_eval");
  test::write_file(dir / "truth.csv", "frame_id,class\na,Tackle\nb,RedCard\nc,CenterCircle\n");
  test::write_file(dir / "pred.csv", "frame_id,predicted\nc,CenterCircle\na,Tackle\nb,RedCard\n");
  const auto perfect = run_cli({"eval", "--predictions", (dir / "pred.csv").string(), "--truth",
                                (dir / "truth.csv").string(), "--confusion-csv", (dir / "cm.csv").string()});
  REQUIRE(perfect.code == 0);
  CHECK(perfect.out.find("macro-F1 1") != std::string::npos);
  CHECK(test::read_file(dir / "cm.csv").rfind("truth,", 0) == 0);

  test::write_file(dir / "short.csv", "frame_id,predicted\na,Tackle\n");
  const auto missing = run_cli({"eval", "--predictions", (dir / "short.csv").string(), "--truth",
                                (dir / "truth.csv").string()});
  CHECK(missing.code == cli::kExitFailure);
  CHECK(missing.err.find("frame_id") != std::string::npos);
  CHECK(run_cli({"eval"}).code == cli::kExitUsage);

  const auto& w = workflow();
  REQUIRE(w.ok);
  const auto data = run_cli({"eval", "--data", w.data.string(), "--classifier", w.cls.string(), "--finegrain",
                             w.fg.string(), "--predictions-out", (dir / "p.csv").string()});
  CHECK(data.code == 0);
  CHECK(test::read_file(dir / "p.csv").rfind("frame_id,truth,predicted,confidence\n", 0) == 0);
}
