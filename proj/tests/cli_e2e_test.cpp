// SPDX-License-Identifier: Apache-2.0
//
// Drives the alignlab executable end to end. Every case builds its own inputs
// so each can run as a separate ctest entry.
#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "alignlab/io.h"
#include "alignlab/pipeline.h"
#include "alignlab/reward_model.h"

using namespace alignlab;
namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;

namespace {

struct Run {
  int status = -1;
  std::string output;
  double seconds = 0.0;
};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "alignlab_e2e" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Run run_cli(const std::string& args, const fs::path& config_json = {}, const std::string& config = {}) {
  if (!config_json.empty()) write_file_atomic(config_json.string(), config);
  const std::string cmd = std::string(ALIGNLAB_CLI_PATH) + " " + args +
                          (config_json.empty() ? "" : " --config " + config_json.string()) + " 2>&1";
  const auto start = std::chrono::steady_clock::now();
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  Run r;
  char buf[512];
  while (fgets(buf, sizeof buf, pipe) != nullptr) r.output += buf;
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  INFO(cmd << "\n" << r.output);
  CHECK(r.seconds < 60.0);
  return r;
}

nlohmann::json metrics(const fs::path& dir) { return nlohmann::json::parse(read_file((dir / "metrics.json").string())); }

void expect_outputs(const fs::path& dir, std::initializer_list<const char*> extra = {}) {
  CHECK(fs::exists(dir / "metrics.json"));
  CHECK(fs::exists(dir / "metrics.csv"));
  for (const char* f : extra) CHECK(fs::exists(dir / f));
  for (const auto& entry : fs::directory_iterator(dir)) CHECK(entry.path().extension() != ".tmp");
}

const char* kShortSchedule =
    R"("schedule": {"kind": "cosine", "peak": 0.003, "end": 0.0003, "steps": 30, "grad_clip": 1.0})";

std::string save_policy(const fs::path& dir, const std::string& name, std::uint64_t seed) {
  const std::string path = (dir / name).string();
  save_checkpoint(path, init_params(toy_model_config(), seed));
  return path;
}

}  // namespace

TEST_CASE("e2e train-sft writes a checkpoint and metrics", "[e2e]") {
  const fs::path dir = scratch("train-sft");
  const Run r = run_cli("train-sft --seed 3 --out " + (dir / "out").string(), dir / "c.json",
                        std::string("{") + kShortSchedule + "}");
  REQUIRE(r.status == 0);
  CHECK_THAT(r.output, ContainsSubstring("train-sft: 30 steps"));
  expect_outputs(dir / "out", {"policy.ckpt"});
  const auto m = metrics(dir / "out");
  CHECK(m["series"]["loss"].size() == 30);
  CHECK(m["scalars"].contains("accuracy/reverse"));
  CHECK(load_checkpoint((dir / "out" / "policy.ckpt").string()).provenance == "train-sft");
}

TEST_CASE("e2e train-sft is byte-identical across repeated runs", "[e2e]") {
  const fs::path dir = scratch("train-sft-repeat");
  const std::string cfg = std::string("{") + kShortSchedule + "}";
  REQUIRE(run_cli("train-sft --seed 9 --out " + (dir / "a").string(), dir / "c.json", cfg).status == 0);
  REQUIRE(run_cli("train-sft --seed 9 --out " + (dir / "b").string(), dir / "c.json", cfg).status == 0);
  for (const char* f : {"policy.ckpt", "metrics.json", "metrics.csv"}) {
    CHECK(read_file((dir / "a" / f).string()) == read_file((dir / "b" / f).string()));
  }
  REQUIRE(run_cli("train-sft --seed 10 --out " + (dir / "c").string(), dir / "c.json", cfg).status == 0);
  CHECK(read_file((dir / "a" / "policy.ckpt").string()) != read_file((dir / "c" / "policy.ckpt").string()));
}

TEST_CASE("e2e train-pref trains against a reference", "[e2e]") {
  const fs::path dir = scratch("train-pref");
  const std::string policy = save_policy(dir, "start.ckpt", 4);
  const Run r = run_cli("train-pref --seed 1 --out " + (dir / "out").string(), dir / "c.json",
                        R"({"inputs": {"checkpoint": ")" + policy + R"("}, "objective": {"loss": "dpo"}, )" +
                            kShortSchedule + "}");
  REQUIRE(r.status == 0);
  expect_outputs(dir / "out", {"policy.ckpt"});
  const auto m = metrics(dir / "out");
  CHECK(m["labels"]["loss_kind"] == "dpo");
  CHECK(m["scalars"]["preference_accuracy"].get<double>() > 0.5);
}

TEST_CASE("e2e train-pref accepts the safety preset", "[e2e]") {
  const fs::path dir = scratch("train-pref-preset");
  const Run r = run_cli("train-pref --preset safety-ipo --out " + (dir / "out").string(), dir / "c.json",
                        std::string("{") + kShortSchedule + "}");
  REQUIRE(r.status == 0);
  const auto m = metrics(dir / "out");
  CHECK(m["labels"]["loss_kind"] == "ipo");
  CHECK(m["scalars"]["beta"].get<double>() == 0.03);
}

TEST_CASE("e2e train-rm packs pairs and trains a scalar head", "[e2e]") {
  const fs::path dir = scratch("train-rm");
  const Run r = run_cli("train-rm --seed 2 --out " + (dir / "out").string(), dir / "c.json",
                        std::string(R"({"rm": {"pairs": 30}, )") + kShortSchedule + "}");
  REQUIRE(r.status == 0);
  expect_outputs(dir / "out", {"reward_model.ckpt"});
  const auto m = metrics(dir / "out");
  CHECK(m["scalars"]["mean_fill"].get<double>() >= 0.75);
  CHECK(load_checkpoint((dir / "out" / "reward_model.ckpt").string()).contains(kRewardHead));
}

TEST_CASE("e2e merge averages checkpoints and rejects bad weights", "[e2e]") {
  const fs::path dir = scratch("merge");
  const std::string a = save_policy(dir, "a.ckpt", 1), b = save_policy(dir, "b.ckpt", 2);
  const std::string inputs = R"("inputs": {"checkpoints": [")" + a + R"(", ")" + b + R"("]})";
  const Run bad = run_cli("merge --out " + (dir / "bad").string(), dir / "bad.json",
                          "{" + inputs + R"(, "merge": {"weights": [0.6, 0.39]}})");
  CHECK(bad.status != 0);
  CHECK_THAT(bad.output, ContainsSubstring("merge.weights") && ContainsSubstring("sum to"));
  CHECK_FALSE(fs::exists(dir / "bad" / "merged.ckpt"));

  const Run good = run_cli("merge --out " + (dir / "good").string(), dir / "good.json",
                           "{" + inputs + R"(, "merge": {"weights": [0.25, 0.75]}})");
  REQUIRE(good.status == 0);
  expect_outputs(dir / "good", {"merged.ckpt"});
  const Checkpoint merged = load_checkpoint((dir / "good" / "merged.ckpt").string());
  const Checkpoint ca = load_checkpoint(a), cb = load_checkpoint(b);
  const double expected = 0.25 * ca.at("embed.weight")[7] + 0.75 * cb.at("embed.weight")[7];
  CHECK_THAT(merged.at("embed.weight")[7], Catch::Matchers::WithinAbs(expected, 1e-15));
}

TEST_CASE("e2e soup-exp reports expert, soup and polished accuracies", "[e2e]") {
  const fs::path dir = scratch("soup-exp");
  const Run r = run_cli("soup-exp --seed 1 --out " + (dir / "out").string(), dir / "c.json",
                        R"({"soup": {"instruct_steps": 10, "expert_steps": 20, "polish_steps": 5},
                            "data": {"train_per_task": 64, "eval_per_task": 32}})");
  REQUIRE(r.status == 0);
  expect_outputs(dir / "out", {"soup.ckpt", "polished.ckpt"});
  const auto m = metrics(dir / "out");
  CHECK(m["scalars"].contains("polished_preservation_pct/shift"));
  CHECK(m["series"]["leave_one_out/copy"].size() == 3);
}

TEST_CASE("e2e polish runs the three phases with a learned reward", "[e2e]") {
  const fs::path dir = scratch("polish");
  const std::string policy = save_policy(dir, "start.ckpt", 5);
  Checkpoint rm = init_reward_params(toy_model_config(), 6);
  save_checkpoint((dir / "rm.ckpt").string(), rm);
  const Run r = run_cli("polish --seed 4 --out " + (dir / "out").string(), dir / "c.json",
                        R"({"inputs": {"checkpoint": ")" + policy + R"(", "reward_model": ")" +
                            (dir / "rm.ckpt").string() +
                            R"("}, "polish": {"prompts": 8},
                            "schedule": {"kind": "constant", "peak": 0.001, "end": 0.001, "steps": 5}})");
  REQUIRE(r.status == 0);
  expect_outputs(dir / "out", {"policy.ckpt"});
  const auto m = metrics(dir / "out");
  CHECK(m["labels"]["reward"] == "reward-model");
  for (const char* phase : {"bon-sft", "offline", "online"}) CHECK(m["scalars"].contains(std::string("heldout_reward/") + phase));
}

TEST_CASE("e2e tabular copg-optimality reports the TV distance to the optimum", "[e2e]") {
  const fs::path dir = scratch("tabular");
  const Run r = run_cli("tabular --seed 11 --out " + (dir / "out").string());
  REQUIRE(r.status == 0);
  const auto m = metrics(dir / "out");
  CHECK(m["series"]["tv_distance"].size() == 5);
  CHECK(m["scalars"]["max_tv_distance"].get<double>() <= 1e-3);

  const Run srpo = run_cli("tabular --seed 11 --out " + (dir / "srpo").string(), dir / "s.json",
                           R"({"tabular": {"scenario": "srpo", "instances": 2, "beta": 1.0, "steps": 3000}})");
  REQUIRE(srpo.status == 0);
  CHECK(metrics(dir / "srpo")["series"].contains("saddle_gap"));
}

TEST_CASE("e2e cost-model writes the event table", "[e2e]") {
  const fs::path dir = scratch("cost-model");
  const Run r = run_cli("cost-model --out " + (dir / "out").string(), dir / "c.json",
                        R"({"mesh": {"mesh": {"dp": 2, "fsdp": 1, "sp": 2, "tp": 1}, "devices": 4,
                                     "batch": 2, "seq": 4, "bytes_per_element": 4},
                            "model": {"vocab_size": 16, "d_model": 8, "n_layers": 4, "n_heads": 4,
                                      "n_kv_heads": 2, "head_dim": 2, "ffn_hidden": 16, "window": 4,
                                      "max_seq": 16}})");
  REQUIRE(r.status == 0);
  expect_outputs(dir / "out", {"events.json", "events.csv"});
  const auto events = nlohmann::json::parse(read_file((dir / "out" / "events.json").string()));
  REQUIRE(events["events"].size() == 8);
  for (const auto& e : events["events"]) CHECK(e["payload_bytes"].get<double>() == 128.0);
  CHECK(events["metadata"].contains("head_sharding"));

  const Run mismatch = run_cli("cost-model --out " + (dir / "bad").string(), dir / "bad.json",
                               R"({"mesh": {"mesh": {"dp": 2, "fsdp": 2, "sp": 2, "tp": 2}, "devices": 8}})");
  CHECK(mismatch.status == 2);
  CHECK_THAT(mismatch.output, ContainsSubstring("16") && ContainsSubstring("8"));
}

TEST_CASE("e2e eval scores accuracy and win rate", "[e2e]") {
  const fs::path dir = scratch("eval");
  const std::string a = save_policy(dir, "a.ckpt", 1), b = save_policy(dir, "b.ckpt", 2);
  const Run r = run_cli("eval --out " + (dir / "out").string(), dir / "c.json",
                        R"({"inputs": {"checkpoint": ")" + a + R"(", "reference": ")" + b + R"("}})");
  REQUIRE(r.status == 0);
  const auto m = metrics(dir / "out");
  const double w = m["scalars"]["wins"], t = m["scalars"]["ties"], l = m["scalars"]["losses"];
  CHECK(w + t + l == 192.0);
  CHECK(m["scalars"]["win_rate"].get<double>() == (w + 0.5 * t) / (w + t + l));

  const Run missing = run_cli("eval --out " + (dir / "none").string());
  CHECK(missing.status == 2);
  CHECK_THAT(missing.output, ContainsSubstring("inputs.checkpoint"));
}

TEST_CASE("e2e invalid configs fail with a field path and category", "[e2e]") {
  const fs::path dir = scratch("invalid");
  const Run unknown = run_cli("train-sft --out " + (dir / "o").string(), dir / "u.json", R"({"objective": {"betta": 1}})");
  CHECK(unknown.status == 2);
  CHECK_THAT(unknown.output, ContainsSubstring("objective.betta") && ContainsSubstring("config error"));

  const Run preset = run_cli("train-rm --preset code-sft --out " + (dir / "o").string());
  CHECK(preset.status == 2);

  fs::path truncated = dir / "t.ckpt";
  const std::string bytes = encode_checkpoint(init_params(toy_model_config(), 1));
  write_file_atomic(truncated.string(), bytes.substr(0, bytes.size() - 1));
  const Run broken = run_cli("eval --out " + (dir / "o").string(), dir / "e.json",
                             R"({"inputs": {"checkpoint": ")" + truncated.string() + R"("}})");
  CHECK(broken.status == 4);
  CHECK_THAT(broken.output, ContainsSubstring("format error"));
}
