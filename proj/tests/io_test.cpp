// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>

#include <nlohmann/json.hpp>

#include "alignlab/errors.h"
#include "alignlab/io.h"
#include "alignlab/pipeline.h"
#include "alignlab/presets.h"
#include "alignlab/rng.h"

using namespace alignlab;
using Catch::Matchers::ContainsSubstring;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c = init_params(toy_model_config(), 3);
  c.provenance = "unit-test";
  c.step = 42;
  return c;
}

struct Parts {
  nlohmann::ordered_json manifest;
  std::string body;
};

// Independent split of the on-disk layout: magic line, length line, manifest,
// newline, body.
Parts split(const std::string& bytes) {
  const auto first = bytes.find('\n');
  const auto second = bytes.find('\n', first + 1);
  const std::size_t len = std::stoul(bytes.substr(first + 1, second - first - 1));
  Parts p;
  p.manifest = nlohmann::ordered_json::parse(bytes.substr(second + 1, len));
  p.body = bytes.substr(second + 1 + len + 1);
  return p;
}

std::string join(const nlohmann::ordered_json& manifest, const std::string& body) {
  const std::string text = manifest.dump();
  return "alignlab-checkpoint\n" + std::to_string(text.size()) + "\n" + text + "\n" + body;
}

}  // namespace

TEST_CASE("checkpoint bytes round-trip bitwise", "[io][checkpoint]") {
  const Checkpoint c = sample_checkpoint();
  const std::string bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.bitwise_equal(c));
  CHECK(back.names() == c.names());
  CHECK(back.provenance == "unit-test");
  CHECK(back.step == 42);
  CHECK(encode_checkpoint(back) == bytes);
}

TEST_CASE("checkpoint files survive save and load", "[io][checkpoint]") {
  const auto dir = std::filesystem::temp_directory_path() / "alignlab_io_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "c.ckpt").string();
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(path, c);
  CHECK(load_checkpoint(path).bitwise_equal(c));
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
  CHECK_THROWS(load_checkpoint((dir / "missing.ckpt").string()));
}

TEST_CASE("awkward doubles keep their exact bits", "[io][checkpoint]") {
  Checkpoint c;
  const std::vector<double> v = {-0.0, std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::max(),
                                 0.1, 1.0 / 3.0, -1e-300};
  c.insert("odd", Tensor({2, 3}, v));
  c.insert("scalar", Tensor::scalar(1.0));
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(std::bit_cast<std::uint64_t>(back.at("odd")[i]) == std::bit_cast<std::uint64_t>(v[i]));
  }
  // 1.0 is 0x3ff0000000000000; little-endian puts the high byte last.
  const std::string bytes = encode_checkpoint(c);
  CHECK(bytes.substr(bytes.size() - 8) == std::string("\0\0\0\0\0\0\xf0\x3f", 8));
}

TEST_CASE("permuted manifests change bytes but not the parameter map", "[io][checkpoint][property]") {
  const Checkpoint c = sample_checkpoint();
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::string> order = c.names();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    const std::string bytes = encode_checkpoint(c, order);
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back.names() == order);
    for (const auto& [name, t] : c.entries()) CHECK(back.at(name).bitwise_equal(t));
    if (order != c.names()) CHECK(bytes != encode_checkpoint(c));
  }
  std::vector<std::string> bad = c.names();
  bad.pop_back();
  CHECK_THROWS_AS(encode_checkpoint(c, bad), ValueError);
}

TEST_CASE("damaged checkpoints are rejected", "[io][checkpoint]") {
  const std::string good = encode_checkpoint(sample_checkpoint());
  CHECK_THROWS_WITH(decode_checkpoint(good.substr(0, good.size() - 1)), ContainsSubstring("truncated"));
  CHECK_THROWS_AS(decode_checkpoint(good + "x"), FormatError);
  CHECK_THROWS_AS(decode_checkpoint("not-a-checkpoint\n" + good), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, 30)), FormatError);

  const Parts parts = split(good);
  CHECK(decode_checkpoint(join(parts.manifest, parts.body)).bitwise_equal(sample_checkpoint()));

  auto version = parts.manifest;
  version["format_version"] = 2;
  CHECK_THROWS_WITH(decode_checkpoint(join(version, parts.body)), ContainsSubstring("version 2"));

  auto dtype = parts.manifest;
  dtype["dtype"] = "f32le";
  CHECK_THROWS_AS(decode_checkpoint(join(dtype, parts.body)), FormatError);

  auto overlap = parts.manifest;
  overlap["tensors"][1]["offset"] = 0;
  CHECK_THROWS_WITH(decode_checkpoint(join(overlap, parts.body)), ContainsSubstring("overlaps"));

  auto past_end = parts.manifest;
  auto& last = past_end["tensors"][past_end["tensors"].size() - 1];
  last["offset"] = last["offset"].get<std::uint64_t>() + 8;
  CHECK_THROWS_AS(decode_checkpoint(join(past_end, parts.body)), FormatError);

  auto short_body = parts.manifest;
  short_body["body_bytes"] = parts.body.size() + 8;
  CHECK_THROWS_AS(decode_checkpoint(join(short_body, parts.body)), FormatError);

  auto extra_key = parts.manifest;
  extra_key["compression"] = "none";
  CHECK_THROWS_AS(decode_checkpoint(join(extra_key, parts.body)), FormatError);

  auto wrong_count = parts.manifest;
  wrong_count["tensors"][0]["shape"][0] = 1;
  CHECK_THROWS_AS(decode_checkpoint(join(wrong_count, parts.body)), FormatError);

  std::string nan_body = parts.body;
  for (int i = 0; i < 8; ++i) nan_body[static_cast<std::size_t>(i)] = static_cast<char>(0xff);
  CHECK_THROWS_AS(decode_checkpoint(join(parts.manifest, nan_body)), FormatError);
}

TEST_CASE("run config defaults round-trip", "[io][config]") {
  const RunConfig c;
  CHECK(c.model == toy_model_config());
  const std::string text = dump_run_config(c);
  const RunConfig back = parse_run_config(text);
  CHECK(back == c);
  CHECK(dump_run_config(back) == text);
  CHECK(parse_run_config("{}") == c);
}

TEST_CASE("randomized run configs round-trip bit-exactly", "[io][config][property]") {
  Rng rng(17);
  auto awkward = [&] { return rng.normal() * std::pow(10.0, static_cast<double>(rng.index(40)) - 20.0); };
  for (int trial = 0; trial < 100; ++trial) {
    RunConfig c;
    c.command = "train-sft";
    c.seed = rng.next();
    c.out = "dir-" + std::to_string(trial);
    c.objective.beta = awkward();
    c.objective.margin = awkward();
    c.objective.length_normalized = rng.index(2) == 1;
    c.soup.cross_domain_fraction = rng.uniform();
    c.merge.weights = {awkward(), awkward(), 1.0 / 3.0};
    c.mesh.mesh = {1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4)};
    c.mesh.flops_per_second = awkward();
    c.model.rope_base = awkward();
    c.model.layout = rng.index(2) ? AttentionLayout::AllFull : AttentionLayout::Interleaved3To1;
    c.data.tasks = {"copy", "shift"};
    c.inputs.checkpoints = {"a.ckpt", "b.ckpt"};
    if (rng.index(2)) {
      SchedulePlan s;
      s.kind = ScheduleKind::Linear;
      s.peak = std::abs(awkward());
      s.end = s.peak * rng.uniform();
      s.steps = 1 + rng.index(1000);
      c.schedule = s;
    }
    const RunConfig back = parse_run_config(dump_run_config(c));
    REQUIRE(back == c);
    CHECK(std::bit_cast<std::uint64_t>(back.objective.beta) == std::bit_cast<std::uint64_t>(c.objective.beta));
  }
}

TEST_CASE("unknown or mistyped config keys are rejected with their path", "[io][config]") {
  CHECK_THROWS_WITH(parse_run_config(R"({"objective": {"betta": 0.1}})"), ContainsSubstring("objective.betta"));
  CHECK_THROWS_WITH(parse_run_config(R"({"colour": 1})"), ContainsSubstring("colour"));
  CHECK_THROWS_WITH(parse_run_config(R"({"seed": -1})"), ContainsSubstring("seed"));
  CHECK_THROWS_WITH(parse_run_config(R"({"seed": 1.5})"), ContainsSubstring("seed"));
  CHECK_THROWS_WITH(parse_run_config(R"({"mesh": {"mesh": {"dp": "2"}}})"), ContainsSubstring("mesh.mesh.dp"));
  CHECK_THROWS_WITH(parse_run_config(R"({"schedule": {"kind": "sawtooth"}})"), ContainsSubstring("schedule.kind"));
  CHECK_THROWS_WITH(parse_run_config(R"({"preset": "no-such-preset"})"), ContainsSubstring("no-such-preset"));
  CHECK_THROWS_AS(parse_run_config("[1, 2]"), FormatError);
  CHECK_THROWS_AS(parse_run_config("{"), FormatError);
}

TEST_CASE("every preset round-trips through its JSON form", "[io][presets]") {
  REQUIRE(presets().size() >= 12);
  for (const Preset& p : presets()) {
    const std::string text = dump_preset(p);
    const Preset back = parse_preset(text);
    CHECK(back == p);
    CHECK(dump_preset(back) == text);
    CHECK(&find_preset(p.name) == &p);
    RunConfig c;
    c.preset = p.name;
    CHECK(parse_run_config(dump_run_config(c)).preset == p.name);
  }
  CHECK_THROWS_WITH(find_preset("nope"), ContainsSubstring("code-sft"));
}

TEST_CASE("preset constants match the published recipes", "[io][presets]") {
  const Preset& ml = find_preset("sft-multilingual");
  CHECK(ml.schedule.kind == ScheduleKind::Cosine);
  CHECK(ml.schedule.peak == 2.5e-5);
  CHECK(ml.schedule.end == 1.25e-5);
  CHECK(ml.schedule.beta1 == 0.9);
  CHECK(ml.schedule.beta2 == 0.95);

  const Preset& ipo = find_preset("safety-ipo");
  CHECK(ipo.objective == "ipo");
  CHECK(ipo.beta == 0.03);

  const Preset& rl = find_preset("code-rl");
  CHECK(rl.objective == "copg");
  CHECK(rl.schedule.peak == 2e-6);
  CHECK(rl.beta == 0.06);

  const Preset& rm1 = find_preset("rm-stage1");
  CHECK(rm1.schedule.peak == 4e-5);
  CHECK(rm1.batch_size == 1024);
  CHECK(rm1.gold_label == 0.999);
  CHECK(rm1.tie_label == 0.5);
  const Preset& rm2 = find_preset("rm-stage2");
  CHECK(rm2.schedule.peak == 3e-6);
  CHECK(rm2.batch_size == 16);

  const Preset& cd = find_preset("cooldown");
  CHECK(cd.schedule.kind == ScheduleKind::Linear);
  CHECK(cd.schedule.peak == 2.5e-4);
  CHECK(cd.schedule.end == 1e-6);
  CHECK(cd.schedule.steps == 50000);
}

TEST_CASE("explicit schedules win over presets", "[io][config]") {
  RunConfig c;
  const SchedulePlan fallback = toy_plan(7);
  CHECK(effective_schedule(c, fallback) == fallback);
  c.preset = "code-sft";
  CHECK(effective_schedule(c, fallback) == find_preset("code-sft").schedule);
  c.schedule = toy_plan(3);
  CHECK(effective_schedule(c, fallback) == toy_plan(3));
}

TEST_CASE("metric files use shortest round-trip decimals", "[io][metrics]") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(-2.5e-5) == "-2.5e-05");
  Rng rng(23);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, static_cast<double>(rng.index(60)) - 30.0);
    CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
  }
  Metrics m;
  m.label("command", "eval");
  m.scalar("accuracy", 0.75);
  m.add_series("loss", {1.0, 0.5});
  CHECK(metrics_csv(m) == "name,index,value\ncommand,,\"eval\"\naccuracy,,0.75\nloss,0,1\nloss,1,0.5\n");
  const auto doc = nlohmann::json::parse(metrics_json(m));
  CHECK(doc["scalars"]["accuracy"].get<double>() == 0.75);
  CHECK(doc["series"]["loss"].size() == 2);
  CHECK(doc["labels"]["command"] == "eval");
}
