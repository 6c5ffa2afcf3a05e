// SPDX-License-Identifier: Apache-2.0
#include "alignlab/io.h"

#include <bit>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "alignlab/errors.h"
#include "alignlab/pipeline.h"

namespace alignlab {

using Json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kMagic = "alignlab-checkpoint\n";
constexpr const char* kDtype = "f64le";

void put_le(std::string& out, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

Json parse_json(std::string_view text, const char* what) {
  try {
    return Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string(what) + ": invalid JSON: " + e.what());
  }
}

std::uint64_t manifest_unsigned(const Json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_number_unsigned()) {
    throw FormatError("checkpoint manifest: " + where + " needs unsigned integer '" + key + "'");
  }
  return it->get<std::uint64_t>();
}

void require_only_keys(const Json& obj, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [k, _] : obj.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw FormatError("checkpoint manifest: unknown key '" + k + "' in " + where);
  }
}

}  // namespace

// --- checkpoint files --------------------------------------------------------------

std::string encode_checkpoint(const Checkpoint& ckpt, std::span<const std::string> order) {
  std::vector<std::string> names(order.begin(), order.end());
  if (names.empty()) {
    names = ckpt.names();
  } else {
    std::set<std::string> unique(names.begin(), names.end());
    if (unique.size() != names.size() || names.size() != ckpt.size()) {
      throw ValueError("encode_checkpoint: order must be a permutation of the checkpoint's names");
    }
    for (const auto& n : names) {
      if (!ckpt.contains(n)) throw ValueError("encode_checkpoint: unknown parameter '" + n + "' in order");
    }
  }
  Json tensors = Json::array();
  std::string body;
  for (const auto& name : names) {
    const Tensor& t = ckpt.at(name);
    tensors.push_back(Json{{"name", name}, {"shape", t.shape()}, {"offset", body.size()}, {"count", t.size()}});
    for (double v : t.values()) put_le(body, v);
  }
  Json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["dtype"] = kDtype;
  manifest["metadata"] = Json{{"provenance", ckpt.provenance}, {"step", ckpt.step}};
  manifest["tensors"] = std::move(tensors);
  manifest["body_bytes"] = body.size();
  const std::string text = manifest.dump(1);
  std::string out(kMagic);
  out += std::to_string(text.size());
  out += '\n';
  out += text;
  out += '\n';
  out += body;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (!bytes.starts_with(kMagic)) throw FormatError("checkpoint: missing 'alignlab-checkpoint' magic line");
  bytes.remove_prefix(kMagic.size());
  const auto eol = bytes.find('\n');
  if (eol == std::string_view::npos || eol == 0) throw FormatError("checkpoint: missing manifest length line");
  std::size_t manifest_len = 0;
  const auto [end, ec] = std::from_chars(bytes.data(), bytes.data() + eol, manifest_len);
  if (ec != std::errc() || end != bytes.data() + eol) throw FormatError("checkpoint: malformed manifest length");
  bytes.remove_prefix(eol + 1);
  if (bytes.size() < manifest_len + 1 || bytes[manifest_len] != '\n') {
    throw FormatError("checkpoint: truncated manifest");
  }
  const Json manifest = parse_json(bytes.substr(0, manifest_len), "checkpoint manifest");
  bytes.remove_prefix(manifest_len + 1);
  if (!manifest.is_object()) throw FormatError("checkpoint manifest: expected an object");
  require_only_keys(manifest, {"format_version", "dtype", "metadata", "tensors", "body_bytes"}, "manifest");

  auto version = manifest.find("format_version");
  if (version == manifest.end() || !version->is_number_integer()) {
    throw FormatError("checkpoint manifest: missing integer format_version");
  }
  if (version->get<std::int64_t>() != kCheckpointFormatVersion) {
    throw FormatError("checkpoint: unsupported format version " + version->dump() + " (this build reads " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  }
  auto dtype = manifest.find("dtype");
  if (dtype == manifest.end() || !dtype->is_string() || dtype->get<std::string>() != kDtype) {
    throw FormatError("checkpoint: unsupported element type (expected f64le)");
  }
  const std::uint64_t body_bytes = manifest_unsigned(manifest, "body_bytes", "manifest");
  if (bytes.size() < body_bytes) {
    throw FormatError("checkpoint: body truncated (" + std::to_string(bytes.size()) + " of " +
                      std::to_string(body_bytes) + " bytes)");
  }
  if (bytes.size() > body_bytes) throw FormatError("checkpoint: trailing bytes after body");

  Checkpoint ckpt;
  if (auto meta = manifest.find("metadata"); meta != manifest.end()) {
    if (!meta->is_object()) throw FormatError("checkpoint manifest: metadata must be an object");
    require_only_keys(*meta, {"provenance", "step"}, "metadata");
    if (auto p = meta->find("provenance"); p != meta->end()) {
      if (!p->is_string()) throw FormatError("checkpoint manifest: provenance must be a string");
      ckpt.provenance = p->get<std::string>();
    }
    if (meta->contains("step")) ckpt.step = manifest_unsigned(*meta, "step", "metadata");
  }

  auto tensors = manifest.find("tensors");
  if (tensors == manifest.end() || !tensors->is_array()) throw FormatError("checkpoint manifest: missing tensors");
  std::uint64_t cursor = 0;
  std::uint64_t declared = 0;
  for (const Json& entry : *tensors) {
    if (!entry.is_object() || !entry.contains("name") || !entry["name"].is_string()) {
      throw FormatError("checkpoint manifest: tensor entry without a name");
    }
    const std::string name = entry["name"].get<std::string>();
    const std::string where = "tensor '" + name + "'";
    require_only_keys(entry, {"name", "shape", "offset", "count"}, where);
    if (ckpt.contains(name)) throw FormatError("checkpoint manifest: duplicate " + where);
    auto shape_it = entry.find("shape");
    if (shape_it == entry.end() || !shape_it->is_array()) throw FormatError("checkpoint manifest: " + where + " has no shape");
    Shape shape;
    for (const Json& d : *shape_it) {
      if (!d.is_number_unsigned()) throw FormatError("checkpoint manifest: " + where + " has a bad dimension");
      shape.push_back(d.get<std::size_t>());
    }
    const std::uint64_t offset = manifest_unsigned(entry, "offset", where);
    const std::uint64_t count = manifest_unsigned(entry, "count", where);
    if (count != numel(shape)) throw FormatError("checkpoint manifest: " + where + " count disagrees with its shape");
    if (offset < cursor) throw FormatError("checkpoint manifest: " + where + " overlaps the previous tensor");
    if (offset > body_bytes || count > (body_bytes - offset) / 8) {
      throw FormatError("checkpoint manifest: " + where + " extends past the body");
    }
    std::vector<double> values(count);
    for (std::uint64_t i = 0; i < count; ++i) values[i] = get_le(bytes.data() + offset + 8 * i);
    try {
      ckpt.insert(name, Tensor(std::move(shape), std::move(values)));
    } catch (const ValueError& e) {
      throw FormatError("checkpoint: " + where + ": " + e.what());
    }
    cursor = offset + 8 * count;
    declared += 8 * count;
  }
  if (declared != body_bytes) {
    throw FormatError("checkpoint: body is " + std::to_string(body_bytes) + " bytes but tensors declare " +
                      std::to_string(declared));
  }
  return ckpt;
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f.flush()) throw std::runtime_error("write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt, std::span<const std::string> order) {
  write_file_atomic(path, encode_checkpoint(ckpt, order));
}

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// --- structured config ---------------------------------------------------------------

namespace {

const char* layout_name(AttentionLayout layout) {
  return layout == AttentionLayout::AllFull ? "all-full" : "interleaved-3to1";
}

// Reads the fields a visit() names, then rejects anything left over.
class Reader {
 public:
  Reader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) fail(path_.empty() ? "document" : path_, "expected an object");
  }

  template <class T>
  void operator()(const char* key, T& field) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it != obj_.end()) read(*it, field, child(key));
  }

  void finish() const {
    for (const auto& [k, _] : obj_.items()) {
      if (!seen_.contains(k)) fail(child(k), "unknown key");
    }
  }

 private:
  [[noreturn]] static void fail(const std::string& where, const std::string& what) {
    throw FormatError("config: " + where + ": " + what);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static void read(const Json& j, double& v, const std::string& where) {
    if (!j.is_number()) fail(where, "expected a number");
    v = j.get<double>();
  }
  static void read(const Json& j, bool& v, const std::string& where) {
    if (!j.is_boolean()) fail(where, "expected true or false");
    v = j.get<bool>();
  }
  static void read(const Json& j, std::uint64_t& v, const std::string& where) {
    if (!j.is_number_unsigned()) fail(where, "expected a non-negative integer");
    v = j.get<std::uint64_t>();
  }
  static void read(const Json& j, std::string& v, const std::string& where) {
    if (!j.is_string()) fail(where, "expected a string");
    v = j.get<std::string>();
  }
  template <class T>
  static void read(const Json& j, std::vector<T>& v, const std::string& where) {
    if (!j.is_array()) fail(where, "expected an array");
    v.clear();
    for (std::size_t i = 0; i < j.size(); ++i) {
      T item{};
      read(j[i], item, where + "[" + std::to_string(i) + "]");
      v.push_back(std::move(item));
    }
  }
  static void read(const Json& j, ScheduleKind& v, const std::string& where) {
    std::string name;
    read(j, name, where);
    try {
      v = schedule_kind_from_name(name);
    } catch (const ValueError& e) {
      fail(where, e.what());
    }
  }
  static void read(const Json& j, AttentionLayout& v, const std::string& where) {
    std::string name;
    read(j, name, where);
    if (name == layout_name(AttentionLayout::AllFull)) {
      v = AttentionLayout::AllFull;
    } else if (name == layout_name(AttentionLayout::Interleaved3To1)) {
      v = AttentionLayout::Interleaved3To1;
    } else {
      fail(where, "unknown layout '" + name + "'");
    }
  }
  template <class T>
  static void read(const Json& j, std::optional<T>& v, const std::string& where) {
    T value{};
    read(j, value, where);
    v = std::move(value);
  }
  template <class T>
    requires std::is_class_v<T>
  static void read(const Json& j, T& v, const std::string& where) {
    Reader sub(j, where);
    visit(sub, v);
    sub.finish();
  }

  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <class T>
  void operator()(const char* key, const T& field) {
    if constexpr (requires { field.has_value(); }) {
      if (!field.has_value()) return;
      obj[key] = write(*field);
    } else {
      obj[key] = write(field);
    }
  }

  Json obj = Json::object();

 private:
  template <class T>
  static Json write(const T& v) {
    if constexpr (std::is_same_v<T, ScheduleKind>) {
      return schedule_kind_name(v);
    } else if constexpr (std::is_same_v<T, AttentionLayout>) {
      return layout_name(v);
    } else if constexpr (std::is_same_v<T, std::string> || std::is_arithmetic_v<T>) {
      return v;
    } else if constexpr (requires { v.begin(); }) {
      Json arr = Json::array();
      for (const auto& item : v) arr.push_back(write(item));
      return arr;
    } else {
      Writer sub;
      visit(sub, v);
      return sub.obj;
    }
  }
};

// One field list per struct, shared by Reader (mutable) and Writer (const).

template <class V, class S>
void visit_schedule(V& v, S& s) {
  v("kind", s.kind);
  v("peak", s.peak);
  v("end", s.end);
  v("steps", s.steps);
  v("beta1", s.beta1);
  v("beta2", s.beta2);
  v("eps", s.eps);
  v("weight_decay", s.weight_decay);
  v("grad_clip", s.grad_clip);
}

}  // namespace

template <class V>
void visit(V& v, SchedulePlan& s) { visit_schedule(v, s); }
template <class V>
void visit(V& v, const SchedulePlan& s) { visit_schedule(v, s); }

#define ALIGNLAB_VISIT(Type, ...)                     \
  template <class V, class S>                         \
  void visit_##Type(V& v, S& s) { __VA_ARGS__ }       \
  template <class V>                                  \
  void visit(V& v, Type& s) { visit_##Type(v, s); }   \
  template <class V>                                  \
  void visit(V& v, const Type& s) { visit_##Type(v, s); }

ALIGNLAB_VISIT(ModelConfig,
               v("vocab_size", s.vocab_size); v("d_model", s.d_model); v("n_layers", s.n_layers);
               v("n_heads", s.n_heads); v("n_kv_heads", s.n_kv_heads); v("head_dim", s.head_dim);
               v("ffn_hidden", s.ffn_hidden); v("window", s.window); v("max_seq", s.max_seq);
               v("rope_base", s.rope_base); v("layernorm_eps", s.layernorm_eps); v("dtype_bytes", s.dtype_bytes);
               v("layout", s.layout);)
ALIGNLAB_VISIT(ObjectiveSection,
               v("loss", s.loss); v("beta", s.beta); v("margin", s.margin);
               v("length_normalized", s.length_normalized); v("sft_weight", s.sft_weight);
               v("l2_to_reference", s.l2_to_reference); v("batch_size", s.batch_size);)
ALIGNLAB_VISIT(DataSection,
               v("task_seed", s.task_seed); v("train_per_task", s.train_per_task);
               v("eval_per_task", s.eval_per_task); v("tasks", s.tasks); v("batch_size", s.batch_size);)
ALIGNLAB_VISIT(MergeSection, v("weights", s.weights);)
ALIGNLAB_VISIT(SoupSection,
               v("instruct_steps", s.instruct_steps); v("expert_steps", s.expert_steps);
               v("polish_steps", s.polish_steps); v("seeds_per_expert", s.seeds_per_expert);
               v("cross_domain_fraction", s.cross_domain_fraction); v("polish_lr_divisor", s.polish_lr_divisor);)
ALIGNLAB_VISIT(TabularSection,
               v("scenario", s.scenario); v("instances", s.instances); v("prompts", s.prompts);
               v("completions", s.completions); v("beta", s.beta); v("steps", s.steps);)
ALIGNLAB_VISIT(MeshConfig, v("dp", s.dp); v("fsdp", s.fsdp); v("sp", s.sp); v("tp", s.tp);)
ALIGNLAB_VISIT(MeshSection,
               v("mesh", s.mesh); v("devices", s.devices); v("batch", s.batch); v("seq", s.seq);
               v("bytes_per_element", s.bytes_per_element); v("link_bytes_per_second", s.link_bytes_per_second);
               v("flops_per_second", s.flops_per_second); v("parallel_block", s.parallel_block);)
ALIGNLAB_VISIT(EvalSection, v("tie_tolerance", s.tie_tolerance);)
ALIGNLAB_VISIT(RmSection,
               v("pairs", s.pairs); v("capacity", s.capacity); v("tie_label", s.tie_label);
               v("gold_label", s.gold_label);)
ALIGNLAB_VISIT(PolishSection,
               v("rounds", s.rounds); v("best_of_n", s.best_of_n); v("generations", s.generations);
               v("offline_beta", s.offline_beta); v("online_beta", s.online_beta);
               v("temperature", s.temperature); v("prompts", s.prompts);)
ALIGNLAB_VISIT(InputsSection,
               v("checkpoint", s.checkpoint); v("reference", s.reference); v("reward_model", s.reward_model);
               v("checkpoints", s.checkpoints);)
ALIGNLAB_VISIT(RunConfig,
               v("command", s.command); v("seed", s.seed); v("out", s.out); v("preset", s.preset);
               v("schedule", s.schedule); v("objective", s.objective); v("model", s.model); v("data", s.data);
               v("merge", s.merge); v("soup", s.soup); v("tabular", s.tabular); v("mesh", s.mesh);
               v("eval", s.eval); v("rm", s.rm); v("polish", s.polish); v("inputs", s.inputs);)
ALIGNLAB_VISIT(Preset,
               v("name", s.name); v("objective", s.objective); v("schedule", s.schedule); v("beta", s.beta);
               v("sft_weight", s.sft_weight); v("batch_size", s.batch_size); v("best_of_n", s.best_of_n);
               v("generations", s.generations); v("gold_label", s.gold_label); v("tie_label", s.tie_label);)

#undef ALIGNLAB_VISIT

RunConfig::RunConfig() : model(toy_model_config()) {}

RunConfig parse_run_config(std::string_view json_text) {
  const Json doc = parse_json(json_text, "config");
  RunConfig config;
  Reader reader(doc, "");
  visit(reader, config);
  reader.finish();
  if (!config.preset.empty()) {
    try {
      (void)find_preset(config.preset);
    } catch (const ValueError& e) {
      throw FormatError(std::string("config: preset: ") + e.what());
    }
  }
  return config;
}

std::string dump_run_config(const RunConfig& config) {
  Writer w;
  visit(w, config);
  return w.obj.dump(2) + "\n";
}

std::string dump_preset(const Preset& preset) {
  Writer w;
  visit(w, preset);
  return w.obj.dump(2) + "\n";
}

Preset parse_preset(std::string_view json_text) {
  const Json doc = parse_json(json_text, "preset");
  Preset p;
  Reader reader(doc, "");
  visit(reader, p);
  reader.finish();
  return p;
}

SchedulePlan effective_schedule(const RunConfig& config, const SchedulePlan& fallback) {
  if (config.schedule) return *config.schedule;
  if (!config.preset.empty()) return find_preset(config.preset).schedule;
  return fallback;
}

// --- metrics ------------------------------------------------------------------------

std::string format_double(double value) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, end);
}

std::string metrics_json(const Metrics& m) {
  Json labels = Json::object(), scalars = Json::object(), series = Json::object();
  for (const auto& [k, v] : m.labels) labels[k] = v;
  for (const auto& [k, v] : m.scalars) scalars[k] = v;
  for (const auto& [k, v] : m.series) series[k] = v;
  Json doc;
  doc["labels"] = std::move(labels);
  doc["scalars"] = std::move(scalars);
  doc["series"] = std::move(series);
  return doc.dump(2) + "\n";
}

std::string metrics_csv(const Metrics& m) {
  std::string out = "name,index,value\n";
  for (const auto& [k, v] : m.labels) out += k + ",,\"" + v + "\"\n";
  for (const auto& [k, v] : m.scalars) out += k + ",," + format_double(v) + "\n";
  for (const auto& [k, values] : m.series) {
    for (std::size_t i = 0; i < values.size(); ++i) out += k + "," + std::to_string(i) + "," + format_double(values[i]) + "\n";
  }
  return out;
}

}  // namespace alignlab
