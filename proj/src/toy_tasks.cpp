// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>

#include "alignlab/errors.h"
#include "alignlab/pipeline.h"

namespace alignlab {

ModelConfig toy_model_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 32;
  c.n_layers = 4;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.ffn_hidden = 64;
  c.window = 8;
  c.max_seq = 16;
  return c;
}

const char* task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::Shift: return "shift";
  }
  return "?";
}

namespace {

std::vector<std::size_t> apply_task(TaskKind kind, std::span<const std::size_t> symbols) {
  std::vector<std::size_t> out(symbols.begin(), symbols.end());
  switch (kind) {
    case TaskKind::Copy:
      break;
    case TaskKind::Reverse:
      std::reverse(out.begin(), out.end());
      break;
    case TaskKind::Shift:
      for (auto& s : out) s = toy::kFirstSymbol + (s - toy::kFirstSymbol + toy::kShift) % toy::kAlphabet;
      break;
  }
  return out;
}

void check_symbols(std::span<const std::size_t> symbols) {
  if (symbols.size() != toy::kSymbols) throw ShapeError("toy task: expected " + std::to_string(toy::kSymbols) + " symbols");
  for (std::size_t s : symbols) {
    if (s < toy::kFirstSymbol || s >= toy::kFirstSymbol + toy::kAlphabet) {
      throw ValueError("toy task: token " + std::to_string(s) + " is not a symbol");
    }
  }
}

}  // namespace

Example make_example(TaskKind kind, std::span<const std::size_t> symbols) {
  check_symbols(symbols);
  Example e;
  e.tokens.push_back(toy::kFirstTaskToken + static_cast<std::size_t>(kind));
  e.tokens.insert(e.tokens.end(), symbols.begin(), symbols.end());
  e.tokens.push_back(toy::kSep);
  e.prompt_length = e.tokens.size();
  const auto out = apply_task(kind, symbols);
  e.tokens.insert(e.tokens.end(), out.begin(), out.end());
  return e;
}

std::vector<std::size_t> TaskSpec::target(std::span<const std::size_t> symbols) const {
  check_symbols(symbols);
  return apply_task(kind, symbols);
}

std::vector<TaskSpec> make_toy_tasks(std::uint64_t seed, const ToyTaskOptions& options) {
  std::size_t inputs = 1;
  for (std::size_t i = 0; i < toy::kSymbols; ++i) inputs *= toy::kAlphabet;
  if (options.train_examples == 0 || options.eval_examples == 0) throw ValueError("toy tasks: empty split");
  if (options.train_examples + options.eval_examples > inputs) {
    throw ValueError("toy tasks: at most " + std::to_string(inputs) + " distinct inputs per task");
  }
  const std::pair<TaskKind, const char*> kinds[] = {
      {TaskKind::Copy, "code"}, {TaskKind::Reverse, "multilingual"}, {TaskKind::Shift, "math"}};
  Rng seeds(seed);
  std::vector<TaskSpec> tasks;
  for (const auto& [kind, capability] : kinds) {
    TaskSpec t;
    t.kind = kind;
    t.name = task_kind_name(kind);
    t.capability = capability;
    t.seed = seeds.next();
    t.example_count = options.train_examples + options.eval_examples;
    std::vector<std::size_t> order(inputs);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(t.seed);
    for (std::size_t i = inputs - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
    for (std::size_t i = 0; i < t.example_count; ++i) {
      std::vector<std::size_t> symbols(toy::kSymbols);
      std::size_t code = order[i];
      for (auto& s : symbols) {
        s = toy::kFirstSymbol + code % toy::kAlphabet;
        code /= toy::kAlphabet;
      }
      (i < options.train_examples ? t.train : t.eval).push_back(make_example(kind, symbols));
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

LmBatch make_lm_batch(std::span<const Example> examples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValueError("lm batch: no examples");
  std::size_t longest = 0;
  for (std::size_t i : indices) {
    if (i >= examples.size()) throw ValueError("lm batch: index " + std::to_string(i) + " out of range");
    const Example& e = examples[i];
    if (e.prompt_length == 0 || e.prompt_length >= e.tokens.size()) {
      throw ValueError("lm batch: example needs a non-empty prompt and completion");
    }
    longest = std::max(longest, e.tokens.size());
  }
  const std::size_t seq = longest - 1;
  LmBatch out;
  std::vector<std::size_t> inputs;
  for (std::size_t i : indices) {
    const Example& e = examples[i];
    for (std::size_t p = 0; p < seq; ++p) {
      const bool real = p + 1 < e.tokens.size();
      inputs.push_back(p < e.tokens.size() ? e.tokens[p] : toy::kPad);
      out.targets.push_back(real ? e.tokens[p + 1] : toy::kPad);
      out.mask.push_back(real && p + 1 >= e.prompt_length ? 0 : 1);
    }
  }
  out.batch = SequenceBatch::from_tokens(indices.size(), seq, std::move(inputs));
  return out;
}

double task_accuracy(const ModelConfig& config, const Checkpoint& params, std::span<const Example> examples) {
  if (examples.empty()) throw ValueError("task_accuracy: no examples");
  constexpr std::size_t kChunk = 64;
  std::size_t correct = 0, total = 0;
  for (std::size_t begin = 0; begin < examples.size(); begin += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, examples.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const LmBatch b = make_lm_batch(examples, idx);
    const Tensor logits = model_forward(b.batch, config, params);
    const std::size_t vocab = config.vocab_size;
    for (std::size_t r = 0; r < b.targets.size(); ++r) {
      if (b.mask[r]) continue;
      const auto row = logits.values().subspan(r * vocab, vocab);
      const std::size_t pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == b.targets[r];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace alignlab
