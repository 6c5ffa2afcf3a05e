// SPDX-License-Identifier: Apache-2.0
#include "alignlab/shard_cost.h"

#include <algorithm>

#include "alignlab/errors.h"

namespace alignlab {

namespace {

double ring_fraction(std::size_t p) { return static_cast<double>(p - 1) / static_cast<double>(p); }

void require_divisible(std::size_t value, std::size_t axis, const char* what, const char* axis_name) {
  if (value % axis != 0) {
    throw ValueError(std::string("layer_comm: ") + what + " = " + std::to_string(value) + " is not divisible by " +
                     axis_name + " = " + std::to_string(axis));
  }
}

// Weights of one block that are split across the tensor-parallel axis, and the
// norm weights that every shard keeps whole.
double block_sharded_params(const ModelConfig& c) {
  const double d = static_cast<double>(c.d_model);
  const double qd = static_cast<double>(c.n_heads * c.head_dim);
  const double kvd = static_cast<double>(c.n_kv_heads * c.head_dim);
  const double f = static_cast<double>(c.ffn_hidden);
  return d * qd + 2.0 * d * kvd + qd * d + 3.0 * d * f;
}

constexpr const char* kLayerCompute = "layer";

}  // namespace

void validate_mesh(const MeshConfig& mesh, std::size_t n_devices) {
  if (mesh.dp == 0 || mesh.fsdp == 0 || mesh.sp == 0 || mesh.tp == 0) {
    throw ValueError("mesh axes must all be >= 1");
  }
  if (mesh.devices() != n_devices) {
    throw ValueError("mesh dp*fsdp*sp*tp = " + std::to_string(mesh.devices()) + " does not match device count " +
                     std::to_string(n_devices));
  }
}

const char* collective_name(Collective c) {
  switch (c) {
    case Collective::AllGather: return "all-gather";
    case Collective::ReduceScatter: return "reduce-scatter";
    case Collective::AllReduce: return "all-reduce";
  }
  return "?";
}

const char* comm_subject_name(CommSubject s) {
  return s == CommSubject::Activations ? "activations" : "weights";
}

const char* comm_phase_name(CommPhase p) {
  switch (p) {
    case CommPhase::Attention: return "attention";
    case CommPhase::Ffn: return "ffn";
    case CommPhase::Embedding: return "embedding";
  }
  return "?";
}

CommPlan layer_comm(const ModelConfig& config, const MeshConfig& mesh, std::size_t batch, std::size_t seq,
                    std::size_t bytes_per_element) {
  config.validate();
  validate_mesh(mesh, mesh.devices());
  if (batch == 0 || seq == 0 || bytes_per_element == 0) {
    throw ValueError("layer_comm: batch, seq and bytes per element must be >= 1");
  }
  require_divisible(seq, mesh.sp, "seq", "sp");
  if (mesh.sp > 1) require_divisible(config.n_heads, mesh.sp, "n_heads", "sp");
  if (mesh.tp > 1) {
    require_divisible(config.n_heads, mesh.tp, "n_heads", "tp");
    require_divisible(config.ffn_hidden, mesh.tp, "ffn_hidden", "tp");
  }

  const double bytes = static_cast<double>(bytes_per_element);
  const double activation = static_cast<double>(batch) * static_cast<double>(seq) *
                            static_cast<double>(config.d_model) * bytes;
  const double tp = static_cast<double>(mesh.tp);
  const double block_weights =
      (block_sharded_params(config) / tp + static_cast<double>(config.d_model)) * bytes;
  const double embedding_weights =
      static_cast<double>(config.vocab_size) * static_cast<double>(config.d_model) / tp * bytes;

  CommPlan plan;
  auto emit = [&](Collective kind, CommSubject subject, CommPhase phase, int layer, std::string axis,
                  std::string tensor, double payload) {
    CommEvent e;
    e.kind = kind;
    e.subject = subject;
    e.phase = phase;
    e.layer = layer;
    e.axis = std::move(axis);
    e.tensor = std::move(tensor);
    e.payload_bytes = payload;
    plan.events.push_back(std::move(e));
  };

  if (mesh.fsdp > 1) {
    emit(Collective::AllGather, CommSubject::Weights, CommPhase::Embedding, -1, "fsdp", "embedding",
         embedding_weights * ring_fraction(mesh.fsdp));
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const int layer = static_cast<int>(l);
    if (mesh.fsdp > 1) {
      emit(Collective::AllGather, CommSubject::Weights, CommPhase::Attention, layer, "fsdp", "block-weights",
           block_weights * ring_fraction(mesh.fsdp));
    }
    if (mesh.sp > 1) {
      // Gather the sequence shards before the QKV projection, then scatter the
      // summed attention output back to sequence shards. Norms and the FFN act
      // on each sequence shard independently.
      const double payload = activation * ring_fraction(mesh.sp);
      emit(Collective::AllGather, CommSubject::Activations, CommPhase::Attention, layer, "sp", "attn-input", payload);
      emit(Collective::ReduceScatter, CommSubject::Activations, CommPhase::Attention, layer, "sp", "attn-output",
           payload);
    }
    if (mesh.tp > 1) {
      // Weight-stationary layout. The parallel block feeds attention and FFN
      // from the same normed input and sums their outputs, so one gather and one
      // all-reduce cover both branches.
      emit(Collective::AllGather, CommSubject::Activations, CommPhase::Attention, layer, "tp", "block-input",
           activation * ring_fraction(mesh.tp));
      emit(Collective::AllReduce, CommSubject::Activations, CommPhase::Attention, layer, "tp", "block-output",
           2.0 * activation * ring_fraction(mesh.tp));
    }
  }

  plan.metadata.emplace_back("payload_convention", "ring, per device");
  plan.metadata.emplace_back("passes", "forward only; backward = 2x forward volume");
  if (mesh.sp > 1) {
    plan.metadata.emplace_back("head_sharding",
                               "query heads sharded across sp; KV heads replicated within the sp group");
  }
  if (mesh.dp > 1) {
    plan.metadata.emplace_back("dp", "gradient all-reduce happens in backward and is not listed");
  }
  return plan;
}

double total_bytes(const std::vector<CommEvent>& events, bool include_backward) {
  double total = 0.0;
  for (const auto& e : events) total += e.payload_bytes;
  return include_backward ? kBackwardFactor * total : total;
}

std::vector<CommEvent> overlap_schedule(std::vector<CommEvent> events, bool parallel_block) {
  for (auto& e : events) {
    e.overlapped_with.reset();
    if (e.subject == CommSubject::Weights) {
      // Prefetch: block l's weights arrive while block l-1 computes. The
      // embedding table and block 0 have nothing earlier to hide behind.
      if (e.layer >= 1) e.overlapped_with = kLayerCompute;
      continue;
    }
    if (!parallel_block || e.axis != "sp") continue;
    if (e.kind == Collective::AllGather) e.overlapped_with = "ffn-expansion";
    if (e.kind == Collective::ReduceScatter) e.overlapped_with = "ffn-reduction";
  }
  return events;
}

std::vector<std::pair<std::string, double>> layer_compute_flops(const ModelConfig& config, const MeshConfig& mesh,
                                                                std::size_t batch, std::size_t seq) {
  const double tokens = static_cast<double>(batch) * static_cast<double>(seq) / static_cast<double>(mesh.sp);
  const double d = static_cast<double>(config.d_model);
  const double f = static_cast<double>(config.ffn_hidden) / static_cast<double>(mesh.tp);
  const double qd = static_cast<double>(config.n_heads * config.head_dim) / static_cast<double>(mesh.tp);
  const double kvd = static_cast<double>(config.n_kv_heads * config.head_dim) / static_cast<double>(mesh.tp);
  const double expansion = 2.0 * tokens * d * 2.0 * f;
  const double reduction = 2.0 * tokens * f * d;
  const double projections = 2.0 * tokens * d * (2.0 * qd + 2.0 * kvd);
  const double scores = 2.0 * 2.0 * tokens * static_cast<double>(seq) * qd;
  const double attention = projections + scores;
  return {{"ffn-expansion", expansion},
          {"ffn-reduction", reduction},
          {"attention", attention},
          {kLayerCompute, expansion + reduction + attention}};
}

CostModel bandwidth_cost_model(const ModelConfig& config, const MeshConfig& mesh, std::size_t batch,
                               std::size_t seq, double link_bytes_per_second, double flops_per_second) {
  if (!(link_bytes_per_second > 0.0) || !(flops_per_second > 0.0)) {
    throw ValueError("bandwidth_cost_model: bandwidth and throughput must be > 0");
  }
  const auto flops = layer_compute_flops(config, mesh, batch, seq);
  CostModel cost;
  cost.comm_seconds = [link_bytes_per_second](const CommEvent& e) { return e.payload_bytes / link_bytes_per_second; };
  cost.compute_seconds = [flops, flops_per_second](const std::string& name) {
    for (const auto& [region, value] : flops) {
      if (region == name) return value / flops_per_second;
    }
    throw ValueError("bandwidth_cost_model: unknown compute region '" + name + "'");
  };
  return cost;
}

double exposed_seconds(const std::vector<CommEvent>& events, const CostModel& cost) {
  double exposed = 0.0;
  for (const auto& e : events) {
    const double comm = cost.comm_seconds(e);
    exposed += e.overlapped_with ? std::max(0.0, comm - cost.compute_seconds(*e.overlapped_with)) : comm;
  }
  return exposed;
}

}  // namespace alignlab
