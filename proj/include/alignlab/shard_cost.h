// SPDX-License-Identifier: Apache-2.0
//
// Analytic communication model for a four-axis device mesh (data, fully sharded
// data, sequence and tensor parallel). Nothing here touches real devices: the
// functions enumerate the collectives one forward pass of the hybrid model would
// issue and annotate which compute each one can hide behind.
//
// Payloads follow the ring convention: a collective over p devices on a tensor of
// T bytes moves (p-1)/p * T bytes per device for all-gather and reduce-scatter,
// and 2(p-1)/p * T for all-reduce.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/model.h"

namespace alignlab {

struct MeshConfig {
  std::size_t dp = 1;
  std::size_t fsdp = 1;
  std::size_t sp = 1;
  std::size_t tp = 1;

  std::size_t devices() const noexcept { return dp * fsdp * sp * tp; }
  bool operator==(const MeshConfig&) const = default;
};

/// Throws ValueError when an axis is zero or the axis product differs from
/// n_devices; the message carries both numbers.
void validate_mesh(const MeshConfig& mesh, std::size_t n_devices);

enum class Collective { AllGather, ReduceScatter, AllReduce };
enum class CommSubject { Activations, Weights };
enum class CommPhase { Attention, Ffn, Embedding };

const char* collective_name(Collective c);
const char* comm_subject_name(CommSubject s);
const char* comm_phase_name(CommPhase p);

struct CommEvent {
  Collective kind = Collective::AllGather;
  CommSubject subject = CommSubject::Activations;
  CommPhase phase = CommPhase::Attention;
  /// Transformer layer index, or -1 for the embedding table.
  int layer = 0;
  /// Mesh axis the collective runs over: "sp", "tp" or "fsdp".
  std::string axis;
  /// Short description of the tensor involved, e.g. "attn-input".
  std::string tensor;
  double payload_bytes = 0.0;
  /// Name of the compute region this transfer hides behind, if any.
  std::optional<std::string> overlapped_with;

  bool operator==(const CommEvent&) const = default;
};

struct CommPlan {
  std::vector<CommEvent> events;
  /// Modelling assumptions that affect the numbers (key, value).
  std::vector<std::pair<std::string, std::string>> metadata;
};

/// Multiplier applied to forward volumes to account for the backward pass.
inline constexpr double kBackwardFactor = 2.0;

/// Forward-pass collectives for one micro-batch of `batch` sequences of length
/// `seq` held by one data-parallel replica. Throws ValueError when seq is not
/// divisible by sp or when head/FFN dimensions are not divisible by the axis
/// that shards them.
CommPlan layer_comm(const ModelConfig& config, const MeshConfig& mesh, std::size_t batch, std::size_t seq,
                    std::size_t bytes_per_element);

/// Sum of payloads; with include_backward the total is scaled by kBackwardFactor.
double total_bytes(const std::vector<CommEvent>& events, bool include_backward = false);

/// Fills overlapped_with following the parallel-block schedule. With
/// parallel_block false, activation collectives stay exposed because attention
/// and FFN no longer share an input.
std::vector<CommEvent> overlap_schedule(std::vector<CommEvent> events, bool parallel_block = true);

/// Floating-point work per named compute region of one layer on one device:
/// "ffn-expansion", "ffn-reduction", "attention" and "layer" (their sum).
std::vector<std::pair<std::string, double>> layer_compute_flops(const ModelConfig& config, const MeshConfig& mesh,
                                                                std::size_t batch, std::size_t seq);

struct CostModel {
  std::function<double(const CommEvent&)> comm_seconds;
  /// Receives the overlapped_with name of an event.
  std::function<double(const std::string&)> compute_seconds;
};

/// Bandwidth/throughput cost model built on layer_compute_flops. Weight gathers
/// marked as overlapping "layer" compute are charged against a whole layer.
CostModel bandwidth_cost_model(const ModelConfig& config, const MeshConfig& mesh, std::size_t batch,
                               std::size_t seq, double link_bytes_per_second, double flops_per_second);

/// Sum over events of max(0, comm - compute) for overlapped events and comm for
/// the rest.
double exposed_seconds(const std::vector<CommEvent>& events, const CostModel& cost);

}  // namespace alignlab
