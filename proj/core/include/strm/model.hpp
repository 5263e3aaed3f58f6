#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "strm/enrichment.hpp"
#include "strm/episodes.hpp"
#include "strm/matching.hpp"

namespace strm {

struct ModelConfig {
  std::size_t frames = 8;       // L
  std::size_t patches = 4;      // P^2
  std::size_t channels = 64;    // D
  std::size_t psi_width = 32;   // D_psi
  std::size_t trm_width = 32;   // D'
  std::size_t qc_width = 32;    // D''
  std::vector<std::size_t> cardinalities{2};
  double lambda = 0.1;
  bool use_ple = true;
  bool use_fle = true;
  bool use_qc = true;
  double tuple_keep_ratio = 1.0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on violated invariants.
  void validate() const;
  /// Whether the query-class branch contributes to the loss.
  bool qc_active() const noexcept { return use_qc && lambda > 0.0; }
};

/// Every learnable weight of the model. All groups are always allocated so
/// that ablation variants sharing a seed start from identical weights;
/// disabled groups are simply never placed on a tape.
struct ModelParams {
  PleParams ple;
  FleParams fle;
  TrmParams trm;
  QcParams qc;

  static ModelParams create(const ModelConfig& config);
  std::vector<Param*> all();
  /// Params that receive gradient under `config`, in a fixed order.
  std::vector<Param*> trainable(const ModelConfig& config);
  void zero_grads();
};

struct EpisodeScores {
  Tensor trm_logits;  // [queries x C], negative distances
  Tensor qc_logits;   // [queries x C], empty when the branch is off
};

struct EpisodeLoss {
  Var loss;
  Var loss_tm;
  Var loss_qc;       // invalid when the branch is off
  Var trm_logits;    // [queries x C]
  Var qc_logits;     // invalid when the branch is off

  EpisodeScores scores() const;
};

/// Precomputed tuple sets for a configuration.
std::vector<TupleSet> model_tuple_sets(const ModelConfig& config);

/// Builds the joint objective for one episode on `tape`:
///   loss = CE(softmax(-T)) + lambda * CE(softmax(M)), averaged over queries.
EpisodeLoss forward_episode(Tape& tape, const Dataset& dataset, const Episode& episode, ModelParams& params,
                            const ModelConfig& config, std::span<const TupleSet> tuple_sets);
EpisodeLoss forward_episode(Tape& tape, const Dataset& dataset, const Episode& episode, ModelParams& params,
                            const ModelConfig& config);

/// Enriched features E [N x L x D] (and H when `pooled` is given) for a stack of clips [N x L x P2 x D].
Var enrich_clips(const Var& clips, ModelParams& params, const ModelConfig& config, Var* pooled = nullptr);

// Checkpoint: "STCK" | u32 version=1 | u32 count | per param: u32 name length,
// name bytes, u32 rank, u32 extents[rank], f64 payload; little-endian.
inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

void save_checkpoint(std::span<Param* const> params, const std::filesystem::path& path);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);
/// Copies stored tensors into same-named params. Every stored tensor must
/// match an existing param in shape; throws ShapeError naming the first mismatch.
void restore_checkpoint(const std::vector<NamedTensor>& stored, std::span<Param* const> params);

/// The params a checkpoint should hold under `config`: the trainable set.
inline std::vector<Param*> checkpoint_params(ModelParams& params, const ModelConfig& config) {
  return params.trainable(config);
}

/// Reconstructs the structural parts of a ModelConfig from checkpoint
/// contents (toggles, widths, cardinalities, L and D when present).
/// Fields that cannot be inferred keep their values from `base`.
ModelConfig infer_config(const std::vector<NamedTensor>& stored, ModelConfig base);

}  // namespace strm
