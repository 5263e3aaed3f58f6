#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "strm/ops.hpp"

namespace strm {

/// One video's backbone-free features: frames x patches x channels.
struct FeatureClip {
  std::size_t frames = 0;
  std::size_t patches = 0;
  std::size_t channels = 0;
  Tensor values;  // [frames x patches x channels]

  FeatureClip() = default;
  FeatureClip(std::size_t frames, std::size_t patches, std::size_t channels);
  FeatureClip(std::size_t frames, std::size_t patches, std::size_t channels, Tensor values);

  /// Patch rows of one frame as a [patches x channels] tensor.
  Tensor frame(std::size_t index) const;
};

/// Stable 64-bit FNV-1a hash used to derive per-parameter init seeds.
std::uint64_t name_seed(std::uint64_t seed, const std::string& name);

/// Patch-level enrichment weights. psi is a three-layer pointwise network
/// D -> D_psi -> D_psi -> D with ReLU between layers and a linear output.
struct PleParams {
  Param w_query;
  Param w_key;
  Param w_value;
  Param psi_in;
  Param psi_hidden;
  Param psi_out;

  static PleParams create(std::size_t channels, std::size_t psi_width, std::uint64_t seed);
  std::vector<Param*> all();
  std::size_t channels() const { return w_query.value().dim(0); }
};

/// Frame-level enrichment weights: token mixing over L frames, channel mixing over D.
struct FleParams {
  Param token1;
  Param token2;
  Param channel1;
  Param channel2;

  static FleParams create(std::size_t frames, std::size_t channels, std::uint64_t seed);
  std::vector<Param*> all();
  std::size_t frames() const { return token1.value().dim(0); }
  std::size_t channels() const { return channel1.value().dim(0); }
};

/// Self-attention over the patches of each frame followed by the residual
/// pointwise refinement:
///   alpha = softmax(x Wq (x Wk)^T / sqrt(D)) (x Wv) + x
///   f     = psi(alpha) + alpha
/// Accepts one frame [P2 x D] or a batch of frames [B x P2 x D].
Var ple_forward(const Var& x, PleParams& params);

/// Mean over the patch axis: [B x P2 x D] -> [B x D].
Var pool_frames(const Var& f);

/// Mixer-style enrichment of the frame sequence:
///   H* = relu(H^T Wt1) Wt2 + H^T
///   E  = relu(H*^T Wr1) Wr2 + H*^T
/// Accepts one clip [L x D] or a batch [N x L x D].
Var fle_forward(const Var& h, FleParams& params);

// Value-level conveniences that evaluate on a private tape.
Tensor ple_forward(const Tensor& x, PleParams& params);
Tensor fle_forward(const Tensor& h, FleParams& params);

/// Per-patch L2 norms of the PLE output (or of the raw features when
/// `params` is null), shape [frames x patches].
Tensor patch_activation_norms(const FeatureClip& clip, PleParams* params);

}  // namespace strm
