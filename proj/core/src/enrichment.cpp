#include "strm/enrichment.hpp"

#include <cmath>

#include "strm/random.hpp"

namespace strm {

FeatureClip::FeatureClip(std::size_t frames, std::size_t patches, std::size_t channels)
    : FeatureClip(frames, patches, channels, Tensor({frames, patches, channels})) {}

FeatureClip::FeatureClip(std::size_t frames, std::size_t patches, std::size_t channels, Tensor values)
    : frames(frames), patches(patches), channels(channels), values(std::move(values)) {
  if (this->values.shape() != Shape{frames, patches, channels})
    throw ShapeError("clip values " + shape_string(this->values.shape()) + " do not match extents " +
                     shape_string({frames, patches, channels}));
}

Tensor FeatureClip::frame(std::size_t index) const {
  if (index >= frames) throw std::out_of_range("frame index " + std::to_string(index));
  const std::size_t n = patches * channels;
  auto src = values.data().subspan(index * n, n);
  return Tensor({patches, channels}, std::vector<double>(src.begin(), src.end()));
}

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed, h);
}

namespace {

Param make_param(const std::string& name, std::size_t rows, std::size_t cols, std::uint64_t seed) {
  return Param(name, seeded_init({rows, cols}, rows, cols, name_seed(seed, name)));
}

}  // namespace

PleParams PleParams::create(std::size_t channels, std::size_t psi_width, std::uint64_t seed) {
  return PleParams{
      make_param("ple.w_query", channels, channels, seed),
      make_param("ple.w_key", channels, channels, seed),
      make_param("ple.w_value", channels, channels, seed),
      make_param("ple.psi_in", channels, psi_width, seed),
      make_param("ple.psi_hidden", psi_width, psi_width, seed),
      make_param("ple.psi_out", psi_width, channels, seed),
  };
}

std::vector<Param*> PleParams::all() { return {&w_query, &w_key, &w_value, &psi_in, &psi_hidden, &psi_out}; }

FleParams FleParams::create(std::size_t frames, std::size_t channels, std::uint64_t seed) {
  return FleParams{
      make_param("fle.token1", frames, frames, seed),
      make_param("fle.token2", frames, frames, seed),
      make_param("fle.channel1", channels, channels, seed),
      make_param("fle.channel2", channels, channels, seed),
  };
}

std::vector<Param*> FleParams::all() { return {&token1, &token2, &channel1, &channel2}; }

Var ple_forward(const Var& x, PleParams& params) {
  const Shape in_shape = x.shape();
  if (in_shape.size() == 2) return reshape(ple_forward(reshape(x, {1, in_shape[0], in_shape[1]}), params), in_shape);
  if (in_shape.size() != 3) throw ShapeError("ple_forward: expected [P2 x D] or [B x P2 x D], got " + shape_string(in_shape));
  const std::size_t batch = in_shape[0], patches = in_shape[1], d = in_shape[2];
  if (d != params.channels())
    throw ShapeError("ple_forward: features have D=" + std::to_string(d) + " but weights expect D=" +
                     std::to_string(params.channels()));

  Tape& tape = x.tape();
  const Var rows = reshape(x, {batch * patches, d});
  const Var q = reshape(matmul(rows, tape.param(params.w_query)), in_shape);
  const Var k = reshape(matmul(rows, tape.param(params.w_key)), in_shape);
  const Var v = reshape(matmul(rows, tape.param(params.w_value)), in_shape);
  const Var scores = scale(batch_matmul_transposed(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  const Var alpha = add(batch_matmul(softmax_rows(scores), v), x);

  const Var a_rows = reshape(alpha, {batch * patches, d});
  Var hidden = relu(matmul(a_rows, tape.param(params.psi_in)));
  hidden = relu(matmul(hidden, tape.param(params.psi_hidden)));
  const Var refined = matmul(hidden, tape.param(params.psi_out));
  return reshape(add(refined, a_rows), in_shape);
}

Var pool_frames(const Var& f) {
  if (f.shape().size() != 3) throw ShapeError("pool_frames: expected [B x P2 x D], got " + shape_string(f.shape()));
  return mean(f, 1);
}

Var fle_forward(const Var& h, FleParams& params) {
  const Shape in_shape = h.shape();
  if (in_shape.size() == 2) return reshape(fle_forward(reshape(h, {1, in_shape[0], in_shape[1]}), params), in_shape);
  if (in_shape.size() != 3) throw ShapeError("fle_forward: expected [L x D] or [N x L x D], got " + shape_string(in_shape));
  const std::size_t clips = in_shape[0], frames = in_shape[1], d = in_shape[2];
  if (frames != params.frames() || d != params.channels())
    throw ShapeError("fle_forward: input " + shape_string(in_shape) + " does not match weights for L=" +
                     std::to_string(params.frames()) + ", D=" + std::to_string(params.channels()));

  Tape& tape = h.tape();
  // Token mixing acts on H^T, one row per (clip, channel).
  const Var ht = reshape(transpose(h), {clips * d, frames});
  const Var mixed = matmul(relu(matmul(ht, tape.param(params.token1))), tape.param(params.token2));
  const Var h_star = add(mixed, ht);
  // Channel mixing acts on H*^T, one row per (clip, frame).
  const Var hs_t = reshape(transpose(reshape(h_star, {clips, d, frames})), {clips * frames, d});
  const Var refined = matmul(relu(matmul(hs_t, tape.param(params.channel1))), tape.param(params.channel2));
  return reshape(add(refined, hs_t), in_shape);
}

Tensor ple_forward(const Tensor& x, PleParams& params) {
  Tape tape;
  return ple_forward(tape.constant(x), params).value();
}

Tensor fle_forward(const Tensor& h, FleParams& params) {
  Tape tape;
  return fle_forward(tape.constant(h), params).value();
}

Tensor patch_activation_norms(const FeatureClip& clip, PleParams* params) {
  Tape tape;
  Var f = tape.constant(clip.values);
  if (params) f = ple_forward(f, *params);
  return reshape(l2_norm(f), {clip.frames, clip.patches}).value();
}

}  // namespace strm
