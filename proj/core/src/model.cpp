#include "strm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <cstdio>
#include <set>

#include "strm/random.hpp"

namespace strm {

namespace fs = std::filesystem;

void ModelConfig::validate() const {
  if (frames < 2) throw std::invalid_argument("L must be at least 2");
  if (patches == 0 || channels == 0 || psi_width == 0 || trm_width == 0 || qc_width == 0)
    throw std::invalid_argument("model extents must be positive");
  if (cardinalities.empty()) throw std::invalid_argument("at least one tuple cardinality is required");
  std::set<std::size_t> seen;
  for (auto w : cardinalities) {
    if (w == 0 || w > frames)
      throw std::invalid_argument("cardinality " + std::to_string(w) + " is not in [1, L=" + std::to_string(frames) +
                                  "]");
    if (!seen.insert(w).second) throw std::invalid_argument("duplicate cardinality " + std::to_string(w));
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite and >= 0");
  if (!(tuple_keep_ratio > 0.0 && tuple_keep_ratio <= 1.0))
    throw std::invalid_argument("tuple keep ratio must lie in (0, 1]");
  // Ratios are restricted to multiples of 1/100 or coarser.
  bool rational = false;
  for (int den = 1; den <= 100 && !rational; ++den)
    rational = std::abs(tuple_keep_ratio * den - std::round(tuple_keep_ratio * den)) < 1e-9;
  if (!rational) throw std::invalid_argument("tuple keep ratio must be a fraction with denominator <= 100");
}

ModelParams ModelParams::create(const ModelConfig& config) {
  config.validate();
  return ModelParams{
      PleParams::create(config.channels, config.psi_width, config.seed),
      FleParams::create(config.frames, config.channels, config.seed),
      TrmParams::create(config.channels, config.trm_width, config.cardinalities, config.seed),
      QcParams::create(config.channels, config.qc_width, config.cardinalities, config.seed),
  };
}

std::vector<Param*> ModelParams::all() {
  std::vector<Param*> out = ple.all();
  for (auto* p : fle.all()) out.push_back(p);
  for (auto* p : trm.all()) out.push_back(p);
  for (auto* p : qc.all()) out.push_back(p);
  return out;
}

std::vector<Param*> ModelParams::trainable(const ModelConfig& config) {
  std::vector<Param*> out;
  if (config.use_ple) out = ple.all();
  if (config.use_fle)
    for (auto* p : fle.all()) out.push_back(p);
  for (auto* p : trm.all()) out.push_back(p);
  if (config.qc_active())
    for (auto* p : qc.all()) out.push_back(p);
  return out;
}

void ModelParams::zero_grads() {
  for (auto* p : all()) p->zero_grad();
}

EpisodeScores EpisodeLoss::scores() const {
  EpisodeScores s;
  s.trm_logits = trm_logits.value();
  if (qc_logits.valid()) s.qc_logits = qc_logits.value();
  return s;
}

std::vector<TupleSet> model_tuple_sets(const ModelConfig& config) {
  return build_tuple_sets(config.frames, config.cardinalities, config.tuple_keep_ratio,
                          mix_seed(config.seed, 0x7091e));
}

Var enrich_clips(const Var& clips, ModelParams& params, const ModelConfig& config, Var* pooled) {
  const Shape& s = clips.shape();
  if (s.size() != 4) throw ShapeError("enrich_clips: expected [N x L x P2 x D], got " + shape_string(s));
  const std::size_t n = s[0], frames = s[1], patches = s[2], d = s[3];
  if (frames != config.frames || patches != config.patches || d != config.channels)
    throw ShapeError("clip extents " + shape_string({frames, patches, d}) + " do not match model extents " +
                     shape_string({config.frames, config.patches, config.channels}));
  Var f = reshape(clips, {n * frames, patches, d});
  if (config.use_ple) f = ple_forward(f, params.ple);
  const Var h = reshape(pool_frames(f), {n, frames, d});
  if (pooled) *pooled = h;
  return config.use_fle ? fle_forward(h, params.fle) : h;
}

EpisodeLoss forward_episode(Tape& tape, const Dataset& dataset, const Episode& episode, ModelParams& params,
                            const ModelConfig& config, std::span<const TupleSet> tuple_sets) {
  const std::size_t frames = dataset.frames(), patches = dataset.patches(), d = dataset.channels();
  if (frames != config.frames || patches != config.patches || d != config.channels)
    throw ShapeError("dataset extents " + shape_string({frames, patches, d}) + " do not match model extents " +
                     shape_string({config.frames, config.patches, config.channels}));
  const std::size_t ns = episode.support.size(), nq = episode.queries.size();
  const std::size_t per_clip = frames * patches * d;

  Tensor stacked({ns + nq, frames, patches, d});
  auto place = [&](std::size_t slot, std::size_t clip) {
    const auto src = dataset.clip(clip).features.values.data();
    std::copy(src.begin(), src.end(), stacked.raw() + slot * per_clip);
  };
  ClipLayout layout;
  layout.class_supports.resize(episode.classes.size());
  for (std::size_t i = 0; i < ns; ++i) {
    place(i, episode.support[i]);
    layout.class_supports.at(episode.support_targets[i]).push_back(i);
  }
  for (std::size_t i = 0; i < nq; ++i) {
    place(ns + i, episode.queries[i]);
    layout.queries.push_back(ns + i);
  }

  Var pooled;
  const Var enriched = enrich_clips(tape.constant(std::move(stacked)), params, config, &pooled);

  EpisodeLoss out;
  out.trm_logits = scale(trm_distances(enriched, layout, tuple_sets, params.trm), -1.0);
  out.loss_tm = cross_entropy(softmax_rows(out.trm_logits), episode.query_targets);
  out.loss = out.loss_tm;
  if (config.qc_active()) {
    out.qc_logits = qc_similarity(pooled, layout, tuple_sets, params.qc);
    out.loss_qc = cross_entropy(softmax_rows(out.qc_logits), episode.query_targets);
    out.loss = add(out.loss_tm, scale(out.loss_qc, config.lambda));
  }
  return out;
}

EpisodeLoss forward_episode(Tape& tape, const Dataset& dataset, const Episode& episode, ModelParams& params,
                            const ModelConfig& config) {
  const auto sets = model_tuple_sets(config);
  return forward_episode(tape, dataset, episode, params, config, sets);
}

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(std::vector<unsigned char> bytes, std::string where) : bytes_(std::move(bytes)), where_(std::move(where)) {}

  const unsigned char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError(where_ + ": truncated checkpoint");
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
  }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& where() const { return where_; }

 private:
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
  std::string where_;
};

}  // namespace

void save_checkpoint(std::span<Param* const> params, const fs::path& path) {
  std::vector<unsigned char> bytes(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(bytes, kCheckpointVersion);
  put_u32(bytes, static_cast<std::uint32_t>(params.size()));
  for (const Param* p : params) {
    put_u32(bytes, static_cast<std::uint32_t>(p->name().size()));
    bytes.insert(bytes.end(), p->name().begin(), p->name().end());
    const Shape& s = p->value().shape();
    put_u32(bytes, static_cast<std::uint32_t>(s.size()));
    for (auto e : s) put_u32(bytes, static_cast<std::uint32_t>(e));
    for (double v : p->value().data()) put_u64(bytes, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()),
           path.string());
  if (std::memcmp(r.take(4), kCheckpointMagic, 4) != 0) throw CheckpointError(path.string() + ": bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw CheckpointError(path.string() + ": unsupported version " + std::to_string(v));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    const auto* name = r.take(len);
    NamedTensor nt;
    nt.name.assign(reinterpret_cast<const char*>(name), len);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw CheckpointError(path.string() + ": bad rank for " + nt.name);
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.u32());
      total *= shape.back();
      if (shape.back() == 0 || total > (std::uint64_t{1} << 32))
        throw CheckpointError(path.string() + ": bad extents for " + nt.name);
    }
    std::vector<double> data(total);
    for (auto& v : data) v = std::bit_cast<double>(r.u64());
    nt.value = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes after last tensor");
  return out;
}

void restore_checkpoint(const std::vector<NamedTensor>& stored, std::span<Param* const> params) {
  for (const auto& nt : stored) {
    auto it = std::find_if(params.begin(), params.end(), [&](const Param* p) { return p->name() == nt.name; });
    if (it == params.end()) throw ShapeError("checkpoint tensor '" + nt.name + "' has no matching parameter");
    if ((*it)->value().shape() != nt.value.shape())
      throw ShapeError("extent mismatch for '" + nt.name + "': checkpoint " + shape_string(nt.value.shape()) +
                       ", model " + shape_string((*it)->value().shape()));
    (*it)->value() = nt.value;
  }
}

ModelConfig infer_config(const std::vector<NamedTensor>& stored, ModelConfig base) {
  auto find = [&](const std::string& name) -> const Tensor* {
    for (const auto& nt : stored)
      if (nt.name == name) return &nt.value;
    return nullptr;
  };
  base.use_ple = find("ple.w_query") != nullptr;
  base.use_fle = find("fle.token1") != nullptr;
  if (const Tensor* t = find("ple.w_query")) base.channels = t->dim(0);
  if (const Tensor* t = find("ple.psi_in")) base.psi_width = t->dim(1);
  if (const Tensor* t = find("fle.token1")) base.frames = t->dim(0);
  if (const Tensor* t = find("fle.channel1")) base.channels = t->dim(0);

  std::vector<std::size_t> cards;
  bool qc = false;
  for (const auto& nt : stored) {
    std::size_t w = 0;
    char suffix[16] = {};
    if (std::sscanf(nt.name.c_str(), "trm.w%zu.%15s", &w, suffix) == 2 && std::string(suffix) == "key") {
      cards.push_back(w);
      base.trm_width = nt.value.dim(1);
      base.channels = nt.value.dim(0) / w;
    } else if (std::sscanf(nt.name.c_str(), "qc.w%zu.%15s", &w, suffix) == 2) {
      qc = true;
      base.qc_width = nt.value.dim(1);
    }
  }
  if (cards.empty()) throw CheckpointError("checkpoint holds no TRM weights");
  base.cardinalities = cards;
  base.use_qc = qc;
  return base;
}

}  // namespace strm
