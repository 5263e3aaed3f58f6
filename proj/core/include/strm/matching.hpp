#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "strm/ops.hpp"

namespace strm {

/// Strictly increasing zero-based frame indices (t1 < ... < t_omega).
struct TupleIndex {
  std::vector<std::size_t> frames;

  std::size_t cardinality() const noexcept { return frames.size(); }
  friend auto operator<=>(const TupleIndex&, const TupleIndex&) = default;
};

std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

/// All tuples of one cardinality in lexicographic order.
std::vector<TupleIndex> enumerate_tuples(std::size_t frames, std::size_t cardinality);
/// Tuples for each cardinality in `cardinalities`, concatenated in the given order.
/// Throws std::invalid_argument if any cardinality is 0 or exceeds `frames`.
std::vector<TupleIndex> enumerate_tuples(std::size_t frames, std::span<const std::size_t> cardinalities);

/// The tuples matched for one cardinality.
struct TupleSet {
  std::size_t cardinality = 0;
  std::vector<TupleIndex> tuples;
};

/// Per-cardinality tuple sets, optionally subsampled: when keep_ratio < 1 the
/// first ceil(keep_ratio * |set|) tuples of a seed-shuffled order are kept
/// (restored to lexicographic order). keep_ratio == 1 keeps every tuple.
std::vector<TupleSet> build_tuple_sets(std::size_t frames, std::span<const std::size_t> cardinalities,
                                       double keep_ratio = 1.0, std::uint64_t seed = 0);

/// Concatenated frame rows [e_t1; ...; e_tw] of a [L x D] tensor, shape [w*D].
Var tuple_repr(const Var& frames, const TupleIndex& tuple);

/// Tuple representations for a batch of clips [N x L x D] -> [N*T x w*D],
/// clip-major, tuple order as given.
Var tuple_matrix(const Var& clips, std::span<const TupleIndex> tuples);

/// Key and value embeddings for one cardinality, each [w*D x D'].
struct TrmCardinalityParams {
  Param key;
  Param value;
};

struct TrmParams {
  std::map<std::size_t, TrmCardinalityParams> by_cardinality;

  static TrmParams create(std::size_t channels, std::size_t width, std::span<const std::size_t> cardinalities,
                          std::uint64_t seed);
  std::vector<Param*> all();
  std::size_t width() const;
};

/// Tuple code projection W_cls [w*D x D''] per cardinality.
struct QcParams {
  std::map<std::size_t, Param> by_cardinality;

  static QcParams create(std::size_t channels, std::size_t width, std::span<const std::size_t> cardinalities,
                         std::uint64_t seed);
  std::vector<Param*> all();
};

/// Which clips of a batch are queries and which support each class.
struct ClipLayout {
  std::vector<std::size_t> queries;
  std::vector<std::vector<std::size_t>> class_supports;

  std::size_t num_classes() const noexcept { return class_supports.size(); }
};

/// Distances T(Q, S^c) for every query and class, shape [num_queries x C].
/// For each query tuple a class prototype is the softmax(k_q . k_s / sqrt(D'))
/// weighted sum of support value embeddings over all K * |tuples| support
/// tuples of the class; the contribution is ||v_q - prototype||_2, averaged
/// over tuples of a cardinality and summed over cardinalities.
Var trm_distances(const Var& clips, const ClipLayout& layout, std::span<const TupleSet> tuple_sets,
                  TrmParams& params);

/// Query-class similarity M(Q, c), shape [num_queries x C]. Tuple codes are
/// z = relu(l_t W_cls); each query tuple takes its best cosine match among
/// the class's support tuples; scores are averaged per cardinality and summed.
Var qc_similarity(const Var& clips, const ClipLayout& layout, std::span<const TupleSet> tuple_sets,
                  QcParams& params);

/// Single query against one class's supports [K x L x D]; returns shape [1].
Var trm_distance(const Var& query, const Var& supports, std::span<const TupleSet> tuple_sets, TrmParams& params);

}  // namespace strm
