#include "strm/matching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "strm/enrichment.hpp"
#include "strm/random.hpp"

namespace strm {

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

std::vector<TupleIndex> enumerate_tuples(std::size_t frames, std::size_t cardinality) {
  if (cardinality == 0 || cardinality > frames)
    throw std::invalid_argument("tuple cardinality " + std::to_string(cardinality) + " is not in [1, " +
                                std::to_string(frames) + "]");
  std::vector<TupleIndex> out;
  std::vector<std::size_t> idx(cardinality);
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    out.push_back(TupleIndex{idx});
    // Advance the rightmost index that still has room.
    std::size_t pos = cardinality;
    while (pos > 0 && idx[pos - 1] == frames - cardinality + (pos - 1)) --pos;
    if (pos == 0) break;
    ++idx[pos - 1];
    for (std::size_t j = pos; j < cardinality; ++j) idx[j] = idx[j - 1] + 1;
  }
  return out;
}

std::vector<TupleIndex> enumerate_tuples(std::size_t frames, std::span<const std::size_t> cardinalities) {
  std::vector<TupleIndex> out;
  for (auto w : cardinalities) {
    auto part = enumerate_tuples(frames, w);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<TupleSet> build_tuple_sets(std::size_t frames, std::span<const std::size_t> cardinalities,
                                       double keep_ratio, std::uint64_t seed) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
    throw std::invalid_argument("tuple keep ratio must lie in (0, 1]");
  std::vector<TupleSet> sets;
  for (auto w : cardinalities) {
    TupleSet set{w, enumerate_tuples(frames, w)};
    const std::size_t n = set.tuples.size();
    // The epsilon absorbs representation error in ratios such as 0.2 * 10.
    const auto keep = static_cast<std::size_t>(std::ceil(keep_ratio * static_cast<double>(n) - 1e-9));
    if (keep < n) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      Rng rng(mix_seed(seed, w));
      rng.shuffle(std::span<std::size_t>(order));
      order.resize(std::max<std::size_t>(keep, 1));
      std::sort(order.begin(), order.end());
      std::vector<TupleIndex> kept;
      for (auto i : order) kept.push_back(set.tuples[i]);
      set.tuples = std::move(kept);
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

Var tuple_repr(const Var& frames, const TupleIndex& tuple) {
  if (frames.shape().size() != 2) throw ShapeError("tuple_repr: expected [L x D], got " + shape_string(frames.shape()));
  const std::size_t d = frames.shape()[1];
  return reshape(index_rows(frames, tuple.frames), {tuple.cardinality() * d});
}

Var tuple_matrix(const Var& clips, std::span<const TupleIndex> tuples) {
  const Shape& s = clips.shape();
  if (s.size() != 3) throw ShapeError("tuple_matrix: expected [N x L x D], got " + shape_string(s));
  if (tuples.empty()) throw ShapeError("tuple_matrix: no tuples");
  const std::size_t n = s[0], frames = s[1], d = s[2];
  const std::size_t w = tuples.front().cardinality();
  std::vector<std::size_t> rows;
  rows.reserve(n * tuples.size() * w);
  for (std::size_t c = 0; c < n; ++c)
    for (const auto& t : tuples) {
      if (t.cardinality() != w) throw std::invalid_argument("tuple_matrix: mixed cardinalities");
      for (auto f : t.frames) {
        if (f >= frames) throw std::out_of_range("tuple frame index " + std::to_string(f) + " >= L=" + std::to_string(frames));
        rows.push_back(c * frames + f);
      }
    }
  return reshape(index_rows(reshape(clips, {n * frames, d}), std::move(rows)), {n * tuples.size(), w * d});
}

TrmParams TrmParams::create(std::size_t channels, std::size_t width, std::span<const std::size_t> cardinalities,
                            std::uint64_t seed) {
  TrmParams p;
  for (auto w : cardinalities) {
    const std::string base = "trm.w" + std::to_string(w);
    const std::size_t in = w * channels;
    p.by_cardinality.emplace(
        w, TrmCardinalityParams{
               Param(base + ".key", seeded_init({in, width}, in, width, name_seed(seed, base + ".key"))),
               Param(base + ".value", seeded_init({in, width}, in, width, name_seed(seed, base + ".value")))});
  }
  return p;
}

std::vector<Param*> TrmParams::all() {
  std::vector<Param*> out;
  for (auto& [w, p] : by_cardinality) {
    out.push_back(&p.key);
    out.push_back(&p.value);
  }
  return out;
}

std::size_t TrmParams::width() const {
  if (by_cardinality.empty()) throw std::logic_error("TrmParams has no cardinalities");
  return by_cardinality.begin()->second.key.value().dim(1);
}

QcParams QcParams::create(std::size_t channels, std::size_t width, std::span<const std::size_t> cardinalities,
                          std::uint64_t seed) {
  QcParams p;
  for (auto w : cardinalities) {
    const std::string name = "qc.w" + std::to_string(w) + ".cls";
    const std::size_t in = w * channels;
    p.by_cardinality.emplace(w, Param(name, seeded_init({in, width}, in, width, name_seed(seed, name))));
  }
  return p;
}

std::vector<Param*> QcParams::all() {
  std::vector<Param*> out;
  for (auto& [w, p] : by_cardinality) out.push_back(&p);
  return out;
}

namespace {

// Row indices of the tuple rows belonging to `clips` in a clip-major tuple matrix.
std::vector<std::size_t> tuple_rows(std::span<const std::size_t> clips, std::size_t tuples_per_clip) {
  std::vector<std::size_t> rows;
  rows.reserve(clips.size() * tuples_per_clip);
  for (auto c : clips)
    for (std::size_t t = 0; t < tuples_per_clip; ++t) rows.push_back(c * tuples_per_clip + t);
  return rows;
}

void validate_layout(const ClipLayout& layout, std::size_t num_clips) {
  if (layout.queries.empty()) throw std::invalid_argument("layout has no queries");
  if (layout.class_supports.empty()) throw std::invalid_argument("layout has no classes");
  auto check = [num_clips](std::size_t c) {
    if (c >= num_clips) throw std::out_of_range("clip index " + std::to_string(c) + " out of range");
  };
  for (auto q : layout.queries) check(q);
  for (std::size_t c = 0; c < layout.class_supports.size(); ++c) {
    if (layout.class_supports[c].empty())
      throw std::invalid_argument("empty support set for class " + std::to_string(c));
    for (auto s : layout.class_supports[c]) check(s);
  }
}

// [nq*T] per-tuple scores -> [nq x 1] averaged over tuples.
Var average_tuples(const Var& per_tuple, std::size_t num_queries, std::size_t tuples) {
  return reshape(mean(reshape(per_tuple, {num_queries, tuples}), 1), {num_queries, 1});
}

Var sum_all(std::vector<Var>& terms) {
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace

Var trm_distances(const Var& clips, const ClipLayout& layout, std::span<const TupleSet> tuple_sets,
                  TrmParams& params) {
  validate_layout(layout, clips.shape().at(0));
  Tape& tape = clips.tape();
  const std::size_t nq = layout.queries.size();
  const std::size_t classes = layout.num_classes();

  std::vector<std::vector<Var>> per_class(classes);
  for (const auto& set : tuple_sets) {
    auto it = params.by_cardinality.find(set.cardinality);
    if (it == params.by_cardinality.end())
      throw std::invalid_argument("no TRM weights for cardinality " + std::to_string(set.cardinality));
    const std::size_t t = set.tuples.size();
    const Var x = tuple_matrix(clips, set.tuples);
    const Var keys = matmul(x, tape.param(it->second.key));
    const Var values = matmul(x, tape.param(it->second.value));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(keys.shape()[1]));

    const auto q_rows = tuple_rows(layout.queries, t);
    const Var q_keys = index_rows(keys, q_rows);
    const Var q_values = index_rows(values, q_rows);
    for (std::size_t c = 0; c < classes; ++c) {
      const auto s_rows = tuple_rows(layout.class_supports[c], t);
      const Var attn = softmax_rows(scale(matmul_transposed(q_keys, index_rows(keys, s_rows)), inv_sqrt));
      const Var prototypes = matmul(attn, index_rows(values, s_rows));
      per_class[c].push_back(average_tuples(l2_norm(sub(q_values, prototypes)), nq, t));
    }
  }
  std::vector<Var> columns;
  for (auto& terms : per_class) columns.push_back(sum_all(terms));
  return concat(columns, 1);
}

Var qc_similarity(const Var& clips, const ClipLayout& layout, std::span<const TupleSet> tuple_sets,
                  QcParams& params) {
  validate_layout(layout, clips.shape().at(0));
  Tape& tape = clips.tape();
  const std::size_t nq = layout.queries.size();
  const std::size_t classes = layout.num_classes();

  std::vector<std::vector<Var>> per_class(classes);
  for (const auto& set : tuple_sets) {
    auto it = params.by_cardinality.find(set.cardinality);
    if (it == params.by_cardinality.end())
      throw std::invalid_argument("no query-class weights for cardinality " + std::to_string(set.cardinality));
    const std::size_t t = set.tuples.size();
    const Var codes = relu(matmul(tuple_matrix(clips, set.tuples), tape.param(it->second)));
    const Var q_codes = index_rows(codes, tuple_rows(layout.queries, t));
    for (std::size_t c = 0; c < classes; ++c) {
      const Var sims = cosine_matrix(q_codes, index_rows(codes, tuple_rows(layout.class_supports[c], t)));
      per_class[c].push_back(average_tuples(max_reduce(sims), nq, t));
    }
  }
  std::vector<Var> columns;
  for (auto& terms : per_class) columns.push_back(sum_all(terms));
  return concat(columns, 1);
}

Var trm_distance(const Var& query, const Var& supports, std::span<const TupleSet> tuple_sets, TrmParams& params) {
  if (query.shape().size() != 2) throw ShapeError("trm_distance: query must be [L x D]");
  if (supports.shape().size() != 3) throw ShapeError("trm_distance: supports must be [K x L x D]");
  const std::size_t k = supports.shape()[0];
  if (supports.shape()[1] != query.shape()[0] || supports.shape()[2] != query.shape()[1])
    throw ShapeError("trm_distance: query " + shape_string(query.shape()) + " vs supports " +
                     shape_string(supports.shape()));
  const Var q = reshape(query, {1, query.shape()[0], query.shape()[1]});
  const Var all = concat(std::vector<Var>{q, supports}, 0);
  ClipLayout layout;
  layout.queries = {0};
  layout.class_supports.emplace_back();
  for (std::size_t i = 0; i < k; ++i) layout.class_supports[0].push_back(i + 1);
  return reshape(trm_distances(all, layout, tuple_sets, params), {1});
}

}  // namespace strm
