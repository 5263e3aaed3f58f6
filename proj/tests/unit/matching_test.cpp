#include <numeric>

#include "doctest.h"
#include "strm/matching.hpp"
#include "strm/ops.hpp"
#include "strm/training.hpp"
#include "support/reference.hpp"
#include "support/testing.hpp"

using namespace strm;
using strm::testing::gradcheck_error;
using strm::testing::random_tensor;
using strm::testing::weighted_sum;
namespace ref = strm::reference;

namespace {

ref::Mat clip_mat(const Tensor& clips, std::size_t n, std::size_t frames, std::size_t d) {
  ref::Mat m(frames, ref::Vec(d));
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t c = 0; c < d; ++c) m[f][c] = clips[(n * frames + f) * d + c];
  return m;
}

struct Instance {
  std::size_t frames, d, classes, shots, queries;
  std::vector<std::size_t> omega;
  Tensor clips;
  ClipLayout layout;
};

Instance random_instance(Rng& rng) {
  Instance in;
  in.frames = 1 + rng.below(4);
  in.d = 1 + rng.below(3);
  in.classes = 1 + rng.below(3);
  in.shots = 1 + rng.below(3);
  in.queries = 1 + rng.below(2);
  for (std::size_t w = 1; w <= in.frames; ++w)
    if (rng.below(2) == 0) in.omega.push_back(w);
  if (in.omega.empty()) in.omega.push_back(1 + rng.below(in.frames));
  const std::size_t n = in.classes * in.shots + in.queries;
  in.clips = random_tensor({n, in.frames, in.d}, rng);
  std::size_t next = 0;
  in.layout.class_supports.resize(in.classes);
  for (auto& s : in.layout.class_supports)
    for (std::size_t k = 0; k < in.shots; ++k) s.push_back(next++);
  for (std::size_t q = 0; q < in.queries; ++q) in.layout.queries.push_back(next++);
  return in;
}

double oracle_trm(const Instance& in, std::size_t q, std::size_t c, TrmParams& p) {
  const auto query = clip_mat(in.clips, in.layout.queries[q], in.frames, in.d);
  std::vector<ref::Mat> supports;
  for (auto s : in.layout.class_supports[c]) supports.push_back(clip_mat(in.clips, s, in.frames, in.d));
  double total = 0.0;
  for (auto w : in.omega) {
    auto& cp = p.by_cardinality.at(w);
    total += ref::trm_distance(query, supports, ref::tuples(in.frames, w), ref::to_mat(cp.key.value()),
                               ref::to_mat(cp.value.value()));
  }
  return total;
}

double oracle_qc(const Instance& in, std::size_t q, std::size_t c, QcParams& p) {
  const auto query = clip_mat(in.clips, in.layout.queries[q], in.frames, in.d);
  std::vector<ref::Mat> supports;
  for (auto s : in.layout.class_supports[c]) supports.push_back(clip_mat(in.clips, s, in.frames, in.d));
  double total = 0.0;
  for (auto w : in.omega)
    total += ref::qc_similarity(query, supports, ref::tuples(in.frames, w), ref::to_mat(p.by_cardinality.at(w).value()));
  return total;
}

}  // namespace

TEST_SUITE("tuples") {
  TEST_CASE("table counts for eight frames") {
    auto count = [](std::vector<std::size_t> omega) { return enumerate_tuples(8, omega).size(); };
    CHECK(count({2}) == 28);
    CHECK(count({3}) == 56);
    CHECK(count({4}) == 70);
    CHECK(count({2, 3}) == 84);
    CHECK(count({2, 4}) == 98);
    CHECK(count({3, 4}) == 126);
    CHECK(count({2, 3, 4}) == 154);
  }

  TEST_CASE("four frames, pairs, listed lexicographically") {
    const auto t = enumerate_tuples(4, 2);
    const std::vector<std::vector<std::size_t>> expected{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
    REQUIRE(t.size() == expected.size());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i].frames == expected[i]);
  }

  TEST_CASE("agrees with the recursive enumerator and binomials") {
    for (std::size_t frames = 1; frames <= 10; ++frames)
      for (std::size_t w = 1; w <= std::min<std::size_t>(4, frames); ++w) {
        const auto t = enumerate_tuples(frames, w);
        const auto r = ref::tuples(frames, w);
        CHECK(t.size() == binomial(frames, w));
        REQUIRE(t.size() == r.size());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i].frames == r[i]);
      }
  }

  TEST_CASE("invalid cardinalities are rejected") {
    CHECK_THROWS_AS(enumerate_tuples(3, 4), std::invalid_argument);
    CHECK_THROWS_AS(enumerate_tuples(3, 0), std::invalid_argument);
  }

  TEST_CASE("subsampling") {
    const std::size_t pairs[] = {2};
    const auto full = build_tuple_sets(8, pairs, 1.0, 99);
    REQUIRE(full.size() == 1);
    CHECK(full[0].tuples == enumerate_tuples(8, 2));
    const auto part = build_tuple_sets(8, pairs, 0.2, 99);
    CHECK(part[0].tuples.size() == 6);
    CHECK(std::is_sorted(part[0].tuples.begin(), part[0].tuples.end()));
    CHECK(build_tuple_sets(8, pairs, 0.2, 99)[0].tuples == part[0].tuples);
    CHECK_THROWS_AS(build_tuple_sets(8, pairs, 0.0, 1), std::invalid_argument);
  }
}

TEST_SUITE("tuple representation") {
  TEST_CASE("concatenates the selected rows") {
    Tape tape;
    const Var e = tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
    CHECK(tuple_repr(e, TupleIndex{{0, 1}}).value() == Tensor::vector({1, 2, 3, 4}));
    CHECK(tuple_repr(e, TupleIndex{{2}}).value() == Tensor::vector({5, 6}));
    CHECK_THROWS_AS(tuple_repr(e, TupleIndex{{1, 3}}), std::out_of_range);
  }

  TEST_CASE("random tuples equal direct indexing bitwise") {
    Rng rng(3);
    const Tensor e = random_tensor({5, 3}, rng);
    const auto em = ref::to_mat(e);
    Tape tape;
    const Var ev = tape.constant(e);
    for (const auto& t : enumerate_tuples(5, 3)) {
      const Tensor r = tuple_repr(ev, t).value();
      const auto o = ref::concat_rows(em, t.frames);
      for (std::size_t i = 0; i < o.size(); ++i) CHECK(r[i] == o[i]);
    }
  }
}

TEST_SUITE("trm") {
  TEST_CASE("identical query and single support give zero distance") {
    Rng rng(4);
    const std::size_t pairs[] = {2};
    TrmParams p = TrmParams::create(3, 4, pairs, 1);
    const auto sets = build_tuple_sets(2, pairs);
    const Tensor q = random_tensor({2, 3}, rng);
    Tape tape;
    const Var d = trm_distance(tape.constant(q), tape.constant(q.reshaped({1, 2, 3})), sets, p);
    CHECK(std::abs(d.value().item()) <= 1e-12);
  }

  TEST_CASE("duplicated supports leave the distance unchanged") {
    Rng rng(5);
    const std::size_t pairs[] = {2};
    TrmParams p = TrmParams::create(3, 4, pairs, 2);
    const auto sets = build_tuple_sets(4, pairs);
    const Tensor q = random_tensor({4, 3}, rng), s = random_tensor({1, 4, 3}, rng);
    Tensor tripled({3, 4, 3});
    for (std::size_t k = 0; k < 3; ++k) std::copy_n(s.raw(), 12, tripled.raw() + k * 12);
    Tape tape;
    const double once = trm_distance(tape.constant(q), tape.constant(s), sets, p).value().item();
    const double thrice = trm_distance(tape.constant(q), tape.constant(tripled), sets, p).value().item();
    CHECK(std::abs(once - thrice) <= 1e-12);
  }

  TEST_CASE("support order does not matter") {
    Rng rng(6);
    const std::size_t pairs[] = {2};
    TrmParams p = TrmParams::create(3, 4, pairs, 3);
    const auto sets = build_tuple_sets(4, pairs);
    const Tensor q = random_tensor({4, 3}, rng), s = random_tensor({3, 4, 3}, rng);
    Tensor swapped({3, 4, 3});
    const std::size_t order[] = {2, 0, 1};
    for (std::size_t k = 0; k < 3; ++k) std::copy_n(s.raw() + order[k] * 12, 12, swapped.raw() + k * 12);
    Tape tape;
    const double a = trm_distance(tape.constant(q), tape.constant(s), sets, p).value().item();
    const double b = trm_distance(tape.constant(q), tape.constant(swapped), sets, p).value().item();
    CHECK(std::abs(a - b) <= 1e-10);
  }

  TEST_CASE("three frames, two shots, random small tensors match the oracle") {
    Rng rng(7);
    const std::size_t pairs[] = {2};
    TrmParams p = TrmParams::create(2, 3, pairs, 4);
    const auto sets = build_tuple_sets(3, pairs);
    const Tensor q = random_tensor({3, 2}, rng), s = random_tensor({2, 3, 2}, rng);
    Tape tape;
    const double d = trm_distance(tape.constant(q), tape.constant(s), sets, p).value().item();
    const std::vector<ref::Mat> supports{clip_mat(s, 0, 3, 2), clip_mat(s, 1, 3, 2)};
    const double o = ref::trm_distance(ref::to_mat(q), supports, ref::tuples(3, 2),
                                       ref::to_mat(p.by_cardinality.at(2).key.value()),
                                       ref::to_mat(p.by_cardinality.at(2).value.value()));
    CHECK(std::abs(d - o) <= 1e-10);
  }

  TEST_CASE("batched distances and similarities match the oracles on random tiny instances") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
      const Instance in = random_instance(rng);
      TrmParams tp = TrmParams::create(in.d, 1 + rng.below(4), in.omega, rng.next());
      QcParams qp = QcParams::create(in.d, 1 + rng.below(4), in.omega, rng.next());
      const auto sets = build_tuple_sets(in.frames, in.omega);
      Tape tape;
      const Var clips = tape.constant(in.clips);
      const Tensor dist = trm_distances(clips, in.layout, sets, tp).value();
      const Tensor sim = qc_similarity(clips, in.layout, sets, qp).value();
      for (std::size_t q = 0; q < in.queries; ++q)
        for (std::size_t c = 0; c < in.classes; ++c) {
          CHECK(std::abs(dist.at(q, c) - oracle_trm(in, q, c, tp)) <= 1e-10);
          CHECK(std::abs(sim.at(q, c) - oracle_qc(in, q, c, qp)) <= 1e-10);
        }
    }
  }

  TEST_CASE("identical query and class support wins, identical classes tie") {
    Rng rng(9);
    const std::size_t pairs[] = {2};
    TrmParams p = TrmParams::create(4, 4, pairs, 5);
    const auto sets = build_tuple_sets(2, pairs);
    Tensor clips = random_tensor({4, 2, 4}, rng);
    for (std::size_t i = 8; i < 24; ++i) clips[i] += 10.0;  // far supports for classes 1 and 2
    std::copy_n(clips.raw(), 8, clips.raw() + 24);          // query equals class 0's support
    ClipLayout layout{{3}, {{0}, {1}, {2}}};
    Tape tape;
    const Tensor d = trm_distances(tape.constant(clips), layout, sets, p).value();
    CHECK(d.at(0, 0) <= 1e-12);
    CHECK(d.at(0, 1) > d.at(0, 0));
    CHECK(d.at(0, 2) > d.at(0, 0));
    const double row[] = {-d.at(0, 0), -d.at(0, 1), -d.at(0, 2)};
    CHECK(argmax(row) == 0);

    Tensor same = clips;
    for (std::size_t k = 1; k < 3; ++k) std::copy_n(same.raw(), 8, same.raw() + k * 8);
    const Var logits = scale(trm_distances(tape.constant(same), layout, sets, p), -1.0);
    const Tensor probs = softmax_rows(logits).value();
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(probs[c] - 1.0 / 3.0) <= 1e-9);
  }

  TEST_CASE("two-way probabilities follow hand-computed distances") {
    Rng rng(10);
    const std::size_t pairs[] = {2};
    TrmParams p = TrmParams::create(2, 2, pairs, 6);
    const auto sets = build_tuple_sets(3, pairs);
    const Tensor clips = random_tensor({3, 3, 2}, rng);
    const ClipLayout layout{{2}, {{0}, {1}}};
    Tape tape;
    const Tensor probs = softmax_rows(scale(trm_distances(tape.constant(clips), layout, sets, p), -1.0)).value();
    Instance in{3, 2, 2, 1, 1, {2}, clips, layout};
    const double d0 = oracle_trm(in, 0, 0, p), d1 = oracle_trm(in, 0, 1, p);
    const double p0 = std::exp(-d0) / (std::exp(-d0) + std::exp(-d1));
    CHECK(std::abs(probs[0] - p0) <= 1e-12);
  }

  TEST_CASE("empty support sets are rejected") {
    const std::size_t pairs[] = {2};
    TrmParams p = TrmParams::create(2, 2, pairs, 6);
    const auto sets = build_tuple_sets(3, pairs);
    Tape tape;
    const Var clips = tape.constant(Tensor({2, 3, 2}));
    CHECK_THROWS_AS(trm_distances(clips, ClipLayout{{1}, {{0}, {}}}, sets, p), std::invalid_argument);
  }

  TEST_CASE("gradients match finite differences") {
    Rng rng(11);
    const std::size_t omega[] = {1, 2};
    TrmParams p = TrmParams::create(3, 4, omega, 7);
    const auto sets = build_tuple_sets(3, omega);
    const Tensor clips = random_tensor({5, 3, 3}, rng);
    const ClipLayout layout{{4}, {{0, 1}, {2, 3}}};
    Param e("clips", clips);
    auto ps = p.all();
    ps.push_back(&e);
    const Tensor w = random_tensor({1, 2}, rng);
    const double err = gradcheck_error(
        ps, [&](Tape&, const std::vector<Var>& v) { return weighted_sum(trm_distances(v.back(), layout, sets, p), w); });
    CHECK(err <= 1e-5);
  }
}

TEST_SUITE("query-class similarity") {
  TEST_CASE("identical query and support give one per cardinality") {
    Rng rng(12);
    const std::size_t omega[] = {1, 2};
    QcParams p = QcParams::create(3, 5, omega, 1);
    for (auto& [w, param] : p.by_cardinality)
      for (auto& v : param.value().data()) v = std::abs(v);  // keep codes nonzero
    const auto sets = build_tuple_sets(3, omega);
    Tensor clips = Tensor::filled({3, 3, 3}, 0.0);
    const Tensor q = random_tensor({3, 3}, rng);
    for (std::size_t i = 0; i < 9; ++i) clips[i] = clips[18 + i] = std::abs(q[i]) + 0.1;
    for (std::size_t i = 9; i < 18; ++i) clips[i] = rng.normal();
    Tape tape;
    const Tensor m = qc_similarity(tape.constant(clips), ClipLayout{{2}, {{0}, {1}}}, sets, p).value();
    CHECK(std::abs(m.at(0, 0) - 2.0) <= 1e-12);
  }

  TEST_CASE("zero projection gives zero similarity and uniform probabilities") {
    Rng rng(13);
    const std::size_t pairs[] = {2};
    QcParams p = QcParams::create(3, 4, pairs, 2);
    p.by_cardinality.at(2).value().fill(0.0);
    const auto sets = build_tuple_sets(4, pairs);
    Tape tape;
    const Var m = qc_similarity(tape.constant(random_tensor({3, 4, 3}, rng)), ClipLayout{{2}, {{0}, {1}}}, sets, p);
    CHECK(m.value() == Tensor::matrix({{0, 0}}));
    CHECK(softmax_rows(m).value() == Tensor::matrix({{0.5, 0.5}}));
  }

  TEST_CASE("scores lie within the cardinality count") {
    Rng rng(14);
    for (int trial = 0; trial < 30; ++trial) {
      const Instance in = random_instance(rng);
      QcParams p = QcParams::create(in.d, 3, in.omega, rng.next());
      const auto sets = build_tuple_sets(in.frames, in.omega);
      Tape tape;
      const Tensor m = qc_similarity(tape.constant(in.clips), in.layout, sets, p).value();
      const double bound = static_cast<double>(in.omega.size()) + 1e-12;
      for (double v : m.data()) CHECK((v >= -bound && v <= bound));
    }
  }

  TEST_CASE("scaling the projection does not change the arg-max") {
    Rng rng(15);
    const std::size_t pairs[] = {2};
    QcParams p = QcParams::create(3, 4, pairs, 3);
    const auto sets = build_tuple_sets(4, pairs);
    const Tensor clips = random_tensor({4, 4, 3}, rng);
    const ClipLayout layout{{3}, {{0}, {1}, {2}}};
    Tape tape;
    const Tensor before = qc_similarity(tape.constant(clips), layout, sets, p).value();
    for (auto& v : p.by_cardinality.at(2).value().data()) v *= 7.5;
    const Tensor after = qc_similarity(tape.constant(clips), layout, sets, p).value();
    CHECK(max_abs_diff(before, after) <= 1e-12);
  }

  TEST_CASE("gradients match finite differences") {
    Rng rng(16);
    const std::size_t pairs[] = {2};
    QcParams p = QcParams::create(3, 4, pairs, 8);
    const auto sets = build_tuple_sets(3, pairs);
    const Tensor clips = random_tensor({5, 3, 3}, rng);
    const ClipLayout layout{{4}, {{0, 1}, {2, 3}}};
    Param e("clips", clips);
    auto ps = p.all();
    ps.push_back(&e);
    const Tensor w = random_tensor({1, 2}, rng);
    const double err = gradcheck_error(
        ps, [&](Tape&, const std::vector<Var>& v) { return weighted_sum(qc_similarity(v.back(), layout, sets, p), w); });
    CHECK(err <= 1e-5);
  }
}
