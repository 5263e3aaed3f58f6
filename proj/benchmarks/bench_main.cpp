#include <benchmark/benchmark.h>

#include "strm/model.hpp"
#include "strm/ops.hpp"
#include "strm/random.hpp"

using namespace strm;

namespace {

Tensor noise(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = noise({n, n}, 1), b = noise({n, n}, 2);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(matmul(tape.constant(a), tape.constant(b)).value().raw());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

struct EpisodeFixture {
  ModelConfig config;
  Dataset data;
  ModelParams params;
  Episode episode;
  std::vector<TupleSet> sets;

  EpisodeFixture()
      : data([] {
          SyntheticSpec s;
          s.num_classes = 5;
          s.seed = 3;
          return Dataset(generate_synthetic(s));
        }()),
        params(ModelParams::create(config)),
        episode(sample_episode(data, EpisodeSpec{}, 0)),
        sets(model_tuple_sets(config)) {}
};

void BM_ForwardEpisode(benchmark::State& state) {
  EpisodeFixture f;
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(forward_episode(tape, f.data, f.episode, f.params, f.config, f.sets).loss.value().item());
  }
}
BENCHMARK(BM_ForwardEpisode)->Unit(benchmark::kMillisecond);

void BM_ForwardBackwardEpisode(benchmark::State& state) {
  EpisodeFixture f;
  for (auto _ : state) {
    Tape tape;
    const auto out = forward_episode(tape, f.data, f.episode, f.params, f.config, f.sets);
    benchmark::DoNotOptimize(tape.gradients(out.loss).grads.size());
  }
}
BENCHMARK(BM_ForwardBackwardEpisode)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
