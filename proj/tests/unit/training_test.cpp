#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "strm/model.hpp"
#include "strm/training.hpp"
#include "support/reference.hpp"
#include "support/testing.hpp"

using namespace strm;
namespace fs = std::filesystem;
namespace ref = strm::reference;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.frames = 3;
  c.patches = 2;
  c.channels = 4;
  c.psi_width = 3;
  c.trm_width = 5;
  c.qc_width = 3;
  c.lambda = 0.3;
  c.seed = 17;
  return c;
}

Dataset tiny_dataset(const ModelConfig& c, std::size_t classes, std::size_t per_class, std::uint64_t seed,
                     double motif = 1.0) {
  SyntheticSpec s;
  s.num_classes = classes;
  s.clips_per_class = per_class;
  s.frames = c.frames;
  s.patches = c.patches;
  s.channels = c.channels;
  s.motif_strength = motif;
  s.seed = seed;
  return Dataset(generate_synthetic(s));
}

ref::Mat clip_frame(const FeatureClip& clip, std::size_t f) { return ref::to_mat(clip.frame(f)); }

// Loss of one episode assembled from the independent module oracles.
double oracle_loss(const Dataset& data, const Episode& ep, ModelParams& p, const ModelConfig& c) {
  auto m = [](const Param& x) { return ref::to_mat(x.value()); };
  auto enrich = [&](std::size_t clip_index, ref::Mat& h_out) {
    const FeatureClip& clip = data.clip(clip_index).features;
    ref::Mat h;
    for (std::size_t f = 0; f < c.frames; ++f) {
      ref::Mat x = clip_frame(clip, f);
      if (c.use_ple)
        x = ref::ple(x, m(p.ple.w_query), m(p.ple.w_key), m(p.ple.w_value), m(p.ple.psi_in), m(p.ple.psi_hidden),
                     m(p.ple.psi_out));
      ref::Vec row(c.channels, 0.0);
      for (const auto& patch : x)
        for (std::size_t d = 0; d < c.channels; ++d) row[d] += patch[d] / static_cast<double>(c.patches);
      h.push_back(row);
    }
    h_out = h;
    return c.use_fle ? ref::fle(h, m(p.fle.token1), m(p.fle.token2), m(p.fle.channel1), m(p.fle.channel2)) : h;
  };
  const std::size_t classes = ep.classes.size();
  std::vector<std::vector<ref::Mat>> sup_e(classes), sup_h(classes);
  for (std::size_t i = 0; i < ep.support.size(); ++i) {
    ref::Mat h;
    sup_e[ep.support_targets[i]].push_back(enrich(ep.support[i], h));
    sup_h[ep.support_targets[i]].push_back(h);
  }
  double tm = 0.0, qc = 0.0;
  for (std::size_t q = 0; q < ep.queries.size(); ++q) {
    ref::Mat h;
    const ref::Mat e = enrich(ep.queries[q], h);
    ref::Vec logits_tm(classes, 0.0), logits_qc(classes, 0.0);
    for (std::size_t k = 0; k < classes; ++k)
      for (auto w : c.cardinalities) {
        const auto tuples = ref::tuples(c.frames, w);
        logits_tm[k] -= ref::trm_distance(e, sup_e[k], tuples, m(p.trm.by_cardinality.at(w).key),
                                          m(p.trm.by_cardinality.at(w).value));
        logits_qc[k] += ref::qc_similarity(h, sup_h[k], tuples, m(p.qc.by_cardinality.at(w)));
      }
    tm -= std::log(ref::softmax(logits_tm)[ep.query_targets[q]]);
    qc -= std::log(ref::softmax(logits_qc)[ep.query_targets[q]]);
  }
  const double n = static_cast<double>(ep.queries.size());
  return tm / n + (c.qc_active() ? c.lambda * qc / n : 0.0);
}

}  // namespace

TEST_SUITE("sgd") {
  TEST_CASE("single step") {
    Param w("w", Tensor::vector({1.0}));
    w.grad()[0] = 2.0;
    Sgd sgd({&w}, 0.1);
    sgd.step();
    CHECK(w.value()[0] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(w.grad()[0] == 0.0);
  }

  TEST_CASE("two identical accumulated gradients step like one") {
    Param a("a", Tensor::vector({1.0, -2.0})), b("b", Tensor::vector({1.0, -2.0}));
    const Tensor g = Tensor::vector({0.5, 0.25});
    a.accumulate(g);
    a.accumulate(g);
    b.accumulate(g);
    Sgd(std::vector<Param*>{&a}, 0.3).step(2);
    Sgd(std::vector<Param*>{&b}, 0.3).step(1);
    CHECK(a.value() == b.value());
  }

  TEST_CASE("quadratic bowl converges") {
    // f(w) = 0.5 * sum c_i (w_i - t_i)^2, minimised at t.
    const std::vector<double> c{1.0, 0.5, 2.0}, t{3.0, -1.0, 0.5};
    Param w("w", Tensor::vector({0.0, 0.0, 0.0}));
    Sgd sgd({&w}, 0.2);
    for (int step = 0; step < 200; ++step) {
      for (std::size_t i = 0; i < 3; ++i) w.grad()[i] = c[i] * (w.value()[i] - t[i]);
      sgd.step();
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(w.value()[i] - t[i]) <= 1e-6);
  }

  TEST_CASE("non-finite gradient aborts with the param name") {
    Param w("trm.w2.key", Tensor::vector({1.0}));
    w.grad()[0] = std::nan("");
    Sgd sgd({&w}, 0.1);
    try {
      sgd.step();
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("trm.w2.key") != std::string::npos);
    }
  }
}

TEST_SUITE("forward episode") {
  TEST_CASE("loss matches the composed oracle") {
    ModelConfig c = tiny_config();
    c.cardinalities = {1, 2};
    const Dataset data = tiny_dataset(c, 3, 4, 2);
    ModelParams p = ModelParams::create(c);
    const Episode ep = sample_episode(data, EpisodeSpec{3, 2, 2, 5}, 0);
    for (int variant = 0; variant < 4; ++variant) {
      c.use_ple = variant & 1;
      c.use_fle = variant & 2;
      Tape tape;
      const double loss = forward_episode(tape, data, ep, p, c).loss.value().item();
      CHECK(std::abs(loss - oracle_loss(data, ep, p, c)) <= 1e-10);
    }
  }

  TEST_CASE("zero lambda gives the pure matching loss") {
    ModelConfig c = tiny_config();
    c.lambda = 0.0;
    const Dataset data = tiny_dataset(c, 3, 3, 3);
    ModelParams p = ModelParams::create(c);
    const Episode ep = sample_episode(data, EpisodeSpec{3, 1, 1, 1}, 4);
    Tape tape;
    const EpisodeLoss out = forward_episode(tape, data, ep, p, c);
    CHECK(out.loss.value().item() == out.loss_tm.value().item());
    CHECK_FALSE(out.loss_qc.valid());
  }

  TEST_CASE("loss is affine in lambda") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 3, 3, 4);
    ModelParams p = ModelParams::create(c);
    const Episode ep = sample_episode(data, EpisodeSpec{3, 1, 1, 2}, 1);
    auto loss_at = [&](double lambda) {
      ModelConfig cc = c;
      cc.lambda = lambda;
      Tape tape;
      return forward_episode(tape, data, ep, p, cc).loss.value().item();
    };
    const double l0 = loss_at(0.0), l1 = loss_at(0.1), l2 = loss_at(0.2), l5 = loss_at(0.5);
    CHECK(std::abs((l2 - l0) - 2.0 * (l1 - l0)) <= 1e-12);
    CHECK(std::abs((l5 - l0) - 5.0 * (l1 - l0)) <= 1e-12);
    CHECK(l0 >= 0.0);
  }

  TEST_CASE("disabled groups receive no gradient") {
    ModelConfig c = tiny_config();
    c.use_ple = false;
    c.use_qc = false;
    const Dataset data = tiny_dataset(c, 3, 3, 5);
    ModelParams p = ModelParams::create(c);
    const Episode ep = sample_episode(data, EpisodeSpec{3, 1, 1, 3}, 0);
    Tape tape;
    tape.backward(forward_episode(tape, data, ep, p, c).loss);
    auto norm = [](const Param* x) {
      double s = 0.0;
      for (double g : x->grad().data()) s += g * g;
      return s;
    };
    for (auto* x : p.ple.all()) CHECK(norm(x) == 0.0);
    for (auto* x : p.qc.all()) CHECK(norm(x) == 0.0);
    double trained = 0.0;
    for (auto* x : p.trainable(c)) trained += norm(x);
    CHECK(trained > 0.0);
    CHECK(p.trainable(c).size() == p.fle.all().size() + p.trm.all().size());
  }

  TEST_CASE("extent mismatch is rejected") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 3, 3, 5);
    ModelConfig other = c;
    other.channels = 5;
    ModelParams p = ModelParams::create(other);
    Tape tape;
    CHECK_THROWS_AS(forward_episode(tape, data, sample_episode(data, EpisodeSpec{3, 1, 1, 0}, 0), p, other),
                    ShapeError);
  }

  TEST_CASE("config invariants") {
    ModelConfig c = tiny_config();
    c.tuple_keep_ratio = 0.2;
    CHECK_NOTHROW(c.validate());
    c.tuple_keep_ratio = 1.0 / 3.0;
    CHECK_NOTHROW(c.validate());
    c.tuple_keep_ratio = 0.123456;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.lambda = -1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.cardinalities = {4};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip restores identical evaluation") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 4, 4, 6);
    TrainConfig t;
    t.episodes = 8;
    t.accumulate_every = 4;
    t.eval_every = 8;
    t.eval_episodes = 10;
    t.episode = EpisodeSpec{3, 2, 1, 9};
    TrainResult r = train(data, nullptr, c, t);
    const fs::path path = fs::temp_directory_path() / "strm_unit_checkpoint.stck";
    save_checkpoint(checkpoint_params(r.params, c), path);

    const auto stored = read_checkpoint(path);
    ModelConfig base;
    base.patches = c.patches;
    base.seed = 999;
    const ModelConfig inferred = infer_config(stored, base);
    CHECK(inferred.frames == c.frames);
    CHECK(inferred.channels == c.channels);
    CHECK(inferred.psi_width == c.psi_width);
    CHECK(inferred.trm_width == c.trm_width);
    CHECK(inferred.qc_width == c.qc_width);
    CHECK(inferred.cardinalities == c.cardinalities);
    CHECK(inferred.use_ple);
    CHECK(inferred.use_fle);

    ModelParams restored = ModelParams::create(inferred);
    restore_checkpoint(stored, restored.all());
    const EvalOptions opts{EpisodeSpec{3, 2, 1, 4}, 50, 1};
    const EvalReport a = evaluate(data, r.params, c, opts);
    const EvalReport b = evaluate(data, restored, c, opts);
    CHECK(a.accuracy == b.accuracy);
    for (auto* p : checkpoint_params(r.params, c)) {
      bool found = false;
      for (auto* q : restored.all())
        if (q->name() == p->name()) {
          CHECK(q->value() == p->value());
          found = true;
        }
      CHECK(found);
    }
    fs::remove(path);
  }

  TEST_CASE("mismatched shapes and bad files are rejected") {
    ModelConfig c = tiny_config();
    ModelParams p = ModelParams::create(c);
    const fs::path path = fs::temp_directory_path() / "strm_unit_checkpoint_bad.stck";
    save_checkpoint(p.all(), path);
    ModelConfig wide = c;
    wide.channels = 6;
    ModelParams q = ModelParams::create(wide);
    CHECK_THROWS_AS(restore_checkpoint(read_checkpoint(path), q.all()), ShapeError);
    {
      std::ofstream(path, std::ios::binary) << "NOPE";
    }
    CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);
    fs::remove(path);
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("ci and argmax") {
    CHECK(ci95_halfwidth(0.5, 100) == doctest::Approx(0.098));
    CHECK(ci95_halfwidth(1.0, 100) == 0.0);
    const double v[] = {1.0, 3.0, 3.0, 2.0};
    CHECK(argmax(v) == 1);
  }

  TEST_CASE("untrained params are at chance on indistinguishable classes") {
    // A random tuple matcher already separates temporal orders, so chance is
    // checked on classes that share one frame order.
    ModelConfig c;
    c.seed = 4;
    SyntheticSpec s;
    s.num_classes = 5;
    s.seed = 8;
    s.orders.assign(5, {3, 1, 4, 0, 6, 2, 7, 5});
    const Dataset data(generate_synthetic(s));
    ModelParams p = ModelParams::create(c);
    const EvalReport r = evaluate(data, p, c, EvalOptions{EpisodeSpec{5, 5, 1, 6}, 2000, 1});
    CHECK(r.queries == 10000);
    CHECK(std::abs(r.accuracy - 0.2) <= 0.04);
    CHECK(r.per_class_accuracy.size() == 5);
  }

  TEST_CASE("single-class evaluation is rejected") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 3, 3, 1);
    ModelParams p = ModelParams::create(c);
    CHECK_THROWS_AS(evaluate(data, p, c, EvalOptions{EpisodeSpec{1, 1, 1, 0}, 5, 1}), std::invalid_argument);
  }

  TEST_CASE("perfect-margin toy task") {
    // Noise-free classes whose frames differ strongly: the untrained matcher
    // already has zero distance to the right class.
    ModelConfig c = tiny_config();
    c.use_ple = c.use_fle = false;
    SyntheticSpec s;
    s.num_classes = 3;
    s.clips_per_class = 4;
    s.frames = c.frames;
    s.patches = c.patches;
    s.channels = c.channels;
    s.noise_sigma = 0.0;
    s.motif_strength = 5.0;
    s.seed = 2;
    s.orders = {{0, 1, 2}, {2, 1, 0}, {1, 2, 0}};
    const Dataset data(generate_synthetic(s));
    ModelParams p = ModelParams::create(c);
    const EvalReport r = evaluate(data, p, c, EvalOptions{EpisodeSpec{3, 2, 1, 1}, 100, 1});
    CHECK(r.accuracy == 1.0);
    CHECK(r.ci95_halfwidth == 0.0);
  }

  TEST_CASE("evaluation is thread-count independent") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 5, 6, 3);
    ModelParams p = ModelParams::create(c);
    const EvalReport a = evaluate(data, p, c, EvalOptions{EpisodeSpec{3, 2, 1, 5}, 40, 1});
    const EvalReport b = evaluate(data, p, c, EvalOptions{EpisodeSpec{3, 2, 1, 5}, 40, 3});
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.per_class_accuracy == b.per_class_accuracy);
  }
}

TEST_SUITE("training loop") {
  TrainConfig small_run() {
    TrainConfig t;
    t.episodes = 24;
    t.accumulate_every = 4;
    t.eval_every = 10;
    t.eval_episodes = 20;
    t.learning_rate = 0.05;
    t.episode = EpisodeSpec{3, 2, 1, 12};
    return t;
  }

  TEST_CASE("metrics rows at every crossed evaluation point") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 4, 5, 7);
    std::vector<std::size_t> steps;
    const TrainResult r = train(data, nullptr, c, small_run(), [&](std::size_t seen, double) { steps.push_back(seen); });
    CHECK(steps == std::vector<std::size_t>{4, 8, 12, 16, 20, 24});
    REQUIRE(r.metrics.size() == 3);
    CHECK(r.metrics[0].episode == 12);
    CHECK(r.metrics[1].episode == 20);
    CHECK(r.metrics[2].episode == 24);
    for (const auto& row : r.metrics) {
      CHECK(std::isfinite(row.loss_tm));
      CHECK(row.loss_tm >= 0.0);
    }
  }

  TEST_CASE("runs are deterministic across thread counts") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 4, 5, 7);
    TrainConfig t = small_run();
    const TrainResult a = train(data, nullptr, c, t);
    t.threads = 3;
    const TrainResult b = train(data, nullptr, c, t);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i)
      CHECK(format_metrics_row(a.metrics[i]) == format_metrics_row(b.metrics[i]));
    ModelParams pa = a.params, pb = b.params;
    const auto xs = pa.all(), ys = pb.all();
    for (std::size_t i = 0; i < xs.size(); ++i) CHECK(xs[i]->value() == ys[i]->value());
  }

  TEST_CASE("zero learning rate leaves params and accuracy unchanged") {
    ModelConfig c = tiny_config();
    const Dataset data = tiny_dataset(c, 4, 5, 7);
    TrainConfig t = small_run();
    t.learning_rate = 0.0;
    TrainResult r = train(data, nullptr, c, t);
    ModelParams fresh = ModelParams::create(c);
    const auto xs = r.params.all(), ys = fresh.all();
    for (std::size_t i = 0; i < xs.size(); ++i) CHECK(xs[i]->value() == ys[i]->value());
    for (const auto& row : r.metrics) CHECK(row.accuracy == r.metrics.front().accuracy);
  }

  TEST_CASE("metrics row format") {
    CHECK(format_metrics_row(MetricsRow{500, 0.5, 0.25, 1.5, 0.125}) == "500\t0.5\t0.25\t1.5\t0.125");
    const std::string s = format_metrics_row(MetricsRow{1, 0.1, 0.0, 0.0, 0.0});
    CHECK(s == "1\t0.10000000000000001\t0\t0\t0");
  }

  TEST_CASE("invalid training configs are rejected") {
    TrainConfig t;
    t.accumulate_every = 0;
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    t = {};
    t.learning_rate = -1.0;
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  }
}
