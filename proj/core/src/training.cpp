#include "strm/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include "strm/random.hpp"

namespace strm {

void TrainConfig::validate() const {
  if (episodes == 0 || accumulate_every == 0 || eval_every == 0 || eval_episodes == 0)
    throw std::invalid_argument("training counts must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning rate must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
}

Sgd::Sgd(std::vector<Param*> params, double learning_rate, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {
  if (momentum_ > 0.0)
    for (auto* p : params_) velocity_.emplace_back(p->value().shape());
}

void Sgd::step(std::size_t count) {
  if (count == 0) throw std::invalid_argument("Sgd::step needs a positive accumulation count");
  for (auto* p : params_)
    if (!p->grad().all_finite()) throw NumericError("non-finite gradient for parameter '" + p->name() + "'");
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    auto w = p.value().data();
    auto g = p.grad().data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      double d = g[i] * inv + weight_decay_ * w[i];
      if (momentum_ > 0.0) {
        double& v = velocity_[k][i];
        v = momentum_ * v + d;
        d = v;
      }
      w[i] -= lr_ * d;
    }
    p.zero_grad();
  }
}

double ci95_halfwidth(double accuracy, std::size_t n) {
  if (n == 0) return 0.0;
  return 1.96 * std::sqrt(accuracy * (1.0 - accuracy) / static_cast<double>(n));
}

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

EvalReport evaluate(const Dataset& dataset, ModelParams& params, const ModelConfig& config,
                    const EvalOptions& options) {
  if (options.episode.ways < 2) throw std::invalid_argument("evaluation needs at least 2 ways");
  config.validate();
  const auto sets = model_tuple_sets(config);
  // Per episode: (label, correct) for every query, reduced in episode order.
  std::vector<std::vector<std::pair<std::uint32_t, bool>>> outcomes(options.episodes);
  parallel_for(options.episodes, options.threads, [&](std::size_t e) {
    const Episode ep = sample_episode(dataset, options.episode, e);
    Tape tape;
    const auto result = forward_episode(tape, dataset, ep, params, config, sets);
    const Tensor& logits = result.trm_logits.value();
    const std::size_t classes = logits.dim(1);
    for (std::size_t q = 0; q < ep.queries.size(); ++q) {
      const std::size_t pred = argmax(logits.data().subspan(q * classes, classes));
      outcomes[e].emplace_back(ep.classes[ep.query_targets[q]], pred == ep.query_targets[q]);
    }
  });

  EvalReport report;
  report.episodes = options.episodes;
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> per_class;
  std::size_t correct = 0;
  for (const auto& ep : outcomes)
    for (const auto& [label, ok] : ep) {
      ++report.queries;
      correct += ok;
      auto& [c, n] = per_class[label];
      c += ok;
      ++n;
    }
  report.accuracy = report.queries ? static_cast<double>(correct) / static_cast<double>(report.queries) : 0.0;
  report.ci95_halfwidth = ci95_halfwidth(report.accuracy, report.queries);
  for (const auto& [label, cn] : per_class)
    report.per_class_accuracy[label] = static_cast<double>(cn.first) / static_cast<double>(cn.second);
  return report;
}

std::string format_metrics_row(const MetricsRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g\t%.17g", row.episode, row.accuracy, row.ci95, row.loss_tm,
                row.loss_qc);
  return buf;
}

TrainResult train(const Dataset& train_set, const Dataset* eval_set, const ModelConfig& model,
                  const TrainConfig& train, const StepCallback& on_step) {
  model.validate();
  train.validate();
  TrainResult result{ModelParams::create(model), {}};
  ModelParams& params = result.params;
  Sgd sgd(params.trainable(model), train.learning_rate, train.momentum, train.weight_decay);
  const auto sets = model_tuple_sets(model);

  EvalOptions eval;
  eval.episode = train.episode;
  eval.episode.seed = mix_seed(train.episode.seed, 0xe7a1);
  eval.episodes = train.eval_episodes;
  eval.threads = train.threads;
  const Dataset& eval_data = eval_set ? *eval_set : train_set;

  double window_tm = 0.0, window_qc = 0.0;
  std::size_t window_count = 0;
  for (std::size_t start = 0; start < train.episodes; start += train.accumulate_every) {
    const std::size_t count = std::min(train.accumulate_every, train.episodes - start);
    std::vector<ParamGrads> grads(count);
    std::vector<std::pair<double, double>> losses(count);
    parallel_for(count, train.threads, [&](std::size_t i) {
      const Episode ep = sample_episode(train_set, train.episode, start + i);
      Tape tape;
      const auto out = forward_episode(tape, train_set, ep, params, model, sets);
      if (!std::isfinite(out.loss.value().item())) throw NumericError("non-finite training loss");
      grads[i] = tape.gradients(out.loss);
      losses[i] = {out.loss_tm.value().item(), out.loss_qc.valid() ? out.loss_qc.value().item() : 0.0};
    });
    double step_tm = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      grads[i].accumulate_into_params();
      window_tm += losses[i].first;
      window_qc += losses[i].second;
      step_tm += losses[i].first;
    }
    window_count += count;
    sgd.step(count);
    const std::size_t seen = start + count;
    if (on_step) on_step(seen, step_tm / static_cast<double>(count));

    // Evaluate at every multiple of eval_every crossed by this window, and at the end.
    const bool crossed = seen / train.eval_every > start / train.eval_every;
    if (crossed || seen == train.episodes) {
      const EvalReport rep = evaluate(eval_data, params, model, eval);
      result.metrics.push_back(MetricsRow{seen, rep.accuracy, rep.ci95_halfwidth,
                                          window_tm / static_cast<double>(window_count),
                                          window_qc / static_cast<double>(window_count)});
      window_tm = window_qc = 0.0;
      window_count = 0;
    }
  }
  return result;
}

}  // namespace strm
