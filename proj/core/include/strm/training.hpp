#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "strm/model.hpp"

namespace strm {

struct TrainConfig {
  std::size_t episodes = 2000;
  double learning_rate = 0.05;
  std::size_t accumulate_every = 16;
  std::size_t eval_every = 500;
  std::size_t eval_episodes = 200;
  double momentum = 0.0;
  double weight_decay = 0.0;
  EpisodeSpec episode{};
  /// Worker threads for per-episode gradients inside an accumulation window.
  std::size_t threads = 1;

  void validate() const;
};

/// Plain SGD over a fixed param list. With the default options the update is
/// theta -= lr * grad / count.
class Sgd {
 public:
  Sgd(std::vector<Param*> params, double learning_rate, double momentum = 0.0, double weight_decay = 0.0);

  /// Applies the mean of `count` accumulated gradients, then zeroes them.
  /// Throws NumericError naming the first param with a non-finite gradient.
  void step(std::size_t count = 1);
  const std::vector<Param*>& params() const noexcept { return params_; }

 private:
  std::vector<Param*> params_;
  double lr_, momentum_, weight_decay_;
  std::vector<Tensor> velocity_;
};

struct EvalReport {
  double accuracy = 0.0;
  double ci95_halfwidth = 0.0;
  std::size_t episodes = 0;
  std::size_t queries = 0;
  /// Accuracy per dataset label, over the queries of that label.
  std::map<std::uint32_t, double> per_class_accuracy;
};

/// 1.96 * sqrt(p (1 - p) / n)
double ci95_halfwidth(double accuracy, std::size_t n);

/// Index of the largest element, first one on ties.
std::size_t argmax(std::span<const double> values);

struct EvalOptions {
  EpisodeSpec episode{};
  std::size_t episodes = 1000;
  std::size_t threads = 1;
};

/// Predicts argmax of the TRM logits for every query of `episodes` sampled episodes.
EvalReport evaluate(const Dataset& dataset, ModelParams& params, const ModelConfig& config, const EvalOptions& options);

struct MetricsRow {
  std::size_t episode = 0;
  double accuracy = 0.0;
  double ci95 = 0.0;
  double loss_tm = 0.0;
  double loss_qc = 0.0;
};

/// `episode<TAB>accuracy<TAB>ci95<TAB>loss_tm<TAB>loss_qc`, round-trip precision.
std::string format_metrics_row(const MetricsRow& row);

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> metrics;
};

/// Called after every optimizer step with (episodes seen, mean L_TM over the window).
using StepCallback = std::function<void(std::size_t, double)>;

/// Episodic training with accumulate-and-step SGD. Training episodes come from
/// `train_set` with seed train.episode.seed; periodic evaluation uses
/// `eval_set` (or `train_set` when null). Deterministic for fixed seeds.
TrainResult train(const Dataset& train_set, const Dataset* eval_set, const ModelConfig& model,
                  const TrainConfig& train, const StepCallback& on_step = {});

/// Runs fn(i) for i in [0, n) on up to `threads` threads.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace strm
