#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ilm/checkpoint.hpp"
#include "ilm/losses.hpp"

namespace ilm {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t max_steps = 10000;
  std::optional<double> grad_clip = 1.0;  // nullopt disables clipping
  std::uint64_t seed = 0;
  Variant variant = Variant::Ilm;
  std::size_t eval_every = 0;        // 0 disables periodic eval
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Where a batch that produced a non-finite loss is written; empty keeps
  // the diagnostic in the exception message only.
  std::filesystem::path dump_dir;

  void validate() const;
};

struct LossReport {
  std::size_t step = 0;  // number of completed updates after this one
  double total = 0.0;
  double tok_component = 0.0;
  double stop_component = 0.0;
  double grad_norm = 0.0;

  bool operator==(const LossReport&) const = default;
};

/// Everything needed to continue training bit-exactly: the data order and
/// per-example noise are pure functions of (seed, step).
struct TrainState {
  ModelWeights<float> weights;
  OptimizerState optimizer;

  static TrainState fresh(ModelWeights<float> weights);
};

struct TrainHooks {
  std::function<void(const LossReport&)> on_step;
  std::function<void(std::size_t step, const ModelWeights<float>&)> on_eval;
  std::function<void(std::size_t step, const TrainState&)> on_checkpoint;
};

/// Weight decay applies to matrices only, not to biases or norm gains.
bool is_decayed_parameter(const std::string& name);

/// Indices of the corpus examples used at `step` (epoch-wise shuffles).
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step, std::size_t batch_size,
                                       std::size_t corpus_size);

/// Builds the noised examples of one step.
std::vector<TrainExample> make_batch(const TrainConfig& cfg, const ModelConfig& model,
                                     std::span<const CleanSequence> corpus, std::size_t step);

/// Global-norm clipping in place; returns the norm before clipping.
double clip_gradients(ModelWeights<float>& grads, std::optional<double> max_norm);

void adamw_update(const TrainConfig& cfg, ModelWeights<float>& weights, const ModelWeights<float>& grads,
                  OptimizerState& opt);

/// Runs updates from state.optimizer.step up to cfg.max_steps.
std::vector<LossReport> train(const TrainConfig& cfg, std::span<const CleanSequence> corpus, TrainState& state,
                              const TrainHooks& hooks = {});

}  // namespace ilm
