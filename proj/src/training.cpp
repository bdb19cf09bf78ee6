#include "ilm/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ilm {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ValidationError("lr must be positive");
  }
  if (batch_size == 0) {
    throw ValidationError("batch_size must be at least 1");
  }
  if (grad_clip && !(*grad_clip > 0.0)) {
    throw ValidationError("grad_clip must be positive (omit it to disable clipping)");
  }
  if (weight_decay < 0.0) {
    throw ValidationError("weight_decay must be non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) {
    throw ValidationError("adam_eps must be positive");
  }
}

TrainState TrainState::fresh(ModelWeights<float> weights) {
  TrainState s;
  s.optimizer.m = ModelWeights<float>::zeros(weights.config);
  s.optimizer.v = ModelWeights<float>::zeros(weights.config);
  s.weights = std::move(weights);
  return s;
}

bool is_decayed_parameter(const std::string& name) {
  for (const char* suffix : {".g", ".b", ".b1", ".b2"}) {
    if (name.ends_with(suffix)) {
      return false;
    }
  }
  return true;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step, std::size_t batch_size,
                                       std::size_t corpus_size) {
  if (corpus_size == 0) {
    throw ValidationError("training corpus is empty");
  }
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm;
  for (std::size_t j = 0; j < batch_size; ++j) {
    const std::size_t flat = step * batch_size + j;
    const std::size_t epoch = flat / corpus_size;
    if (epoch != cached_epoch) {
      perm.resize(corpus_size);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(derive_seed(seed, {0xE90C, epoch}));
      for (std::size_t i = corpus_size; i > 1; --i) {
        std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
      }
      cached_epoch = epoch;
    }
    out.push_back(perm[flat % corpus_size]);
  }
  return out;
}

std::vector<TrainExample> make_batch(const TrainConfig& cfg, const ModelConfig& model,
                                     std::span<const CleanSequence> corpus, std::size_t step) {
  const auto idx = batch_indices(cfg.seed, step, cfg.batch_size, corpus.size());
  std::vector<TrainExample> batch;
  batch.reserve(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    Rng rng(derive_seed(cfg.seed, {step, j}));
    batch.push_back(make_example(corpus[idx[j]], rng, model));
  }
  return batch;
}

double clip_gradients(ModelWeights<float>& grads, std::optional<double> max_norm) {
  double sq = 0;
  grads.for_each([&](const std::string&, const Mat<float>& g) { sq += g.cast<double>().squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (max_norm && norm > *max_norm) {
    const auto scale = static_cast<float>(*max_norm / norm);
    grads.for_each([&](const std::string&, Mat<float>& g) { g *= scale; });
  }
  return norm;
}

void adamw_update(const TrainConfig& cfg, ModelWeights<float>& weights, const ModelWeights<float>& grads,
                  OptimizerState& opt) {
  opt.step += 1;
  const double t = static_cast<double>(opt.step);
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  const auto c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const auto c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const auto lr = static_cast<float>(cfg.lr);
  const auto wd = static_cast<float>(cfg.weight_decay);
  const auto eps = static_cast<float>(cfg.adam_eps);

  std::vector<const Mat<float>*> g;
  std::vector<Mat<float>*> m, v;
  grads.for_each([&](const std::string&, const Mat<float>& x) { g.push_back(&x); });
  opt.m.for_each([&](const std::string&, Mat<float>& x) { m.push_back(&x); });
  opt.v.for_each([&](const std::string&, Mat<float>& x) { v.push_back(&x); });
  std::size_t i = 0;
  weights.for_each([&](const std::string& name, Mat<float>& p) {
    auto ga = g[i]->array();
    auto ma = m[i]->array();
    auto va = v[i]->array();
    ma = b1 * ma + (1.0f - b1) * ga;
    va = b2 * va + (1.0f - b2) * ga.square();
    if (is_decayed_parameter(name)) {
      p.array() -= lr * wd * p.array();
    }
    p.array() -= lr * (ma * c1) / ((va * c2).sqrt() + eps);
    ++i;
  });
}

namespace {

std::string dump_batch(const TrainConfig& cfg, std::size_t step, std::span<const TrainExample> batch) {
  std::ostringstream os;
  os << "step " << step << "\n";
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto& ex = batch[j];
    os << "example " << j << " input:";
    for (TokenId t : ex.input) os << ' ' << t;
    os << " | n_dropped " << ex.n_dropped << " stop " << ex.stop_label << " t " << ex.t << "\n";
  }
  if (cfg.dump_dir.empty()) {
    return os.str();
  }
  std::filesystem::create_directories(cfg.dump_dir);
  const auto path = cfg.dump_dir / ("nonfinite_step" + std::to_string(step) + ".txt");
  std::ofstream(path) << os.str();
  return "batch written to " + path.string();
}

}  // namespace

std::vector<LossReport> train(const TrainConfig& cfg, std::span<const CleanSequence> corpus, TrainState& state,
                              const TrainHooks& hooks) {
  cfg.validate();
  if (corpus.empty()) {
    throw ValidationError("training corpus is empty");
  }
  if (cfg.variant != state.weights.config.variant) {
    throw ValidationError("training variant does not match the model variant");
  }
  std::vector<LossReport> reports;
  ModelWeights<float> grads = ModelWeights<float>::zeros(state.weights.config);
  while (state.optimizer.step < cfg.max_steps) {
    const std::size_t step = state.optimizer.step;
    const auto batch = make_batch(cfg, state.weights.config, corpus, step);
    grads.set_zero();
    const LossParts parts = batch_loss<float>(state.weights, batch, &grads);
    if (!std::isfinite(parts.total)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step) + "; " + dump_batch(cfg, step, batch));
    }
    const double norm = clip_gradients(grads, cfg.grad_clip);
    if (!std::isfinite(norm)) {
      throw NumericalError("non-finite gradient at step " + std::to_string(step) + "; " +
                           dump_batch(cfg, step, batch));
    }
    adamw_update(cfg, state.weights, grads, state.optimizer);
    LossReport r{state.optimizer.step, parts.total, parts.tok, parts.stop, norm};
    reports.push_back(r);
    if (hooks.on_step) {
      hooks.on_step(r);
    }
    if (cfg.eval_every && hooks.on_eval && state.optimizer.step % cfg.eval_every == 0) {
      hooks.on_eval(state.optimizer.step, state.weights);
    }
    if (cfg.checkpoint_every && hooks.on_checkpoint && state.optimizer.step % cfg.checkpoint_every == 0) {
      hooks.on_checkpoint(state.optimizer.step, state);
    }
  }
  return reports;
}

}  // namespace ilm
