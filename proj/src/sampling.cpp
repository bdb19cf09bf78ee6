#include "ilm/sampling.hpp"

#include <algorithm>
#include <numeric>

namespace ilm {

SampleMode parse_sample_mode(std::string_view name) {
  if (name == "joint") return SampleMode::Joint;
  if (name == "two-step") return SampleMode::TwoStep;
  throw UsageError("unknown sampling mode '" + std::string(name) + "' (joint|two-step)");
}

void SamplerConfig::validate() const {
  if (!(stop_threshold > 0.0 && stop_threshold < 1.0)) {
    throw ValidationError("stop threshold must lie in (0, 1)");
  }
  if (nucleus_p && !(*nucleus_p > 0.0 && *nucleus_p <= 1.0)) {
    throw ValidationError("nucleus_p must lie in (0, 1]");
  }
  if (top_k && *top_k == 0) {
    throw ValidationError("top_k must be at least 1");
  }
}

namespace {

std::vector<double> normalized(std::vector<double> w) {
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(s > 0.0)) {
    throw ValidationError("cannot normalize a distribution with zero mass");
  }
  for (double& x : w) x /= s;
  return w;
}

}  // namespace

std::vector<double> top_k_filter(std::span<const double> probs, std::size_t k) {
  std::vector<double> out(probs.begin(), probs.end());
  if (k == 0) {
    throw ValidationError("top_k must be at least 1");
  }
  if (k < out.size()) {
    std::vector<double> sorted = out;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end(),
                     std::greater<>());
    const double kth = sorted[k - 1];
    for (double& x : out) {
      if (x < kth) x = 0.0;
    }
  }
  return normalized(std::move(out));
}

std::vector<double> nucleus_filter(std::span<const double> probs, double p) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw ValidationError("nucleus_p must lie in (0, 1]");
  }
  std::vector<double> out(probs.size(), 0.0);
  if (p >= 1.0) {
    std::copy(probs.begin(), probs.end(), out.begin());
    return normalized(std::move(out));
  }
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  double mass = 0;
  for (std::size_t i : order) {
    if (probs[i] <= 0.0) break;
    out[i] = probs[i];
    mass += probs[i];
    if (mass >= p * total) break;
  }
  return normalized(std::move(out));
}

std::size_t sample_categorical(std::span<const double> weights, Rng& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) {
    throw ValidationError("cannot sample from a distribution with zero mass");
  }
  const double r = uniform01(rng) * total;
  double acc = 0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last = i;
    if (r < acc) return i;
  }
  return last;
}

SlotToken joint_sample(const Mat<double>& dist, Rng& rng) {
  const std::size_t flat = sample_categorical(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size())), rng);
  const auto cols = static_cast<std::size_t>(dist.cols());
  return {flat / cols, static_cast<TokenId>(flat % cols)};
}

SlotToken two_step_sample(const Mat<double>& dist, const SamplerConfig& cfg, Rng& rng) {
  std::vector<double> marginal(static_cast<std::size_t>(dist.rows()));
  for (Eigen::Index k = 0; k < dist.rows(); ++k) {
    marginal[static_cast<std::size_t>(k)] = dist.row(k).sum();
  }
  if (cfg.top_k) {
    marginal = top_k_filter(marginal, *cfg.top_k);
  }
  const std::size_t slot = sample_categorical(marginal, rng);
  const auto row = dist.row(static_cast<Eigen::Index>(slot));
  std::vector<double> cond(row.data(), row.data() + row.size());
  if (cfg.nucleus_p) {
    cond = nucleus_filter(cond, *cfg.nucleus_p);
  }
  return {slot, static_cast<TokenId>(sample_categorical(cond, rng))};
}

SlotToken sample_insertion(const Mat<double>& dist, const SamplerConfig& cfg, Rng& rng) {
  return cfg.mode == SampleMode::Joint ? joint_sample(dist, rng) : two_step_sample(dist, cfg, rng);
}

}  // namespace ilm
