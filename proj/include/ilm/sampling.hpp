#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ilm/model.hpp"

namespace ilm {

enum class SampleMode { Joint, TwoStep };

SampleMode parse_sample_mode(std::string_view name);

struct SamplerConfig {
  SampleMode mode = SampleMode::TwoStep;
  std::optional<std::size_t> top_k;   // slot stage
  std::optional<double> nucleus_p;    // token stage
  double stop_threshold = 0.5;
  std::optional<std::size_t> max_insertions;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Keeps every entry whose value is at least the k-th largest (ties at the
/// boundary survive) and renormalizes.
std::vector<double> top_k_filter(std::span<const double> probs, std::size_t k);

/// Keeps the smallest prefix of entries, by decreasing probability, whose
/// mass reaches p, and renormalizes. Equal probabilities are ordered by index.
std::vector<double> nucleus_filter(std::span<const double> probs, double p);

/// Inverse-CDF draw; the weights need not be normalized.
std::size_t sample_categorical(std::span<const double> weights, Rng& rng);

struct SlotToken {
  std::size_t slot = 0;
  TokenId token = 0;

  bool operator==(const SlotToken&) const = default;
};

/// Draws from the flattened joint table.
SlotToken joint_sample(const Mat<double>& dist, Rng& rng);

/// Slot from the (top-k filtered) row-sum marginal, then token from the
/// (nucleus filtered) row conditional.
SlotToken two_step_sample(const Mat<double>& dist, const SamplerConfig& cfg, Rng& rng);

SlotToken sample_insertion(const Mat<double>& dist, const SamplerConfig& cfg, Rng& rng);

}  // namespace ilm
