#pragma once

#include <boost/rational.hpp>

#include <functional>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "ilm/corpus.hpp"

namespace ilm {

using Rational = boost::rational<std::int64_t>;

/// Posterior over one-token insertions keyed by (slot, token), with slots
/// indexed as in NoisedExample (`<stp>` is visible index 0).
using Posterior = std::map<std::pair<std::size_t, TokenId>, Rational>;

/// Exact one-step reverse posterior of the chain that drops one content
/// token at a time uniformly at random, by enumeration and Bayes' rule.
/// `xt` carries `<s>`/`</s>` but no `<stp>`. Empty when xt == x0.
/// Throws ValidationError if xt is not a subsequence of x0 or x0 repeats a
/// content token.
Posterior exact_posterior(const CleanSequence& x0, std::span<const TokenId> xt);

/// Normalized corpus targets count / n as rationals.
Posterior normalized_targets(const NoisedExample& ex);

using TargetBuilder = std::function<NoisedExample(const CleanSequence&, const DropMask&)>;

struct OracleSweep {
  std::size_t sequences = 0;
  std::size_t pairs = 0;
  std::size_t mismatches = 0;
  std::vector<std::size_t> pairs_by_length;  // index L
  std::vector<std::size_t> mismatches_by_length;
};

/// Every non-repeating content sequence of length 1..max_len over
/// `alphabet` tokens (ids 5..5+alphabet-1) and every drop mask: compares
/// `builder` targets with exact_posterior.
OracleSweep oracle_sweep(std::size_t max_len, std::size_t alphabet, const TargetBuilder& builder);
OracleSweep oracle_sweep(std::size_t max_len, std::size_t alphabet);

struct VarianceProbe {
  double mc_loss_mean = 0.0;
  double mc_loss_var = 0.0;
  double d_loss_mean = 0.0;
  double d_loss_var = 0.0;
};

/// Tabular reverse model: log p(k, v | x_t) from logits that are a pure
/// function of (seed, x_t, k, v); a zero scale gives the uniform model.
struct TabularModel {
  std::uint64_t seed = 0;
  double logit_scale = 1.0;
  std::size_t vocab_size = 0;

  /// Log-probabilities over (slot, token) for the visible sequence
  /// `<stp> ++ xt`; rows are visible indices, invalid rows -inf.
  std::vector<std::vector<double>> log_probs(std::span<const TokenId> visible) const;
};

/// Draws n ~ U{1..L} and b; the naive estimator scores the one token whose
/// removal produced x_t (uniform among the dropped), the d-target
/// estimator scores the full target distribution.
VarianceProbe elbo_mc_variance_probe(const CleanSequence& x0, const TabularModel& model, std::size_t n_samples,
                                     Rng& rng);

}  // namespace ilm
