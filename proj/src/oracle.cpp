#include "ilm/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace ilm {

namespace {

constexpr TokenId kFirstContent = 5;  // after the five sentinels

bool is_subsequence(std::span<const TokenId> small, std::span<const TokenId> big) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < big.size() && j < small.size(); ++i) {
    if (big[i] == small[j]) ++j;
  }
  return j == small.size();
}

std::int64_t binomial(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return 0;
  std::int64_t r = 1;
  for (std::int64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace

Posterior exact_posterior(const CleanSequence& x0, std::span<const TokenId> xt) {
  const std::size_t begin = x0.droppable_begin();
  const std::size_t end = x0.ids.size() - 1;
  std::set<TokenId> content;
  for (std::size_t i = begin; i < end; ++i) {
    if (!content.insert(x0.ids[i]).second) {
      throw ValidationError("exact posterior needs a non-repeating x0 (alignment of repeats is not supported)");
    }
  }
  if (!is_subsequence(xt, x0.ids) || xt.size() < x0.condition_len + 2 ||
      !std::equal(x0.ids.begin(), x0.ids.begin() + static_cast<std::ptrdiff_t>(begin), xt.begin()) ||
      xt.back() != x0.ids.back()) {
    throw ValidationError("x_t is not a noised version of x0");
  }
  Posterior post;
  if (xt.size() == x0.ids.size()) {
    return post;
  }
  const auto L = static_cast<std::int64_t>(x0.droppable());
  // Every candidate x_{t-1} has one more content token than x_t.
  const auto kept = static_cast<std::int64_t>(xt.size() - x0.condition_len - 2) + 1;
  // q(x_{t-1} | x0): uniform over the C(L, kept) subsets of that size.
  const Rational prior(1, binomial(L, kept));
  // q(x_t | x_{t-1}): one of the `kept` content tokens is dropped.
  const Rational likelihood(1, kept);

  Rational total = 0;
  std::vector<TokenId> cand;
  for (std::size_t i = x0.condition_len; i + 1 < xt.size(); ++i) {
    for (TokenId v : content) {
      cand.assign(xt.begin(), xt.begin() + static_cast<std::ptrdiff_t>(i + 1));
      cand.push_back(v);
      cand.insert(cand.end(), xt.begin() + static_cast<std::ptrdiff_t>(i + 1), xt.end());
      if (!is_subsequence(cand, x0.ids)) continue;
      const Rational w = likelihood * prior;
      post[{i + 1, v}] += w;  // +1: `<stp>` occupies visible index 0
      total += w;
    }
  }
  for (auto& [key, p] : post) p /= total;
  return post;
}

Posterior normalized_targets(const NoisedExample& ex) {
  Posterior p;
  if (ex.n_dropped == 0) return p;
  for (const auto& t : ex.slot_targets) {
    p[{t.slot, t.token}] += Rational(t.count, static_cast<std::int64_t>(ex.n_dropped));
  }
  return p;
}

OracleSweep oracle_sweep(std::size_t max_len, std::size_t alphabet, const TargetBuilder& builder) {
  if (max_len > 6) {
    throw UsageError("oracle sweep is limited to max_len <= 6");
  }
  if (alphabet == 0 || alphabet > 16) {
    throw UsageError("oracle sweep alphabet must be in [1, 16]");
  }
  OracleSweep sweep;
  sweep.pairs_by_length.assign(max_len + 1, 0);
  sweep.mismatches_by_length.assign(max_len + 1, 0);
  const TokenId bos = 2;
  const TokenId eos = 3;
  std::vector<TokenId> content;
  std::vector<std::uint8_t> used(alphabet, 0);
  auto visit = [&](auto&& self) -> void {
    if (!content.empty()) {
      CleanSequence x;
      x.ids.push_back(bos);
      x.ids.insert(x.ids.end(), content.begin(), content.end());
      x.ids.push_back(eos);
      const std::size_t L = content.size();
      ++sweep.sequences;
      for (std::uint32_t bits = 0; bits < (1u << L); ++bits) {
        DropMask b;
        b.bits.resize(L);
        for (std::size_t i = 0; i < L; ++i) {
          b.bits[i] = (bits >> i) & 1u;
          b.n += b.bits[i];
        }
        const NoisedExample ex = builder(x, b);
        std::vector<TokenId> xt(ex.visible.begin() + 1, ex.visible.end());
        ++sweep.pairs;
        ++sweep.pairs_by_length[L];
        bool ok = false;
        try {
          ok = exact_posterior(x, xt) == normalized_targets(ex);
        } catch (const ValidationError&) {
          ok = false;
        }
        if (!ok) {
          ++sweep.mismatches;
          ++sweep.mismatches_by_length[L];
        }
      }
    }
    if (content.size() == max_len) return;
    for (std::size_t t = 0; t < alphabet; ++t) {
      if (used[t]) continue;
      used[t] = 1;
      content.push_back(kFirstContent + static_cast<TokenId>(t));
      self(self);
      content.pop_back();
      used[t] = 0;
    }
  };
  visit(visit);
  return sweep;
}

OracleSweep oracle_sweep(std::size_t max_len, std::size_t alphabet) {
  return oracle_sweep(max_len, alphabet,
                      [](const CleanSequence& x, const DropMask& b) { return build_noised_example(x, b, 1); });
}

std::vector<std::vector<double>> TabularModel::log_probs(std::span<const TokenId> visible) const {
  std::uint64_t h = derive_seed(seed, {visible.size()});
  for (TokenId t : visible) h = splitmix64(h ^ static_cast<std::uint64_t>(t));
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> out(visible.size(), std::vector<double>(vocab_size, neg_inf));
  double mx = neg_inf;
  for (std::size_t k = 1; k + 1 < visible.size(); ++k) {
    for (std::size_t v = 0; v < vocab_size; ++v) {
      Rng rng(derive_seed(h, {k, v}));
      std::normal_distribution<double> normal;
      out[k][v] = logit_scale * normal(rng);
      mx = std::max(mx, out[k][v]);
    }
  }
  double z = 0;
  for (std::size_t k = 1; k + 1 < visible.size(); ++k) {
    for (double l : out[k]) z += std::exp(l - mx);
  }
  const double lse = mx + std::log(z);
  for (std::size_t k = 1; k + 1 < visible.size(); ++k) {
    for (double& l : out[k]) l -= lse;
  }
  return out;
}

VarianceProbe elbo_mc_variance_probe(const CleanSequence& x0, const TabularModel& model, std::size_t n_samples,
                                     Rng& rng) {
  if (n_samples < 2) {
    throw ValidationError("variance probe needs at least two samples");
  }
  const std::size_t L = x0.droppable();
  if (L == 0) {
    throw DegenerateExampleError("variance probe needs at least one droppable token");
  }
  // Welford accumulators: exact zero variance for constant samples.
  double mean_mc = 0, m2_mc = 0, mean_d = 0, m2_d = 0;
  std::vector<std::size_t> idx(L);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const std::size_t n = 1 + uniform_index(rng, L);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, L - i)]);
    DropMask b;
    b.bits.assign(L, false);
    for (std::size_t i = 0; i < n; ++i) b.bits[idx[i]] = true;
    b.n = n;
    const NoisedExample ex = build_noised_example(x0, b, 1);
    const auto lp = model.log_probs(ex.visible);

    // The last token removed on the way to x_t is uniform among the dropped.
    const std::size_t pick = idx[uniform_index(rng, n)];
    std::size_t anchor = x0.condition_len + 1;  // visible index of `<s>`
    for (std::size_t j = 0; j < pick; ++j) {
      if (!b.bits[j]) ++anchor;
    }
    const TokenId tok = x0.ids[x0.droppable_begin() + pick];
    const double mc = -lp[anchor][static_cast<std::size_t>(tok)];

    double d = 0;
    for (const auto& t : ex.slot_targets) {
      d -= static_cast<double>(t.count) / static_cast<double>(n) * lp[t.slot][static_cast<std::size_t>(t.token)];
    }
    const double k = static_cast<double>(s + 1);
    const double dmc = mc - mean_mc;
    mean_mc += dmc / k;
    m2_mc += dmc * (mc - mean_mc);
    const double dd = d - mean_d;
    mean_d += dd / k;
    m2_d += dd * (d - mean_d);
  }
  const double N = static_cast<double>(n_samples);
  return VarianceProbe{mean_mc, m2_mc / (N - 1), mean_d, m2_d / (N - 1)};
}

}  // namespace ilm
