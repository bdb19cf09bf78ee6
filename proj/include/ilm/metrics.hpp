#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/decoding.hpp"
#include "ilm/model.hpp"
#include "ilm/star.hpp"

namespace ilm {

/// Mean negative log-likelihood (nats per token) of `x` under a causal
/// evaluator fed `<s>` ++ x. Sentinels in `x` are not allowed.
double nll_under(const ModelWeights<float>& evaluator, std::span<const TokenId> x);

/// Empirical unigram entropy of `x` in nats (0 log 0 = 0).
double unigram_entropy(std::span<const TokenId> x);

struct GenerationMetrics {
  double nll = 0.0;
  double entropy = 0.0;
  double mean_len = 0.0;
  std::size_t n_samples = 0;
};

/// Averages per-sample NLL and entropy; empty samples are skipped for NLL
/// and entropy but count toward the mean length.
GenerationMetrics generation_metrics(const ModelWeights<float>& evaluator,
                                     std::span<const std::vector<TokenId>> samples);

struct InfillMetrics {
  double d_nll_gt = 0.0;
  double d_ent_gt = 0.0;
  double d_nll_inp = 0.0;
  double d_ent_inp = 0.0;
  std::size_t n_used = 0;
  std::size_t n_excluded = 0;
};

/// 100 (M(x) - M(ref)) / M(ref). Throws ValidationError when M(ref) is 0.
double percent_delta(double value, double reference);

/// Per-example deltas for one infilled sequence (n_used 1) or an excluded
/// record (n_excluded 1) when a reference metric is zero.
InfillMetrics infill_deltas(std::span<const TokenId> infilled, std::span<const TokenId> gt,
                            std::span<const TokenId> inp, const ModelWeights<float>& evaluator);

/// Averages the per-example records that were not excluded.
InfillMetrics average_infill(std::span<const InfillMetrics> records);

enum class InfillMode { SingleSegment, MultiSegment };

InfillMode parse_infill_mode(std::string_view name);

/// Content tokens only (no `<s>`/`</s>`). `inp` is gt with the spans
/// removed; gap_after[i] marks a removed span right after inp[i] (index -1
/// is not used: spans never touch the sentinels, so the first content token
/// always survives).
struct InfillExample {
  std::vector<TokenId> gt;
  std::vector<TokenId> inp;
  std::vector<std::uint8_t> gap_after;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // [begin, end) in gt
};

struct InfillSet {
  std::vector<InfillExample> examples;
  std::size_t skipped = 0;
};

InfillSet build_infill_set(std::span<const CleanSequence> corpus, InfillMode mode, Rng& rng);

/// Sequence-level decoding options shared by the accuracy and infill
/// harnesses.
struct DecodeOptions {
  SamplerConfig insertion;
  MdmSamplerConfig mdm;
  std::optional<double> arm_nucleus_p;
  std::size_t arm_max_new = 64;
  // For ARMO: the model emits the solution reversed.
  bool reverse_output = false;
  // ILM infill slot policy: false restricts insertions to the gaps.
  bool infill_anywhere = false;
};

/// Deterministic decoding used for accuracy: argmax slot and token for the
/// insertion models, argmax tokens with one tau-leaping step per canvas
/// position for the mdm, argmax continuation for the arm.
DecodeOptions greedy_decode_options(const ModelConfig& config, bool reverse_output = false);

/// Decodes the solution for a prompt ending with `<s>`; returns content
/// tokens (without sentinels).
std::vector<TokenId> decode_solution(const ModelWeights<float>& w, std::span<const TokenId> prompt,
                                     const DecodeOptions& opts, Rng& rng);

struct AccuracyReport {
  double seq_acc = 0.0;
  double tok_acc = 0.0;
  std::size_t n = 0;
  std::vector<std::vector<TokenId>> predictions;
};

/// Decodes every test example conditioned on its prompt and scores the
/// solution positionwise against the gold one.
AccuracyReport accuracy_suite(const ModelWeights<float>& w, std::span<const CleanSequence> testset,
                              const DecodeOptions& opts, std::uint64_t seed);

/// Infills with the ILM (blanks-only slots) or the MDM (masks of the gt
/// segment length placed at each gap).
std::vector<TokenId> infill(const ModelWeights<float>& w, const InfillExample& ex, const DecodeOptions& opts,
                            Rng& rng);

}  // namespace ilm
