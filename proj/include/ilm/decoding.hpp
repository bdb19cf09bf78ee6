#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ilm/losses.hpp"
#include "ilm/model.hpp"
#include "ilm/sampling.hpp"

namespace ilm {

/// The (v, u) pair: tokens in generation order and their 1-based ranks in
/// the current sequence. Entries are never removed.
struct InsertionState {
  std::vector<TokenId> v;
  std::vector<std::size_t> u;
  std::vector<std::uint8_t> frozen;
  // Per entry: may new tokens go right after it. Only frozen entries are
  // consulted, and only when `restricted` is set.
  std::vector<std::uint8_t> anchor_allowed;
  bool restricted = false;
  std::size_t condition_len = 0;

  /// Every token frozen, insertions allowed anywhere after `<s>`.
  static InsertionState from_sequence(std::span<const TokenId> seq, std::size_t condition_len);
  /// Insertions only inside the gaps: gap_after[i] set means new tokens may
  /// go between seq[i] and seq[i+1].
  static InsertionState from_template(std::span<const TokenId> seq, std::size_t condition_len,
                                      std::span<const std::uint8_t> gap_after);

  std::size_t size() const { return v.size(); }
  /// Tokens sorted by rank.
  std::vector<TokenId> ordered() const;
  /// For each rank r = 1..size(), whether inserting right after it is
  /// permitted by the template (index r - 1).
  std::vector<std::uint8_t> allowed_after_rank() const;
  /// Inserts after the token of rank k (0 < k <= size()); the new entry
  /// gets rank k + 1 and every rank above k moves up by one.
  void insert(std::size_t k, TokenId token, bool frozen_entry = false);
  bool ranks_are_permutation() const;
};

struct InsertionScores {
  double p_stop = 0.0;
  InsertionLogits logits;
};

/// Scores a visible sequence (`<stp>` first).
using InsertionScorer = std::function<InsertionScores(std::span<const TokenId> visible, std::size_t condition_len)>;

InsertionScorer model_scorer(const ModelWeights<float>& weights);

struct StepOutcome {
  bool stopped = false;
  std::size_t slot = 0;      // rank the token went after
  TokenId token = 0;
  std::size_t position = 0;  // rank of the new token
};

/// One insertion step. Sentinel tokens are never proposed.
StepOutcome ilm_step(InsertionState& state, const InsertionScorer& scorer, const SamplerConfig& cfg, Rng& rng,
                     const SpecialIds& specials);

struct TrajectoryRecord {
  std::size_t step = 0;
  std::size_t slot = 0;
  TokenId token = 0;
  std::size_t position = 0;
};

struct GenerationResult {
  std::vector<TokenId> tokens;  // full ordered sequence including template
  std::vector<TrajectoryRecord> trajectory;
  bool truncated = false;
};

/// Runs ilm_step until the stop head fires or the budget (default
/// max_seq_len - 1 - template length) is spent.
GenerationResult ilm_generate(InsertionState state, const InsertionScorer& scorer, const SamplerConfig& cfg,
                              Rng& rng, const SpecialIds& specials, std::size_t max_seq_len);
GenerationResult ilm_generate(InsertionState state, const ModelWeights<float>& weights, const SamplerConfig& cfg,
                              Rng& rng);

/// Insertion Transformer decoding: stop once every allowed slot predicts
/// slot-EOS with probability above the threshold; otherwise draw a
/// non-EOS insertion with a uniform prior over slots.
GenerationResult it_generate(InsertionState state, const ModelWeights<float>& weights, const SamplerConfig& cfg,
                             Rng& rng);

/// Per-position probabilities of the clean token given a canvas at time t.
using Denoiser = std::function<Mat<double>(std::span<const TokenId> canvas, double t)>;

Denoiser model_denoiser(const ModelWeights<float>& weights);

struct MdmSamplerConfig {
  std::size_t steps = 64;
  std::optional<double> nucleus_p;
  LogLinearSchedule schedule;
};

struct MdmResult {
  std::vector<TokenId> canvas;
  std::vector<std::size_t> masked_per_step;  // masks left after each step
};

/// Tau-leaping over t = 1, 1 - 1/steps, ..., 0: each masked position is
/// revealed with probability (alpha_s - alpha_t) / (1 - alpha_t); the last
/// step reveals all. Only masked positions of `canvas` change.
MdmResult mdm_generate(std::vector<TokenId> canvas, const Denoiser& denoiser, const MdmSamplerConfig& cfg, Rng& rng,
                       TokenId mask_id);

/// `prompt` ends with `<s>`; the canvas adds config.mdm_span masks.
std::vector<TokenId> mdm_initial_canvas(std::span<const TokenId> prompt, const ModelConfig& config);

/// Tokens between `<s>` (at condition_len) and the first `</s>` or pad.
std::vector<TokenId> mdm_content(std::span<const TokenId> canvas, std::size_t condition_len,
                                 const SpecialIds& specials);

struct ArmResult {
  std::vector<TokenId> continuation;  // eos excluded
  bool truncated = false;
};

ArmResult arm_generate(std::span<const TokenId> prompt, const ModelWeights<float>& weights,
                       std::optional<double> nucleus_p, std::size_t max_new, Rng& rng);

}  // namespace ilm
