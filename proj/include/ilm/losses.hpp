#pragma once

#include <span>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/model.hpp"

namespace ilm {

/// alpha_t = 1 - (1 - eps) t, so the loss weight -alpha'_t / (1 - alpha_t)
/// is 1/t.
struct LogLinearSchedule {
  double eps = 1e-3;

  double alpha(double t) const { return 1.0 - (1.0 - eps) * t; }
  double mask_prob(double t) const { return 1.0 - alpha(t); }
  double weight(double t) const { return (1.0 - eps) / mask_prob(t); }
};

// Pointwise losses. Logit and probability matrices have one row per
// sequence position.

/// -(1/n) sum count(k,v) log p(k,v); `dist` is the joint insertion table.
double ilm_token_loss(const Mat<double>& dist, std::span<const SlotTarget> targets, std::size_t n_dropped);

double ilm_stop_loss(double p_stop, bool stop_label);

/// Mean next-token cross-entropy; row i of `logits` predicts `targets[i]`
/// wherever `mask[i]` is set.
double arm_loss(const Mat<double>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask);

/// weight(t) * sum over masked positions of -log p(x0_i). Throws if a
/// position that must survive (listed in `frozen`) is masked in xt.
double mdm_loss(const Mat<double>& logits, std::span<const TokenId> x0, std::span<const TokenId> xt,
                std::span<const std::uint8_t> frozen, double t, TokenId mask_id,
                const LogLinearSchedule& schedule = {});

/// Per-slot softmax loss with local averaging; rows of `logits` flagged in
/// `slot_mask` are slots, and empty slots are trained toward `slot_eos`.
double it_loss(const Mat<double>& logits, std::span<const std::uint8_t> slot_mask,
               std::span<const SlotTarget> targets, TokenId slot_eos);

// ---------------------------------------------------------------------------
// Batched training objective with analytic gradients.

/// One training example, already noised. Which fields are meaningful
/// depends on the variant:
///   ilm, it: input = `<stp>` ++ x[b], targets/n_dropped/stop_label
///   arm:     input = x, predictions from position loss_begin onward
///   mdm:     input = xt (canvas with masks), clean = x0 canvas, t
struct TrainExample {
  std::vector<TokenId> input;
  std::size_t condition_len = 0;
  std::vector<SlotTarget> targets;
  std::size_t n_dropped = 0;
  bool stop_label = false;
  std::size_t loss_begin = 0;
  std::vector<TokenId> clean;
  double t = 0.0;
};

struct LossParts {
  double total = 0.0;
  double tok = 0.0;   // insertion / next-token / denoising component
  double stop = 0.0;  // ilm only
};

/// Mean over examples of the per-example loss; for mdm the denoising sum is
/// divided by the canvas length. Gradients are accumulated into `grads`
/// when non-null.
template <typename T>
LossParts batch_loss(const ModelWeights<T>& w, std::span<const TrainExample> batch, ModelWeights<T>* grads,
                     const LogLinearSchedule& schedule = {});

// Example construction from clean data.

TrainExample make_ilm_example(const CleanSequence& x, Rng& rng, TokenId stp_id);
TrainExample make_arm_example(const CleanSequence& x);
/// Canvas = prompt, `<s>`, content, `</s>`, then pad up to `mdm_span`
/// positions after `<s>`. t ~ U(t_min, 1).
TrainExample make_mdm_example(const CleanSequence& x, Rng& rng, const ModelConfig& config,
                              const LogLinearSchedule& schedule = {}, double t_min = 1e-3);
std::vector<TokenId> mdm_canvas(const CleanSequence& x, const ModelConfig& config);

TrainExample make_example(const CleanSequence& x, Rng& rng, const ModelConfig& config);

}  // namespace ilm
