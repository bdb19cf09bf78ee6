#include "ilm/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ilm {

InsertionState InsertionState::from_sequence(std::span<const TokenId> seq, std::size_t condition_len) {
  InsertionState s;
  s.condition_len = condition_len;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    s.v.push_back(seq[i]);
    s.u.push_back(i + 1);
    s.frozen.push_back(1);
    s.anchor_allowed.push_back(1);
  }
  return s;
}

InsertionState InsertionState::from_template(std::span<const TokenId> seq, std::size_t condition_len,
                                             std::span<const std::uint8_t> gap_after) {
  if (gap_after.size() != seq.size()) {
    throw ValidationError("gap mask length does not match the template");
  }
  InsertionState s = from_sequence(seq, condition_len);
  s.restricted = true;
  s.anchor_allowed.assign(gap_after.begin(), gap_after.end());
  return s;
}

std::vector<TokenId> InsertionState::ordered() const {
  std::vector<TokenId> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[u[i] - 1] = v[i];
  }
  return out;
}

std::vector<std::uint8_t> InsertionState::allowed_after_rank() const {
  std::vector<std::size_t> by_rank(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    by_rank[u[i] - 1] = i;
  }
  std::vector<std::uint8_t> out(v.size(), 1);
  if (!restricted) {
    return out;
  }
  std::uint8_t current = 0;
  for (std::size_t r = 0; r < v.size(); ++r) {
    const std::size_t e = by_rank[r];
    if (frozen[e]) {
      current = anchor_allowed[e];
    }
    out[r] = current;
  }
  return out;
}

void InsertionState::insert(std::size_t k, TokenId token, bool frozen_entry) {
  if (k == 0 || k > v.size()) {
    throw ValidationError("insertion rank " + std::to_string(k) + " outside [1, " + std::to_string(v.size()) + "]");
  }
  for (auto& r : u) {
    if (r > k) ++r;
  }
  v.push_back(token);
  u.push_back(k + 1);
  frozen.push_back(frozen_entry ? 1 : 0);
  anchor_allowed.push_back(0);
}

bool InsertionState::ranks_are_permutation() const {
  if (u.size() != v.size()) return false;
  std::vector<std::uint8_t> seen(u.size(), 0);
  for (std::size_t r : u) {
    if (r == 0 || r > u.size() || seen[r - 1]) return false;
    seen[r - 1] = 1;
  }
  return true;
}

namespace {

bool excluded_from_insertion(TokenId t, const SpecialIds& s) {
  return t == s.pad || t == s.stp || t == s.bos || t == s.eos || t == s.mask;
}

std::vector<TokenId> with_stop(const InsertionState& state, TokenId stp) {
  std::vector<TokenId> visible{stp};
  const auto ord = state.ordered();
  visible.insert(visible.end(), ord.begin(), ord.end());
  return visible;
}

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// Applies the template's slot restriction; returns the number of live slots.
std::size_t restrict_slots(InsertionLogits& logits, const InsertionState& state) {
  const auto allowed = state.allowed_after_rank();
  std::size_t live = 0;
  for (std::size_t k = 0; k < logits.slot_mask.size(); ++k) {
    if (!logits.slot_mask[k]) continue;
    if (k == 0 || !allowed[k - 1]) {
      logits.slot_mask[k] = 0;
      logits.scores.row(static_cast<Eigen::Index>(k)).setConstant(kNegInf);
    } else {
      ++live;
    }
  }
  return live;
}

}  // namespace

InsertionScorer model_scorer(const ModelWeights<float>& weights) {
  return [&weights](std::span<const TokenId> visible, std::size_t condition_len) {
    const ModelConfig& c = weights.config;
    if (!c.has_insertion_head()) {
      throw ValidationError("insertion decoding needs an ilm or it model");
    }
    if (visible.empty() || visible[0] != c.specials.stp) {
      throw ValidationError("visible sequence must begin with <stp>");
    }
    if (visible.size() < condition_len + 3) {
      throw ValidationError("visible sequence too short for its prompt");
    }
    PackedSequences p;
    p.add(visible);
    const Mat<float> hidden = backbone_forward<float>(weights, p, nullptr);
    InsertionScores out;
    if (c.has_stop_head()) {
      const double z = stop_head_forward<float>(weights, hidden, 0);
      out.p_stop = 1.0 / (1.0 + std::exp(-z));
    }
    std::vector<std::size_t> rows;
    for (std::size_t k = condition_len + 1; k + 1 < visible.size(); ++k) {
      rows.push_back(k);
    }
    const Mat<float> scores = insertion_head_forward<float>(weights, hidden, rows, nullptr);
    out.logits.scores = Mat<float>::Constant(static_cast<Eigen::Index>(visible.size()),
                                             static_cast<Eigen::Index>(c.vocab_size), kNegInf);
    out.logits.slot_mask.assign(visible.size(), 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.logits.scores.row(static_cast<Eigen::Index>(rows[i])) = scores.row(static_cast<Eigen::Index>(i));
      out.logits.slot_mask[rows[i]] = 1;
    }
    return out;
  };
}

StepOutcome ilm_step(InsertionState& state, const InsertionScorer& scorer, const SamplerConfig& cfg, Rng& rng,
                     const SpecialIds& specials) {
  const auto visible = with_stop(state, specials.stp);
  InsertionScores scores = scorer(visible, state.condition_len);
  if (scores.p_stop > cfg.stop_threshold) {
    return StepOutcome{true, 0, 0, 0};
  }
  InsertionLogits& logits = scores.logits;
  if (restrict_slots(logits, state) == 0) {
    throw ValidationError("over-constrained infill: no slot is allowed");
  }
  for (Eigen::Index t = 0; t < logits.scores.cols(); ++t) {
    if (excluded_from_insertion(static_cast<TokenId>(t), specials)) {
      logits.scores.col(t).setConstant(kNegInf);
    }
  }
  const Mat<double> dist = joint_insertion_distribution(logits);
  const SlotToken st = sample_insertion(dist, cfg, rng);
  state.insert(st.slot, st.token);
  return StepOutcome{false, st.slot, st.token, st.slot + 1};
}

namespace {

std::size_t insertion_budget(const InsertionState& state, const SamplerConfig& cfg, std::size_t max_seq_len) {
  if (state.size() + 1 > max_seq_len) {
    throw ValidationError("template does not fit in max_seq_len");
  }
  const std::size_t room = max_seq_len - 1 - state.size();
  return std::min(room, cfg.max_insertions.value_or(room));
}

}  // namespace

GenerationResult ilm_generate(InsertionState state, const InsertionScorer& scorer, const SamplerConfig& cfg, Rng& rng,
                              const SpecialIds& specials, std::size_t max_seq_len) {
  cfg.validate();
  const std::size_t budget = insertion_budget(state, cfg, max_seq_len);
  GenerationResult result;
  bool stopped = false;
  for (std::size_t step = 0; step < budget; ++step) {
    const StepOutcome o = ilm_step(state, scorer, cfg, rng, specials);
    if (o.stopped) {
      stopped = true;
      break;
    }
    result.trajectory.push_back({step, o.slot, o.token, o.position});
  }
  if (!stopped) {
    const auto scores = scorer(with_stop(state, specials.stp), state.condition_len);
    result.truncated = !(scores.p_stop > cfg.stop_threshold);
  }
  result.tokens = state.ordered();
  return result;
}

GenerationResult ilm_generate(InsertionState state, const ModelWeights<float>& weights, const SamplerConfig& cfg,
                              Rng& rng) {
  if (weights.config.variant != Variant::Ilm) {
    throw ValidationError("ilm decoding needs an ilm model");
  }
  return ilm_generate(std::move(state), model_scorer(weights), cfg, rng, weights.config.specials,
                      weights.config.max_seq_len);
}

GenerationResult it_generate(InsertionState state, const ModelWeights<float>& weights, const SamplerConfig& cfg,
                             Rng& rng) {
  cfg.validate();
  const ModelConfig& c = weights.config;
  if (c.variant != Variant::It) {
    throw ValidationError("insertion-transformer decoding needs an it model");
  }
  const auto scorer = model_scorer(weights);
  const std::size_t budget = insertion_budget(state, cfg, c.max_seq_len);
  GenerationResult result;
  std::size_t step = 0;
  for (;;) {
    InsertionScores scores = scorer(with_stop(state, c.specials.stp), state.condition_len);
    if (restrict_slots(scores.logits, state) == 0) {
      throw ValidationError("over-constrained infill: no slot is allowed");
    }
    const auto& L = scores.logits;
    Mat<double> table = Mat<double>::Zero(L.scores.rows(), L.scores.cols());
    bool all_eos = true;
    for (Eigen::Index k = 0; k < L.scores.rows(); ++k) {
      if (!L.slot_mask[static_cast<std::size_t>(k)]) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index t = 0; t < L.scores.cols(); ++t) {
        const auto id = static_cast<TokenId>(t);
        if (id == c.specials.eos || !excluded_from_insertion(id, c.specials)) {
          mx = std::max(mx, static_cast<double>(L.scores(k, t)));
        }
      }
      double z = 0;
      for (Eigen::Index t = 0; t < L.scores.cols(); ++t) {
        const auto id = static_cast<TokenId>(t);
        if (id == c.specials.eos || !excluded_from_insertion(id, c.specials)) {
          table(k, t) = std::exp(static_cast<double>(L.scores(k, t)) - mx);
          z += table(k, t);
        }
      }
      table.row(k) /= z;
      if (!(table(k, c.specials.eos) > cfg.stop_threshold)) {
        all_eos = false;
      }
      table(k, c.specials.eos) = 0.0;
    }
    if (all_eos) {
      break;
    }
    if (step == budget) {
      result.truncated = true;
      break;
    }
    // Uniform prior over slots: each row already sums to 1 - p_k(eos).
    const double total = table.sum();
    if (!(total > 0.0)) {
      throw NumericalError("insertion table has no mass outside slot-EOS");
    }
    table /= total;
    const SlotToken st = sample_insertion(table, cfg, rng);
    state.insert(st.slot, st.token);
    result.trajectory.push_back({step, st.slot, st.token, st.slot + 1});
    ++step;
  }
  result.tokens = state.ordered();
  return result;
}

Denoiser model_denoiser(const ModelWeights<float>& weights) {
  return [&weights](std::span<const TokenId> canvas, double t) {
    const ModelConfig& c = weights.config;
    if (c.variant != Variant::Mdm) {
      throw ValidationError("mdm decoding needs an mdm model");
    }
    PackedSequences p;
    p.add(canvas, c.time_bins > 0 ? static_cast<int>(c.time_bin(t)) : -1);
    const Mat<float> hidden = backbone_forward<float>(weights, p, nullptr);
    const Mat<float> logits = token_head_forward<float>(weights, hidden);
    Mat<double> probs(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const auto id = static_cast<TokenId>(j);
        if (id != c.specials.mask && id != c.specials.stp && id != c.specials.bos) {
          mx = std::max(mx, static_cast<double>(logits(i, j)));
        }
      }
      double z = 0;
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const auto id = static_cast<TokenId>(j);
        const bool ok = id != c.specials.mask && id != c.specials.stp && id != c.specials.bos;
        probs(i, j) = ok ? std::exp(static_cast<double>(logits(i, j)) - mx) : 0.0;
        z += probs(i, j);
      }
      probs.row(i) /= z;
    }
    return probs;
  };
}

MdmResult mdm_generate(std::vector<TokenId> canvas, const Denoiser& denoiser, const MdmSamplerConfig& cfg, Rng& rng,
                       TokenId mask_id) {
  if (cfg.steps == 0) {
    throw ValidationError("mdm sampling needs at least one step");
  }
  MdmResult result;
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) / static_cast<double>(cfg.steps);
    const double s = 1.0 - static_cast<double>(i + 1) / static_cast<double>(cfg.steps);
    const bool last = i + 1 == cfg.steps;
    const double a_t = cfg.schedule.alpha(t);
    const double p_reveal = last ? 1.0 : (cfg.schedule.alpha(s) - a_t) / (1.0 - a_t);
    std::vector<std::size_t> reveal;
    for (std::size_t pos = 0; pos < canvas.size(); ++pos) {
      if (canvas[pos] == mask_id && uniform01(rng) < p_reveal) {
        reveal.push_back(pos);
      }
    }
    if (!reveal.empty()) {
      const Mat<double> probs = denoiser(canvas, t);
      for (std::size_t pos : reveal) {
        const auto row = probs.row(static_cast<Eigen::Index>(pos));
        std::vector<double> w(row.data(), row.data() + row.size());
        if (cfg.nucleus_p) {
          w = nucleus_filter(w, *cfg.nucleus_p);
        }
        canvas[pos] = static_cast<TokenId>(sample_categorical(w, rng));
      }
    }
    result.masked_per_step.push_back(
        static_cast<std::size_t>(std::count(canvas.begin(), canvas.end(), mask_id)));
  }
  result.canvas = std::move(canvas);
  return result;
}

std::vector<TokenId> mdm_initial_canvas(std::span<const TokenId> prompt, const ModelConfig& config) {
  if (prompt.empty() || prompt.back() != config.specials.bos) {
    throw ValidationError("mdm prompt must end with <s>");
  }
  std::vector<TokenId> canvas(prompt.begin(), prompt.end());
  canvas.resize(prompt.size() + config.mdm_span, config.specials.mask);
  return canvas;
}

std::vector<TokenId> mdm_content(std::span<const TokenId> canvas, std::size_t condition_len,
                                 const SpecialIds& specials) {
  std::vector<TokenId> out;
  for (std::size_t i = condition_len + 1; i < canvas.size(); ++i) {
    if (canvas[i] == specials.eos || canvas[i] == specials.pad) break;
    out.push_back(canvas[i]);
  }
  return out;
}

ArmResult arm_generate(std::span<const TokenId> prompt, const ModelWeights<float>& weights,
                       std::optional<double> nucleus_p, std::size_t max_new, Rng& rng) {
  const ModelConfig& c = weights.config;
  if (c.variant != Variant::Arm) {
    throw ValidationError("arm decoding needs an arm model");
  }
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  ArmResult result;
  for (std::size_t n = 0;; ++n) {
    if (n == max_new || seq.size() >= c.max_seq_len) {
      result.truncated = true;
      break;
    }
    PackedSequences p;
    p.add(seq);
    const Mat<float> hidden = backbone_forward<float>(weights, p, nullptr);
    const Mat<float> last = hidden.bottomRows(1);
    const Mat<float> logits = token_head_forward<float>(weights, last);
    std::vector<double> w(static_cast<std::size_t>(logits.cols()));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const auto id = static_cast<TokenId>(j);
      if (id == c.specials.eos || !excluded_from_insertion(id, c.specials)) {
        mx = std::max(mx, static_cast<double>(logits(0, static_cast<Eigen::Index>(j))));
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
      const auto id = static_cast<TokenId>(j);
      const bool ok = id == c.specials.eos || !excluded_from_insertion(id, c.specials);
      w[j] = ok ? std::exp(static_cast<double>(logits(0, static_cast<Eigen::Index>(j))) - mx) : 0.0;
    }
    if (nucleus_p) {
      w = nucleus_filter(w, *nucleus_p);
    }
    const auto tok = static_cast<TokenId>(sample_categorical(w, rng));
    if (tok == c.specials.eos) {
      break;
    }
    seq.push_back(tok);
    result.continuation.push_back(tok);
  }
  return result;
}

}  // namespace ilm
