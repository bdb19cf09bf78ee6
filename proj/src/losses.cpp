#include "ilm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ilm {

namespace {

template <typename Row>
double row_log_sum_exp(const Row& row) {
  const double mx = static_cast<double>(row.maxCoeff());
  double s = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    s += std::exp(static_cast<double>(row(j)) - mx);
  }
  return mx + std::log(s);
}

double softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

void check_rows(const Mat<double>& m, std::size_t n, const char* what) {
  if (static_cast<std::size_t>(m.rows()) != n) {
    throw ValidationError(std::string(what) + ": row count does not match sequence length");
  }
}

}  // namespace

double ilm_token_loss(const Mat<double>& dist, std::span<const SlotTarget> targets, std::size_t n_dropped) {
  if (n_dropped == 0) {
    throw ValidationError("token loss is undefined for a stop-only example (n_dropped == 0)");
  }
  if (targets.empty()) {
    throw ValidationError("token loss needs at least one target");
  }
  double loss = 0;
  for (const auto& t : targets) {
    if (static_cast<Eigen::Index>(t.slot) >= dist.rows() || t.token < 0 || t.token >= dist.cols()) {
      throw ValidationError("slot target outside the distribution table");
    }
    loss -= static_cast<double>(t.count) * std::log(dist(static_cast<Eigen::Index>(t.slot), t.token));
  }
  return loss / static_cast<double>(n_dropped);
}

double ilm_stop_loss(double p_stop, bool stop_label) {
  if (!(p_stop > 0.0 && p_stop < 1.0)) {
    throw ValidationError("stop probability must lie in (0, 1)");
  }
  return stop_label ? -std::log(p_stop) : -std::log1p(-p_stop);
}

double arm_loss(const Mat<double>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  check_rows(logits, targets.size(), "arm_loss");
  if (mask.size() != targets.size()) {
    throw ValidationError("arm_loss: mask length does not match targets");
  }
  double loss = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) {
      continue;
    }
    const auto r = static_cast<Eigen::Index>(i);
    loss += row_log_sum_exp(logits.row(r)) - logits(r, targets[i]);
    ++count;
  }
  if (count == 0) {
    throw ValidationError("arm_loss: no valid positions");
  }
  return loss / static_cast<double>(count);
}

double mdm_loss(const Mat<double>& logits, std::span<const TokenId> x0, std::span<const TokenId> xt,
                std::span<const std::uint8_t> frozen, double t, TokenId mask_id, const LogLinearSchedule& schedule) {
  check_rows(logits, x0.size(), "mdm_loss");
  if (xt.size() != x0.size() || frozen.size() != x0.size()) {
    throw ValidationError("mdm_loss: x0, xt and frozen must have equal length");
  }
  if (!(t > 0.0 && t <= 1.0)) {
    throw ValidationError("mdm_loss: t must lie in (0, 1]");
  }
  double loss = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (xt[i] != mask_id) {
      continue;
    }
    if (frozen[i]) {
      throw ValidationError("mdm_loss: position " + std::to_string(i) + " must survive noising but is masked");
    }
    const auto r = static_cast<Eigen::Index>(i);
    loss += row_log_sum_exp(logits.row(r)) - logits(r, x0[i]);
  }
  return schedule.weight(t) * loss;
}

double it_loss(const Mat<double>& logits, std::span<const std::uint8_t> slot_mask, std::span<const SlotTarget> targets,
               TokenId slot_eos) {
  check_rows(logits, slot_mask.size(), "it_loss");
  std::vector<std::uint32_t> per_slot(slot_mask.size(), 0);
  for (const auto& t : targets) {
    if (t.slot >= slot_mask.size() || !slot_mask[t.slot]) {
      throw ValidationError("it_loss: target in an invalid slot");
    }
    per_slot[t.slot] += t.count;
  }
  double loss = 0;
  for (std::size_t k = 0; k < slot_mask.size(); ++k) {
    if (slot_mask[k] && per_slot[k] == 0) {
      const auto r = static_cast<Eigen::Index>(k);
      loss += row_log_sum_exp(logits.row(r)) - logits(r, slot_eos);
    }
  }
  for (const auto& t : targets) {
    const auto r = static_cast<Eigen::Index>(t.slot);
    loss += static_cast<double>(t.count) / per_slot[t.slot] * (row_log_sum_exp(logits.row(r)) - logits(r, t.token));
  }
  return loss;
}

template <typename T>
LossParts batch_loss(const ModelWeights<T>& w, std::span<const TrainExample> batch, ModelWeights<T>* grads,
                     const LogLinearSchedule& schedule) {
  const ModelConfig& c = w.config;
  if (batch.empty()) {
    throw ValidationError("batch_loss: empty batch");
  }
  PackedSequences packed;
  for (const auto& ex : batch) {
    const int bin = c.variant == Variant::Mdm && c.time_bins > 0 ? static_cast<int>(c.time_bin(ex.t)) : -1;
    packed.add(ex.input, bin);
  }
  BackboneCache<T> cache;
  const Mat<T> hidden = backbone_forward<T>(w, packed, grads ? &cache : nullptr);
  Mat<T> d_hidden;
  if (grads) {
    d_hidden = Mat<T>::Zero(hidden.rows(), hidden.cols());
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  LossParts parts;

  if (c.has_insertion_head()) {
    const bool ilm = c.variant == Variant::Ilm;
    // Slot rows of every example that contributes a token loss.
    std::vector<std::size_t> rows;
    std::vector<std::size_t> first_row(batch.size(), 0);
    for (std::size_t e = 0; e < batch.size(); ++e) {
      const auto& ex = batch[e];
      first_row[e] = rows.size();
      if (ilm && ex.n_dropped == 0) {
        continue;
      }
      for (std::size_t k = ex.condition_len + 1; k + 1 < ex.input.size(); ++k) {
        rows.push_back(packed.offsets[e] + k);
      }
    }
    InsertionHeadCache<T> hc;
    const Mat<T> logits = insertion_head_forward<T>(w, hidden, rows, grads ? &hc : nullptr);
    Mat<T> d_logits;
    if (grads) {
      d_logits = Mat<T>::Zero(logits.rows(), logits.cols());
    }
    const auto V = logits.cols();
    for (std::size_t e = 0; e < batch.size(); ++e) {
      const auto& ex = batch[e];
      const auto r0 = static_cast<Eigen::Index>(first_row[e]);
      const std::size_t base_slot = ex.condition_len + 1;
      if (ilm) {
        if (ex.n_dropped == 0) {
          continue;
        }
        const auto S = static_cast<Eigen::Index>(ex.input.size() - 1 - base_slot);
        const auto block = logits.middleRows(r0, S);
        const double mx = static_cast<double>(block.maxCoeff());
        double z = 0;
        for (Eigen::Index i = 0; i < S; ++i) {
          for (Eigen::Index j = 0; j < V; ++j) {
            z += std::exp(static_cast<double>(block(i, j)) - mx);
          }
        }
        const double lse = mx + std::log(z);
        const double inv_n = 1.0 / static_cast<double>(ex.n_dropped);
        double loss = 0;
        for (const auto& t : ex.targets) {
          const auto r = r0 + static_cast<Eigen::Index>(t.slot - base_slot);
          loss -= t.count * inv_n * (static_cast<double>(logits(r, t.token)) - lse);
        }
        parts.tok += loss * inv_b;
        if (grads) {
          for (Eigen::Index i = 0; i < S; ++i) {
            for (Eigen::Index j = 0; j < V; ++j) {
              d_logits(r0 + i, j) = static_cast<T>(std::exp(static_cast<double>(block(i, j)) - lse) * inv_b);
            }
          }
          for (const auto& t : ex.targets) {
            const auto r = r0 + static_cast<Eigen::Index>(t.slot - base_slot);
            d_logits(r, t.token) -= static_cast<T>(t.count * inv_n * inv_b);
          }
        }
      } else {
        const std::size_t S = ex.input.size() - 1 - base_slot;
        std::vector<std::uint32_t> per_slot(S, 0);
        for (const auto& t : ex.targets) {
          per_slot[t.slot - base_slot] += t.count;
        }
        std::vector<double> lse(S);
        double loss = 0;
        for (std::size_t i = 0; i < S; ++i) {
          lse[i] = row_log_sum_exp(logits.row(r0 + static_cast<Eigen::Index>(i)));
          if (per_slot[i] == 0) {
            loss += lse[i] - static_cast<double>(logits(r0 + static_cast<Eigen::Index>(i), c.specials.eos));
          }
        }
        for (const auto& t : ex.targets) {
          const std::size_t i = t.slot - base_slot;
          loss += static_cast<double>(t.count) / per_slot[i] *
                  (lse[i] - static_cast<double>(logits(r0 + static_cast<Eigen::Index>(i), t.token)));
        }
        parts.tok += loss * inv_b;
        if (grads) {
          for (std::size_t i = 0; i < S; ++i) {
            const auto r = r0 + static_cast<Eigen::Index>(i);
            for (Eigen::Index j = 0; j < V; ++j) {
              d_logits(r, j) = static_cast<T>(std::exp(static_cast<double>(logits(r, j)) - lse[i]) * inv_b);
            }
            if (per_slot[i] == 0) {
              d_logits(r, c.specials.eos) -= static_cast<T>(inv_b);
            }
          }
          for (const auto& t : ex.targets) {
            const std::size_t i = t.slot - base_slot;
            d_logits(r0 + static_cast<Eigen::Index>(i), t.token) -=
                static_cast<T>(static_cast<double>(t.count) / per_slot[i] * inv_b);
          }
        }
      }
    }
    if (grads && !rows.empty()) {
      insertion_head_backward<T>(w, hc, d_logits, d_hidden, *grads);
    }
    if (ilm) {
      for (std::size_t e = 0; e < batch.size(); ++e) {
        const std::size_t row = packed.offsets[e];
        const double z = static_cast<double>(stop_head_forward<T>(w, hidden, row));
        const bool label = batch[e].stop_label;
        parts.stop += (label ? softplus(-z) : softplus(z)) * inv_b;
        if (grads) {
          const T dz = static_cast<T>((sigmoid(z) - (label ? 1.0 : 0.0)) * inv_b);
          stop_head_backward<T>(w, hidden, row, dz, d_hidden, *grads);
        }
      }
    }
  } else {
    const Mat<T> logits = token_head_forward<T>(w, hidden);
    Mat<T> d_logits;
    if (grads) {
      d_logits = Mat<T>::Zero(logits.rows(), logits.cols());
    }
    auto accumulate = [&](Eigen::Index r, TokenId target, double scale) {
      const double lse = row_log_sum_exp(logits.row(r));
      if (grads) {
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
          d_logits(r, j) += static_cast<T>(std::exp(static_cast<double>(logits(r, j)) - lse) * scale);
        }
        d_logits(r, target) -= static_cast<T>(scale);
      }
      return (lse - static_cast<double>(logits(r, target))) * scale;
    };
    for (std::size_t e = 0; e < batch.size(); ++e) {
      const auto& ex = batch[e];
      const auto off = static_cast<Eigen::Index>(packed.offsets[e]);
      if (c.variant == Variant::Arm) {
        if (ex.loss_begin + 1 >= ex.input.size()) {
          throw ValidationError("arm example has no prediction targets");
        }
        const double scale = inv_b / static_cast<double>(ex.input.size() - 1 - ex.loss_begin);
        for (std::size_t i = ex.loss_begin; i + 1 < ex.input.size(); ++i) {
          parts.tok += accumulate(off + static_cast<Eigen::Index>(i), ex.input[i + 1], scale);
        }
      } else {
        if (ex.clean.size() != ex.input.size()) {
          throw ValidationError("mdm example: clean and noised canvases differ in length");
        }
        const std::size_t span = ex.input.size() - ex.condition_len - 1;
        const double scale = schedule.weight(ex.t) * inv_b / static_cast<double>(span);
        for (std::size_t i = 0; i < ex.input.size(); ++i) {
          if (ex.input[i] != c.specials.mask) {
            continue;
          }
          if (i <= ex.condition_len) {
            throw ValidationError("mdm example masks a prompt or <s> position");
          }
          parts.tok += accumulate(off + static_cast<Eigen::Index>(i), ex.clean[i], scale);
        }
      }
    }
    if (grads) {
      token_head_backward<T>(w, hidden, d_logits, d_hidden, *grads);
    }
  }
  parts.total = parts.tok + parts.stop;
  if (grads) {
    backbone_backward<T>(w, packed, cache, d_hidden, *grads);
  }
  return parts;
}

template LossParts batch_loss<float>(const ModelWeights<float>&, std::span<const TrainExample>, ModelWeights<float>*,
                                     const LogLinearSchedule&);
template LossParts batch_loss<double>(const ModelWeights<double>&, std::span<const TrainExample>,
                                      ModelWeights<double>*, const LogLinearSchedule&);

TrainExample make_ilm_example(const CleanSequence& x, Rng& rng, TokenId stp_id) {
  const DropMask b = sample_drop_mask(x, rng);
  NoisedExample ne = build_noised_example(x, b, stp_id);
  TrainExample ex;
  ex.input = std::move(ne.visible);
  ex.condition_len = ne.condition_len;
  ex.targets = std::move(ne.slot_targets);
  ex.n_dropped = ne.n_dropped;
  ex.stop_label = ne.stop_label;
  return ex;
}

TrainExample make_arm_example(const CleanSequence& x) {
  TrainExample ex;
  ex.input = x.ids;
  ex.condition_len = x.condition_len;
  ex.loss_begin = x.bos_index();
  return ex;
}

std::vector<TokenId> mdm_canvas(const CleanSequence& x, const ModelConfig& config) {
  const std::size_t used = x.ids.size() - x.condition_len - 1;  // content + </s>
  if (used > config.mdm_span) {
    throw ValidationError("sequence needs " + std::to_string(used) + " canvas positions but mdm_span is " +
                          std::to_string(config.mdm_span));
  }
  std::vector<TokenId> canvas = x.ids;
  canvas.resize(x.condition_len + 1 + config.mdm_span, config.specials.pad);
  return canvas;
}

TrainExample make_mdm_example(const CleanSequence& x, Rng& rng, const ModelConfig& config,
                              const LogLinearSchedule& schedule, double t_min) {
  TrainExample ex;
  ex.clean = mdm_canvas(x, config);
  ex.input = ex.clean;
  ex.condition_len = x.condition_len;
  ex.t = t_min + (1.0 - t_min) * uniform01(rng);
  const double p = schedule.mask_prob(ex.t);
  for (std::size_t i = x.condition_len + 1; i < ex.input.size(); ++i) {
    if (uniform01(rng) < p) {
      ex.input[i] = config.specials.mask;
    }
  }
  return ex;
}

TrainExample make_example(const CleanSequence& x, Rng& rng, const ModelConfig& config) {
  switch (config.variant) {
    case Variant::Ilm:
    case Variant::It:
      return make_ilm_example(x, rng, config.specials.stp);
    case Variant::Arm:
      return make_arm_example(x);
    case Variant::Mdm:
      return make_mdm_example(x, rng, config);
  }
  throw ValidationError("unknown variant");
}

}  // namespace ilm
