#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "ilm/losses.hpp"
#include "test_util.hpp"

namespace ilm::testing {

inline std::vector<TrainExample> examples_for(const ModelConfig& c, const Vocab& v, std::uint64_t seed) {
  const std::vector<CleanSequence> data{seq(v, "<s> A B C D </s>"), seq(v, "<s> B B A </s>"),
                                        seq(v, "C D <s> E F A </s>", 2), seq(v, "<s> F </s>")};
  std::vector<TrainExample> out;
  Rng rng(seed);
  for (const auto& x : data) {
    TrainExample ex = make_example(x, rng, c);
    // Keep both loss branches exercised for ilm: force one stop-only
    // example and make sure the others drop something.
    if (c.variant == Variant::Ilm || c.variant == Variant::It) {
      for (int tries = 0; tries < 50 && ex.n_dropped == 0; ++tries) ex = make_example(x, rng, c);
    }
    out.push_back(ex);
  }
  if (c.variant == Variant::Ilm || c.variant == Variant::It) {
    DropMask none;
    none.bits.assign(data[0].droppable(), false);
    const NoisedExample ne = build_noised_example(data[0], none, v.stp());
    TrainExample stop;
    stop.input = ne.visible;
    stop.stop_label = true;
    out.push_back(stop);
  }
  if (c.variant == Variant::Mdm) {
    // Guarantee masked positions.
    for (auto& ex : out) {
      for (std::size_t i = ex.condition_len + 1; i < ex.input.size(); i += 2) ex.input[i] = c.specials.mask;
    }
  }
  return out;
}

struct GradCheck {
  std::size_t probed = 0;
  double worst = 0.0;
};

/// Central differences (h = 1e-5) against backprop on a double-precision
/// copy of a tiny model with perturbed weights. Relative error is
/// |a - n| / max(|a|, |n|, 1e-6).
inline GradCheck check_gradients(Variant variant, std::size_t probes, std::uint64_t seed) {
  const Vocab v = letters(6);
  ModelConfig c = tiny_config(variant, v.size());
  c.specials = SpecialIds::from(v);
  ModelWeights<double> w = init_weights(c, seed).cast<double>();
  // Larger weights than the default init so every path carries signal.
  Rng perturb(seed + 1);
  std::normal_distribution<double> normal(0.0, 0.2);
  w.for_each([&](const std::string&, Mat<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += normal(perturb);
  });
  const auto batch = examples_for(c, v, seed + 2);
  ModelWeights<double> grads = ModelWeights<double>::zeros(c);
  batch_loss<double>(w, batch, &grads);

  std::vector<std::pair<Mat<double>*, Mat<double>*>> tensors;
  std::vector<Mat<double>*> gs;
  grads.for_each([&](const std::string&, Mat<double>& g) { gs.push_back(&g); });
  std::size_t i = 0;
  w.for_each([&](const std::string&, Mat<double>& m) { tensors.emplace_back(&m, gs[i++]); });

  Rng pick(seed + 3);
  GradCheck out;
  const double h = 1e-5;
  for (std::size_t p = 0; p < probes; ++p) {
    auto [param, grad] = tensors[uniform_index(pick, tensors.size())];
    const auto idx = static_cast<Eigen::Index>(uniform_index(pick, static_cast<std::uint64_t>(param->size())));
    const double saved = param->data()[idx];
    param->data()[idx] = saved + h;
    const double up = batch_loss<double>(w, batch, nullptr).total;
    param->data()[idx] = saved - h;
    const double down = batch_loss<double>(w, batch, nullptr).total;
    param->data()[idx] = saved;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grad->data()[idx];
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    out.worst = std::max(out.worst, rel);
    ++out.probed;
  }
  return out;
}

}  // namespace ilm::testing
