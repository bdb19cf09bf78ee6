#include "ilm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace ilm {

double nll_under(const ModelWeights<float>& evaluator, std::span<const TokenId> x) {
  const ModelConfig& c = evaluator.config;
  if (c.variant != Variant::Arm) {
    throw ValidationError("the NLL evaluator must be a causal (arm) model");
  }
  if (x.empty()) {
    throw ValidationError("cannot score an empty sequence");
  }
  std::vector<TokenId> input{c.specials.bos};
  input.insert(input.end(), x.begin(), x.end() - 1);
  PackedSequences p;
  p.add(input);
  const Mat<float> hidden = backbone_forward<float>(evaluator, p, nullptr);
  const Mat<float> logits = token_head_forward<float>(evaluator, hidden);
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(i)).cast<double>();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(x[i]);
  }
  return total / static_cast<double>(x.size());
}

double unigram_entropy(std::span<const TokenId> x) {
  if (x.empty()) {
    throw ValidationError("entropy of an empty sequence is undefined");
  }
  std::map<TokenId, std::size_t> counts;
  for (TokenId t : x) ++counts[t];
  double h = 0;
  const double n = static_cast<double>(x.size());
  for (const auto& [tok, cnt] : counts) {
    const double p = static_cast<double>(cnt) / n;
    h -= p * std::log(p);
  }
  return h;
}

GenerationMetrics generation_metrics(const ModelWeights<float>& evaluator,
                                     std::span<const std::vector<TokenId>> samples) {
  GenerationMetrics m;
  std::size_t scored = 0;
  double len = 0;
  for (const auto& s : samples) {
    len += static_cast<double>(s.size());
    if (s.empty()) continue;
    m.nll += nll_under(evaluator, s);
    m.entropy += unigram_entropy(s);
    ++scored;
  }
  m.n_samples = samples.size();
  if (scored) {
    m.nll /= static_cast<double>(scored);
    m.entropy /= static_cast<double>(scored);
  }
  if (!samples.empty()) m.mean_len = len / static_cast<double>(samples.size());
  return m;
}

double percent_delta(double value, double reference) {
  if (reference == 0.0) {
    throw ValidationError("reference metric is zero; percentage change undefined");
  }
  return 100.0 * (value - reference) / reference;
}

InfillMetrics infill_deltas(std::span<const TokenId> infilled, std::span<const TokenId> gt,
                            std::span<const TokenId> inp, const ModelWeights<float>& evaluator) {
  InfillMetrics r;
  const double nll = nll_under(evaluator, infilled);
  const double ent = unigram_entropy(infilled);
  const double nll_gt = nll_under(evaluator, gt);
  const double ent_gt = unigram_entropy(gt);
  const double nll_inp = nll_under(evaluator, inp);
  const double ent_inp = unigram_entropy(inp);
  try {
    r.d_nll_gt = percent_delta(nll, nll_gt);
    r.d_ent_gt = percent_delta(ent, ent_gt);
    r.d_nll_inp = percent_delta(nll, nll_inp);
    r.d_ent_inp = percent_delta(ent, ent_inp);
    r.n_used = 1;
  } catch (const ValidationError&) {
    r = InfillMetrics{};
    r.n_excluded = 1;
  }
  return r;
}

InfillMetrics average_infill(std::span<const InfillMetrics> records) {
  InfillMetrics out;
  for (const auto& r : records) {
    out.n_excluded += r.n_excluded;
    if (!r.n_used) continue;
    out.d_nll_gt += r.d_nll_gt * static_cast<double>(r.n_used);
    out.d_ent_gt += r.d_ent_gt * static_cast<double>(r.n_used);
    out.d_nll_inp += r.d_nll_inp * static_cast<double>(r.n_used);
    out.d_ent_inp += r.d_ent_inp * static_cast<double>(r.n_used);
    out.n_used += r.n_used;
  }
  if (out.n_used) {
    const double n = static_cast<double>(out.n_used);
    out.d_nll_gt /= n;
    out.d_ent_gt /= n;
    out.d_nll_inp /= n;
    out.d_ent_inp /= n;
  }
  return out;
}

InfillMode parse_infill_mode(std::string_view name) {
  if (name == "single" || name == "single-segment") return InfillMode::SingleSegment;
  if (name == "multi" || name == "multi-segment") return InfillMode::MultiSegment;
  throw UsageError("unknown infill mode '" + std::string(name) + "' (single|multi)");
}

namespace {

// Picks `k` disjoint, non-adjacent spans inside content[1, L-1) with
// lengths in [1, max_len]; empty on failure.
std::vector<std::pair<std::size_t, std::size_t>> pick_spans(std::size_t L, std::size_t k, std::size_t max_len,
                                                            Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    bool ok = true;
    for (std::size_t s = 0; s < k && ok; ++s) {
      const std::size_t len = 1 + uniform_index(rng, max_len);
      if (len + 2 > L) {
        ok = false;
        break;
      }
      const std::size_t begin = 1 + uniform_index(rng, L - 1 - len);
      const std::size_t end = begin + len;
      for (const auto& [b, e] : spans) {
        // Require at least one surviving token between spans.
        if (begin <= e && b <= end) ok = false;
      }
      spans.emplace_back(begin, end);
    }
    if (ok) {
      std::sort(spans.begin(), spans.end());
      return spans;
    }
  }
  return {};
}

}  // namespace

InfillSet build_infill_set(std::span<const CleanSequence> corpus, InfillMode mode, Rng& rng) {
  InfillSet set;
  for (const auto& x : corpus) {
    const std::vector<TokenId> content(x.ids.begin() + static_cast<std::ptrdiff_t>(x.droppable_begin()),
                                       x.ids.end() - 1);
    const std::size_t L = content.size();
    const std::size_t budget = L / 3;
    const std::size_t k = mode == InfillMode::SingleSegment ? 1 : 2 + uniform_index(rng, 2);
    if (budget < k || L < 3) {
      ++set.skipped;
      continue;
    }
    const std::size_t max_len = mode == InfillMode::SingleSegment ? budget : std::max<std::size_t>(1, budget / k);
    const auto spans = pick_spans(L, k, max_len, rng);
    if (spans.empty()) {
      ++set.skipped;
      continue;
    }
    InfillExample ex;
    ex.gt = content;
    ex.spans = spans;
    std::size_t next_span = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (next_span < spans.size() && i == spans[next_span].first) {
        ex.gap_after.back() = 1;
        i = spans[next_span].second - 1;
        ++next_span;
        continue;
      }
      ex.inp.push_back(content[i]);
      ex.gap_after.push_back(0);
    }
    set.examples.push_back(std::move(ex));
  }
  return set;
}

DecodeOptions greedy_decode_options(const ModelConfig& config, bool reverse_output) {
  DecodeOptions o;
  o.insertion.top_k = 1;
  o.insertion.nucleus_p = 1e-9;
  o.mdm.nucleus_p = 1e-9;
  o.mdm.steps = std::max<std::size_t>(config.mdm_span, 1);
  o.arm_nucleus_p = 1e-9;
  o.arm_max_new = config.max_seq_len;
  o.reverse_output = reverse_output;
  return o;
}

std::vector<TokenId> decode_solution(const ModelWeights<float>& w, std::span<const TokenId> prompt,
                                     const DecodeOptions& opts, Rng& rng) {
  const ModelConfig& c = w.config;
  if (prompt.empty() || prompt.back() != c.specials.bos) {
    throw ValidationError("decoding prompt must end with <s>");
  }
  const std::size_t cond = prompt.size() - 1;
  std::vector<TokenId> out;
  switch (c.variant) {
    case Variant::Ilm:
    case Variant::It: {
      std::vector<TokenId> seq(prompt.begin(), prompt.end());
      seq.push_back(c.specials.eos);
      auto state = InsertionState::from_sequence(seq, cond);
      const auto res = c.variant == Variant::Ilm ? ilm_generate(std::move(state), w, opts.insertion, rng)
                                                 : it_generate(std::move(state), w, opts.insertion, rng);
      out.assign(res.tokens.begin() + static_cast<std::ptrdiff_t>(cond + 1), res.tokens.end() - 1);
      break;
    }
    case Variant::Arm:
      out = arm_generate(prompt, w, opts.arm_nucleus_p, opts.arm_max_new, rng).continuation;
      break;
    case Variant::Mdm: {
      const auto res = mdm_generate(mdm_initial_canvas(prompt, c), model_denoiser(w), opts.mdm, rng, c.specials.mask);
      out = mdm_content(res.canvas, cond, c.specials);
      break;
    }
  }
  if (opts.reverse_output) {
    std::reverse(out.begin(), out.end());
  }
  return out;
}

AccuracyReport accuracy_suite(const ModelWeights<float>& w, std::span<const CleanSequence> testset,
                              const DecodeOptions& opts, std::uint64_t seed) {
  if (testset.empty()) {
    throw ValidationError("accuracy suite needs a nonempty test set");
  }
  AccuracyReport r;
  for (std::size_t i = 0; i < testset.size(); ++i) {
    const auto& x = testset[i];
    const std::span<const TokenId> prompt(x.ids.data(), x.condition_len + 1);
    std::vector<int> gold(x.ids.begin() + static_cast<std::ptrdiff_t>(x.droppable_begin()), x.ids.end() - 1);
    Rng rng(derive_seed(seed, {i}));
    auto pred = decode_solution(w, prompt, opts, rng);
    const std::vector<int> p(pred.begin(), pred.end());
    const PathScore s = score_sequence(gold, p);
    r.seq_acc += s.exact;
    r.tok_acc += s.token_acc;
    r.predictions.push_back(std::move(pred));
  }
  r.n = testset.size();
  r.seq_acc /= static_cast<double>(r.n);
  r.tok_acc /= static_cast<double>(r.n);
  return r;
}

std::vector<TokenId> infill(const ModelWeights<float>& w, const InfillExample& ex, const DecodeOptions& opts,
                            Rng& rng) {
  const ModelConfig& c = w.config;
  if (c.variant == Variant::Ilm || c.variant == Variant::It) {
    std::vector<TokenId> seq{c.specials.bos};
    seq.insert(seq.end(), ex.inp.begin(), ex.inp.end());
    seq.push_back(c.specials.eos);
    std::vector<std::uint8_t> gaps{0};
    gaps.insert(gaps.end(), ex.gap_after.begin(), ex.gap_after.end());
    gaps.push_back(0);
    auto state = opts.infill_anywhere ? InsertionState::from_sequence(seq, 0)
                                      : InsertionState::from_template(seq, 0, gaps);
    const auto res = c.variant == Variant::Ilm ? ilm_generate(std::move(state), w, opts.insertion, rng)
                                               : it_generate(std::move(state), w, opts.insertion, rng);
    return {res.tokens.begin() + 1, res.tokens.end() - 1};
  }
  if (c.variant == Variant::Mdm) {
    std::vector<TokenId> content = ex.gt;
    for (const auto& [b, e] : ex.spans) {
      for (std::size_t i = b; i < e; ++i) content[i] = c.specials.mask;
    }
    CleanSequence x;
    x.ids.push_back(c.specials.bos);
    x.ids.insert(x.ids.end(), content.begin(), content.end());
    x.ids.push_back(c.specials.eos);
    const auto res = mdm_generate(mdm_canvas(x, c), model_denoiser(w), opts.mdm, rng, c.specials.mask);
    return {res.canvas.begin() + 1, res.canvas.begin() + 1 + static_cast<std::ptrdiff_t>(ex.gt.size())};
  }
  throw ValidationError("infilling needs an ilm, it or mdm model");
}

}  // namespace ilm
