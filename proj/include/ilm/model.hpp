#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilm/common.hpp"
#include "ilm/corpus.hpp"

namespace ilm {

enum class Variant { Ilm, Arm, Mdm, It };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct SpecialIds {
  TokenId pad = 0;
  TokenId stp = 1;
  TokenId bos = 2;
  TokenId eos = 3;
  TokenId mask = 4;

  static SpecialIds from(const Vocab& vocab);
  bool operator==(const SpecialIds&) const = default;
};

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 64;
  std::size_t vocab_size = 0;
  double rope_base = 10000.0;
  Variant variant = Variant::Ilm;
  // Number of discretized noise levels for the additive time embedding
  // (mdm only; 0 disables it).
  std::size_t time_bins = 0;
  // Fixed canvas length after `<s>` that the mdm denoises.
  std::size_t mdm_span = 0;
  SpecialIds specials;

  void validate() const;
  bool causal() const { return variant == Variant::Arm; }
  bool has_insertion_head() const { return variant == Variant::Ilm || variant == Variant::It; }
  bool has_stop_head() const { return variant == Variant::Ilm; }
  bool has_token_head() const { return variant == Variant::Arm || variant == Variant::Mdm; }
  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t time_bin(double t) const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct LayerWeights {
  Mat<T> ln1_g, ln1_b;
  Mat<T> wq, wk, wv, wo;
  Mat<T> ln2_g, ln2_b;
  Mat<T> w1, b1, w2, b2;
};

/// All trainable tensors. Biases and norm parameters are 1 x n matrices.
/// Heads that the variant does not use stay empty and are not visited.
template <typename T>
struct ModelWeights {
  ModelConfig config;
  Mat<T> tok_emb;
  Mat<T> time_emb;
  std::vector<LayerWeights<T>> layers;
  Mat<T> lnf_g, lnf_b;
  Mat<T> ins_w1, ins_b1, ins_w2, ins_b2;  // MLP_ins (ilm, it)
  Mat<T> stop_w, stop_b;                  // ilm
  Mat<T> out_w, out_b;                    // arm, mdm

  static ModelWeights zeros(const ModelConfig& config);

  /// Visits (name, tensor) in a stable order.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <typename U>
  ModelWeights<U> cast() const {
    ModelWeights<U> out = ModelWeights<U>::zeros(config);
    std::vector<const Mat<T>*> src;
    for_each([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  void set_zero() {
    for_each([](const std::string&, Mat<T>& m) { m.setZero(); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

 private:
  template <class Self, class F>
  static void visit(Self& s, F& f) {
    f(std::string("tok_emb"), s.tok_emb);
    if (s.config.time_bins > 0) {
      f(std::string("time_emb"), s.time_emb);
    }
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = s.layers[l];
      f(p + "ln1.g", L.ln1_g);
      f(p + "ln1.b", L.ln1_b);
      f(p + "attn.wq", L.wq);
      f(p + "attn.wk", L.wk);
      f(p + "attn.wv", L.wv);
      f(p + "attn.wo", L.wo);
      f(p + "ln2.g", L.ln2_g);
      f(p + "ln2.b", L.ln2_b);
      f(p + "mlp.w1", L.w1);
      f(p + "mlp.b1", L.b1);
      f(p + "mlp.w2", L.w2);
      f(p + "mlp.b2", L.b2);
    }
    f(std::string("lnf.g"), s.lnf_g);
    f(std::string("lnf.b"), s.lnf_b);
    if (s.config.has_insertion_head()) {
      f(std::string("ins.w1"), s.ins_w1);
      f(std::string("ins.b1"), s.ins_b1);
      f(std::string("ins.w2"), s.ins_w2);
      f(std::string("ins.b2"), s.ins_b2);
    }
    if (s.config.has_stop_head()) {
      f(std::string("stop.w"), s.stop_w);
      f(std::string("stop.b"), s.stop_b);
    }
    if (s.config.has_token_head()) {
      f(std::string("out.w"), s.out_w);
      f(std::string("out.b"), s.out_b);
    }
  }
};

/// Scaled-normal init (std 0.02, residual projections scaled by
/// 1/sqrt(2 n_layers)); norm gains 1, biases 0, stop bias 0.
ModelWeights<float> init_weights(const ModelConfig& config, std::uint64_t seed);

/// Variable-length sequences laid end to end. Pad never enters the packed
/// form, so pad tokens cannot influence any output.
struct PackedSequences {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> offsets{0};
  std::vector<int> time_bins;  // per sequence; -1 when unused

  std::size_t count() const { return offsets.size() - 1; }
  std::size_t length(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
  void add(std::span<const TokenId> seq, int time_bin = -1);
};

PackedSequences pack(const PaddedBatch& batch);

template <typename T>
struct LayerCache {
  Mat<T> x_in, q, k, v, attn, x_mid, h_pre, h_act;
  std::vector<T> mean1, rstd1, mean2, rstd2;
  std::vector<Mat<T>> probs;  // sequence-major, then head
};

template <typename T>
struct BackboneCache {
  std::vector<LayerCache<T>> layers;
  Mat<T> x_out;
  std::vector<T> meanf, rstdf;
};

/// Final-normed hidden states, one row per packed token.
template <typename T>
Mat<T> backbone_forward(const ModelWeights<T>& w, const PackedSequences& input,
                        BackboneCache<T>* cache);

/// Accumulates parameter gradients given dL/d(hidden).
template <typename T>
void backbone_backward(const ModelWeights<T>& w, const PackedSequences& input,
                       const BackboneCache<T>& cache, const Mat<T>& d_hidden, ModelWeights<T>& grads);

template <typename T>
struct InsertionHeadCache {
  std::vector<std::size_t> rows;
  Mat<T> hs, a, z;
};

/// MLP_ins applied to the selected hidden rows: rows x vocab logits.
template <typename T>
Mat<T> insertion_head_forward(const ModelWeights<T>& w, const Mat<T>& hidden,
                              std::span<const std::size_t> rows, InsertionHeadCache<T>* cache);

template <typename T>
void insertion_head_backward(const ModelWeights<T>& w, const InsertionHeadCache<T>& cache,
                             const Mat<T>& d_logits, Mat<T>& d_hidden, ModelWeights<T>& grads);

template <typename T>
T stop_head_forward(const ModelWeights<T>& w, const Mat<T>& hidden, std::size_t row);

template <typename T>
void stop_head_backward(const ModelWeights<T>& w, const Mat<T>& hidden, std::size_t row, T d_logit,
                        Mat<T>& d_hidden, ModelWeights<T>& grads);

/// Per-position vocab logits for the token head (arm, mdm).
template <typename T>
Mat<T> token_head_forward(const ModelWeights<T>& w, const Mat<T>& hidden);

template <typename T>
void token_head_backward(const ModelWeights<T>& w, const Mat<T>& hidden, const Mat<T>& d_logits,
                         Mat<T>& d_hidden, ModelWeights<T>& grads);

// ---------------------------------------------------------------------------
// Inference-facing operations over padded batches.

/// Hidden states per example (length x d_model).
std::vector<Mat<float>> backbone_forward(const ModelWeights<float>& w, const PaddedBatch& batch,
                                         std::optional<double> time = std::nullopt);

/// Rows are visible positions; row k scores insertions right after visible
/// token k. Rows outside the slot range hold -inf and slot_mask 0.
struct InsertionLogits {
  Mat<float> scores;
  std::vector<std::uint8_t> slot_mask;

  std::size_t num_slots() const;
};

std::vector<InsertionLogits> insertion_logits(const ModelWeights<float>& w, const PaddedBatch& visible);

/// Joint softmax over (slot, token); rows of invalid slots are zero.
Mat<double> joint_insertion_distribution(const InsertionLogits& logits);

std::vector<double> stop_probability(const ModelWeights<float>& w, const PaddedBatch& visible);

std::vector<Mat<float>> token_logits(const ModelWeights<float>& w, const PaddedBatch& ids,
                                     std::optional<double> time = std::nullopt);

/// Dot product of a query at position `qpos` and a key at `kpos` after the
/// rotary encoding used by the attention layers (single head).
double rope_score(std::span<const double> query, std::size_t qpos, std::span<const double> key,
                  std::size_t kpos, double base);

}  // namespace ilm
