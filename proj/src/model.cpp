#include "ilm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ilm {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Ilm:
      return "ilm";
    case Variant::Arm:
      return "arm";
    case Variant::Mdm:
      return "mdm";
    case Variant::It:
      return "it";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "ilm") return Variant::Ilm;
  if (name == "arm") return Variant::Arm;
  if (name == "mdm") return Variant::Mdm;
  if (name == "it") return Variant::It;
  throw UsageError("unknown model variant '" + std::string(name) + "'");
}

SpecialIds SpecialIds::from(const Vocab& vocab) {
  return SpecialIds{vocab.pad(), vocab.stp(), vocab.bos(), vocab.eos(), vocab.mask()};
}

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0) {
    throw ValidationError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ValidationError("d_model must be divisible by n_heads");
  }
  if (head_dim() % 2 != 0) {
    throw ValidationError("head dimension must be even for rotary encoding");
  }
  if (max_seq_len < 2) {
    throw ValidationError("max_seq_len must be at least 2");
  }
  if (vocab_size < 6) {
    throw ValidationError("vocab_size must be at least 6");
  }
  if (!(rope_base > 0.0)) {
    throw ValidationError("rope_base must be positive");
  }
  if (variant == Variant::Mdm && mdm_span == 0) {
    throw ValidationError("mdm variant needs a positive mdm_span");
  }
  if (variant != Variant::Mdm && time_bins != 0) {
    throw ValidationError("time embedding is only defined for the mdm variant");
  }
  for (TokenId id : {specials.pad, specials.stp, specials.bos, specials.eos, specials.mask}) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw ValidationError("sentinel id outside the vocabulary");
    }
  }
}

std::size_t ModelConfig::time_bin(double t) const {
  if (time_bins == 0) {
    return 0;
  }
  const double clamped = std::clamp(t, 0.0, 1.0);
  return std::min(time_bins - 1, static_cast<std::size_t>(clamped * static_cast<double>(time_bins)));
}

template <typename T>
ModelWeights<T> ModelWeights<T>::zeros(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto f = static_cast<Eigen::Index>(c.d_ff);
  const auto v = static_cast<Eigen::Index>(c.vocab_size);
  ModelWeights<T> w;
  w.config = c;
  w.tok_emb = Mat<T>::Zero(v, d);
  if (c.time_bins > 0) {
    w.time_emb = Mat<T>::Zero(static_cast<Eigen::Index>(c.time_bins), d);
  }
  w.layers.resize(c.n_layers);
  for (auto& L : w.layers) {
    L.ln1_g = Mat<T>::Zero(1, d);
    L.ln1_b = Mat<T>::Zero(1, d);
    L.wq = Mat<T>::Zero(d, d);
    L.wk = Mat<T>::Zero(d, d);
    L.wv = Mat<T>::Zero(d, d);
    L.wo = Mat<T>::Zero(d, d);
    L.ln2_g = Mat<T>::Zero(1, d);
    L.ln2_b = Mat<T>::Zero(1, d);
    L.w1 = Mat<T>::Zero(d, f);
    L.b1 = Mat<T>::Zero(1, f);
    L.w2 = Mat<T>::Zero(f, d);
    L.b2 = Mat<T>::Zero(1, d);
  }
  w.lnf_g = Mat<T>::Zero(1, d);
  w.lnf_b = Mat<T>::Zero(1, d);
  if (c.has_insertion_head()) {
    w.ins_w1 = Mat<T>::Zero(d, d);
    w.ins_b1 = Mat<T>::Zero(1, d);
    w.ins_w2 = Mat<T>::Zero(d, v);
    w.ins_b2 = Mat<T>::Zero(1, v);
  }
  if (c.has_stop_head()) {
    w.stop_w = Mat<T>::Zero(d, 1);
    w.stop_b = Mat<T>::Zero(1, 1);
  }
  if (c.has_token_head()) {
    w.out_w = Mat<T>::Zero(d, v);
    w.out_b = Mat<T>::Zero(1, v);
  }
  return w;
}

template struct ModelWeights<float>;
template struct ModelWeights<double>;

ModelWeights<float> init_weights(const ModelConfig& config, std::uint64_t seed) {
  auto w = ModelWeights<float>::zeros(config);
  Rng rng(derive_seed(seed, {0x1417}));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float base_std = 0.02f;
  const float resid_std = base_std / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  auto fill = [&](Mat<float>& m, float stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = stddev * normal(rng);
    }
  };
  w.for_each([&](const std::string& name, Mat<float>& m) {
    const bool gain = name.ends_with(".g");
    const bool bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") ||
                      name == "stop.b" || name == "out.b";
    if (gain) {
      m.setOnes();
    } else if (bias) {
      m.setZero();
    } else if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) {
      fill(m, resid_std);
    } else {
      fill(m, base_std);
    }
  });
  return w;
}

void PackedSequences::add(std::span<const TokenId> seq, int time_bin) {
  tokens.insert(tokens.end(), seq.begin(), seq.end());
  offsets.push_back(tokens.size());
  time_bins.push_back(time_bin);
}

PackedSequences pack(const PaddedBatch& batch) {
  PackedSequences p;
  for (std::size_t i = 0; i < batch.batch_size; ++i) {
    p.add(batch.row(i));
  }
  return p;
}

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
void layer_norm_forward(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& y,
                        std::vector<T>& mean, std::vector<T>& rstd) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  y.resize(n, d);
  mean.resize(static_cast<std::size_t>(n));
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.row(i);
    const T mu = row.mean();
    const T var = (row.array() - mu).square().mean();
    const T rs = T(1) / std::sqrt(var + T(kLnEps));
    mean[static_cast<std::size_t>(i)] = mu;
    rstd[static_cast<std::size_t>(i)] = rs;
    y.row(i) = (((row.array() - mu) * rs) * g.array() + b.array()).matrix();
  }
}

// dx += layer-norm backward of dy; dg, db accumulated.
template <typename T>
void layer_norm_backward(const Mat<T>& x, const Mat<T>& g, const std::vector<T>& mean,
                         const std::vector<T>& rstd, const Mat<T>& dy, Mat<T>& dx, Mat<T>& dg,
                         Mat<T>& db) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Eigen::Array<T, 1, Eigen::Dynamic> xhat(d);
  Eigen::Array<T, 1, Eigen::Dynamic> dxhat(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = mean[static_cast<std::size_t>(i)];
    const T rs = rstd[static_cast<std::size_t>(i)];
    xhat = (x.row(i).array() - mu) * rs;
    const auto dyr = dy.row(i).array();
    dg.array() += dyr * xhat;
    db.array() += dyr;
    dxhat = dyr * g.array();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat * xhat).mean();
    dx.row(i).array() += rs * (dxhat - m1 - xhat * m2);
  }
}

template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2 / pi)

template <typename T>
void gelu_forward(const Mat<T>& x, Mat<T>& y) {
  y = (T(0.5) * x.array() *
       (T(1) + (kGeluC<T> * (x.array() + T(0.044715) * x.array().cube())).tanh()))
          .matrix();
}

template <typename T>
void gelu_backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>& dx) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto xa = x.array();
  const Arr th = (kGeluC<T> * (xa + T(0.044715) * xa.cube())).tanh();
  dx = (dy.array() * (T(0.5) * (T(1) + th) + T(0.5) * xa * (T(1) - th.square()) * kGeluC<T> *
                                                 (T(1) + T(3 * 0.044715) * xa.square())))
           .matrix();
}

template <typename T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;  // position-major, `half` entries per position

  RopeTable(std::size_t head_dim, std::size_t max_len, double base) : half(head_dim / 2) {
    cos.resize(max_len * half);
    sin.resize(max_len * half);
    for (std::size_t p = 0; p < max_len; ++p) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(p) * freq;
        cos[p * half + i] = static_cast<T>(std::cos(angle));
        sin[p * half + i] = static_cast<T>(std::sin(angle));
      }
    }
  }
};

// Rotates each head's (first half, second half) pairs of row r by the
// angle of position `pos`. `inverse` applies the transpose (for gradients).
template <typename T>
void rope_rotate_row(T* row, std::size_t n_heads, std::size_t head_dim, std::size_t pos,
                     const RopeTable<T>& table, bool inverse) {
  const std::size_t half = head_dim / 2;
  const T* c = table.cos.data() + pos * half;
  const T* s = table.sin.data() + pos * half;
  for (std::size_t h = 0; h < n_heads; ++h) {
    T* x = row + h * head_dim;
    for (std::size_t i = 0; i < half; ++i) {
      const T x1 = x[i];
      const T x2 = x[i + half];
      const T sn = inverse ? -s[i] : s[i];
      x[i] = x1 * c[i] - x2 * sn;
      x[i + half] = x1 * sn + x2 * c[i];
    }
  }
}

template <typename T>
void rope_apply(Mat<T>& m, const PackedSequences& input, std::size_t n_heads, std::size_t head_dim,
                const RopeTable<T>& table, bool inverse) {
  for (std::size_t s = 0; s < input.count(); ++s) {
    for (std::size_t p = 0; p < input.length(s); ++p) {
      const auto r = static_cast<Eigen::Index>(input.offsets[s] + p);
      rope_rotate_row(m.row(r).data(), n_heads, head_dim, p, table, inverse);
    }
  }
}

template <typename T>
Mat<T> col_sum(const Mat<T>& m) {
  return m.colwise().sum();
}

}  // namespace

template <typename T>
Mat<T> backbone_forward(const ModelWeights<T>& w, const PackedSequences& input, BackboneCache<T>* cache) {
  const ModelConfig& c = w.config;
  const auto n = static_cast<Eigen::Index>(input.tokens.size());
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const std::size_t hd = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  std::size_t max_len = 0;
  for (std::size_t s = 0; s < input.count(); ++s) {
    max_len = std::max(max_len, input.length(s));
    if (input.length(s) > c.max_seq_len) {
      throw ValidationError("sequence of length " + std::to_string(input.length(s)) +
                            " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
  }
  const RopeTable<T> rope(hd, std::max<std::size_t>(max_len, 1), c.rope_base);

  Mat<T> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId id = input.tokens[static_cast<std::size_t>(i)];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw ValidationError("token id outside vocabulary: " + std::to_string(id));
    }
    x.row(i) = w.tok_emb.row(id);
  }
  if (c.time_bins > 0) {
    for (std::size_t s = 0; s < input.count(); ++s) {
      const int bin = input.time_bins[s];
      if (bin < 0) {
        continue;
      }
      for (std::size_t p = input.offsets[s]; p < input.offsets[s + 1]; ++p) {
        x.row(static_cast<Eigen::Index>(p)) += w.time_emb.row(bin);
      }
    }
  }

  if (cache) {
    cache->layers.assign(c.n_layers, LayerCache<T>{});
  }
  LayerCache<T> scratch;
  Mat<T> ln, q, k, v, attn, proj;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    LayerCache<T>& lc = cache ? cache->layers[l] : scratch;
    lc.x_in = x;
    layer_norm_forward(x, L.ln1_g, L.ln1_b, ln, lc.mean1, lc.rstd1);
    lc.q.noalias() = ln * L.wq;
    lc.k.noalias() = ln * L.wk;
    lc.v.noalias() = ln * L.wv;
    rope_apply(lc.q, input, c.n_heads, hd, rope, false);
    rope_apply(lc.k, input, c.n_heads, hd, rope, false);
    lc.attn.resize(n, d);
    lc.probs.clear();
    for (std::size_t s = 0; s < input.count(); ++s) {
      const auto off = static_cast<Eigen::Index>(input.offsets[s]);
      const auto len = static_cast<Eigen::Index>(input.length(s));
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto col = static_cast<Eigen::Index>(h * hd);
        const auto hdi = static_cast<Eigen::Index>(hd);
        Mat<T> scores = (lc.q.block(off, col, len, hdi) * lc.k.block(off, col, len, hdi).transpose()) * scale;
        for (Eigen::Index i = 0; i < len; ++i) {
          const Eigen::Index limit = c.causal() ? i + 1 : len;
          const T mx = scores.row(i).head(limit).maxCoeff();
          T sum = 0;
          for (Eigen::Index j = 0; j < len; ++j) {
            const T e = j < limit ? std::exp(scores(i, j) - mx) : T(0);
            scores(i, j) = e;
            sum += e;
          }
          scores.row(i) /= sum;
        }
        lc.attn.block(off, col, len, hdi).noalias() = scores * lc.v.block(off, col, len, hdi);
        if (cache) {
          lc.probs.push_back(std::move(scores));
        }
      }
    }
    proj.noalias() = lc.attn * L.wo;
    x += proj;
    lc.x_mid = x;
    layer_norm_forward(x, L.ln2_g, L.ln2_b, ln, lc.mean2, lc.rstd2);
    lc.h_pre.noalias() = ln * L.w1;
    lc.h_pre.rowwise() += L.b1.row(0);
    gelu_forward(lc.h_pre, lc.h_act);
    proj.noalias() = lc.h_act * L.w2;
    proj.rowwise() += L.b2.row(0);
    x += proj;
  }
  Mat<T> hidden;
  std::vector<T> meanf, rstdf;
  layer_norm_forward(x, w.lnf_g, w.lnf_b, hidden, meanf, rstdf);
  if (cache) {
    cache->x_out = std::move(x);
    cache->meanf = std::move(meanf);
    cache->rstdf = std::move(rstdf);
  }
  return hidden;
}

template <typename T>
void backbone_backward(const ModelWeights<T>& w, const PackedSequences& input, const BackboneCache<T>& cache,
                       const Mat<T>& d_hidden, ModelWeights<T>& grads) {
  const ModelConfig& c = w.config;
  const auto n = static_cast<Eigen::Index>(input.tokens.size());
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const std::size_t hd = c.head_dim();
  const auto hdi = static_cast<Eigen::Index>(hd);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  std::size_t max_len = 1;
  for (std::size_t s = 0; s < input.count(); ++s) {
    max_len = std::max(max_len, input.length(s));
  }
  const RopeTable<T> rope(hd, max_len, c.rope_base);

  Mat<T> dx = Mat<T>::Zero(n, d);
  layer_norm_backward(cache.x_out, w.lnf_g, cache.meanf, cache.rstdf, d_hidden, dx, grads.lnf_g, grads.lnf_b);

  Mat<T> ln, d_act, d_pre, d_ln, d_attn, dq, dk, dv;
  std::vector<T> unused_mean, unused_rstd;
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& L = w.layers[li];
    auto& G = grads.layers[li];
    const LayerCache<T>& lc = cache.layers[li];

    // Feed-forward block: x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2.
    G.w2.noalias() += lc.h_act.transpose() * dx;
    G.b2 += col_sum(dx);
    d_act.noalias() = dx * L.w2.transpose();
    gelu_backward(lc.h_pre, d_act, d_pre);
    layer_norm_forward(lc.x_mid, L.ln2_g, L.ln2_b, ln, unused_mean, unused_rstd);
    G.w1.noalias() += ln.transpose() * d_pre;
    G.b1 += col_sum(d_pre);
    d_ln.noalias() = d_pre * L.w1.transpose();
    layer_norm_backward(lc.x_mid, L.ln2_g, lc.mean2, lc.rstd2, d_ln, dx, G.ln2_g, G.ln2_b);

    // Attention block: x_mid = x_in + attn(ln1(x_in)) Wo.
    G.wo.noalias() += lc.attn.transpose() * dx;
    d_attn.noalias() = dx * L.wo.transpose();
    dq = Mat<T>::Zero(n, d);
    dk = Mat<T>::Zero(n, d);
    dv = Mat<T>::Zero(n, d);
    std::size_t pi = 0;
    for (std::size_t s = 0; s < input.count(); ++s) {
      const auto off = static_cast<Eigen::Index>(input.offsets[s]);
      const auto len = static_cast<Eigen::Index>(input.length(s));
      for (std::size_t h = 0; h < c.n_heads; ++h, ++pi) {
        const auto col = static_cast<Eigen::Index>(h * hd);
        const Mat<T>& P = lc.probs[pi];
        const auto dO = d_attn.block(off, col, len, hdi);
        Mat<T> dP = dO * lc.v.block(off, col, len, hdi).transpose();
        dv.block(off, col, len, hdi).noalias() += P.transpose() * dO;
        for (Eigen::Index i = 0; i < len; ++i) {
          const T dot = (dP.row(i).array() * P.row(i).array()).sum();
          dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
        }
        dq.block(off, col, len, hdi).noalias() += (dP * lc.k.block(off, col, len, hdi)) * scale;
        dk.block(off, col, len, hdi).noalias() += (dP.transpose() * lc.q.block(off, col, len, hdi)) * scale;
      }
    }
    rope_apply(dq, input, c.n_heads, hd, rope, true);
    rope_apply(dk, input, c.n_heads, hd, rope, true);
    layer_norm_forward(lc.x_in, L.ln1_g, L.ln1_b, ln, unused_mean, unused_rstd);
    G.wq.noalias() += ln.transpose() * dq;
    G.wk.noalias() += ln.transpose() * dk;
    G.wv.noalias() += ln.transpose() * dv;
    d_ln.noalias() = dq * L.wq.transpose();
    d_ln.noalias() += dk * L.wk.transpose();
    d_ln.noalias() += dv * L.wv.transpose();
    layer_norm_backward(lc.x_in, L.ln1_g, lc.mean1, lc.rstd1, d_ln, dx, G.ln1_g, G.ln1_b);
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    grads.tok_emb.row(input.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
  }
  if (c.time_bins > 0) {
    for (std::size_t s = 0; s < input.count(); ++s) {
      const int bin = input.time_bins[s];
      if (bin < 0) {
        continue;
      }
      for (std::size_t p = input.offsets[s]; p < input.offsets[s + 1]; ++p) {
        grads.time_emb.row(bin) += dx.row(static_cast<Eigen::Index>(p));
      }
    }
  }
}

template <typename T>
Mat<T> insertion_head_forward(const ModelWeights<T>& w, const Mat<T>& hidden, std::span<const std::size_t> rows,
                              InsertionHeadCache<T>* cache) {
  const auto r = static_cast<Eigen::Index>(rows.size());
  Mat<T> hs(r, hidden.cols());
  for (Eigen::Index i = 0; i < r; ++i) {
    hs.row(i) = hidden.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]));
  }
  Mat<T> a = hs * w.ins_w1;
  a.rowwise() += w.ins_b1.row(0);
  Mat<T> z;
  gelu_forward(a, z);
  Mat<T> logits = z * w.ins_w2;
  logits.rowwise() += w.ins_b2.row(0);
  if (cache) {
    cache->rows.assign(rows.begin(), rows.end());
    cache->hs = std::move(hs);
    cache->a = std::move(a);
    cache->z = std::move(z);
  }
  return logits;
}

template <typename T>
void insertion_head_backward(const ModelWeights<T>& w, const InsertionHeadCache<T>& cache, const Mat<T>& d_logits,
                             Mat<T>& d_hidden, ModelWeights<T>& grads) {
  grads.ins_w2.noalias() += cache.z.transpose() * d_logits;
  grads.ins_b2 += col_sum(d_logits);
  Mat<T> dz = d_logits * w.ins_w2.transpose();
  Mat<T> da;
  gelu_backward(cache.a, dz, da);
  grads.ins_w1.noalias() += cache.hs.transpose() * da;
  grads.ins_b1 += col_sum(da);
  Mat<T> dhs = da * w.ins_w1.transpose();
  for (std::size_t i = 0; i < cache.rows.size(); ++i) {
    d_hidden.row(static_cast<Eigen::Index>(cache.rows[i])) += dhs.row(static_cast<Eigen::Index>(i));
  }
}

template <typename T>
T stop_head_forward(const ModelWeights<T>& w, const Mat<T>& hidden, std::size_t row) {
  return hidden.row(static_cast<Eigen::Index>(row)).dot(w.stop_w.col(0).transpose()) + w.stop_b(0, 0);
}

template <typename T>
void stop_head_backward(const ModelWeights<T>& w, const Mat<T>& hidden, std::size_t row, T d_logit, Mat<T>& d_hidden,
                        ModelWeights<T>& grads) {
  const auto r = static_cast<Eigen::Index>(row);
  grads.stop_w.col(0) += d_logit * hidden.row(r).transpose();
  grads.stop_b(0, 0) += d_logit;
  d_hidden.row(r) += d_logit * w.stop_w.col(0).transpose();
}

template <typename T>
Mat<T> token_head_forward(const ModelWeights<T>& w, const Mat<T>& hidden) {
  Mat<T> logits = hidden * w.out_w;
  logits.rowwise() += w.out_b.row(0);
  return logits;
}

template <typename T>
void token_head_backward(const ModelWeights<T>& w, const Mat<T>& hidden, const Mat<T>& d_logits, Mat<T>& d_hidden,
                         ModelWeights<T>& grads) {
  grads.out_w.noalias() += hidden.transpose() * d_logits;
  grads.out_b += col_sum(d_logits);
  d_hidden.noalias() += d_logits * w.out_w.transpose();
}

#define ILM_INSTANTIATE(T)                                                                                  \
  template Mat<T> backbone_forward<T>(const ModelWeights<T>&, const PackedSequences&, BackboneCache<T>*);    \
  template void backbone_backward<T>(const ModelWeights<T>&, const PackedSequences&, const BackboneCache<T>&, \
                                     const Mat<T>&, ModelWeights<T>&);                                       \
  template Mat<T> insertion_head_forward<T>(const ModelWeights<T>&, const Mat<T>&, std::span<const std::size_t>, \
                                            InsertionHeadCache<T>*);                                         \
  template void insertion_head_backward<T>(const ModelWeights<T>&, const InsertionHeadCache<T>&, const Mat<T>&, \
                                           Mat<T>&, ModelWeights<T>&);                                       \
  template T stop_head_forward<T>(const ModelWeights<T>&, const Mat<T>&, std::size_t);                       \
  template void stop_head_backward<T>(const ModelWeights<T>&, const Mat<T>&, std::size_t, T, Mat<T>&,        \
                                      ModelWeights<T>&);                                                     \
  template Mat<T> token_head_forward<T>(const ModelWeights<T>&, const Mat<T>&);                              \
  template void token_head_backward<T>(const ModelWeights<T>&, const Mat<T>&, const Mat<T>&, Mat<T>&,        \
                                       ModelWeights<T>&);

ILM_INSTANTIATE(float)
ILM_INSTANTIATE(double)
#undef ILM_INSTANTIATE

// ---------------------------------------------------------------------------

namespace {

PackedSequences pack_with_time(const PaddedBatch& batch, const ModelConfig& c, std::optional<double> time) {
  PackedSequences p;
  const int bin = (time && c.time_bins > 0) ? static_cast<int>(c.time_bin(*time)) : -1;
  for (std::size_t i = 0; i < batch.batch_size; ++i) {
    p.add(batch.row(i), bin);
  }
  return p;
}

void require_stop_prefix(const ModelWeights<float>& w, const PaddedBatch& batch) {
  for (std::size_t i = 0; i < batch.batch_size; ++i) {
    const auto row = batch.row(i);
    if (row.empty() || row[0] != w.config.specials.stp) {
      throw ValidationError("visible sequence must begin with <stp>");
    }
    if (row.size() < batch.condition_lens[i] + 3) {
      throw ValidationError("visible sequence too short to hold <stp> <s> </s>");
    }
  }
}

}  // namespace

std::vector<Mat<float>> backbone_forward(const ModelWeights<float>& w, const PaddedBatch& batch,
                                         std::optional<double> time) {
  const PackedSequences p = pack_with_time(batch, w.config, time);
  const Mat<float> hidden = backbone_forward<float>(w, p, nullptr);
  std::vector<Mat<float>> out;
  for (std::size_t i = 0; i < p.count(); ++i) {
    out.emplace_back(hidden.middleRows(static_cast<Eigen::Index>(p.offsets[i]), static_cast<Eigen::Index>(p.length(i))));
  }
  return out;
}

std::size_t InsertionLogits::num_slots() const {
  return static_cast<std::size_t>(std::count(slot_mask.begin(), slot_mask.end(), std::uint8_t{1}));
}

std::vector<InsertionLogits> insertion_logits(const ModelWeights<float>& w, const PaddedBatch& visible) {
  if (!w.config.has_insertion_head()) {
    throw ValidationError("insertion logits need an ilm or it model");
  }
  require_stop_prefix(w, visible);
  const PackedSequences p = pack(visible);
  const Mat<float> hidden = backbone_forward<float>(w, p, nullptr);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < p.count(); ++i) {
    for (std::size_t k = visible.condition_lens[i] + 1; k + 1 < p.length(i); ++k) {
      rows.push_back(p.offsets[i] + k);
    }
  }
  const Mat<float> scores = insertion_head_forward<float>(w, hidden, rows, nullptr);
  std::vector<InsertionLogits> out;
  Eigen::Index r = 0;
  const auto v = static_cast<Eigen::Index>(w.config.vocab_size);
  for (std::size_t i = 0; i < p.count(); ++i) {
    InsertionLogits il;
    const std::size_t len = p.length(i);
    il.scores = Mat<float>::Constant(static_cast<Eigen::Index>(len), v, -std::numeric_limits<float>::infinity());
    il.slot_mask.assign(len, 0);
    for (std::size_t k = visible.condition_lens[i] + 1; k + 1 < len; ++k) {
      il.scores.row(static_cast<Eigen::Index>(k)) = scores.row(r++);
      il.slot_mask[k] = 1;
    }
    out.push_back(std::move(il));
  }
  return out;
}

Mat<double> joint_insertion_distribution(const InsertionLogits& logits) {
  const auto rows = logits.scores.rows();
  double mx = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (Eigen::Index k = 0; k < rows; ++k) {
    if (logits.slot_mask[static_cast<std::size_t>(k)]) {
      any = true;
      mx = std::max(mx, static_cast<double>(logits.scores.row(k).maxCoeff()));
    }
  }
  if (!any) {
    throw ValidationError("joint insertion distribution needs at least one valid slot");
  }
  Mat<double> p = Mat<double>::Zero(rows, logits.scores.cols());
  double total = 0;
  for (Eigen::Index k = 0; k < rows; ++k) {
    if (!logits.slot_mask[static_cast<std::size_t>(k)]) {
      continue;
    }
    p.row(k) = (logits.scores.row(k).cast<double>().array() - mx).exp().matrix();
    total += p.row(k).sum();
  }
  p /= total;
  return p;
}

std::vector<double> stop_probability(const ModelWeights<float>& w, const PaddedBatch& visible) {
  if (!w.config.has_stop_head()) {
    throw ValidationError("stop probability needs an ilm model");
  }
  require_stop_prefix(w, visible);
  const PackedSequences p = pack(visible);
  const Mat<float> hidden = backbone_forward<float>(w, p, nullptr);
  std::vector<double> out;
  for (std::size_t i = 0; i < p.count(); ++i) {
    const double z = stop_head_forward<float>(w, hidden, p.offsets[i]);
    out.push_back(1.0 / (1.0 + std::exp(-z)));
  }
  return out;
}

std::vector<Mat<float>> token_logits(const ModelWeights<float>& w, const PaddedBatch& ids, std::optional<double> time) {
  if (!w.config.has_token_head()) {
    throw ValidationError("token logits need an arm or mdm model");
  }
  const PackedSequences p = pack_with_time(ids, w.config, time);
  const Mat<float> hidden = backbone_forward<float>(w, p, nullptr);
  const Mat<float> logits = token_head_forward<float>(w, hidden);
  std::vector<Mat<float>> out;
  for (std::size_t i = 0; i < p.count(); ++i) {
    out.emplace_back(logits.middleRows(static_cast<Eigen::Index>(p.offsets[i]), static_cast<Eigen::Index>(p.length(i))));
  }
  return out;
}

double rope_score(std::span<const double> query, std::size_t qpos, std::span<const double> key, std::size_t kpos,
                  double base) {
  if (query.size() != key.size() || query.size() % 2 != 0) {
    throw ValidationError("rope_score needs equal even-length vectors");
  }
  const RopeTable<double> table(query.size(), std::max(qpos, kpos) + 1, base);
  std::vector<double> q(query.begin(), query.end());
  std::vector<double> k(key.begin(), key.end());
  rope_rotate_row(q.data(), 1, q.size(), qpos, table, false);
  rope_rotate_row(k.data(), 1, k.size(), kpos, table, false);
  double dot = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    dot += q[i] * k[i];
  }
  return dot;
}

}  // namespace ilm
