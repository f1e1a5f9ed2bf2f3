// Layer library: parameter store, initializers, linear/conv/norm layers,
// multi-head attention with clipped relative positions, feed-forward
// Transformer blocks and non-causal WaveNet stacks.

#pragma once

#include "portaspeech/tape.hpp"

#include <deque>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace ps::nn {

using ad::Var;

// Owns every trainable parameter of a model. Deque keeps pointers stable.
template <class S>
class ParamStore {
 public:
  Param<S>& create(const std::string& name, Eigen::Index rows,
                   Eigen::Index cols) {
    params_.emplace_back(name, rows, cols);
    return params_.back();
  }

  std::vector<Param<S>*> all() {
    std::vector<Param<S>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  Param<S>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::int64_t count(const std::string& prefix = "") const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Param<S>> params_;
};

template <class S>
struct Initializer {
  std::mt19937_64 rng;

  explicit Initializer(std::uint64_t seed) : rng(seed) {}

  void uniform(Mat<S>& m, S lo, S hi) {
    std::uniform_real_distribution<double> d(static_cast<double>(lo),
                                             static_cast<double>(hi));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<S>(d(rng));
  }

  void xavier(Mat<S>& m, Eigen::Index fan_in, Eigen::Index fan_out) {
    S lim = static_cast<S>(std::sqrt(6.0 / double(fan_in + fan_out)));
    uniform(m, -lim, lim);
  }

  void normal(Mat<S>& m, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<S>(d(rng));
  }
};

// Per-forward context: training toggles dropout, rng draws its masks.
struct RunCtx {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

template <class S>
Var<S> maybe_dropout(Var<S> x, S rate, const RunCtx& ctx) {
  if (!ctx.training || rate <= S(0)) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  Mat<S> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = keep(*ctx.rng) ? S(1) : S(0);
  return ad::dropout(x, mask, S(1) - rate);
}

template <class S>
struct Linear {
  Param<S>* w = nullptr;
  Param<S>* b = nullptr;

  Linear() = default;
  Linear(ParamStore<S>& ps, Initializer<S>& init, const std::string& name,
         Eigen::Index in, Eigen::Index out, bool zero_init = false) {
    w = &ps.create(name + ".w", in, out);
    b = &ps.create(name + ".b", 1, out);
    if (!zero_init) init.xavier(w->value, in, out);
  }

  Var<S> forward(ad::Tape<S>& t, Var<S> x) const {
    return ad::add_rowvec(ad::matmul(x, t.param(*w)), t.param(*b));
  }
};

template <class S>
struct Conv1d {
  Param<S>* w = nullptr;
  Param<S>* b = nullptr;
  int kernel = 1, stride = 1, pad = 0;

  Conv1d() = default;
  Conv1d(ParamStore<S>& ps, Initializer<S>& init, const std::string& name,
         Eigen::Index in, Eigen::Index out, int k, int stride_ = 1,
         int pad_ = -1, bool zero_init = false)
      : kernel(k), stride(stride_), pad(pad_ < 0 ? (k - 1) / 2 : pad_) {
    w = &ps.create(name + ".w", static_cast<Eigen::Index>(k) * in, out);
    b = &ps.create(name + ".b", 1, out);
    if (!zero_init) init.xavier(w->value, k * in, out);
  }

  Var<S> forward(ad::Tape<S>& t, Var<S> x) const {
    return ad::conv1d(x, t.param(*w), t.param(*b), kernel, stride, pad);
  }
};

template <class S>
struct ConvTranspose1d {
  Param<S>* w = nullptr;
  Param<S>* b = nullptr;
  int kernel = 1, stride = 1, pad = 0;

  ConvTranspose1d() = default;
  ConvTranspose1d(ParamStore<S>& ps, Initializer<S>& init,
                  const std::string& name, Eigen::Index in, Eigen::Index out,
                  int k, int stride_, int pad_)
      : kernel(k), stride(stride_), pad(pad_) {
    w = &ps.create(name + ".w", static_cast<Eigen::Index>(k) * in, out);
    b = &ps.create(name + ".b", 1, out);
    init.xavier(w->value, k * in, out);
  }

  Var<S> forward(ad::Tape<S>& t, Var<S> x) const {
    return ad::conv_transpose1d(x, t.param(*w), t.param(*b), kernel, stride,
                                pad);
  }
};

template <class S>
struct LayerNorm {
  Param<S>* gain = nullptr;
  Param<S>* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, Eigen::Index ch) {
    gain = &ps.create(name + ".gain", 1, ch);
    bias = &ps.create(name + ".bias", 1, ch);
    gain->value.setOnes();
  }

  Var<S> forward(ad::Tape<S>& t, Var<S> x) const {
    return ad::layer_norm(x, t.param(*gain), t.param(*bias));
  }
};

template <class S>
struct Embedding {
  Param<S>* table = nullptr;

  Embedding() = default;
  Embedding(ParamStore<S>& ps, Initializer<S>& init, const std::string& name,
            Eigen::Index vocab, Eigen::Index dim) {
    table = &ps.create(name + ".table", vocab, dim);
    init.normal(table->value, 1.0 / std::sqrt(double(dim)));
    table->value.row(0).setZero();  // padding index
  }

  Var<S> forward(ad::Tape<S>& t, const std::vector<int>& ids) const {
    return ad::gather_rows(t.param(*table), ids);
  }
};

// Multi-head attention. Optional clipped relative-position key bias (Shaw
// et al. scheme, one embedding table per layer shared across heads).
template <class S>
struct MultiHeadAttention {
  Linear<S> wq, wk, wv, wo;
  Param<S>* rel = nullptr;  // (2*window+1) x head_dim, or null
  int heads = 1;
  int window = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& ps, Initializer<S>& init,
                     const std::string& name, Eigen::Index d, int n_heads,
                     int rel_window = 0)
      : heads(n_heads), window(rel_window) {
    wq = Linear<S>(ps, init, name + ".wq", d, d);
    wk = Linear<S>(ps, init, name + ".wk", d, d);
    wv = Linear<S>(ps, init, name + ".wv", d, d);
    wo = Linear<S>(ps, init, name + ".wo", d, d);
    if (rel_window > 0) {
      Eigen::Index hd = d / n_heads;
      rel = &ps.create(name + ".rel", 2 * rel_window + 1, hd);
      init.normal(rel->value, 0.02);
    }
  }

  // Returns (output, averaged attention weights). mask may be null for
  // unmasked attention; otherwise Tq x Tk with nonzero = permitted.
  std::pair<Var<S>, Mat<S>> forward(ad::Tape<S>& t, Var<S> q_in, Var<S> kv_in,
                                    const MaskMat* mask = nullptr) const {
    Eigen::Index d = q_in.cols();
    Eigen::Index hd = d / heads;
    Var<S> q = wq.forward(t, q_in);
    Var<S> k = wk.forward(t, kv_in);
    Var<S> v = wv.forward(t, kv_in);
    S scale = S(1) / std::sqrt(static_cast<S>(hd));
    MaskMat all;
    if (!mask) {
      all = MaskMat::Ones(q_in.rows(), kv_in.rows());
      mask = &all;
    }
    Var<S> merged{};
    Mat<S> attn_avg = Mat<S>::Zero(q_in.rows(), kv_in.rows());
    for (int h = 0; h < heads; ++h) {
      Var<S> qh = ad::slice_cols(q, h * hd, hd);
      Var<S> kh = ad::slice_cols(k, h * hd, hd);
      Var<S> vh = ad::slice_cols(v, h * hd, hd);
      Var<S> logits = ad::scal_mul(ad::matmul_nt(qh, kh), scale);
      if (rel) {
        Var<S> bias = ad::rel_pos_bias(qh, t.param(*rel), window, kv_in.rows());
        logits = ad::add(logits, ad::scal_mul(bias, scale));
      }
      Var<S> attn = ad::masked_softmax_rows(logits, *mask);
      attn_avg += attn.val();
      Var<S> oh = ad::matmul(attn, vh);
      merged = (h == 0) ? oh : ad::concat_cols(merged, oh);
    }
    attn_avg /= static_cast<S>(heads);
    return {wo.forward(t, merged), attn_avg};
  }
};

// Feed-forward Transformer block: self-attention + conv FFN, post-norm
// residual layout as in the FastSpeech encoder.
template <class S>
struct FFTBlock {
  MultiHeadAttention<S> attn;
  LayerNorm<S> ln1, ln2;
  Conv1d<S> ffn1, ffn2;
  S dropout_rate = S(0.1);

  FFTBlock() = default;
  FFTBlock(ParamStore<S>& ps, Initializer<S>& init, const std::string& name,
           Eigen::Index d, Eigen::Index filter, int kernel, int heads,
           int rel_window) {
    attn = MultiHeadAttention<S>(ps, init, name + ".attn", d, heads, rel_window);
    ln1 = LayerNorm<S>(ps, name + ".ln1", d);
    ffn1 = Conv1d<S>(ps, init, name + ".ffn1", d, filter, kernel);
    ffn2 = Conv1d<S>(ps, init, name + ".ffn2", filter, d, 1);
    ln2 = LayerNorm<S>(ps, name + ".ln2", d);
  }

  Var<S> forward(ad::Tape<S>& t, Var<S> x, const RunCtx& ctx) const {
    auto [a, w] = attn.forward(t, x, x);
    (void)w;
    x = ln1.forward(t, ad::add(x, maybe_dropout(a, dropout_rate, ctx)));
    Var<S> f = ffn2.forward(t, ad::relu(ffn1.forward(t, x)));
    return ln2.forward(t, ad::add(x, maybe_dropout(f, dropout_rate, ctx)));
  }
};

// Non-causal WaveNet stack with gated units and skip connections.
// The conditioning projection can be owned (cond_channels > 0) or supplied
// pre-projected by the caller (postnet keeps it per flow step).
template <class S>
struct WaveNet {
  std::vector<Conv1d<S>> in_convs;        // ch -> 2ch, kernel k
  std::vector<Conv1d<S>> res_skip_convs;  // ch -> 2ch (last: ch), kernel 1
  Conv1d<S> cond_proj;                    // cond -> 2ch*layers, kernel 1
  int layers = 0;
  Eigen::Index channels = 0;
  bool owns_cond = false;

  WaveNet() = default;
  WaveNet(ParamStore<S>& ps, Initializer<S>& init, const std::string& name,
          Eigen::Index ch, int n_layers, int kernel,
          Eigen::Index cond_channels)
      : layers(n_layers), channels(ch), owns_cond(cond_channels > 0) {
    for (int l = 0; l < n_layers; ++l) {
      in_convs.emplace_back(ps, init, name + ".layer" + std::to_string(l) + ".in",
                            ch, 2 * ch, kernel);
      Eigen::Index out = (l == n_layers - 1) ? ch : 2 * ch;
      res_skip_convs.emplace_back(
          ps, init, name + ".layer" + std::to_string(l) + ".res_skip", ch, out, 1);
    }
    if (owns_cond)
      cond_proj = Conv1d<S>(ps, init, name + ".cond", cond_channels,
                            2 * ch * n_layers, 1);
  }

  Eigen::Index cond_width() const { return 2 * channels * layers; }

  // x: T x ch. cond: T x cond_channels if owns_cond, else T x (2ch*layers)
  // already projected. Returns skip sum, T x ch.
  Var<S> forward(ad::Tape<S>& t, Var<S> x, Var<S> cond) const {
    if (cond.rows() != x.rows())
      throw std::invalid_argument("wavenet: conditioning length mismatch");
    Var<S> c = owns_cond ? cond_proj.forward(t, cond) : cond;
    Var<S> skip{};
    for (int l = 0; l < layers; ++l) {
      Var<S> z = in_convs[l].forward(t, x);
      z = ad::add(z, ad::slice_cols(c, static_cast<Eigen::Index>(l) * 2 * channels,
                                    2 * channels));
      Var<S> gate = ad::mul(ad::tanh_(ad::slice_cols(z, 0, channels)),
                            ad::sigmoid(ad::slice_cols(z, channels, channels)));
      Var<S> rs = res_skip_convs[l].forward(t, gate);
      if (l == layers - 1) {
        skip = (layers == 1) ? rs : ad::add(skip, rs);
      } else {
        x = ad::add(x, ad::slice_cols(rs, 0, channels));
        Var<S> s = ad::slice_cols(rs, channels, channels);
        skip = (l == 0) ? s : ad::add(skip, s);
      }
    }
    return skip;
  }
};

}  // namespace ps::nn
