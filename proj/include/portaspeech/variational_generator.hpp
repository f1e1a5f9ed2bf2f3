// Variational generator: stride-4 convolutional VAE over mel frames
// conditioned on linguistic features, with a volume-preserving flow prior
// (shift-only residual couplings + channel flips) and Monte-Carlo KL.

#pragma once

#include "portaspeech/config.hpp"
#include "portaspeech/nn.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace ps {

inline constexpr double kLog2Pi = 1.8378770664093453;

// Average-pool rows by factor 4 (time downsampling for conditioning).
template <class S>
ad::Var<S> avg_pool4(ad::Var<S> x) {
  std::vector<int> seg(static_cast<std::size_t>(x.rows()));
  for (std::size_t i = 0; i < seg.size(); ++i) seg[i] = static_cast<int>(i / 4);
  return ad::segment_mean_rows(x, seg, static_cast<int>(x.rows() / 4));
}

template <class S>
struct PosteriorParams {
  ad::Var<S> mu;         // (T/4) x latent
  ad::Var<S> log_sigma;  // clamped to [-8, 8]
};

// One shift-only residual coupling conditioned on pooled linguistic
// features, followed by a channel-wise flip. Jacobian determinant is 1.
template <class S>
struct VPFlowStep {
  nn::Conv1d<S> start;  // half -> ch, kernel 1
  nn::WaveNet<S> wn;    // owns its conditioning projection
  nn::Conv1d<S> end;    // ch -> half, kernel 1, zero-initialized

  VPFlowStep() = default;
  VPFlowStep(nn::ParamStore<S>& ps, nn::Initializer<S>& init,
             const std::string& name, int latent, int channels, int layers,
             int kernel, int cond_ch) {
    int half = latent / 2;
    start = nn::Conv1d<S>(ps, init, name + ".start", half, channels, 1);
    wn = nn::WaveNet<S>(ps, init, name + ".wn", channels, layers, kernel,
                        cond_ch);
    end = nn::Conv1d<S>(ps, init, name + ".end", channels, half, 1,
                        /*stride=*/1, /*pad=*/-1, /*zero_init=*/true);
  }

  ad::Var<S> shift(ad::Tape<S>& t, ad::Var<S> a, ad::Var<S> cond) const {
    return end.forward(t, wn.forward(t, start.forward(t, a), cond));
  }
};

template <class S>
class VPFlow {
 public:
  VPFlow() = default;
  VPFlow(nn::ParamStore<S>& ps, nn::Initializer<S>& init,
         const ModelConfig& cfg, int cond_ch)
      : latent_(cfg.latent_size) {
    for (int i = 0; i < cfg.vp_steps; ++i)
      steps_.emplace_back(ps, init, "vp_flow.step" + std::to_string(i),
                          cfg.latent_size, cfg.vp_channels, cfg.vp_layers,
                          cfg.vp_kernel, cond_ch);
    flip_.resize(static_cast<std::size_t>(latent_));
    for (int c = 0; c < latent_; ++c)
      flip_[static_cast<std::size_t>(c)] = latent_ - 1 - c;
  }

  int n_steps() const { return static_cast<int>(steps_.size()); }

  // Posterior sample -> standard-normal side.
  ad::Var<S> forward(ad::Tape<S>& t, ad::Var<S> z, ad::Var<S> cond) const {
    int half = latent_ / 2;
    for (const auto& step : steps_) {
      ad::Var<S> a = ad::slice_cols(z, 0, half);
      ad::Var<S> b = ad::slice_cols(z, half, half);
      b = ad::add(b, step.shift(t, a, cond));
      z = ad::col_permute(ad::concat_cols(a, b), flip_);
    }
    return z;
  }

  // Standard-normal side -> posterior side (exact inverse of forward).
  ad::Var<S> inverse(ad::Tape<S>& t, ad::Var<S> z0, ad::Var<S> cond) const {
    int half = latent_ / 2;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      z0 = ad::col_permute(z0, flip_);  // flip is its own inverse
      ad::Var<S> a = ad::slice_cols(z0, 0, half);
      ad::Var<S> b = ad::slice_cols(z0, half, half);
      b = ad::sub(b, it->shift(t, a, cond));
      z0 = ad::concat_cols(a, b);
    }
    return z0;
  }

  // log p(z | cond): standard-normal density of forward(z); no Jacobian
  // term because every step is volume preserving.
  ad::Var<S> log_prob(ad::Tape<S>& t, ad::Var<S> z, ad::Var<S> cond) const {
    ad::Var<S> z0 = forward(t, z, cond);
    ad::Var<S> ss = ad::sum_all(ad::square(z0));
    S c = static_cast<S>(-0.5 * kLog2Pi * double(z.rows() * z.cols()));
    return ad::scal_add(ad::scal_mul(ss, S(-0.5)), c);
  }

 private:
  int latent_ = 16;
  std::vector<VPFlowStep<S>> steps_;
  std::vector<int> flip_;
};

template <class S>
class VariationalGenerator {
 public:
  VariationalGenerator() = default;
  VariationalGenerator(nn::ParamStore<S>& ps, nn::Initializer<S>& init,
                       const ModelConfig& cfg)
      : latent_(cfg.latent_size), ch_(cfg.vg_channels) {
    int d = cfg.hidden_size;
    enc_in_ = nn::Conv1d<S>(ps, init, "vg_encoder.in", 80, ch_, cfg.vg_kernel,
                            /*stride=*/4);
    enc_ln_ = nn::LayerNorm<S>(ps, "vg_encoder.ln", ch_);
    enc_wn_ = nn::WaveNet<S>(ps, init, "vg_encoder.wn", ch_, cfg.vg_enc_layers,
                             cfg.vg_kernel, d);
    enc_out_ = nn::Conv1d<S>(ps, init, "vg_encoder.out", ch_, 2 * latent_, 1,
                             1, -1, /*zero_init=*/true);

    dec_in_ = nn::Conv1d<S>(ps, init, "vg_decoder.in", latent_, ch_, 1);
    dec_wn_ = nn::WaveNet<S>(ps, init, "vg_decoder.wn", ch_, cfg.vg_dec_layers,
                             cfg.vg_kernel, d);
    dec_up_ = nn::ConvTranspose1d<S>(ps, init, "vg_decoder.up", ch_, ch_, 8, 4, 2);
    dec_ln_ = nn::LayerNorm<S>(ps, "vg_decoder.ln", ch_);
    dec_out_ = nn::Conv1d<S>(ps, init, "vg_decoder.out", ch_, 80, 1);

    flow_ = VPFlow<S>(ps, init, cfg, d);
  }

  int latent_size() const { return latent_; }
  const VPFlow<S>& flow() const { return flow_; }

  // mel: T x 80, h_l: T x d, T divisible by 4.
  PosteriorParams<S> encode_posterior(ad::Tape<S>& t, ad::Var<S> mel,
                                      ad::Var<S> h_l) const {
    if (mel.rows() % 4 != 0)
      throw std::invalid_argument("encode_posterior: T not divisible by 4");
    ad::Var<S> h = enc_ln_.forward(t, ad::relu(enc_in_.forward(t, mel)));
    h = enc_wn_.forward(t, h, avg_pool4(h_l));
    ad::Var<S> p = enc_out_.forward(t, h);
    PosteriorParams<S> out;
    out.mu = ad::slice_cols(p, 0, latent_);
    out.log_sigma = ad::clamp(ad::slice_cols(p, latent_, latent_), S(-8), S(8));
    return out;
  }

  ad::Var<S> reparameterize(ad::Tape<S>& t, const PosteriorParams<S>& q,
                            const Mat<S>& noise) const {
    return ad::add(q.mu, ad::mul(ad::exp_(q.log_sigma), t.constant(noise)));
  }

  // z: (T/4) x latent, h_l: T x d -> coarse mel T x 80.
  ad::Var<S> decode(ad::Tape<S>& t, ad::Var<S> z, ad::Var<S> h_l) const {
    if (z.rows() * 4 != h_l.rows())
      throw std::invalid_argument("decode: latent length != T/4");
    ad::Var<S> h = dec_in_.forward(t, z);
    h = dec_wn_.forward(t, h, avg_pool4(h_l));
    h = dec_ln_.forward(t, ad::relu(dec_up_.forward(t, h)));
    return dec_out_.forward(t, h);
  }

  ad::Var<S> prior_log_prob(ad::Tape<S>& t, ad::Var<S> z,
                            ad::Var<S> cond_pooled) const {
    return flow_.log_prob(t, z, cond_pooled);
  }

  // Single-sample Monte-Carlo KL: log q(z|x,c) - log p(z|c)
  // with z = mu + sigma*eps. Returns the total (not per-element) value.
  ad::Var<S> kl_estimate(ad::Tape<S>& t, const PosteriorParams<S>& q,
                         ad::Var<S> cond_pooled, const Mat<S>& noise) const {
    ad::Var<S> z = reparameterize(t, q, noise);
    // log q at the sampled point: sum(-eps^2/2 - log sigma - log(2pi)/2)
    Mat<S> eps2 = noise.array().square().matrix();
    S const_term = static_cast<S>(
        -0.5 * (eps2.sum() + kLog2Pi * double(noise.size())));
    ad::Var<S> log_q =
        ad::scal_add(ad::neg(ad::sum_all(q.log_sigma)), const_term);
    return ad::sub(log_q, prior_log_prob(t, z, cond_pooled));
  }

 private:
  int latent_ = 16;
  int ch_ = 192;
  nn::Conv1d<S> enc_in_, enc_out_, dec_in_, dec_out_;
  nn::LayerNorm<S> enc_ln_, dec_ln_;
  nn::WaveNet<S> enc_wn_, dec_wn_;
  nn::ConvTranspose1d<S> dec_up_;
  VPFlow<S> flow_;
};

}  // namespace ps
