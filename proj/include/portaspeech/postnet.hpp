// Flow post-net: Glow-style stack of invertible steps (actnorm, invertible
// channel mixing, affine coupling with WaveNet coupling networks) over
// squeezed mel frames, conditioned on linguistic features and the coarse
// mel, with exact log-likelihood, temperature sampling and grouped
// parameter sharing of the coupling networks.

#pragma once

#include "portaspeech/config.hpp"
#include "portaspeech/nn.hpp"
#include "portaspeech/variational_generator.hpp"  // kLog2Pi

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <vector>

namespace ps {

// Contiguous group blocks: steps 1..K (1-based) map to floor((k-1)*Ng/K).
inline int group_index(int step_1based, int flow_steps, int groups) {
  if (groups < 1 || groups > flow_steps)
    throw std::invalid_argument("shared_groups must be in [1, flow_steps]");
  if (step_1based < 1 || step_1based > flow_steps)
    throw std::invalid_argument("flow step out of range");
  return static_cast<int>(
      (static_cast<long long>(step_1based - 1) * groups) / flow_steps);
}

// Shared coupling body: everything except the per-step conditional
// projection. Steps in the same group hold a pointer to the same object.
template <class S>
struct CouplingBody {
  nn::Conv1d<S> start;  // C/2 -> wn_ch, kernel 1
  nn::WaveNet<S> wn;    // conditioning supplied pre-projected
  nn::Conv1d<S> end;    // wn_ch -> C (scale raw, shift), zero-initialized

  CouplingBody(nn::ParamStore<S>& ps, nn::Initializer<S>& init,
               const std::string& name, int channels, int wn_ch, int wn_layers,
               int wn_kernel) {
    start = nn::Conv1d<S>(ps, init, name + ".start", channels / 2, wn_ch, 1);
    wn = nn::WaveNet<S>(ps, init, name + ".wn", wn_ch, wn_layers, wn_kernel, 0);
    end = nn::Conv1d<S>(ps, init, name + ".end", wn_ch, channels, 1, 1, -1,
                        /*zero_init=*/true);
  }
};

template <class S>
struct PostNetStep {
  Param<S>* an_logs = nullptr;  // actnorm log-scale, 1 x C
  Param<S>* an_bias = nullptr;
  Param<S>* mix = nullptr;      // invertible channel-mixing matrix, C x C
  nn::Conv1d<S> cond_proj;      // unshared: cond_sq -> 2*wn_ch*wn_layers
  CouplingBody<S>* body = nullptr;
};

template <class S>
struct PostNetForward {
  ad::Var<S> z;            // T x 80 (unsqueezed)
  ad::Var<S> log_det;      // scalar, sum of all step log-dets
  ad::Var<S> log_lik;      // standard-normal log-density of z + log_det
};

template <class S>
class PostNet {
 public:
  PostNet() = default;
  // mel_channels is 80 for the real model; tests shrink it so numerical
  // Jacobian oracles stay within their dimension limit.
  PostNet(nn::ParamStore<S>& ps, nn::Initializer<S>& init,
          const ModelConfig& cfg, int mel_channels = 80)
      : sq_(cfg.pn_squeeze),
        mel_ch_(mel_channels),
        channels_(mel_channels * cfg.pn_squeeze),
        steps_k_(cfg.pn_flow_steps),
        cond_raw_ch_(cfg.hidden_size + mel_channels) {
    int wn_ch = cfg.pn_wn_channels;
    for (int g = 0; g < cfg.pn_groups; ++g)
      bodies_.push_back(std::make_unique<CouplingBody<S>>(
          ps, init, "postnet.group" + std::to_string(g), channels_, wn_ch,
          cfg.pn_wn_layers, cfg.pn_wn_kernel));
    for (int k = 1; k <= steps_k_; ++k) {
      PostNetStep<S> st;
      std::string name = "postnet.step" + std::to_string(k - 1);
      st.an_logs = &ps.create(name + ".actnorm.logs", 1, channels_);
      st.an_bias = &ps.create(name + ".actnorm.bias", 1, channels_);
      st.mix = &ps.create(name + ".mix", channels_, channels_);
      st.mix->value = random_rotation(init, channels_);
      st.cond_proj = nn::Conv1d<S>(ps, init, name + ".cond", cond_raw_ch_ * sq_,
                                   2 * wn_ch * cfg.pn_wn_layers, 1);
      st.body = bodies_[static_cast<std::size_t>(
                            group_index(k, steps_k_, cfg.pn_groups))]
                    .get();
      steps_.push_back(std::move(st));
    }
  }

  int squeeze_factor() const { return sq_; }
  int n_steps() const { return steps_k_; }
  const std::vector<PostNetStep<S>>& steps() const { return steps_; }

  // mel: T x 80, cond: T x (d + 80); T divisible by the squeeze factor.
  PostNetForward<S> forward(ad::Tape<S>& t, ad::Var<S> mel,
                            ad::Var<S> cond) const {
    Eigen::Index T = mel.rows();
    if (T % sq_ != 0)
      throw std::invalid_argument("postnet: T not divisible by squeeze");
    Eigen::Index Ts = T / sq_;
    ad::Var<S> x = ad::reshape(mel, Ts, channels_);
    ad::Var<S> csq = ad::reshape(cond, Ts, cond.cols() * sq_);

    ad::Var<S> total_ld{};
    bool first = true;
    for (std::size_t k = 0; k < steps_.size(); ++k) {
      auto [y, ld] = step_forward(t, steps_[k], x, csq);
      if (!y.val().allFinite())
        throw std::runtime_error("postnet: non-finite activations at step " +
                                 std::to_string(k));
      x = y;
      total_ld = first ? ld : ad::add(total_ld, ld);
      first = false;
    }
    PostNetForward<S> out;
    out.z = ad::reshape(x, T, mel_ch_);
    out.log_det = total_ld;
    S c = static_cast<S>(-0.5 * kLog2Pi * double(T * mel_ch_));
    ad::Var<S> logn = ad::scal_add(
        ad::scal_mul(ad::sum_all(ad::square(out.z)), S(-0.5)), c);
    out.log_lik = ad::add(logn, out.log_det);
    return out;
  }

  // Exact inverse of forward (no gradients tracked).
  Mat<S> inverse(const Mat<S>& z, const Mat<S>& cond) const {
    Eigen::Index T = z.rows();
    Eigen::Index Ts = T / sq_;
    Mat<S> x = Eigen::Map<const Mat<S>>(z.data(), Ts, channels_);
    Mat<S> csq = Eigen::Map<const Mat<S>>(cond.data(), Ts, cond.cols() * sq_);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it)
      x = step_inverse(*it, x, csq);
    return Eigen::Map<const Mat<S>>(x.data(), T, mel_ch_);
  }

  // Draw z ~ N(0, temperature^2) elementwise and invert the flow.
  Mat<S> sample(const Mat<S>& cond, S temperature, std::mt19937_64& rng) const {
    if (temperature < S(0))
      throw std::invalid_argument("temperature must be >= 0");
    Eigen::Index T = cond.rows();
    Mat<S> z(T, mel_ch_);
    std::normal_distribution<double> d(0.0, 1.0);
    for (Eigen::Index i = 0; i < T; ++i)
      for (Eigen::Index j = 0; j < mel_ch_; ++j)
        z(i, j) = temperature * static_cast<S>(d(rng));
    return inverse(z, cond);
  }

  // Glow-style data-dependent actnorm initialization: sequentially set each
  // actnorm so its outputs have zero mean / unit variance on the batch.
  void data_dependent_init(const std::vector<Mat<S>>& mels,
                           const std::vector<Mat<S>>& conds) {
    if (ddi_done_)
      throw std::logic_error("data_dependent_init called twice");
    if (mels.empty() || mels.size() != conds.size())
      throw std::invalid_argument("data_dependent_init: bad batch");
    // Concatenate squeezed batch rows.
    Eigen::Index total = 0;
    for (const auto& m : mels) total += m.rows() / sq_;
    Mat<S> x(total, channels_);
    Mat<S> c(total, cond_raw_ch_ * sq_);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < mels.size(); ++i) {
      Eigen::Index ts = mels[i].rows() / sq_;
      x.middleRows(at, ts) =
          Eigen::Map<const Mat<S>>(mels[i].data(), ts, channels_);
      c.middleRows(at, ts) =
          Eigen::Map<const Mat<S>>(conds[i].data(), ts, cond_raw_ch_ * sq_);
      at += ts;
    }
    for (auto& st : steps_) {
      // set actnorm from the statistics of its input
      for (Eigen::Index ch = 0; ch < channels_; ++ch) {
        double mean = x.col(ch).template cast<double>().mean();
        double var =
            (x.col(ch).template cast<double>().array() - mean).square().mean();
        double stddev = std::sqrt(var + 1e-6);
        st.an_logs->value(0, ch) = static_cast<S>(-std::log(stddev));
        st.an_bias->value(0, ch) = static_cast<S>(-mean / stddev);
      }
      // run the full step forward to feed the next one
      ad::Tape<S> t;
      auto [y, ld] = step_forward(t, st, t.constant(x), t.constant(c));
      (void)ld;
      x = y.val();
    }
    ddi_done_ = true;
  }

  bool initialized() const { return ddi_done_; }
  // Restoring a checkpoint implies the actnorms already carry statistics.
  void mark_initialized() { ddi_done_ = true; }

 private:
  static Mat<S> random_rotation(nn::Initializer<S>& init, int n) {
    Mat<S> g(n, n);
    init.normal(g, 1.0);
    Eigen::MatrixXd gd = g.template cast<double>();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gd);
    Eigen::MatrixXd q = qr.householderQ();
    if (q.determinant() < 0) q.col(0) *= -1.0;
    return q.cast<S>();
  }

  // One step: actnorm -> channel mixing -> affine coupling. Returns the new
  // tensor and the step's log-det contribution.
  std::pair<ad::Var<S>, ad::Var<S>> step_forward(ad::Tape<S>& t,
                                                 const PostNetStep<S>& st,
                                                 ad::Var<S> x,
                                                 ad::Var<S> csq) const {
    Eigen::Index Ts = x.rows();
    int half = channels_ / 2;
    // actnorm: y = exp(logs) .* x + bias
    ad::Var<S> logs = t.param(*st.an_logs);
    x = ad::add_rowvec(ad::mul_rowvec(x, ad::exp_(logs)), t.param(*st.an_bias));
    ad::Var<S> ld = ad::scal_mul(ad::sum_all(logs), static_cast<S>(Ts));
    // invertible channel mixing
    ad::Var<S> w = t.param(*st.mix);
    x = ad::matmul(x, w);
    ld = ad::add(ld, ad::scal_mul(ad::logabsdet(w), static_cast<S>(Ts)));
    // affine coupling
    ad::Var<S> xa = ad::slice_cols(x, 0, half);
    ad::Var<S> xb = ad::slice_cols(x, half, half);
    auto [scale, shift] = coupling_params(t, st, xa, csq);
    ad::Var<S> yb = ad::add(ad::mul(scale, xb), shift);
    ld = ad::add(ld, ad::sum_all(ad::log_(scale)));
    return {ad::concat_cols(xa, yb), ld};
  }

  Mat<S> step_inverse(const PostNetStep<S>& st, const Mat<S>& y,
                      const Mat<S>& csq) const {
    int half = channels_ / 2;
    ad::Tape<S> t;
    ad::Var<S> ya = t.constant(y.leftCols(half));
    auto [scale, shift] = coupling_params(t, st, ya, t.constant(csq));
    Mat<S> x(y.rows(), channels_);
    x.leftCols(half) = y.leftCols(half);
    x.rightCols(half) =
        (y.rightCols(half) - shift.val()).cwiseQuotient(scale.val());
    // undo channel mixing
    Eigen::MatrixXd wd = st.mix->value.template cast<double>();
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(wd);
    Mat<S> mixed = (lu.solve(x.template cast<double>().transpose()))
                       .transpose()
                       .template cast<S>();
    // undo actnorm
    for (Eigen::Index i = 0; i < mixed.rows(); ++i)
      mixed.row(i) = (mixed.row(i) - st.an_bias->value.row(0))
                         .cwiseProduct(
                             (-st.an_logs->value.row(0).array()).exp().matrix());
    return mixed;
  }

  // scale in (0, 1/sigmoid(2)), equal to 1 at zero initialization.
  std::pair<ad::Var<S>, ad::Var<S>> coupling_params(ad::Tape<S>& t,
                                                    const PostNetStep<S>& st,
                                                    ad::Var<S> xa,
                                                    ad::Var<S> csq) const {
    ad::Var<S> h = st.body->start.forward(t, xa);
    ad::Var<S> cproj = st.cond_proj.forward(t, csq);
    h = st.body->wn.forward(t, h, cproj);
    ad::Var<S> raw = st.body->end.forward(t, h);
    int half = channels_ / 2;
    ad::Var<S> s_raw = ad::slice_cols(raw, 0, half);
    ad::Var<S> shift = ad::slice_cols(raw, half, half);
    S inv_sig2 = static_cast<S>(1.0 + std::exp(-2.0));  // 1 / sigmoid(2)
    ad::Var<S> scale =
        ad::scal_mul(ad::sigmoid(ad::scal_add(s_raw, S(2))), inv_sig2);
    return {scale, shift};
  }

  int sq_ = 2;
  int mel_ch_ = 80;
  int channels_ = 160;
  int steps_k_ = 12;
  int cond_raw_ch_ = 272;
  bool ddi_done_ = false;
  std::vector<std::unique_ptr<CouplingBody<S>>> bodies_;
  std::vector<PostNetStep<S>> steps_;
};

}  // namespace ps
