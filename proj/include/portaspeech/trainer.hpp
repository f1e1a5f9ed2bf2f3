// Training: the four loss terms with teacher-forced durations, Adam with
// the Transformer warmup schedule, gradient clipping, KL annealing,
// deterministic seeded runs and checksummed checkpoints.

#pragma once

#include "portaspeech/diagnostics.hpp"
#include "portaspeech/model.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace ps {

struct LossBreakdown {
  double l_dur = 0.0;
  double l_vg = 0.0;
  double l_kl = 0.0;
  double l_pn = 0.0;
  double kl_weight = 1.0;
  double total = 0.0;
};

struct TrainConfig {
  int batch_size = 4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  int warmup_steps = 200;
  int max_steps = 2000;
  int kl_anneal_steps = 200;  // linear 0 -> 1 ramp of the KL weight
  double grad_clip = 1.0;
  double lr_scale = 1.0;
  std::uint64_t seed = 1;
  int checkpoint_interval = 500;

  void validate() const {
    if (batch_size < 1 || warmup_steps < 1 || max_steps < 1)
      throw std::invalid_argument("train config: counts must be positive");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
      throw std::invalid_argument("train config: betas must be in (0,1)");
  }
};

// Transformer schedule: d^-1/2 * min(s^-1/2, s * warmup^-3/2), peaking at
// s = warmup.
inline double lr_at_step(int step, int warmup, int d_model) {
  if (step < 1) throw std::invalid_argument("lr_at_step: step must be >= 1");
  double s = double(step);
  return std::pow(double(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(double(warmup), -1.5));
}

inline double kl_weight_at(int step, int anneal_steps) {
  if (anneal_steps <= 0) return 1.0;
  return std::min(1.0, double(step) / double(anneal_steps));
}

template <class S>
struct LossVars {
  ad::Var<S> total;
  LossBreakdown values;
};

// Word-level duration loss in log scale. The predictor output u_p models
// log(1 + d_p); summing exp(u_p) over a word gives L_w + d_w in the linear
// domain, so the loss compares log(sum_p exp(u_p)) against log(L_w + d_w).
// Smooth everywhere and defined for zero-duration (e.g. SIL) words.
template <class S>
ad::Var<S> duration_loss(ad::Tape<S>& t, ad::Var<S> log_durs,
                         const PhonemeSequence& seq,
                         const std::vector<int>& gt_word_durs) {
  auto lens = word_lengths(seq.word_ids, seq.word_count);
  Mat<S> target(seq.word_count, 1);
  for (int w = 0; w < seq.word_count; ++w)
    target(w, 0) = static_cast<S>(std::log(
        double(lens[std::size_t(w)]) + double(gt_word_durs[std::size_t(w)])));
  ad::Var<S> word_sum = ad::segment_sum_rows(ad::exp_(log_durs), seq.word_ids,
                                             seq.word_count);
  return ad::mean_all(
      ad::square(ad::sub(ad::log_(word_sum), t.constant(target))));
}

// All four loss terms on a batch of utterances, teacher-forced durations,
// per-element averages, each term averaged over utterances.
template <class S>
LossVars<S> compute_losses(ad::Tape<S>& t, PortaSpeech<S>& model,
                           const std::vector<const LoadedUtterance*>& batch,
                           double kl_weight, std::mt19937_64& rng,
                           bool training = true) {
  if (batch.empty()) throw std::invalid_argument("compute_losses: empty batch");
  nn::RunCtx ctx{training, &rng};
  std::normal_distribution<double> normal(0.0, 1.0);
  ad::Var<S> dur{}, vg{}, kl{}, pn{};
  bool first = true;
  for (const LoadedUtterance* u : batch) {
    Eigen::Index T = u->mel.rows();
    Mat<S> mel_n = model.normalize_mel(u->mel);
    ad::Var<S> mel = t.constant(mel_n);

    auto enc = model.encoder().encode(t, u->seq, u->word_durations, ctx);
    ad::Var<S> l_dur =
        duration_loss(t, enc.log_durations, u->seq, u->word_durations);

    auto q = model.vg().encode_posterior(t, mel, enc.features);
    Mat<S> noise(T / 4, model.vg().latent_size());
    for (Eigen::Index i = 0; i < noise.size(); ++i)
      noise.data()[i] = static_cast<S>(normal(rng));
    ad::Var<S> z = model.vg().reparameterize(t, q, noise);
    ad::Var<S> coarse = model.vg().decode(t, z, enc.features);
    ad::Var<S> l_vg = ad::mean_all(ad::abs_(ad::sub(coarse, mel)));

    ad::Var<S> pooled = avg_pool4(enc.features);
    ad::Var<S> l_kl =
        ad::scal_mul(model.vg().kl_estimate(t, q, pooled, noise),
                     static_cast<S>(1.0 / double(noise.size())));

    ad::Var<S> cond = ad::concat_cols(enc.features, coarse);
    auto pn_out = model.postnet().forward(t, mel, cond);
    ad::Var<S> l_pn = ad::scal_mul(pn_out.log_lik,
                                   static_cast<S>(-1.0 / double(T * 80)));

    dur = first ? l_dur : ad::add(dur, l_dur);
    vg = first ? l_vg : ad::add(vg, l_vg);
    kl = first ? l_kl : ad::add(kl, l_kl);
    pn = first ? l_pn : ad::add(pn, l_pn);
    first = false;
  }
  S inv_n = static_cast<S>(1.0 / double(batch.size()));
  dur = ad::scal_mul(dur, inv_n);
  vg = ad::scal_mul(vg, inv_n);
  kl = ad::scal_mul(kl, inv_n);
  pn = ad::scal_mul(pn, inv_n);

  LossVars<S> out;
  out.values.l_dur = double(dur.scalar());
  out.values.l_vg = double(vg.scalar());
  out.values.l_kl = double(kl.scalar());
  out.values.l_pn = double(pn.scalar());
  out.values.kl_weight = kl_weight;
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("loss term ") + name +
                               " is not finite");
  };
  check(out.values.l_dur, "l_dur");
  check(out.values.l_vg, "l_vg");
  check(out.values.l_kl, "l_kl");
  check(out.values.l_pn, "l_pn");
  out.total = ad::add(
      ad::add(dur, vg),
      ad::add(ad::scal_mul(kl, static_cast<S>(kl_weight)), pn));
  out.values.total = double(out.total.scalar());
  return out;
}

// ---- Adam ----

template <class S>
struct AdamState {
  std::vector<Mat<S>> m, v;
  std::int64_t t = 0;
};

template <class S>
class Adam {
 public:
  Adam() = default;
  Adam(nn::ParamStore<S>& store, const TrainConfig& tc) : tc_(tc) {
    for (auto* p : store.all()) {
      state_.m.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      state_.v.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  AdamState<S>& state() { return state_; }

  // Global-norm clipping followed by one Adam update.
  void step(nn::ParamStore<S>& store, double lr) {
    auto params = store.all();
    double sq = 0.0;
    for (auto* p : params) sq += double(p->grad.template cast<double>().squaredNorm());
    double norm = std::sqrt(sq);
    double scale = (tc_.grad_clip > 0 && norm > tc_.grad_clip)
                       ? tc_.grad_clip / norm
                       : 1.0;
    ++state_.t;
    double b1t = 1.0 - std::pow(tc_.beta1, double(state_.t));
    double b2t = 1.0 - std::pow(tc_.beta2, double(state_.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Mat<S>& m = state_.m[i];
      Mat<S>& v = state_.v[i];
      Mat<S> g = params[i]->grad * static_cast<S>(scale);
      m = static_cast<S>(tc_.beta1) * m + static_cast<S>(1.0 - tc_.beta1) * g;
      v = static_cast<S>(tc_.beta2) * v +
          static_cast<S>(1.0 - tc_.beta2) * g.cwiseProduct(g);
      Mat<S> mhat = m / static_cast<S>(b1t);
      Mat<S> vhat = v / static_cast<S>(b2t);
      params[i]->value -=
          static_cast<S>(lr) *
          mhat.cwiseQuotient(vhat.cwiseSqrt() +
                             Mat<S>::Constant(vhat.rows(), vhat.cols(),
                                              static_cast<S>(tc_.epsilon)));
    }
  }

 private:
  TrainConfig tc_;
  AdamState<S> state_;
};

// ---- checkpoints ----

namespace detail {

class CrcWriter {
 public:
  explicit CrcWriter(const std::string& path) : f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error("cannot write checkpoint: " + path);
  }
  void write(const void* data, std::size_t n) {
    f_.write(static_cast<const char*>(data), std::streamsize(n));
    crc_ = crc32(crc_, static_cast<const Bytef*>(data), uInt(n));
  }
  template <class T>
  void put(T v) {
    write(&v, sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(std::uint32_t(s.size()));
    write(s.data(), s.size());
  }
  void finish() {
    std::uint32_t c = std::uint32_t(crc_);
    f_.write(reinterpret_cast<const char*>(&c), 4);
    if (!f_) throw std::runtime_error("checkpoint write failed");
  }

 private:
  std::ofstream f_;
  uLong crc_ = crc32(0L, Z_NULL, 0);
};

class CrcReader {
 public:
  explicit CrcReader(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    buf_ = os.str();
    if (buf_.size() < 8) throw std::runtime_error("checkpoint truncated");
    std::uint32_t stored;
    std::memcpy(&stored, buf_.data() + buf_.size() - 4, 4);
    uLong actual = crc32(0L, Z_NULL, 0);
    actual = crc32(actual, reinterpret_cast<const Bytef*>(buf_.data()),
                   uInt(buf_.size() - 4));
    if (std::uint32_t(actual) != stored)
      throw std::runtime_error("checkpoint checksum mismatch (corrupted file)");
    end_ = buf_.size() - 4;
  }
  void read(void* data, std::size_t n) {
    if (at_ + n > end_) throw std::runtime_error("checkpoint truncated");
    std::memcpy(data, buf_.data() + at_, n);
    at_ += n;
  }
  template <class T>
  T get() {
    T v;
    read(&v, sizeof(T));
    return v;
  }
  std::string get_string() {
    auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

 private:
  std::string buf_;
  std::size_t at_ = 0, end_ = 0;
};

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'P', 'S', 'C', 'P'};

template <class S>
void save_checkpoint(const std::string& path, PortaSpeech<S>& model,
                     const AdamState<S>* opt, int step) {
  detail::CrcWriter w(path);
  w.write(kCheckpointMagic, 4);
  w.put<std::uint32_t>(1);  // version
  w.put<std::uint32_t>(std::uint32_t(sizeof(S)));
  w.put_string(config_to_text(model.config()));
  w.put<std::uint64_t>(config_fingerprint(model.config()));
  w.put<std::uint32_t>(std::uint32_t(step));
  w.put<std::uint8_t>(model.postnet().initialized() ? 1 : 0);

  const auto& syms = model.vocab().symbols();
  w.put<std::uint32_t>(std::uint32_t(syms.size()));
  for (const auto& s : syms) w.put_string(s);

  w.write(model.mel_mean().data(), sizeof(S) * 80);
  w.write(model.mel_std().data(), sizeof(S) * 80);

  auto params = model.params().all();
  w.put<std::uint64_t>(params.size());
  for (auto* p : params) {
    w.put_string(p->name);
    w.put<std::uint32_t>(std::uint32_t(p->value.rows()));
    w.put<std::uint32_t>(std::uint32_t(p->value.cols()));
    w.write(p->value.data(), sizeof(S) * std::size_t(p->value.size()));
  }
  w.put<std::uint8_t>(opt ? 1 : 0);
  if (opt) {
    w.put<std::int64_t>(opt->t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.write(opt->m[i].data(), sizeof(S) * std::size_t(opt->m[i].size()));
      w.write(opt->v[i].data(), sizeof(S) * std::size_t(opt->v[i].size()));
    }
  }
  w.finish();
}

template <class S>
struct LoadedCheckpoint {
  std::unique_ptr<PortaSpeech<S>> model;
  AdamState<S> opt;
  bool has_opt = false;
  int step = 0;
};

// expected: if given, its fingerprint must match the stored one (guards
// against resuming with the wrong configuration).
template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path,
                                    const ModelConfig* expected = nullptr) {
  detail::CrcReader r(path);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  if (r.get<std::uint32_t>() != 1)
    throw std::runtime_error("unsupported checkpoint version");
  if (r.get<std::uint32_t>() != sizeof(S))
    throw std::runtime_error("checkpoint scalar width mismatch");
  ModelConfig cfg = config_from_text(r.get_string());
  std::uint64_t fp = r.get<std::uint64_t>();
  if (fp != config_fingerprint(cfg))
    throw std::runtime_error("checkpoint fingerprint does not match its config");
  if (expected && config_fingerprint(*expected) != fp)
    throw std::runtime_error(
        "checkpoint config fingerprint mismatch: trained with \"" + cfg.name +
        "\", requested \"" + expected->name + "\"");
  LoadedCheckpoint<S> out;
  out.step = int(r.get<std::uint32_t>());
  bool ddi = r.get<std::uint8_t>() != 0;

  auto n_syms = r.get<std::uint32_t>();
  std::vector<std::string> syms(n_syms);
  for (auto& s : syms) s = r.get_string();

  out.model = std::make_unique<PortaSpeech<S>>(cfg, PhonemeVocab(syms));
  Mat<S> mean(1, 80), stddev(1, 80);
  r.read(mean.data(), sizeof(S) * 80);
  r.read(stddev.data(), sizeof(S) * 80);
  out.model->set_mel_stats(mean, stddev);
  if (ddi) out.model->postnet().mark_initialized();

  auto params = out.model->params().all();
  auto n_params = r.get<std::uint64_t>();
  if (n_params != params.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (auto* p : params) {
    std::string name = r.get_string();
    auto rows = r.get<std::uint32_t>();
    auto cols = r.get<std::uint32_t>();
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols())
      throw std::runtime_error("checkpoint parameter layout mismatch at " +
                               p->name);
    r.read(p->value.data(), sizeof(S) * std::size_t(p->value.size()));
  }
  out.has_opt = r.get<std::uint8_t>() != 0;
  if (out.has_opt) {
    out.opt.t = r.get<std::int64_t>();
    for (auto* p : params) {
      Mat<S> m(p->value.rows(), p->value.cols());
      Mat<S> v(p->value.rows(), p->value.cols());
      r.read(m.data(), sizeof(S) * std::size_t(m.size()));
      r.read(v.data(), sizeof(S) * std::size_t(v.size()));
      out.opt.m.push_back(std::move(m));
      out.opt.v.push_back(std::move(v));
    }
  }
  return out;
}

// ---- training driver ----

template <class S>
class Trainer {
 public:
  Trainer(PortaSpeech<S>& model, TrainConfig tc)
      : model_(model), tc_(std::move(tc)), rng_(tc_.seed) {
    tc_.validate();
    opt_ = Adam<S>(model_.params(), tc_);
  }

  int step() const { return step_; }
  AdamState<S>& opt_state() { return opt_.state(); }
  void restore(const AdamState<S>& st, int step) {
    opt_.state() = st;
    step_ = step;
  }

  // Corpus statistics + post-net actnorm initialization. Must run once
  // before train_step on a fresh model.
  void prepare(const std::vector<LoadedUtterance>& data) {
    if (data.empty()) throw std::invalid_argument("prepare: no utterances");
    // per-channel mel statistics in double
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(80), sq = Eigen::ArrayXd::Zero(80);
    std::int64_t n = 0;
    for (const auto& u : data) {
      for (Eigen::Index i = 0; i < u.mel.rows(); ++i) {
        sum += u.mel.row(i).transpose().cast<double>().array();
        sq += u.mel.row(i).transpose().cast<double>().array().square();
      }
      n += u.mel.rows();
    }
    Eigen::ArrayXd mean = sum / double(n);
    Eigen::ArrayXd stddev = ((sq / double(n)) - mean.square()).max(1e-12).sqrt();
    Mat<S> m(1, 80), s(1, 80);
    for (int c = 0; c < 80; ++c) {
      m(0, c) = static_cast<S>(mean(c));
      s(0, c) = static_cast<S>(std::max(stddev(c), 1e-3));
    }
    model_.set_mel_stats(m, s);

    // data-dependent actnorm init on deterministic (posterior-mean) passes
    std::vector<Mat<S>> mels, conds;
    nn::RunCtx eval{false, nullptr};
    for (const auto& u : data) {
      ad::Tape<S> t;
      Mat<S> mel_n = model_.normalize_mel(u.mel);
      auto enc = model_.encoder().encode(t, u.seq, u.word_durations, eval);
      auto q = model_.vg().encode_posterior(t, t.constant(mel_n), enc.features);
      ad::Var<S> coarse = model_.vg().decode(t, q.mu, enc.features);
      ad::Var<S> cond = ad::concat_cols(enc.features, coarse);
      mels.push_back(mel_n);
      conds.push_back(cond.val());
    }
    model_.postnet().data_dependent_init(mels, conds);
  }

  LossBreakdown train_step(const std::vector<const LoadedUtterance*>& batch) {
    if (!model_.postnet().initialized())
      throw std::logic_error("train_step before prepare()");
    ++step_;
    double kl_w = kl_weight_at(step_, tc_.kl_anneal_steps);
    ad::Tape<S> t;
    model_.params().zero_grad();
    auto losses = compute_losses(t, model_, batch, kl_w, rng_, true);
    if (losses.values.total > 1e4) {
      std::ostringstream os;
      os << "training diverged at step " << step_ << ": total="
         << losses.values.total << " l_dur=" << losses.values.l_dur
         << " l_vg=" << losses.values.l_vg << " l_kl=" << losses.values.l_kl
         << " l_pn=" << losses.values.l_pn;
      throw std::runtime_error(os.str());
    }
    t.backward(losses.total);
    double lr = tc_.lr_scale *
                lr_at_step(step_, tc_.warmup_steps, model_.config().hidden_size);
    opt_.step(model_.params(), lr);
    return losses.values;
  }

  // Full loop over a dataset with deterministic round-robin batches. Returns
  // the loss history (one entry per step). checkpoint_dir may be empty.
  std::vector<LossBreakdown> fit(const std::vector<LoadedUtterance>& data,
                                 std::ostream* log = nullptr,
                                 const std::string& checkpoint_dir = "") {
    if (!model_.postnet().initialized()) prepare(data);
    std::vector<LossBreakdown> history;
    std::size_t cursor = 0;
    while (step_ < tc_.max_steps) {
      std::vector<const LoadedUtterance*> batch;
      for (int b = 0; b < tc_.batch_size; ++b) {
        batch.push_back(&data[cursor]);
        cursor = (cursor + 1) % data.size();
      }
      LossBreakdown lb = train_step(batch);
      history.push_back(lb);
      if (log)
        *log << "step=" << step_ << " lr=" << std::setprecision(6)
             << tc_.lr_scale * lr_at_step(step_, tc_.warmup_steps,
                                          model_.config().hidden_size)
             << " l_dur=" << lb.l_dur << " l_vg=" << lb.l_vg
             << " l_kl=" << lb.l_kl << " l_pn=" << lb.l_pn
             << " kl_w=" << lb.kl_weight << " total=" << lb.total << "\n";
      if (!checkpoint_dir.empty() &&
          (step_ % tc_.checkpoint_interval == 0 || step_ == tc_.max_steps))
        save_checkpoint(checkpoint_dir + "/step" + std::to_string(step_) +
                            ".ckpt",
                        model_, &opt_.state(), step_);
    }
    return history;
  }

 private:
  PortaSpeech<S>& model_;
  TrainConfig tc_;
  Adam<S> opt_;
  std::mt19937_64 rng_;
  int step_ = 0;
};

}  // namespace ps
