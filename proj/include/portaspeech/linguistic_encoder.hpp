// Linguistic encoder with mixture alignment: phoneme/word Transformer
// encoders, word-level pooling, duration predictor with word-level
// aggregation, length regulation and masked word-to-phoneme attention with
// fractional positional encodings.

#pragma once

#include "portaspeech/config.hpp"
#include "portaspeech/corpus.hpp"
#include "portaspeech/nn.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace ps {

using ad::Var;

// ---- pure alignment helpers (shared by model and property tests) ----

// Word lengths L_w from phoneme word ids.
inline std::vector<int> word_lengths(const std::vector<int>& word_ids,
                                     int word_count) {
  std::vector<int> len(static_cast<std::size_t>(word_count), 0);
  for (int w : word_ids) ++len[static_cast<std::size_t>(w)];
  return len;
}

// Frame -> word labels for the expanded sequence; T = sum of durations.
inline std::vector<int> expand_frame_word_ids(const std::vector<int>& durations) {
  std::vector<int> out;
  for (std::size_t w = 0; w < durations.size(); ++w)
    out.insert(out.end(), static_cast<std::size_t>(durations[w]),
               static_cast<int>(w));
  return out;
}

// mask[t,p] = frame t and phoneme p belong to the same word.
inline MaskMat build_w2p_mask(const std::vector<int>& word_ids,
                              const std::vector<int>& frame_word_ids) {
  MaskMat m(static_cast<Eigen::Index>(frame_word_ids.size()),
            static_cast<Eigen::Index>(word_ids.size()));
  for (Eigen::Index t = 0; t < m.rows(); ++t)
    for (Eigen::Index p = 0; p < m.cols(); ++p)
      m(t, p) = frame_word_ids[static_cast<std::size_t>(t)] ==
                        word_ids[static_cast<std::size_t>(p)]
                    ? 1
                    : 0;
  return m;
}

// Fractional position coefficient per element: position within its word
// divided by the word length, restarting at every word boundary.
inline std::vector<double> fractional_positions(const std::vector<int>& seg_ids) {
  std::vector<int> pos(seg_ids.size());
  std::vector<int> count;
  for (std::size_t i = 0; i < seg_ids.size(); ++i) {
    if (static_cast<std::size_t>(seg_ids[i]) >= count.size())
      count.resize(static_cast<std::size_t>(seg_ids[i]) + 1, 0);
    pos[i] = count[static_cast<std::size_t>(seg_ids[i])]++;
  }
  std::vector<double> coef(seg_ids.size());
  for (std::size_t i = 0; i < seg_ids.size(); ++i)
    coef[i] = double(pos[i]) / double(count[static_cast<std::size_t>(seg_ids[i])]);
  return coef;
}

// Round-half-up with a 1-frame minimum per word.
inline std::vector<int> round_word_durations(const std::vector<double>& durs) {
  std::vector<int> out(durs.size());
  for (std::size_t i = 0; i < durs.size(); ++i)
    out[i] = std::max(1, static_cast<int>(std::floor(durs[i] + 0.5)));
  return out;
}

// Sum non-negative per-phoneme durations into per-word totals.
inline std::vector<double> aggregate_word_durations(
    const std::vector<double>& phoneme_durs, const std::vector<int>& word_ids,
    int word_count) {
  std::vector<double> out(static_cast<std::size_t>(word_count), 0.0);
  for (std::size_t p = 0; p < phoneme_durs.size(); ++p)
    out[static_cast<std::size_t>(word_ids[p])] += phoneme_durs[p];
  return out;
}

// ---- encoder module ----

template <class S>
struct LinguisticEncoderOut {
  Var<S> features;        // H_L, T x d
  Var<S> log_durations;   // predictor outputs, P x 1 (log(1 + frames) scale)
  Mat<S> attention;       // T x P soft alignment (diagnostics)
  std::vector<int> frame_word_ids;
  std::vector<int> used_word_durations;
};

template <class S>
class LinguisticEncoder {
 public:
  LinguisticEncoder() = default;
  LinguisticEncoder(nn::ParamStore<S>& ps, nn::Initializer<S>& init,
                    const ModelConfig& cfg, int vocab_size)
      : d_(cfg.hidden_size) {
    emb_ = nn::Embedding<S>(ps, init, "linguistic_encoder.embedding", vocab_size,
                            d_);
    for (int l = 0; l < cfg.enc_layers; ++l) {
      ph_blocks_.emplace_back(ps, init,
                              "linguistic_encoder.phoneme.block" + std::to_string(l),
                              d_, cfg.enc_filter, cfg.enc_kernel, cfg.n_heads,
                              cfg.rel_window);
      ph_blocks_.back().dropout_rate = static_cast<S>(cfg.dropout);
      w_blocks_.emplace_back(ps, init,
                             "linguistic_encoder.word.block" + std::to_string(l),
                             d_, cfg.enc_filter, cfg.enc_kernel, cfg.n_heads,
                             cfg.rel_window);
      w_blocks_.back().dropout_rate = static_cast<S>(cfg.dropout);
    }
    w2p_ = nn::MultiHeadAttention<S>(ps, init, "linguistic_encoder.w2p", d_,
                                     cfg.n_heads);
    e_kv_ = &ps.create("linguistic_encoder.pos_kv", 1, d_);
    e_q_ = &ps.create("linguistic_encoder.pos_q", 1, d_);
    init.normal(e_kv_->value, 0.02);
    init.normal(e_q_->value, 0.02);

    dp_conv1_ = nn::Conv1d<S>(ps, init, "duration_predictor.conv1", d_, d_,
                              cfg.enc_kernel);
    dp_ln1_ = nn::LayerNorm<S>(ps, "duration_predictor.ln1", d_);
    dp_conv2_ = nn::Conv1d<S>(ps, init, "duration_predictor.conv2", d_, d_,
                              cfg.enc_kernel);
    dp_ln2_ = nn::LayerNorm<S>(ps, "duration_predictor.ln2", d_);
    dp_out_ = nn::Linear<S>(ps, init, "duration_predictor.out", d_, 1);
    dropout_ = static_cast<S>(cfg.dropout);
  }

  int hidden_size() const { return d_; }

  Var<S> encode_phonemes(ad::Tape<S>& t, const PhonemeSequence& seq,
                         const nn::RunCtx& ctx) const {
    Var<S> h = emb_.forward(t, seq.tokens);
    for (const auto& b : ph_blocks_) h = b.forward(t, h, ctx);
    return h;
  }

  Var<S> predict_log_durations(ad::Tape<S>& t, Var<S> h_p,
                               const nn::RunCtx& ctx) const {
    Var<S> h = dp_ln1_.forward(t, ad::relu(dp_conv1_.forward(t, h_p)));
    h = nn::maybe_dropout(h, dropout_, ctx);
    h = dp_ln2_.forward(t, ad::relu(dp_conv2_.forward(t, h)));
    h = nn::maybe_dropout(h, dropout_, ctx);
    return dp_out_.forward(t, h);  // P x 1
  }

  // Full encode. If gt_word_durations is given (training) they drive the
  // expansion; otherwise predicted durations are exponentiated, aggregated
  // per word and rounded.
  LinguisticEncoderOut<S> encode(
      ad::Tape<S>& t, const PhonemeSequence& seq,
      const std::optional<std::vector<int>>& gt_word_durations,
      const nn::RunCtx& ctx) const {
    Var<S> h_p = encode_phonemes(t, seq, ctx);
    Var<S> log_durs = predict_log_durations(t, h_p, ctx);

    std::vector<int> word_durs;
    if (gt_word_durations) {
      if (static_cast<int>(gt_word_durations->size()) != seq.word_count)
        throw std::invalid_argument("word duration count mismatch");
      word_durs = *gt_word_durations;
    } else {
      std::vector<double> ph(static_cast<std::size_t>(seq.length()));
      for (int p = 0; p < seq.length(); ++p)
        ph[static_cast<std::size_t>(p)] = std::max(
            0.0, std::exp(static_cast<double>(log_durs.val()(p, 0))) - 1.0);
      word_durs = round_word_durations(
          aggregate_word_durations(ph, seq.word_ids, seq.word_count));
    }
    int total = 0;
    for (int d : word_durs) total += d;
    if (total == 0)
      throw std::invalid_argument("length regulation: all word durations zero");

    // word-level pooling + word encoder
    Var<S> w_hidden = ad::segment_mean_rows(h_p, seq.word_ids, seq.word_count);
    for (const auto& b : w_blocks_) w_hidden = b.forward(t, w_hidden, ctx);

    // length regulation
    std::vector<int> frame_word_ids = expand_frame_word_ids(word_durs);
    Var<S> h_w = ad::gather_rows(w_hidden, frame_word_ids);

    // fractional positional encodings, resetting at word boundaries
    Var<S> h_p_pos = add_positional(t, h_p, seq.word_ids, *e_kv_);
    Var<S> h_w_pos = add_positional(t, h_w, frame_word_ids, *e_q_);

    MaskMat mask = build_w2p_mask(seq.word_ids, frame_word_ids);
    auto [attn_out, attn_w] = w2p_.forward(t, h_w_pos, h_p_pos, &mask);
    Var<S> h_l = ad::add(h_w_pos, attn_out);

    LinguisticEncoderOut<S> out;
    out.features = h_l;
    out.log_durations = log_durs;
    out.attention = attn_w;
    out.frame_word_ids = std::move(frame_word_ids);
    out.used_word_durations = std::move(word_durs);
    return out;
  }

 private:
  Var<S> add_positional(ad::Tape<S>& t, Var<S> h,
                        const std::vector<int>& seg_ids, Param<S>& emb) const {
    std::vector<double> coef = fractional_positions(seg_ids);
    Mat<S> c(static_cast<Eigen::Index>(coef.size()), 1);
    for (std::size_t i = 0; i < coef.size(); ++i)
      c(static_cast<Eigen::Index>(i), 0) = static_cast<S>(coef[i]);
    Var<S> pos = ad::matmul(t.constant(c), t.param(emb));
    return ad::add(h, pos);
  }

  int d_ = 0;
  nn::Embedding<S> emb_;
  std::vector<nn::FFTBlock<S>> ph_blocks_, w_blocks_;
  nn::MultiHeadAttention<S> w2p_;
  Param<S>* e_kv_ = nullptr;
  Param<S>* e_q_ = nullptr;
  nn::Conv1d<S> dp_conv1_, dp_conv2_;
  nn::LayerNorm<S> dp_ln1_, dp_ln2_;
  nn::Linear<S> dp_out_;
  S dropout_ = S(0.1);
};

}  // namespace ps
