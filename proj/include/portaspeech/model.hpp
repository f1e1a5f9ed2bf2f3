// Full model assembly: linguistic encoder + variational generator +
// flow post-net sharing one parameter store.

#pragma once

#include "portaspeech/config.hpp"
#include "portaspeech/corpus.hpp"
#include "portaspeech/linguistic_encoder.hpp"
#include "portaspeech/postnet.hpp"
#include "portaspeech/variational_generator.hpp"

namespace ps {

template <class S>
class PortaSpeech {
 public:
  PortaSpeech(ModelConfig cfg, PhonemeVocab vocab, std::uint64_t seed = 1)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    if (cfg_.phoneme_vocab_size == 0) cfg_.phoneme_vocab_size = vocab_.size();
    cfg_.validate();
    nn::Initializer<S> init(seed);
    encoder_ = LinguisticEncoder<S>(store_, init, cfg_, cfg_.phoneme_vocab_size);
    vg_ = VariationalGenerator<S>(store_, init, cfg_);
    postnet_ = PostNet<S>(store_, init, cfg_);
    mel_mean_ = Mat<S>::Zero(1, 80);
    mel_std_ = Mat<S>::Ones(1, 80);
  }

  const ModelConfig& config() const { return cfg_; }
  const PhonemeVocab& vocab() const { return vocab_; }
  nn::ParamStore<S>& params() { return store_; }
  const LinguisticEncoder<S>& encoder() const { return encoder_; }
  const VariationalGenerator<S>& vg() const { return vg_; }
  PostNet<S>& postnet() { return postnet_; }
  const PostNet<S>& postnet() const { return postnet_; }

  // Corpus normalization statistics; the model operates on normalized mels.
  void set_mel_stats(const Mat<S>& mean, const Mat<S>& stddev) {
    mel_mean_ = mean;
    mel_std_ = stddev;
  }
  const Mat<S>& mel_mean() const { return mel_mean_; }
  const Mat<S>& mel_std() const { return mel_std_; }

  Mat<S> normalize_mel(const Mat<float>& mel) const {
    Mat<S> out = mel.template cast<S>();
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      out.row(i) = (out.row(i) - mel_mean_.row(0)).cwiseQuotient(mel_std_.row(0));
    return out;
  }

  Mat<float> denormalize_mel(const Mat<S>& mel) const {
    Mat<S> out = mel;
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      out.row(i) = out.row(i).cwiseProduct(mel_std_.row(0)) + mel_mean_.row(0);
    return out.template cast<float>();
  }

 private:
  ModelConfig cfg_;
  PhonemeVocab vocab_;
  nn::ParamStore<S> store_;
  LinguisticEncoder<S> encoder_;
  VariationalGenerator<S> vg_;
  PostNet<S> postnet_;
  Mat<S> mel_mean_, mel_std_;
};

}  // namespace ps
