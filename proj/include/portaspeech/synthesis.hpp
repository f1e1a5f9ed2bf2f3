// End-to-end inference: text -> linguistic features -> prior sample through
// the inverse flow -> coarse mel -> post-net sample, with word-duration
// overrides, temperature controls and an optional external vocoder hook.

#pragma once

#include "portaspeech/model.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace ps {

struct SynthesisRequest {
  std::string phoneme_text;
  std::uint64_t seed = 0;
  double temperature = 0.8;        // post-net latent std
  double prior_temperature = 1.0;  // VG prior latent std
  std::map<int, int> duration_overrides;  // word index -> frames
};

struct SynthesisResult {
  MelSpectrogram mel;         // fine-grained output
  MelSpectrogram coarse_mel;  // VG decoder output
  Mat<float> attention;       // T x P soft alignment
  std::vector<int> used_word_durations;
  std::vector<int> frame_word_ids;
};

template <class S>
SynthesisResult synthesize(PortaSpeech<S>& model, const SynthesisRequest& req) {
  if (!(req.temperature >= 0) || !std::isfinite(req.temperature) ||
      !(req.prior_temperature >= 0) || !std::isfinite(req.prior_temperature))
    throw std::invalid_argument("temperatures must be finite and >= 0");
  PhonemeSequence seq = parse_phoneme_text(req.phoneme_text, model.vocab());
  for (const auto& [w, frames] : req.duration_overrides) {
    if (w < 0 || w >= seq.word_count)
      throw std::invalid_argument("duration override for non-existent word " +
                                  std::to_string(w));
    if (frames < 1)
      throw std::invalid_argument("duration override must be >= 1 frame");
  }
  nn::RunCtx eval{false, nullptr};

  // predicted word durations, then overrides, then padding to a multiple
  // of 4 absorbed by the final word (same policy as the corpus loader)
  std::vector<int> durs;
  {
    ad::Tape<S> t;
    auto enc = model.encoder().encode(t, seq, std::nullopt, eval);
    durs = enc.used_word_durations;
  }
  for (const auto& [w, frames] : req.duration_overrides)
    durs[std::size_t(w)] = frames;
  int total = 0;
  for (int d : durs) total += d;
  durs.back() += (4 - total % 4) % 4;

  ad::Tape<S> t;
  auto enc = model.encoder().encode(t, seq, durs, eval);
  Eigen::Index T = enc.features.rows();

  std::mt19937_64 rng(req.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat<S> z0(T / 4, model.vg().latent_size());
  for (Eigen::Index i = 0; i < z0.size(); ++i)
    z0.data()[i] = static_cast<S>(req.prior_temperature * normal(rng));

  ad::Var<S> pooled = avg_pool4(enc.features);
  ad::Var<S> z = model.vg().flow().inverse(t, t.constant(z0), pooled);
  ad::Var<S> coarse = model.vg().decode(t, z, enc.features);
  ad::Var<S> cond = ad::concat_cols(enc.features, coarse);
  Mat<S> fine = model.postnet().sample(cond.val(),
                                       static_cast<S>(req.temperature), rng);

  SynthesisResult out;
  out.mel.frames = model.denormalize_mel(fine);
  out.coarse_mel.frames = model.denormalize_mel(coarse.val());
  out.attention = enc.attention.template cast<float>();
  out.used_word_durations = enc.used_word_durations;
  out.frame_word_ids = enc.frame_word_ids;
  return out;
}

// One synthesis per (temperature, seed) pair, e.g. the sweep
// temperatures {0.2, 0.4, 0.6, 0.8, 1.0} x several seeds.
struct GridEntry {
  double temperature;
  std::uint64_t seed;
  SynthesisResult result;
};

template <class S>
std::vector<GridEntry> sample_grid(PortaSpeech<S>& model,
                                   const SynthesisRequest& base,
                                   const std::vector<double>& temperatures,
                                   const std::vector<std::uint64_t>& seeds) {
  if (temperatures.empty() || seeds.empty())
    throw std::invalid_argument("sample_grid: empty sweep");
  std::vector<GridEntry> out;
  for (double temp : temperatures)
    for (std::uint64_t seed : seeds) {
      SynthesisRequest req = base;
      req.temperature = temp;
      req.seed = seed;
      out.push_back({temp, seed, synthesize(model, req)});
    }
  return out;
}

// Shell out to an external vocoder; the mel file must already exist so the
// artifact survives a vocoder failure. Returns the vocoder's exit code.
inline int vocode(const std::string& mel_path, const std::string& vocoder_cmd) {
  if (vocoder_cmd.empty())
    throw std::runtime_error(
        "no vocoder configured: pass --vocoder CMD, where CMD receives the "
        "mel file path as its last argument (e.g. a HiFi-GAN wrapper script)");
  if (!std::filesystem::exists(mel_path))
    throw std::runtime_error("mel file missing before vocoder call: " +
                             mel_path);
  std::string full = vocoder_cmd + " " + mel_path;
  int status = std::system(full.c_str());
  if (status == -1)
    throw std::runtime_error("failed to launch vocoder: " + full);
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return 128;
}

}  // namespace ps
