// Dataset handling: phoneme text parsing, mel-spectrogram extraction and
// binary format, manifest files and the deterministic toy corpus.

#pragma once

#include "portaspeech/tape.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace ps {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- audio / mel constants (fixed by the artifact contract) ----
inline constexpr int kSampleRate = 22050;
inline constexpr int kHop = 256;
inline constexpr int kWin = 1024;
inline constexpr int kNMels = 80;
inline constexpr float kMelFloor = 1e-5f;

// ---- phoneme vocabulary ----

class PhonemeVocab {
 public:
  PhonemeVocab() = default;
  explicit PhonemeVocab(std::vector<std::string> symbols)
      : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i)
      index_[symbols_[i]] = static_cast<int>(i);
    if (symbols_.size() != index_.size())
      throw FormatError("vocabulary has duplicate symbols");
  }

  static PhonemeVocab default_vocab() {
    std::vector<std::string> syms = {"<pad>", "SIL"};
    const char* vowels[] = {"AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER",
                            "EY", "IH", "IY", "OW", "OY", "UH", "UW"};
    const char* consonants[] = {"B",  "CH", "D",  "DH", "F", "G",  "HH", "JH",
                                "K",  "L",  "M",  "N",  "NG", "P", "R",  "S",
                                "SH", "T",  "TH", "V",  "W",  "Y", "Z",  "ZH"};
    for (const char* v : vowels)
      for (int s = 0; s < 3; ++s) syms.push_back(std::string(v) + char('0' + s));
    for (const char* c : consonants) syms.push_back(c);
    return PhonemeVocab(std::move(syms));
  }

  int lookup(const std::string& sym) const {
    auto it = index_.find(sym);
    if (it == index_.end())
      throw ParseError("unknown phoneme: \"" + sym + "\"");
    return it->second;
  }
  const std::string& symbol(int id) const { return symbols_.at(id); }
  int size() const { return static_cast<int>(symbols_.size()); }
  int sil_id() const { return lookup("SIL"); }
  const std::vector<std::string>& symbols() const { return symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> index_;
};

// ---- phoneme sequences ----

struct PhonemeSequence {
  std::vector<int> tokens;    // vocab indices, length P
  std::vector<int> word_ids;  // non-decreasing, unit steps, starts at 0
  int word_count = 0;

  int length() const { return static_cast<int>(tokens.size()); }
};

// "HH AE1 Z | N EH1 V ER0" -> tokens + word ids. "|" separates words and is
// consumed; empty words are a parse error.
inline PhonemeSequence parse_phoneme_text(const std::string& text,
                                          const PhonemeVocab& vocab) {
  PhonemeSequence seq;
  std::istringstream is(text);
  std::string tok;
  int word = 0;
  bool word_has_tokens = false;
  bool any = false;
  while (is >> tok) {
    any = true;
    if (tok == "|") {
      if (!word_has_tokens)
        throw ParseError("empty word before \"|\" in: " + text);
      ++word;
      word_has_tokens = false;
      continue;
    }
    seq.tokens.push_back(vocab.lookup(tok));
    seq.word_ids.push_back(word);
    word_has_tokens = true;
  }
  if (!any || !word_has_tokens)
    throw ParseError("phoneme text empty or ends with separator: " + text);
  seq.word_count = word + 1;
  return seq;
}

// Inverse of parse_phoneme_text on the valid domain.
inline std::string serialize_phoneme_text(const PhonemeSequence& seq,
                                          const PhonemeVocab& vocab) {
  std::ostringstream os;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    if (i > 0) {
      os << (seq.word_ids[i] != seq.word_ids[i - 1] ? " | " : " ");
    }
    os << vocab.symbol(seq.tokens[i]);
  }
  return os.str();
}

// ---- mel spectrograms ----

struct MelSpectrogram {
  Mat<float> frames;  // T x 80 log-mel magnitudes
  int sample_rate = kSampleRate;
  int hop = kHop;
  int win = kWin;

  Eigen::Index n_frames() const { return frames.rows(); }
};

inline void save_mel(const MelSpectrogram& mel, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write mel file: " + path);
  f.write("MEL1", 4);
  std::uint32_t nf = static_cast<std::uint32_t>(mel.frames.rows());
  std::uint32_t nm = static_cast<std::uint32_t>(mel.frames.cols());
  f.write(reinterpret_cast<const char*>(&nf), 4);
  f.write(reinterpret_cast<const char*>(&nm), 4);
  f.write(reinterpret_cast<const char*>(mel.frames.data()),
          static_cast<std::streamsize>(sizeof(float) * mel.frames.size()));
}

inline MelSpectrogram load_mel(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open mel file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MEL1", 4) != 0)
    throw FormatError("bad mel magic in " + path);
  std::uint32_t nf = 0, nm = 0;
  f.read(reinterpret_cast<char*>(&nf), 4);
  f.read(reinterpret_cast<char*>(&nm), 4);
  if (!f || nm != kNMels)
    throw FormatError("mel header requires n_mels=80 in " + path);
  if (nf < 1) throw FormatError("mel file has no frames: " + path);
  MelSpectrogram mel;
  mel.frames.resize(nf, nm);
  f.read(reinterpret_cast<char*>(mel.frames.data()),
         static_cast<std::streamsize>(sizeof(float) * mel.frames.size()));
  if (!f) throw FormatError("truncated mel file: " + path);
  return mel;
}

// ---- WAV input (PCM16 mono) ----

inline std::vector<float> load_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open wav: " + path);
  auto rd_u32 = [&f]() {
    std::uint32_t v;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  auto rd_u16 = [&f]() {
    std::uint16_t v;
    f.read(reinterpret_cast<char*>(&v), 2);
    return v;
  };
  char tag[4];
  f.read(tag, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0) throw FormatError("not a RIFF file");
  rd_u32();
  f.read(tag, 4);
  if (std::memcmp(tag, "WAVE", 4) != 0) throw FormatError("not a WAVE file");
  int channels = 0, rate = 0, bits = 0;
  std::vector<float> samples;
  while (f.read(tag, 4)) {
    std::uint32_t sz = rd_u32();
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      std::uint16_t fmt = rd_u16();
      channels = rd_u16();
      rate = static_cast<int>(rd_u32());
      rd_u32();
      rd_u16();
      bits = rd_u16();
      if (sz > 16) f.seekg(sz - 16, std::ios::cur);
      if (fmt != 1 || bits != 16) throw FormatError("wav must be PCM16");
      if (channels != 1) throw FormatError("wav must be mono");
      if (rate != kSampleRate)
        throw FormatError("wav sample rate " + std::to_string(rate) +
                          " != required 22050 (no silent resampling)");
    } else if (std::memcmp(tag, "data", 4) == 0) {
      std::size_t n = sz / 2;
      samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::int16_t s;
        f.read(reinterpret_cast<char*>(&s), 2);
        samples[i] = static_cast<float>(s) / 32768.0f;
      }
      break;
    } else {
      f.seekg(sz + (sz & 1), std::ios::cur);
    }
  }
  if (channels == 0) throw FormatError("wav missing fmt chunk");
  return samples;
}

// ---- STFT + mel filterbank ----

namespace detail {
inline const Mat<float>& mel_filterbank() {
  static Mat<float> fb = [] {
    const int n_fft_bins = kWin / 2 + 1;
    const double fmin = 0.0, fmax = 8000.0;
    auto hz_to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
    auto mel_to_hz = [](double m) {
      return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
    };
    std::vector<double> pts(kNMels + 2);
    double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
    for (int i = 0; i < kNMels + 2; ++i)
      pts[i] = mel_to_hz(mlo + (mhi - mlo) * i / (kNMels + 1));
    Mat<float> fb = Mat<float>::Zero(n_fft_bins, kNMels);
    for (int m = 0; m < kNMels; ++m) {
      double lo = pts[m], ce = pts[m + 1], hi = pts[m + 2];
      for (int b = 0; b < n_fft_bins; ++b) {
        double freq = double(b) * kSampleRate / kWin;
        double w = 0.0;
        if (freq > lo && freq < ce) w = (freq - lo) / (ce - lo);
        else if (freq >= ce && freq < hi) w = (hi - freq) / (hi - ce);
        fb(b, m) = static_cast<float>(w);
      }
    }
    return fb;
  }();
  return fb;
}
}  // namespace detail

// Center-padded STFT (reflect padding of win/2 samples on both sides), Hann
// window, so T = floor(num_samples / hop) + 1.
inline MelSpectrogram extract_mel(const std::vector<float>& samples,
                                  int sample_rate = kSampleRate) {
  if (sample_rate != kSampleRate)
    throw FormatError("sample rate " + std::to_string(sample_rate) +
                      " != required 22050 (no silent resampling)");
  if (samples.empty()) throw FormatError("empty audio");
  const int half = kWin / 2;
  const Eigen::Index n = static_cast<Eigen::Index>(samples.size());
  auto sample_at = [&](Eigen::Index i) -> float {
    // reflect without repeating the edge sample
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    if (i < 0 || i >= n) return 0.0f;  // very short inputs
    return samples[static_cast<std::size_t>(i)];
  };
  std::vector<float> window(kWin);
  for (int i = 0; i < kWin; ++i)
    window[i] = 0.5f * (1.0f - std::cos(2.0f * float(M_PI) * i / (kWin - 1)));

  const Eigen::Index T = n / kHop + 1;
  Eigen::FFT<float> fft;
  const auto& fb = detail::mel_filterbank();
  MelSpectrogram mel;
  mel.frames.resize(T, kNMels);
  std::vector<std::complex<float>> in(kWin), out(kWin);
  for (Eigen::Index t = 0; t < T; ++t) {
    Eigen::Index start = t * kHop - half;
    for (int i = 0; i < kWin; ++i)
      in[i] = sample_at(start + i) * window[i];
    fft.fwd(out, in);
    Eigen::RowVectorXf mag(kWin / 2 + 1);
    for (int b = 0; b <= kWin / 2; ++b) mag(b) = std::abs(out[b]);
    Eigen::RowVectorXf melrow = mag * fb;
    for (int m = 0; m < kNMels; ++m)
      mel.frames(t, m) = std::log(std::max(melrow(m), kMelFloor));
  }
  return mel;
}

// ---- manifests ----

struct UtteranceRecord {
  std::string id;
  std::string phoneme_text;
  std::optional<std::string> wav_path;
  std::optional<std::string> mel_path;
  std::optional<std::vector<int>> word_durations;  // frames per word
};

struct DatasetManifest {
  std::vector<UtteranceRecord> records;
  PhonemeVocab phoneme_vocab;
  std::string split = "train";
};

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write manifest: " + path);
  for (const auto& r : m.records) {
    f << r.id << '\t' << r.phoneme_text << '\t';
    if (r.mel_path) f << "mel=" << *r.mel_path;
    else if (r.wav_path) f << "wav=" << *r.wav_path;
    else throw FormatError("record " + r.id + " has neither mel nor wav path");
    f << '\t';
    if (r.word_durations) {
      for (std::size_t i = 0; i < r.word_durations->size(); ++i)
        f << (i ? "," : "") << (*r.word_durations)[i];
    }
    f << '\n';
  }
}

inline DatasetManifest load_manifest(const std::string& path,
                                     PhonemeVocab vocab = PhonemeVocab::default_vocab()) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open manifest: " + path);
  DatasetManifest m;
  m.phoneme_vocab = std::move(vocab);
  std::string line;
  std::map<std::string, int> seen;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      auto tab = line.find('\t', pos);
      fields.push_back(line.substr(pos, tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (fields.size() < 3)
      throw FormatError("manifest line needs >=3 tab fields: " + line);
    UtteranceRecord r;
    r.id = fields[0];
    if (seen.count(r.id)) throw FormatError("duplicate utterance id: " + r.id);
    seen[r.id] = 1;
    r.phoneme_text = fields[1];
    PhonemeSequence seq = parse_phoneme_text(r.phoneme_text, m.phoneme_vocab);
    if (fields[2].rfind("mel=", 0) == 0) r.mel_path = fields[2].substr(4);
    else if (fields[2].rfind("wav=", 0) == 0) r.wav_path = fields[2].substr(4);
    else throw FormatError("bad path field: " + fields[2]);
    if (fields.size() > 3 && !fields[3].empty()) {
      std::vector<int> durs;
      std::istringstream ds(fields[3]);
      std::string d;
      while (std::getline(ds, d, ',')) durs.push_back(std::stoi(d));
      if (static_cast<int>(durs.size()) != seq.word_count)
        throw FormatError("record " + r.id + ": " + std::to_string(durs.size()) +
                          " durations for " + std::to_string(seq.word_count) +
                          " words");
      for (int dur : durs)
        if (dur < 0) throw FormatError("negative duration in record " + r.id);
      r.word_durations = std::move(durs);
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

// ---- load-time padding policy ----
//
// The variational generator downsamples time by 4, so frames are padded by
// edge replication to a multiple of 4 and the final word absorbs the padding.
inline void pad_to_multiple_of_4(Mat<float>& mel, std::vector<int>& word_durs) {
  Eigen::Index T = mel.rows();
  Eigen::Index pad = (4 - T % 4) % 4;
  if (pad == 0) return;
  Mat<float> out(T + pad, mel.cols());
  out.topRows(T) = mel;
  for (Eigen::Index i = 0; i < pad; ++i) out.row(T + i) = mel.row(T - 1);
  mel = std::move(out);
  if (!word_durs.empty()) word_durs.back() += static_cast<int>(pad);
}

// A record made ready for training: parsed phonemes, padded mel, durations
// consistent with the padded frame count.
struct LoadedUtterance {
  std::string id;
  PhonemeSequence seq;
  Mat<float> mel;               // T x 80, T % 4 == 0
  std::vector<int> word_durations;
};

inline LoadedUtterance prepare_utterance(const UtteranceRecord& r,
                                         const PhonemeVocab& vocab) {
  LoadedUtterance u;
  u.id = r.id;
  u.seq = parse_phoneme_text(r.phoneme_text, vocab);
  if (r.mel_path) {
    u.mel = load_mel(*r.mel_path).frames;
  } else if (r.wav_path) {
    u.mel = extract_mel(load_wav(*r.wav_path)).frames;
  } else {
    throw FormatError("record " + r.id + " has no mel or wav source");
  }
  if (!r.word_durations)
    throw FormatError("record " + r.id + " has no ground-truth durations");
  u.word_durations = *r.word_durations;
  int sum = 0;
  for (int d : u.word_durations) sum += d;
  if (sum != u.mel.rows())
    throw FormatError("record " + r.id + ": durations sum " +
                      std::to_string(sum) + " != frames " +
                      std::to_string(u.mel.rows()));
  pad_to_multiple_of_4(u.mel, u.word_durations);
  return u;
}

// ---- toy corpus ----

struct ToyCorpus {
  DatasetManifest manifest;
  std::vector<MelSpectrogram> mels;  // parallel to manifest.records
};

// Deterministic synthetic corpus: each word gets a pitch-like base channel
// from its phonemes and the mel is a smooth stack of harmonic bumps, so the
// text fully determines the spectrogram and small models can overfit it.
inline ToyCorpus make_toy_corpus(std::uint64_t seed, int n_utterances,
                                 int max_words = 4) {
  if (n_utterances < 1) throw std::invalid_argument("n_utterances must be >= 1");
  ToyCorpus tc;
  tc.manifest.phoneme_vocab = PhonemeVocab::default_vocab();
  const auto& vocab = tc.manifest.phoneme_vocab;
  std::mt19937_64 rng(seed);
  std::vector<int> usable;
  for (int i = 2; i < vocab.size(); ++i) usable.push_back(i);  // skip pad, SIL

  for (int u = 0; u < n_utterances; ++u) {
    std::uniform_int_distribution<int> n_words_d(1, max_words);
    int n_words = n_words_d(rng);
    std::vector<std::vector<int>> words(n_words);
    std::vector<int> durs(n_words);
    for (int w = 0; w < n_words; ++w) {
      bool sil = n_words > 2 && w > 0 && w + 1 < n_words &&
                 std::uniform_int_distribution<int>(0, 4)(rng) == 0;
      if (sil) {
        words[w] = {vocab.sil_id()};
        durs[w] = std::uniform_int_distribution<int>(4, 10)(rng);
      } else {
        int n_ph = std::uniform_int_distribution<int>(1, 4)(rng);
        for (int p = 0; p < n_ph; ++p)
          words[w].push_back(
              usable[std::uniform_int_distribution<std::size_t>(
                  0, usable.size() - 1)(rng)]);
        durs[w] = std::uniform_int_distribution<int>(8, 20)(rng);
      }
    }
    int T = 0;
    for (int d : durs) T += d;

    MelSpectrogram mel;
    mel.frames = Mat<float>::Constant(T, kNMels, -4.0f);
    int t0 = 0;
    for (int w = 0; w < n_words; ++w) {
      // word-dependent base channel and amplitude, fixed by the phonemes
      std::uint64_t h = 1469598103934665603ULL;
      for (int ph : words[w]) {
        h ^= static_cast<std::uint64_t>(ph);
        h *= 1099511628211ULL;
      }
      bool is_sil = words[w].size() == 1 && words[w][0] == vocab.sil_id();
      float base = 5.0f + float(h % 25);
      float amp = is_sil ? 0.0f : 2.0f + float((h >> 8) % 100) / 50.0f;
      for (int t = 0; t < durs[w]; ++t) {
        float phase = durs[w] > 1 ? float(t) / float(durs[w] - 1) : 0.0f;
        float env = 0.6f + 0.4f * std::sin(float(M_PI) * phase);
        for (int harm = 1; harm <= 3; ++harm) {
          float center = base * float(harm);
          if (center >= kNMels + 4) break;
          float a = amp * env / float(harm);
          for (int m = 0; m < kNMels; ++m) {
            float d = (float(m) - center) / 2.0f;
            mel.frames(t0 + t, m) += a * std::exp(-d * d);
          }
        }
      }
      t0 += durs[w];
    }

    UtteranceRecord r;
    std::ostringstream id;
    id << "toy" << std::setw(4) << std::setfill('0') << u;
    r.id = id.str();
    PhonemeSequence seq;
    for (int w = 0; w < n_words; ++w)
      for (int ph : words[w]) {
        seq.tokens.push_back(ph);
        seq.word_ids.push_back(w);
      }
    seq.word_count = n_words;
    r.phoneme_text = serialize_phoneme_text(seq, vocab);
    r.word_durations = durs;
    tc.manifest.records.push_back(std::move(r));
    tc.mels.push_back(std::move(mel));
  }
  return tc;
}

// Write mel files + manifest under dir; fills in mel paths.
inline void save_toy_corpus(ToyCorpus& tc, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < tc.manifest.records.size(); ++i) {
    std::string p = dir + "/" + tc.manifest.records[i].id + ".mel1";
    save_mel(tc.mels[i], p);
    tc.manifest.records[i].mel_path = p;
  }
  save_manifest(tc.manifest, dir + "/manifest.tsv");
}

// In-memory preparation of a toy corpus (no files involved).
inline std::vector<LoadedUtterance> prepare_toy(const ToyCorpus& tc) {
  std::vector<LoadedUtterance> out;
  for (std::size_t i = 0; i < tc.manifest.records.size(); ++i) {
    const auto& r = tc.manifest.records[i];
    LoadedUtterance u;
    u.id = r.id;
    u.seq = parse_phoneme_text(r.phoneme_text, tc.manifest.phoneme_vocab);
    u.mel = tc.mels[i].frames;
    u.word_durations = *r.word_durations;
    pad_to_multiple_of_4(u.mel, u.word_durations);
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace ps
