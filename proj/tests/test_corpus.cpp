#include "portaspeech/corpus.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <random>

using namespace ps;

namespace {
const PhonemeVocab& vocab() {
  static PhonemeVocab v = PhonemeVocab::default_vocab();
  return v;
}
}  // namespace

TEST_CASE("parse_phoneme_text splits words at separators") {
  auto seq = parse_phoneme_text("HH AE1 Z | N EH1 V ER0", vocab());
  REQUIRE(seq.length() == 7);
  REQUIRE(seq.word_ids == std::vector<int>{0, 0, 0, 1, 1, 1, 1});
  REQUIRE(seq.word_count == 2);

  auto one = parse_phoneme_text("AH0", vocab());
  REQUIRE(one.length() == 1);
  REQUIRE(one.word_ids == std::vector<int>{0});
  REQUIRE(one.word_count == 1);
}

TEST_CASE("SIL is an ordinary word") {
  auto seq = parse_phoneme_text("AA1 | SIL | B", vocab());
  REQUIRE(seq.word_count == 3);
  REQUIRE(seq.tokens[1] == vocab().sil_id());
  REQUIRE(seq.word_ids == std::vector<int>{0, 1, 2});
}

TEST_CASE("parse errors") {
  REQUIRE_THROWS_AS(parse_phoneme_text("HH | | Z", vocab()), ParseError);
  REQUIRE_THROWS_AS(parse_phoneme_text("", vocab()), ParseError);
  REQUIRE_THROWS_AS(parse_phoneme_text("HH Z |", vocab()), ParseError);
  REQUIRE_THROWS_AS(parse_phoneme_text("| HH", vocab()), ParseError);
  REQUIRE_THROWS_WITH(parse_phoneme_text("HH QQX", vocab()),
                      Catch::Matchers::ContainsSubstring("QQX"));
}

TEST_CASE("parse and serialize are mutually inverse on random sequences") {
  std::mt19937_64 rng(5);
  for (int it = 0; it < 200; ++it) {
    PhonemeSequence seq;
    int n_words = std::uniform_int_distribution<int>(1, 6)(rng);
    for (int w = 0; w < n_words; ++w) {
      int n_ph = std::uniform_int_distribution<int>(1, 5)(rng);
      for (int p = 0; p < n_ph; ++p) {
        seq.tokens.push_back(
            std::uniform_int_distribution<int>(1, vocab().size() - 1)(rng));
        seq.word_ids.push_back(w);
      }
    }
    seq.word_count = n_words;
    std::string text = serialize_phoneme_text(seq, vocab());
    auto back = parse_phoneme_text(text, vocab());
    REQUIRE(back.tokens == seq.tokens);
    REQUIRE(back.word_ids == seq.word_ids);
    REQUIRE(serialize_phoneme_text(back, vocab()) == text);
  }
}

TEST_CASE("mel binary format round trip is bit exact") {
  std::mt19937_64 rng(9);
  MelSpectrogram mel;
  mel.frames.resize(13, kNMels);
  std::uniform_real_distribution<float> d(-10.f, 3.f);
  for (Eigen::Index i = 0; i < mel.frames.size(); ++i)
    mel.frames.data()[i] = d(rng);
  std::string path = "/tmp/ps_test_roundtrip.mel1";
  save_mel(mel, path);
  auto back = load_mel(path);
  REQUIRE(back.frames.rows() == 13);
  REQUIRE(std::memcmp(back.frames.data(), mel.frames.data(),
                      sizeof(float) * mel.frames.size()) == 0);
  std::remove(path.c_str());
}

TEST_CASE("mel format errors") {
  std::string path = "/tmp/ps_test_badmel.mel1";
  {  // truncated payload
    std::ofstream f(path, std::ios::binary);
    f.write("MEL1", 4);
    std::uint32_t nf = 10, nm = 80;
    f.write(reinterpret_cast<char*>(&nf), 4);
    f.write(reinterpret_cast<char*>(&nm), 4);
    float x = 0;
    f.write(reinterpret_cast<char*>(&x), 4);
  }
  REQUIRE_THROWS_AS(load_mel(path), FormatError);
  {  // wrong mel count in header
    std::ofstream f(path, std::ios::binary);
    f.write("MEL1", 4);
    std::uint32_t nf = 1, nm = 81;
    f.write(reinterpret_cast<char*>(&nf), 4);
    f.write(reinterpret_cast<char*>(&nm), 4);
  }
  REQUIRE_THROWS_AS(load_mel(path), FormatError);
  {  // bad magic
    std::ofstream f(path, std::ios::binary);
    f.write("XXXX", 4);
  }
  REQUIRE_THROWS_AS(load_mel(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("extract_mel frame count and silence floor") {
  std::vector<float> second(22050, 0.0f);
  auto mel = extract_mel(second);
  REQUIRE(mel.frames.rows() == 22050 / kHop + 1);  // 87 under our centering
  REQUIRE(mel.frames.cols() == 80);
  float floor = std::log(kMelFloor);
  REQUIRE(mel.frames.minCoeff() == Catch::Approx(floor));
  REQUIRE(mel.frames.maxCoeff() == Catch::Approx(floor));
}

TEST_CASE("extract_mel rejects wrong sample rates and is deterministic") {
  std::vector<float> tone(22050);
  for (std::size_t i = 0; i < tone.size(); ++i)
    tone[i] = 0.5f * std::sin(2.0f * float(M_PI) * 220.0f * float(i) / 22050.0f);
  REQUIRE_THROWS_AS(extract_mel(tone, 16000), FormatError);
  auto a = extract_mel(tone);
  auto b = extract_mel(tone);
  REQUIRE(std::memcmp(a.frames.data(), b.frames.data(),
                      sizeof(float) * a.frames.size()) == 0);
  REQUIRE(a.frames.allFinite());
  // a 220 Hz tone is not silence
  REQUIRE(a.frames.maxCoeff() > std::log(kMelFloor) + 1.0f);
}

TEST_CASE("toy corpus is deterministic and duration-consistent") {
  auto a = make_toy_corpus(0, 16);
  auto b = make_toy_corpus(0, 16);
  REQUIRE(a.manifest.records.size() == 16);
  for (std::size_t i = 0; i < 16; ++i) {
    const auto& ra = a.manifest.records[i];
    const auto& rb = b.manifest.records[i];
    REQUIRE(ra.id == rb.id);
    REQUIRE(ra.phoneme_text == rb.phoneme_text);
    REQUIRE(*ra.word_durations == *rb.word_durations);
    REQUIRE(a.mels[i].frames == b.mels[i].frames);
    int sum = 0;
    for (int d : *ra.word_durations) sum += d;
    REQUIRE(sum == a.mels[i].frames.rows());
    auto seq = parse_phoneme_text(ra.phoneme_text, a.manifest.phoneme_vocab);
    REQUIRE(static_cast<int>(ra.word_durations->size()) == seq.word_count);
  }
  auto c = make_toy_corpus(1, 8);
  bool differs = false;
  for (std::size_t i = 0; i < 8; ++i)
    if (c.manifest.records[i].phoneme_text != a.manifest.records[i].phoneme_text)
      differs = true;
  REQUIRE(differs);
}

TEST_CASE("toy corpus with max_words=1 is single-word") {
  auto tc = make_toy_corpus(3, 10, 1);
  for (const auto& r : tc.manifest.records) {
    auto seq = parse_phoneme_text(r.phoneme_text, tc.manifest.phoneme_vocab);
    REQUIRE(seq.word_count == 1);
  }
}

TEST_CASE("padding policy: multiple of 4, absorbed by the final word") {
  auto tc = make_toy_corpus(4, 24);
  auto loaded = prepare_toy(tc);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const auto& u = loaded[i];
    REQUIRE(u.mel.rows() % 4 == 0);
    int sum = 0;
    for (int d : u.word_durations) sum += d;
    REQUIRE(sum == u.mel.rows());
    const auto& raw = tc.mels[i].frames;
    REQUIRE(u.mel.topRows(raw.rows()) == raw);
    for (Eigen::Index t = raw.rows(); t < u.mel.rows(); ++t)
      REQUIRE(u.mel.row(t) == raw.row(raw.rows() - 1));
    REQUIRE(u.word_durations.size() == tc.manifest.records[i].word_durations->size());
  }
}

TEST_CASE("manifest save/load round trip through files") {
  auto tc = make_toy_corpus(7, 5);
  std::string dir = "/tmp/ps_test_corpus_dir";
  std::filesystem::remove_all(dir);
  save_toy_corpus(tc, dir);
  auto m = load_manifest(dir + "/manifest.tsv");
  REQUIRE(m.records.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    REQUIRE(m.records[i].id == tc.manifest.records[i].id);
    REQUIRE(*m.records[i].word_durations == *tc.manifest.records[i].word_durations);
    auto u = prepare_utterance(m.records[i], m.phoneme_vocab);
    REQUIRE(u.mel.rows() % 4 == 0);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("manifest rejects duplicates and bad duration counts") {
  std::string path = "/tmp/ps_test_manifest.tsv";
  {
    std::ofstream f(path);
    f << "a\tHH AE1 Z\tmel=/nope.mel1\t3,4\n";  // 2 durations, 1 word
  }
  REQUIRE_THROWS_AS(load_manifest(path), FormatError);
  {
    std::ofstream f(path);
    f << "a\tHH\tmel=/nope.mel1\t3\n";
    f << "a\tHH\tmel=/nope.mel1\t3\n";
  }
  REQUIRE_THROWS_AS(load_manifest(path), FormatError);
  std::remove(path.c_str());
}
