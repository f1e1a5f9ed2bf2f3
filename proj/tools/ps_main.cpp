// Command-line front end: synthesis, training, parameter reports, oracle
// verification and toy-corpus generation.

#include "portaspeech/diagnostics.hpp"
#include "portaspeech/plot.hpp"
#include "portaspeech/synthesis.hpp"
#include "portaspeech/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

namespace {

ps::ModelConfig config_from_arg(const std::string& arg) {
  try {
    return ps::preset_by_name(arg);
  } catch (const std::invalid_argument&) {
    return ps::load_config(arg);
  }
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoull(tok));
  return out;
}

void emit_outputs(const ps::SynthesisResult& res, const std::string& mel_out,
                  const std::string& plot_out, const std::string& attn_out) {
  if (!mel_out.empty()) {
    ps::save_mel(res.mel, mel_out);
    std::cout << "wrote " << mel_out << " (" << res.mel.frames.rows()
              << " frames)\n";
  }
  if (!plot_out.empty()) {
    ps::plot_mel(res.mel.frames, plot_out);
    std::cout << "wrote " << plot_out << "\n";
  }
  if (!attn_out.empty()) {
    ps::plot_attention(res.attention, attn_out);
    std::cout << "wrote " << attn_out << "\n";
  }
}

int run_synth(const std::string& ckpt, const ps::SynthesisRequest& req,
              const std::string& mel_out, const std::string& plot_out,
              const std::string& attn_out, const std::string& vocoder,
              const std::string& sweep_temps, const std::string& sweep_seeds) {
  auto loaded = ps::load_checkpoint<float>(ckpt);
  auto& model = *loaded.model;

  if (!sweep_temps.empty() || !sweep_seeds.empty()) {
    std::vector<double> temps = sweep_temps.empty()
                                    ? std::vector<double>{req.temperature}
                                    : parse_doubles(sweep_temps);
    std::vector<std::uint64_t> seeds = sweep_seeds.empty()
                                           ? std::vector<std::uint64_t>{req.seed}
                                           : parse_seeds(sweep_seeds);
    auto grid = ps::sample_grid(model, req, temps, seeds);
    std::string stem = mel_out.empty() ? std::string("synth") : mel_out;
    if (stem.size() > 5 && stem.substr(stem.size() - 5) == ".mel1")
      stem = stem.substr(0, stem.size() - 5);
    for (const auto& e : grid) {
      std::ostringstream tag;
      tag << stem << "_T" << e.temperature << "_S" << e.seed;
      ps::save_mel(e.result.mel, tag.str() + ".mel1");
      if (!plot_out.empty()) ps::plot_mel(e.result.mel.frames, tag.str() + ".png");
      std::cout << "wrote " << tag.str() << ".mel1 ("
                << e.result.mel.frames.rows() << " frames)\n";
    }
    return 0;
  }

  ps::SynthesisResult res = ps::synthesize(model, req);
  std::cout << "frames: " << res.mel.frames.rows() << "\nword durations:";
  for (int d : res.used_word_durations) std::cout << ' ' << d;
  std::cout << "\n";
  std::string out = mel_out.empty() ? "synth.mel1" : mel_out;
  emit_outputs(res, out, plot_out, attn_out);
  if (!vocoder.empty()) return ps::vocode(out, vocoder);
  return 0;
}

int run_train(const std::string& config_arg, const std::string& manifest_path,
              const std::string& out_dir, ps::TrainConfig tc) {
  ps::ModelConfig cfg = config_from_arg(config_arg);
  ps::DatasetManifest manifest = ps::load_manifest(manifest_path);
  std::vector<ps::LoadedUtterance> data;
  for (const auto& r : manifest.records)
    data.push_back(ps::prepare_utterance(r, manifest.phoneme_vocab));
  std::cout << "loaded " << data.size() << " utterances\n";

  std::filesystem::create_directories(out_dir);
  ps::PortaSpeech<float> model(cfg, manifest.phoneme_vocab, tc.seed);
  ps::Trainer<float> trainer(model, tc);
  trainer.fit(data, &std::cout, out_dir);
  std::string final_path = out_dir + "/final.ckpt";
  ps::save_checkpoint(final_path, model, &trainer.opt_state(), trainer.step());
  std::cout << "wrote " << final_path << "\n";
  return 0;
}

// Oracle suite against a trained checkpoint plus fresh toy flows. Prints
// one line per check; nonzero exit if any fails.
int run_verify(const std::string& ckpt) {
  int failures = 0;
  auto report = [&](const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "ok   " : "FAIL ") << name << "  " << detail << "\n";
    if (!ok) ++failures;
  };
  auto loaded = ps::load_checkpoint<float>(ckpt);
  auto& model = *loaded.model;
  const auto& cfg = model.config();
  std::mt19937_64 rng(12345);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto randn = [&](int r, int c) {
    ps::Mat<float> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = float(nd(rng));
    return m;
  };

  {  // post-net round trip on the loaded parameters
    float worst = 0;
    for (int it = 0; it < 20; ++it) {
      ps::Mat<float> mel = randn(16, 80);
      ps::Mat<float> cond = randn(16, cfg.hidden_size + 80);
      ps::ad::Tape<float> t;
      auto out = model.postnet().forward(t, t.constant(mel), t.constant(cond));
      worst = std::max(worst, (model.postnet().inverse(out.z.val(), cond) - mel)
                                  .cwiseAbs()
                                  .maxCoeff());
    }
    report("postnet_round_trip", worst < 1e-3f,
           "max_abs_err=" + std::to_string(worst));
  }
  {  // VP-flow round trip and density transport on the loaded parameters
    float worst = 0;
    double worst_lp = 0;
    for (int it = 0; it < 20; ++it) {
      ps::Mat<float> z = randn(8, cfg.latent_size);
      ps::Mat<float> cond = randn(8, cfg.hidden_size);
      ps::ad::Tape<float> t;
      auto fwd = model.vg().flow().forward(t, t.constant(z), t.constant(cond));
      auto back = model.vg().flow().inverse(t, fwd, t.constant(cond));
      worst = std::max(worst, (back.val() - z).cwiseAbs().maxCoeff());
      auto inv = model.vg().flow().inverse(t, t.constant(z), t.constant(cond));
      double lp = model.vg().prior_log_prob(t, inv, t.constant(cond)).scalar();
      double closed = -0.5 * double(z.cast<double>().array().square().sum()) -
                      0.5 * ps::kLog2Pi * double(z.size());
      worst_lp = std::max(worst_lp, std::abs(lp - closed));
    }
    report("vp_flow_round_trip", worst < 1e-3f,
           "max_abs_err=" + std::to_string(worst));
    report("vp_flow_density_transport", worst_lp < 1e-1,
           "max_abs_err=" + std::to_string(worst_lp));
  }
  {  // fresh toy: analytic vs numerical post-net log-det
    ps::ModelConfig toy = ps::preset_micro();
    toy.hidden_size = 8;
    toy.pn_flow_steps = 2;
    toy.pn_wn_layers = 1;
    toy.pn_wn_channels = 8;
    toy.pn_groups = 1;
    ps::nn::ParamStore<double> store;
    ps::nn::Initializer<double> init(7);
    ps::PostNet<double> pn(store, init, toy, 4);
    for (auto* p : store.all())
      if (p->name.find(".end.") != std::string::npos ||
          p->name.find(".actnorm.") != std::string::npos)
        for (Eigen::Index i = 0; i < p->value.size(); ++i)
          p->value.data()[i] = 0.3 * nd(rng);
    ps::Mat<double> cond(4, 12), mel(4, 4);
    for (Eigen::Index i = 0; i < cond.size(); ++i) cond.data()[i] = nd(rng);
    for (Eigen::Index i = 0; i < mel.size(); ++i) mel.data()[i] = nd(rng);
    ps::ad::Tape<double> t;
    double analytic =
        pn.forward(t, t.constant(mel), t.constant(cond)).log_det.scalar();
    auto map = [&](const Eigen::VectorXd& x) {
      ps::Mat<double> m(4, 4);
      std::copy(x.data(), x.data() + 16, m.data());
      ps::ad::Tape<double> tt;
      auto out = pn.forward(tt, tt.constant(m), tt.constant(cond));
      Eigen::VectorXd y(16);
      std::copy(out.z.val().data(), out.z.val().data() + 16, y.data());
      return y;
    };
    Eigen::VectorXd x0(16);
    std::copy(mel.data(), mel.data() + 16, x0.data());
    double numeric = ps::numerical_logdet(map, x0, 1e-4);
    double rel = std::abs(analytic - numeric) / std::max(std::abs(numeric), 0.1);
    report("postnet_logdet_oracle", rel < 1e-3, "rel_err=" + std::to_string(rel));
  }
  {  // KL estimator vs closed form (identity flow)
    ps::ModelConfig toy = ps::preset_micro();
    toy.latent_size = 4;
    ps::nn::ParamStore<double> store;
    ps::nn::Initializer<double> init(9);
    ps::VariationalGenerator<double> vg(store, init, toy);
    ps::ad::Tape<double> t;
    ps::Mat<double> mu(2, 4), ls(2, 4), cond(2, toy.hidden_size);
    for (Eigen::Index i = 0; i < mu.size(); ++i) mu.data()[i] = nd(rng);
    for (Eigen::Index i = 0; i < ls.size(); ++i) ls.data()[i] = 0.4 * nd(rng);
    for (Eigen::Index i = 0; i < cond.size(); ++i) cond.data()[i] = nd(rng);
    ps::PosteriorParams<double> q{t.constant(mu), t.constant(ls)};
    Eigen::VectorXd m1(8), s1(8);
    for (int i = 0; i < 8; ++i) {
      m1(i) = mu.data()[i];
      s1(i) = std::exp(ls.data()[i]);
    }
    double oracle = ps::gaussian_kl_oracle(m1, s1, Eigen::VectorXd::Zero(8),
                                           Eigen::VectorXd::Ones(8));
    double acc = 0;
    for (int i = 0; i < 10000; ++i) {
      ps::Mat<double> noise(2, 4);
      for (Eigen::Index j = 0; j < 8; ++j) noise.data()[j] = nd(rng);
      acc += vg.kl_estimate(t, q, t.constant(cond), noise).scalar();
    }
    double rel = std::abs(acc / 10000.0 - oracle) / oracle;
    report("kl_estimator_oracle", rel < 0.02, "rel_err=" + std::to_string(rel));
  }
  {  // determinism of synthesis
    ps::SynthesisRequest req;
    req.phoneme_text = "HH AH0 | L OW1";
    req.seed = 99;
    auto a = ps::synthesize(model, req);
    auto b = ps::synthesize(model, req);
    bool same = a.mel.frames.rows() == b.mel.frames.rows() &&
                std::memcmp(a.mel.frames.data(), b.mel.frames.data(),
                            sizeof(float) * a.mel.frames.size()) == 0;
    report("synthesis_determinism", same,
           same ? "bit-identical" : "outputs differ");
  }
  std::cout << (failures == 0 ? "all checks passed\n"
                              : std::to_string(failures) + " check(s) failed\n");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PortaSpeech text-to-spectrogram toolkit"};
  app.require_subcommand(1);

  // count-params
  std::string config_arg = "normal";
  auto* count = app.add_subcommand("count-params",
                                   "Report per-module parameter counts");
  count->add_option("--config", config_arg, "preset name or config file");

  // synth
  std::string ckpt, text, mel_out, plot_out, attn_out, vocoder;
  std::string sweep_temps, sweep_seeds;
  std::vector<std::string> overrides;
  ps::SynthesisRequest req;
  auto* synth = app.add_subcommand("synth", "Synthesize a mel spectrogram");
  synth->add_option("--ckpt", ckpt, "checkpoint path")->required();
  synth
      ->add_option("--text", text,
                   "phonemes with | word boundaries, e.g. \"HH AH0 | L OW1\"")
      ->required();
  synth->add_option("--seed", req.seed, "random seed");
  synth->add_option("--temperature", req.temperature,
                    "post-net sampling temperature (default 0.8)");
  synth->add_option("--prior-temperature", req.prior_temperature,
                    "VG prior sampling temperature (default 1.0)");
  synth->add_option("--override-duration", overrides,
                    "IDX=FRAMES word duration override (repeatable)");
  synth->add_option("--out", mel_out, "output mel file (default synth.mel1)");
  synth->add_option("--plot", plot_out, "mel heat-map PNG");
  synth->add_option("--plot-attention", attn_out, "alignment PNG");
  synth->add_option("--vocoder", vocoder, "external vocoder command");
  synth->add_option("--sweep-temperatures", sweep_temps,
                    "comma list: emit one mel per (temperature, seed)");
  synth->add_option("--sweep-seeds", sweep_seeds, "comma list of seeds");

  // train
  std::string manifest_path, out_dir = "runs";
  ps::TrainConfig tc;
  bool kl_anneal_set = false;
  auto* train = app.add_subcommand("train", "Train on a manifest");
  train->add_option("--config", config_arg, "preset name or config file");
  train->add_option("--manifest", manifest_path, "dataset manifest TSV")
      ->required();
  train->add_option("--out-dir", out_dir, "checkpoint directory");
  train->add_option("--steps", tc.max_steps, "training steps");
  train->add_option("--batch-size", tc.batch_size, "utterances per step");
  train->add_option("--warmup", tc.warmup_steps, "LR warmup steps");
  auto* anneal_opt = train->add_option("--kl-anneal", tc.kl_anneal_steps,
                                       "KL annealing steps (default 10%)");
  train->add_option("--seed", tc.seed, "random seed");
  train->add_option("--checkpoint-interval", tc.checkpoint_interval,
                    "steps between checkpoints");
  train->add_option("--lr-scale", tc.lr_scale, "learning-rate multiplier");

  // verify
  std::string verify_ckpt;
  auto* verify = app.add_subcommand("verify", "Run the oracle suite");
  verify->add_option("--ckpt", verify_ckpt, "checkpoint path")->required();

  // make-toy
  std::uint64_t toy_seed = 0;
  int toy_count = 16, toy_max_words = 4;
  std::string toy_out = "toy";
  auto* toy = app.add_subcommand("make-toy", "Generate the synthetic corpus");
  toy->add_option("--seed", toy_seed, "generator seed");
  toy->add_option("--out", toy_out, "output directory")->required();
  toy->add_option("--count", toy_count, "number of utterances");
  toy->add_option("--max-words", toy_max_words, "max words per utterance");

  CLI11_PARSE(app, argc, argv);

  try {
    if (count->parsed()) {
      std::cout << ps::count_parameters(config_from_arg(config_arg)).to_string();
      return 0;
    }
    if (synth->parsed()) {
      req.phoneme_text = text;
      for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("bad --override-duration (want IDX=FRAMES): " + ov);
        req.duration_overrides[std::stoi(ov.substr(0, eq))] =
            std::stoi(ov.substr(eq + 1));
      }
      return run_synth(ckpt, req, mel_out, plot_out, attn_out, vocoder,
                       sweep_temps, sweep_seeds);
    }
    if (train->parsed()) {
      kl_anneal_set = anneal_opt->count() > 0;
      if (!kl_anneal_set) tc.kl_anneal_steps = std::max(1, tc.max_steps / 10);
      return run_train(config_arg, manifest_path, out_dir, tc);
    }
    if (verify->parsed()) return run_verify(verify_ckpt);
    if (toy->parsed()) {
      auto corpus = ps::make_toy_corpus(toy_seed, toy_count, toy_max_words);
      ps::save_toy_corpus(corpus, toy_out);
      std::cout << "wrote " << toy_count << " utterances under " << toy_out
                << "\n";
      return 0;
    }
  } catch (const ps::ParseError& e) {
    std::cerr << "error: " << e.what()
              << "\nhint: input must be phoneme symbols separated by spaces "
                 "with | between words (raw English text is not accepted)\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
