// Model configuration: presets, key-value config files, fingerprinting.

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ps {

struct ModelConfig {
  std::string name = "normal";

  // linguistic encoder
  int phoneme_vocab_size = 0;  // 0 = filled from the vocabulary at build time
  int hidden_size = 192;
  int enc_layers = 4;
  int enc_kernel = 5;
  int enc_filter = 768;
  int n_heads = 2;
  int rel_window = 16;
  double dropout = 0.1;

  // variational generator
  int vg_enc_layers = 8;
  int vg_dec_layers = 4;
  int vg_kernel = 5;
  int vg_channels = 192;
  int latent_size = 16;
  int vp_steps = 4;
  int vp_layers = 4;
  int vp_channels = 64;
  int vp_kernel = 3;

  // post-net
  int pn_flow_steps = 12;
  int pn_groups = 3;
  int pn_wn_layers = 3;
  int pn_wn_kernel = 3;
  int pn_wn_channels = 192;
  int pn_squeeze = 2;
  double pn_temperature = 0.8;

  void validate() const {
    auto fail = [](const std::string& m) {
      throw std::invalid_argument("config: " + m);
    };
    if (hidden_size <= 0 || enc_layers <= 0 || enc_filter <= 0)
      fail("encoder sizes must be positive");
    if (hidden_size % n_heads != 0) fail("hidden_size not divisible by heads");
    if (latent_size <= 0 || latent_size % 2 != 0) fail("latent_size must be even");
    if (pn_groups < 1 || pn_groups > pn_flow_steps)
      fail("shared_groups must be in [1, flow_steps]");
    if (pn_squeeze < 1 || 80 % 1 != 0) fail("bad squeeze");
    if (vp_steps <= 0 || vp_channels <= 0) fail("vp sizes must be positive");
  }
};

inline ModelConfig preset_normal() { return ModelConfig{}; }

inline ModelConfig preset_small() {
  ModelConfig c;
  c.name = "small";
  c.hidden_size = 128;
  c.enc_layers = 3;
  c.enc_kernel = 3;
  c.enc_filter = 512;
  c.vg_dec_layers = 3;
  c.vg_kernel = 3;
  c.vg_channels = 128;
  c.vp_steps = 3;
  c.vp_channels = 32;
  c.pn_flow_steps = 8;
  c.pn_groups = 2;
  c.pn_wn_channels = 128;
  return c;
}

// Desk-scale configuration for fast CPU training in tests.
inline ModelConfig preset_micro() {
  ModelConfig c;
  c.name = "micro";
  c.hidden_size = 32;
  c.enc_layers = 2;
  c.enc_kernel = 3;
  c.enc_filter = 64;
  c.rel_window = 4;
  c.dropout = 0.0;
  c.vg_enc_layers = 2;
  c.vg_dec_layers = 2;
  c.vg_kernel = 3;
  c.vg_channels = 32;
  c.latent_size = 8;
  c.vp_steps = 2;
  c.vp_layers = 2;
  c.vp_channels = 16;
  c.pn_flow_steps = 4;
  c.pn_groups = 2;
  c.pn_wn_layers = 2;
  c.pn_wn_channels = 32;
  return c;
}

inline ModelConfig preset_by_name(const std::string& name) {
  if (name == "normal") return preset_normal();
  if (name == "small") return preset_small();
  if (name == "micro") return preset_micro();
  throw std::invalid_argument("unknown preset: " + name);
}

namespace detail {
inline std::map<std::string, std::string> config_kv(const ModelConfig& c) {
  std::map<std::string, std::string> kv;
  auto put = [&](const std::string& k, auto v) {
    std::ostringstream os;
    os << v;
    kv[k] = os.str();
  };
  put("preset", c.name);
  put("phoneme_vocab_size", c.phoneme_vocab_size);
  put("hidden_size", c.hidden_size);
  put("encoder_layers", c.enc_layers);
  put("conv1d_kernel", c.enc_kernel);
  put("conv1d_filter_size", c.enc_filter);
  put("attention_heads", c.n_heads);
  put("relative_window", c.rel_window);
  put("dropout", c.dropout);
  put("vg_encoder_layers", c.vg_enc_layers);
  put("vg_decoder_layers", c.vg_dec_layers);
  put("vg_kernel", c.vg_kernel);
  put("vg_channel_size", c.vg_channels);
  put("latent_size", c.latent_size);
  put("vp_flow_steps", c.vp_steps);
  put("vp_flow_layers", c.vp_layers);
  put("vp_flow_channel_size", c.vp_channels);
  put("vp_flow_kernel", c.vp_kernel);
  put("flow_steps", c.pn_flow_steps);
  put("shared_groups", c.pn_groups);
  put("wavenet_layers", c.pn_wn_layers);
  put("wavenet_kernel", c.pn_wn_kernel);
  put("wavenet_channel_size", c.pn_wn_channels);
  put("squeeze", c.pn_squeeze);
  put("temperature", c.pn_temperature);
  return kv;
}
}  // namespace detail

// Canonical text form: sorted "key = value" lines. Used for files and for
// the checkpoint fingerprint.
inline std::string config_to_text(const ModelConfig& c) {
  std::ostringstream os;
  for (const auto& [k, v] : detail::config_kv(c)) os << k << " = " << v << "\n";
  return os.str();
}

inline ModelConfig config_from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  auto trim = [](std::string s) {
    auto a = s.find_first_not_of(" \t\r");
    auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: bad line: " + line);
    std::string k = trim(line.substr(0, eq));
    std::string v = trim(line.substr(eq + 1));
    if (k == "preset") {
      c = preset_by_name(v);
      continue;  // later keys override the preset
    }
    auto as_int = [&] { return std::stoi(v); };
    if (k == "phoneme_vocab_size") c.phoneme_vocab_size = as_int();
    else if (k == "hidden_size") c.hidden_size = as_int();
    else if (k == "encoder_layers") c.enc_layers = as_int();
    else if (k == "conv1d_kernel") c.enc_kernel = as_int();
    else if (k == "conv1d_filter_size") c.enc_filter = as_int();
    else if (k == "attention_heads") c.n_heads = as_int();
    else if (k == "relative_window") c.rel_window = as_int();
    else if (k == "dropout") c.dropout = std::stod(v);
    else if (k == "vg_encoder_layers") c.vg_enc_layers = as_int();
    else if (k == "vg_decoder_layers") c.vg_dec_layers = as_int();
    else if (k == "vg_kernel") c.vg_kernel = as_int();
    else if (k == "vg_channel_size") c.vg_channels = as_int();
    else if (k == "latent_size") c.latent_size = as_int();
    else if (k == "vp_flow_steps") c.vp_steps = as_int();
    else if (k == "vp_flow_layers") c.vp_layers = as_int();
    else if (k == "vp_flow_channel_size") c.vp_channels = as_int();
    else if (k == "vp_flow_kernel") c.vp_kernel = as_int();
    else if (k == "flow_steps") c.pn_flow_steps = as_int();
    else if (k == "shared_groups") c.pn_groups = as_int();
    else if (k == "wavenet_layers") c.pn_wn_layers = as_int();
    else if (k == "wavenet_kernel") c.pn_wn_kernel = as_int();
    else if (k == "wavenet_channel_size") c.pn_wn_channels = as_int();
    else if (k == "squeeze") c.pn_squeeze = as_int();
    else if (k == "temperature") c.pn_temperature = std::stod(v);
    else throw std::invalid_argument("config: unknown key: " + k);
  }
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  std::string text = os.str();
  // Allow bare preset names as config arguments.
  if (text.find('=') == std::string::npos && text.find('\n') == std::string::npos)
    return preset_by_name(text);
  return config_from_text(text);
}

// FNV-1a over the canonical config text.
inline std::uint64_t config_fingerprint(const ModelConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : config_to_text(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace ps
