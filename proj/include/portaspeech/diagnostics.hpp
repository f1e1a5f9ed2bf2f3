// Independent numerical oracles and reporting: dense-Jacobian log-det
// verification, closed-form Gaussian KL, parameter counting, duration
// error metrics.

#pragma once

#include "portaspeech/model.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ps {

struct ParamReport {
  std::int64_t linguistic_encoder = 0;
  std::int64_t duration_predictor = 0;
  std::int64_t postnet = 0;
  std::int64_t vg_decoder = 0;
  std::int64_t vp_flow = 0;
  std::int64_t vg_encoder_excluded = 0;  // not part of the headline total
  std::int64_t total = 0;

  std::string to_string() const {
    auto fmt = [](std::int64_t n) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(2) << double(n) / 1e6 << "M";
      return os.str();
    };
    std::ostringstream os;
    os << "linguistic_encoder  " << fmt(linguistic_encoder) << "\n"
       << "duration_predictor  " << fmt(duration_predictor) << "\n"
       << "postnet             " << fmt(postnet) << "\n"
       << "vg_decoder          " << fmt(vg_decoder) << "\n"
       << "vp_flow             " << fmt(vp_flow) << "\n"
       << "total               " << fmt(total) << "\n"
       << "(vg_encoder, excluded from total: " << fmt(vg_encoder_excluded)
       << ")\n";
    return os.str();
  }
};

// Counts trainable parameters of a freshly constructed model. The VG
// encoder is excluded from the headline total (inference never uses it).
template <class S>
ParamReport count_parameters(PortaSpeech<S>& model) {
  auto& ps = model.params();
  ParamReport r;
  r.linguistic_encoder = ps.count("linguistic_encoder.");
  r.duration_predictor = ps.count("duration_predictor.");
  r.postnet = ps.count("postnet.");
  r.vg_decoder = ps.count("vg_decoder.");
  r.vp_flow = ps.count("vp_flow.");
  r.vg_encoder_excluded = ps.count("vg_encoder.");
  r.total = r.linguistic_encoder + r.duration_predictor + r.postnet +
            r.vg_decoder + r.vp_flow;
  return r;
}

inline ParamReport count_parameters(const ModelConfig& cfg) {
  PortaSpeech<float> model(cfg, PhonemeVocab::default_vocab());
  return count_parameters(model);
}

// ---- numerical Jacobian log-det oracle ----
//
// map: flattened input -> flattened output of the same dimension. Central
// differences with the given epsilon, dense Jacobian, log|det| via LU.
inline double numerical_logdet(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& map,
    const Eigen::VectorXd& x, double epsilon = 1e-3) {
  Eigen::Index n = x.size();
  if (n > 64)
    throw std::invalid_argument("numerical_logdet: dimension > 64");
  Eigen::MatrixXd jac(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += epsilon;
    xm(j) -= epsilon;
    jac.col(j) = (map(xp) - map(xm)) / (2.0 * epsilon);
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
  double ld = 0.0;
  const auto& u = lu.matrixLU();
  for (Eigen::Index i = 0; i < n; ++i) {
    double d = std::abs(u(i, i));
    if (d < 1e-12) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac);
      throw std::runtime_error(
          "numerical_logdet: singular Jacobian, condition estimate " +
          std::to_string(svd.singularValues()(0) /
                         svd.singularValues()(n - 1)));
    }
    ld += std::log(d);
  }
  return ld;
}

// Closed-form KL(N(mu1, diag sigma1^2) || N(mu2, diag sigma2^2)).
inline double gaussian_kl_oracle(const Eigen::VectorXd& mu1,
                                 const Eigen::VectorXd& sigma1,
                                 const Eigen::VectorXd& mu2,
                                 const Eigen::VectorXd& sigma2) {
  if ((sigma1.array() <= 0).any() || (sigma2.array() <= 0).any())
    throw std::invalid_argument("gaussian_kl_oracle: non-positive sigma");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mu1.size(); ++i) {
    double r = sigma1(i) / sigma2(i);
    double m = (mu1(i) - mu2(i)) / sigma2(i);
    kl += std::log(sigma2(i) / sigma1(i)) + 0.5 * (r * r + m * m - 1.0);
  }
  return kl;
}

// ---- duration error metrics ----

struct DurationErrorReport {
  double word_level_mae_ms = 0.0;
  double sentence_level_mae_s = 0.0;
};

inline constexpr double kSecondsPerFrame = 256.0 / 22050.0;

// Per-utterance duration lists, word MAE in ms and |sum difference| in
// seconds, both averaged over utterances.
inline DurationErrorReport duration_error(
    const std::vector<std::vector<int>>& predicted,
    const std::vector<std::vector<int>>& ground_truth) {
  if (predicted.size() != ground_truth.size())
    throw std::invalid_argument("duration_error: utterance count mismatch");
  double word_ms = 0.0, sent_s = 0.0;
  for (std::size_t u = 0; u < predicted.size(); ++u) {
    if (predicted[u].size() != ground_truth[u].size())
      throw std::invalid_argument("duration_error: word count mismatch in " +
                                  std::to_string(u));
    double mae = 0.0;
    long long sp = 0, sg = 0;
    for (std::size_t w = 0; w < predicted[u].size(); ++w) {
      mae += std::abs(predicted[u][w] - ground_truth[u][w]);
      sp += predicted[u][w];
      sg += ground_truth[u][w];
    }
    word_ms += mae / double(predicted[u].size()) * kSecondsPerFrame * 1000.0;
    sent_s += std::abs(double(sp - sg)) * kSecondsPerFrame;
  }
  DurationErrorReport r;
  r.word_level_mae_ms = word_ms / double(predicted.size());
  r.sentence_level_mae_s = sent_s / double(predicted.size());
  return r;
}

}  // namespace ps
