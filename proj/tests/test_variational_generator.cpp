#include "portaspeech/variational_generator.hpp"
#include "portaspeech/diagnostics.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace ps;
namespace adn = ps::ad;

namespace {

ModelConfig tiny_cfg(int latent, int vp_steps, int vp_ch = 16, int vp_layers = 2) {
  ModelConfig c = preset_micro();
  c.latent_size = latent;
  c.vp_steps = vp_steps;
  c.vp_channels = vp_ch;
  c.vp_layers = vp_layers;
  return c;
}

template <class S>
Mat<S> randn(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<S>(d(rng));
  return m;
}

// Give the zero-initialized coupling output layers nonzero weights so the
// flow is no longer the identity-up-to-flips map it is at construction.
template <class S>
void perturb_flow_ends(nn::ParamStore<S>& store, std::mt19937_64& rng,
                       double scale = 0.3) {
  for (auto* p : store.all())
    if (p->name.rfind("vp_flow.", 0) == 0 &&
        p->name.find(".end.") != std::string::npos) {
      std::normal_distribution<double> d(0.0, scale);
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value.data()[i] = static_cast<S>(d(rng));
    }
}

}  // namespace

TEST_CASE("posterior has (T/4) x latent shape, positive sigma, determinism") {
  ModelConfig cfg = tiny_cfg(16, 2);
  nn::ParamStore<float> store;
  nn::Initializer<float> init(5);
  VariationalGenerator<float> vg(store, init, cfg);
  std::mt19937_64 rng(1);
  Mat<float> mel = randn<float>(rng, 16, 80);
  Mat<float> hl = randn<float>(rng, 16, cfg.hidden_size);

  adn::Tape<float> t;
  auto q = vg.encode_posterior(t, t.constant(mel), t.constant(hl));
  REQUIRE(q.mu.rows() == 4);
  REQUIRE(q.mu.cols() == 16);
  REQUIRE(q.log_sigma.rows() == 4);
  REQUIRE(q.log_sigma.cols() == 16);
  REQUIRE((q.log_sigma.val().array().exp() > 0).all());

  adn::Tape<float> t2;
  auto q2 = vg.encode_posterior(t2, t2.constant(mel), t2.constant(hl));
  REQUIRE(q.mu.val() == q2.mu.val());
  REQUIRE(q.log_sigma.val() == q2.log_sigma.val());

  Mat<float> bad = randn<float>(rng, 15, 80);
  adn::Tape<float> t3;
  REQUIRE_THROWS_AS(
      vg.encode_posterior(t3, t3.constant(bad),
                          t3.constant(Mat<float>(randn<float>(rng, 15, cfg.hidden_size)))),
      std::invalid_argument);
}

TEST_CASE("reparameterization: degenerate cases and empirical mean") {
  ModelConfig cfg = tiny_cfg(4, 1);
  nn::ParamStore<double> store;
  nn::Initializer<double> init(7);
  VariationalGenerator<double> vg(store, init, cfg);
  std::mt19937_64 rng(2);

  adn::Tape<double> t;
  PosteriorParams<double> q;
  Mat<double> mu = randn<double>(rng, 2, 4);
  Mat<double> ls = randn<double>(rng, 2, 4, 0.3);
  q.mu = t.constant(mu);
  q.log_sigma = t.constant(ls);

  Mat<double> zero = Mat<double>::Zero(2, 4);
  REQUIRE(vg.reparameterize(t, q, zero).val() == mu);

  PosteriorParams<double> std_q;
  std_q.mu = t.constant(zero);
  std_q.log_sigma = t.constant(zero);
  Mat<double> noise = randn<double>(rng, 2, 4);
  REQUIRE(vg.reparameterize(t, std_q, noise).val() == noise);

  // empirical mean over 10k draws lands within 3*sigma/sqrt(n) of mu
  const int n = 10000;
  Mat<double> acc = Mat<double>::Zero(2, 4);
  for (int i = 0; i < n; ++i)
    acc += vg.reparameterize(t, q, randn<double>(rng, 2, 4)).val();
  acc /= double(n);
  for (Eigen::Index i = 0; i < acc.size(); ++i) {
    double sigma = std::exp(ls.data()[i]);
    REQUIRE(std::abs(acc.data()[i] - mu.data()[i]) <
            3.0 * sigma / std::sqrt(double(n)));
  }
}

TEST_CASE("decoder upsamples by 4 and is deterministic") {
  ModelConfig cfg = tiny_cfg(16, 2);
  nn::ParamStore<float> store;
  nn::Initializer<float> init(9);
  VariationalGenerator<float> vg(store, init, cfg);
  std::mt19937_64 rng(3);
  Mat<float> z = randn<float>(rng, 4, 16);
  Mat<float> hl = randn<float>(rng, 16, cfg.hidden_size);

  adn::Tape<float> t;
  auto m1 = vg.decode(t, t.constant(z), t.constant(hl));
  REQUIRE(m1.rows() == 16);
  REQUIRE(m1.cols() == 80);
  adn::Tape<float> t2;
  auto m2 = vg.decode(t2, t2.constant(z), t2.constant(hl));
  REQUIRE(m1.val() == m2.val());

  adn::Tape<float> t3;
  REQUIRE_THROWS_AS(vg.decode(t3, t3.constant(z),
                              t3.constant(Mat<float>(randn<float>(rng, 12, cfg.hidden_size)))),
                    std::invalid_argument);
}

TEST_CASE("decoder gradient w.r.t. the latent matches finite differences") {
  ModelConfig cfg = tiny_cfg(4, 1, 8, 1);
  cfg.vg_channels = 8;
  cfg.vg_dec_layers = 1;
  nn::ParamStore<double> store;
  nn::Initializer<double> init(11);
  VariationalGenerator<double> vg(store, init, cfg);
  std::mt19937_64 rng(4);
  Param<double> z("z", 2, 4);
  z.value = randn<double>(rng, 2, 4);
  Mat<double> hl = randn<double>(rng, 8, cfg.hidden_size);
  Mat<double> target = randn<double>(rng, 8, 80);

  auto loss_fn = [&](adn::Tape<double>& t) {
    auto m = vg.decode(t, t.param(z), t.constant(hl));
    return adn::mean_all(adn::abs_(adn::sub(m, t.constant(target))));
  };
  Mat<double> analytic;
  {
    adn::Tape<double> t;
    z.zero_grad();
    auto l = loss_fn(t);
    t.backward(l);
    analytic = z.grad;
  }
  double eps = 1e-5;
  for (Eigen::Index i = 0; i < z.value.size(); ++i) {
    double keep = z.value.data()[i];
    z.value.data()[i] = keep + eps;
    adn::Tape<double> tp;
    double fp = loss_fn(tp).scalar();
    z.value.data()[i] = keep - eps;
    adn::Tape<double> tm;
    double fm = loss_fn(tm).scalar();
    z.value.data()[i] = keep;
    double fd = (fp - fm) / (2 * eps);
    double denom = std::max({std::abs(fd), std::abs(analytic.data()[i]), 1e-8});
    REQUIRE(std::abs(fd - analytic.data()[i]) / denom < 1e-2);
  }
}

TEST_CASE("flow is the pure channel flip at initialization") {
  ModelConfig cfg = tiny_cfg(8, 3);
  nn::ParamStore<float> store;
  nn::Initializer<float> init(13);
  VariationalGenerator<float> vg(store, init, cfg);
  std::mt19937_64 rng(5);
  Mat<float> z = randn<float>(rng, 6, 8);
  Mat<float> cond = randn<float>(rng, 6, cfg.hidden_size);

  adn::Tape<float> t;
  auto z0 = vg.flow().forward(t, t.constant(z), t.constant(cond));
  Mat<float> expect = z;
  for (int s = 0; s < 3; ++s)
    expect = expect.rowwise().reverse().eval();
  REQUIRE(z0.val() == expect);
}

TEST_CASE("flow round trip is exact to float tolerance") {
  ModelConfig cfg = tiny_cfg(16, 4);
  nn::ParamStore<float> store;
  nn::Initializer<float> init(15);
  VariationalGenerator<float> vg(store, init, cfg);
  std::mt19937_64 rng(6);
  perturb_flow_ends(store, rng);
  Mat<float> cond = randn<float>(rng, 8, cfg.hidden_size);

  for (int it = 0; it < 100; ++it) {
    Mat<float> z = randn<float>(rng, 8, 16);
    adn::Tape<float> t;
    auto fwd = vg.flow().forward(t, t.constant(z), t.constant(cond));
    auto back = vg.flow().inverse(t, fwd, t.constant(cond));
    REQUIRE((back.val() - z).cwiseAbs().maxCoeff() < 1e-3f);
    REQUIRE((back.val() - z).cwiseAbs().maxCoeff() < 1e-4f);  // usually exact
  }
}

TEST_CASE("flow Jacobian determinant is numerically 1") {
  std::mt19937_64 rng(7);
  // several small configurations, all must be volume preserving
  for (auto [latent, steps] : {std::pair{4, 1}, {4, 3}, {6, 2}, {2, 4}}) {
    ModelConfig cfg = tiny_cfg(latent, steps, 8, 1);
    nn::ParamStore<double> store;
    nn::Initializer<double> init(100 + latent + steps);
    VariationalGenerator<double> vg(store, init, cfg);
    perturb_flow_ends(store, rng, 0.5);
    Mat<double> cond = randn<double>(rng, 1, cfg.hidden_size);

    auto map = [&](const Eigen::VectorXd& x) {
      Mat<double> z(1, latent);
      for (int i = 0; i < latent; ++i) z(0, i) = x(i);
      adn::Tape<double> t;
      auto out = vg.flow().forward(t, t.constant(z), t.constant(cond));
      Eigen::VectorXd y(latent);
      for (int i = 0; i < latent; ++i) y(i) = out.val()(0, i);
      return y;
    };
    Eigen::VectorXd x(latent);
    for (int i = 0; i < latent; ++i)
      x(i) = std::normal_distribution<double>()(rng);
    double ld = numerical_logdet(map, x);
    CAPTURE(latent, steps);
    REQUIRE(std::abs(std::exp(ld) - 1.0) < 1e-3);
  }
}

TEST_CASE("prior log-prob equals the standard normal under the identity flow") {
  ModelConfig cfg = tiny_cfg(4, 2);
  nn::ParamStore<double> store;
  nn::Initializer<double> init(17);
  VariationalGenerator<double> vg(store, init, cfg);  // ends zero => flips only
  std::mt19937_64 rng(8);
  Mat<double> cond = randn<double>(rng, 1, cfg.hidden_size);

  adn::Tape<double> t;
  Mat<double> zero = Mat<double>::Zero(1, 4);
  double lp0 = vg.prior_log_prob(t, t.constant(zero), t.constant(cond)).scalar();
  REQUIRE(lp0 == Catch::Approx(-2.0 * kLog2Pi).epsilon(1e-9));  // ~ -3.6758

  Mat<double> cond3 = randn<double>(rng, 3, cfg.hidden_size);
  for (int it = 0; it < 50; ++it) {
    Mat<double> z = randn<double>(rng, 3, 4);
    double lp = vg.prior_log_prob(t, t.constant(z), t.constant(cond3)).scalar();
    double closed = -0.5 * z.array().square().sum() - 0.5 * kLog2Pi * 12.0;
    REQUIRE(lp == Catch::Approx(closed).margin(1e-5));
  }
}

TEST_CASE("density transport: log p(inverse(z0)) is the normal density of z0") {
  ModelConfig cfg = tiny_cfg(8, 3);
  nn::ParamStore<double> store;
  nn::Initializer<double> init(19);
  VariationalGenerator<double> vg(store, init, cfg);
  std::mt19937_64 rng(9);
  perturb_flow_ends(store, rng);
  Mat<double> cond = randn<double>(rng, 5, cfg.hidden_size);

  for (int it = 0; it < 20; ++it) {
    Mat<double> z0 = randn<double>(rng, 5, 8);
    adn::Tape<double> t;
    auto z = vg.flow().inverse(t, t.constant(z0), t.constant(cond));
    double lp = vg.prior_log_prob(t, z, t.constant(cond)).scalar();
    double closed = -0.5 * z0.array().square().sum() - 0.5 * kLog2Pi * 40.0;
    REQUIRE(lp == Catch::Approx(closed).margin(1e-4));
  }
}

TEST_CASE("KL estimator is unbiased against the closed-form Gaussian KL") {
  ModelConfig cfg = tiny_cfg(4, 2);
  nn::ParamStore<double> store;
  nn::Initializer<double> init(21);
  VariationalGenerator<double> vg(store, init, cfg);  // identity flow
  std::mt19937_64 rng(10);
  Mat<double> cond = randn<double>(rng, 2, cfg.hidden_size);

  adn::Tape<double> t;
  // q = prior => KL is 0; 10k-sample mean must be near 0
  {
    PosteriorParams<double> q;
    q.mu = t.constant(Mat<double>::Zero(2, 4));
    q.log_sigma = t.constant(Mat<double>::Zero(2, 4));
    double acc = 0;
    for (int i = 0; i < 10000; ++i)
      acc += vg.kl_estimate(t, q, t.constant(cond), randn<double>(rng, 2, 4))
                 .scalar();
    REQUIRE(std::abs(acc / 10000.0) < 0.05);
  }

  // generic diagonal Gaussian vs closed form, 2% relative at 10k samples
  Mat<double> mu = randn<double>(rng, 2, 4);
  Mat<double> ls = randn<double>(rng, 2, 4, 0.4);
  PosteriorParams<double> q;
  q.mu = t.constant(mu);
  q.log_sigma = t.constant(ls);
  Eigen::VectorXd mu1(8), s1(8), mu2 = Eigen::VectorXd::Zero(8),
                              s2 = Eigen::VectorXd::Ones(8);
  for (Eigen::Index i = 0; i < 8; ++i) {
    mu1(i) = mu.data()[i];
    s1(i) = std::exp(ls.data()[i]);
  }
  double oracle = gaussian_kl_oracle(mu1, s1, mu2, s2);

  double acc = 0;
  int above = 0, below = 0;
  std::vector<double> batch_means;
  for (int b = 0; b < 100; ++b) {
    double bm = 0;
    for (int i = 0; i < 100; ++i)
      bm += vg.kl_estimate(t, q, t.constant(cond), randn<double>(rng, 2, 4))
                .scalar();
    bm /= 100.0;
    (bm > oracle ? above : below)++;
    acc += bm;
  }
  double mean = acc / 100.0;
  REQUIRE(std::abs(mean - oracle) / oracle < 0.02);
  // batch means straddle the oracle, as an unbiased estimator must
  REQUIRE(above > 0);
  REQUIRE(below > 0);
}

TEST_CASE("encode/decode preserve the frame count for any T % 4 == 0") {
  ModelConfig cfg = tiny_cfg(8, 2);
  nn::ParamStore<float> store;
  nn::Initializer<float> init(23);
  VariationalGenerator<float> vg(store, init, cfg);
  std::mt19937_64 rng(11);
  for (int T : {4, 12, 16, 32, 60}) {
    Mat<float> mel = randn<float>(rng, T, 80);
    Mat<float> hl = randn<float>(rng, T, cfg.hidden_size);
    adn::Tape<float> t;
    auto q = vg.encode_posterior(t, t.constant(mel), t.constant(hl));
    auto z = vg.reparameterize(t, q, randn<float>(rng, T / 4, 8));
    auto out = vg.decode(t, z, t.constant(hl));
    REQUIRE(out.rows() == T);
    REQUIRE(out.cols() == 80);
    REQUIRE(out.val().allFinite());
  }
}
