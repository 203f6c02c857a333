#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mamba/config.hpp"
#include "mamba/latent.hpp"
#include "mamba/rng.hpp"
#include "test_util.hpp"

using namespace mamba;

TEST_CASE("rng streams replay deterministically", "[core]") {
  RngStream a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.u64() == b.u64());

  RngStream c(1234);
  auto s1 = c.sub("env", 3);
  auto s2 = c.sub("env", 3);
  auto s3 = c.sub("env", 4);
  auto s4 = c.sub("model", 3);
  CHECK(s1.u64() == s2.u64());
  CHECK(s1.u64() != s3.u64());
  CHECK(s3.u64() != s4.u64());
}

TEST_CASE("rng uniform and categorical behave", "[core]") {
  RngStream rng(7);
  for (int i = 0; i < 1000; ++i) {
    const Real u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  Real w[3] = {0.0, 1.0, 0.0};
  for (int i = 0; i < 100; ++i) CHECK(rng.categorical(w, 3) == 1);
  CHECK_THROWS_AS(rng.below(0), InvalidInputError);
}

TEST_CASE("config defaults reproduce the hyperparameter table", "[core]") {
  Config cfg;
  cfg.validate();
  const std::string kv = cfg.to_key_value();
  auto has = [&](const std::string& line) { return kv.find(line + "\n") != std::string::npos; };
  CHECK(has("batch_size=2000"));
  CHECK(has("gae_lambda=0.95"));
  CHECK(has("entropy_coef=0.001"));
  CHECK(has("entropy_anneal=0.99998"));
  CHECK(has("ppo_updates=4"));
  CHECK(has("ppo_epochs=5"));
  CHECK(has("clip_eps=0.2"));
  CHECK(has("actor_lr=0.0005"));
  CHECK(has("critic_lr=0.0005"));
  CHECK(has("gamma=0.99"));
  CHECK(has("model_lr=0.0002"));
  CHECK(has("model_epochs=40"));
  CHECK(has("sampled_rollouts=40"));
  CHECK(has("seq_length=50"));
  CHECK(has("horizon=15"));
  CHECK(has("buffer_capacity=500000"));
  CHECK(has("latent_groups=32"));
  CHECK(has("latent_classes=32"));
  CHECK(has("kl_balance_entropy=0.2"));
  CHECK(has("kl_balance_cross=0.8"));
  CHECK(has("grad_clip=100"));
  CHECK(has("trajectories_between_updates=1"));
  CHECK(has("hidden_size=400"));
  CHECK(has("comm_dropout=0.1"));
}

TEST_CASE("config manifest is a flat key=value file", "[core]") {
  Config cfg;
  cfg.seed = 99;
  const std::string path = std::filesystem::temp_directory_path() / "mamba_manifest_test.txt";
  cfg.write_manifest(path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  bool saw_seed = false;
  while (std::getline(in, line)) {
    REQUIRE(line.find('=') != std::string::npos);
    if (line == "seed=99") saw_seed = true;
  }
  CHECK(saw_seed);
  std::filesystem::remove(path);
}

TEST_CASE("config rejects unknown keys and bad values", "[core]") {
  Config cfg;
  CHECK_THROWS_AS(cfg.apply_key_value("no_such_key=1"), ConfigError);
  CHECK_THROWS_AS(cfg.apply_key_value("gamma=banana"), ConfigError);
  CHECK_THROWS_AS(cfg.apply_key_value("gamma"), ConfigError);
  cfg.apply_key_value("gamma=0.5\n# comment\n\nhorizon=3");
  CHECK(cfg.gamma == 0.5);
  CHECK(cfg.horizon == 3);

  Config bad;
  bad.gamma = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = Config{};
  bad.horizon = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = Config{};
  bad.kl_balance_entropy = 0.3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config hash tracks content", "[core]") {
  Config a, b;
  CHECK(a.hash() == b.hash());
  b.hidden_size = 64;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("degenerate logits sample with certainty", "[core][latent]") {
  RngStream rng(5);
  const int K = 4, C = 8;
  Mat logits = Mat::Constant(K, C, -1e9);
  logits(0, 3) = 1e9;
  logits(1, 0) = 1e9;
  logits(2, 7) = 1e9;
  logits(3, 5) = 1e9;
  for (int trial = 0; trial < 50; ++trial) {
    CategoricalLatent z = sample_categorical(logits, rng);
    CHECK(z.indices == std::vector<int>{3, 0, 7, 5});
  }
}

TEST_CASE("sampling rejects non-finite logits", "[core][latent]") {
  RngStream rng(5);
  Mat logits = Mat::Zero(2, 3);
  logits(1, 1) = std::numeric_limits<Real>::quiet_NaN();
  CHECK_THROWS_AS(sample_categorical(logits, rng), InvalidInputError);
}

TEST_CASE("uniform logits sample uniformly (chi-square)", "[core][latent]") {
  RngStream rng(6);
  const int K = 4, C = 8;
  Mat logits = Mat::Zero(K, C);
  std::vector<std::vector<long>> counts(K, std::vector<long>(C, 0));
  const long draws = 20000;
  for (long i = 0; i < draws; ++i) {
    CategoricalLatent z = sample_categorical(logits, rng);
    for (int g = 0; g < K; ++g) counts[g][z.indices[g]]++;
  }
  // chi-square with 7 dof: 0.999 quantile ~ 24.3
  for (int g = 0; g < K; ++g) CHECK(testutil::chi_square_uniform(counts[g], draws) < 24.3);
}

TEST_CASE("flatten layout and round trip", "[core][latent]") {
  const int K = 32, C = 32;
  CategoricalLatent z;
  z.groups = K;
  z.classes = C;
  z.indices.assign(K, 0);
  RowVec flat = z.flat();
  for (int g = 0; g < K; ++g) CHECK(flat(g * C) == 1.0);
  CHECK(flat.sum() == Catch::Approx(K));

  z.indices[1] = 5;
  CHECK(z.flat()(37) == 1.0);

  RngStream rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> idx(K);
    for (int g = 0; g < K; ++g) idx[g] = static_cast<int>(rng.below(C));
    RowVec f = flat_from_indices(idx, K, C);
    CHECK(indices_from_flat(f, K, C) == idx);
  }
}

TEST_CASE("straight-through gradient equals softmax gradient", "[core][latent]") {
  RngStream rng(9);
  const int K = 3, C = 5;
  Mat logits = testutil::random_mat(2, K * C, rng);
  Mat w = testutil::random_mat(2, K * C, rng);

  ad::Tape t1;
  ad::Var l1 = t1.input(logits);
  ad::Var probs1 = latent_probs(l1, C);
  Mat onehot = sample_onehot_rows(probs1.val(), C, rng);
  ad::Var st = straight_through(probs1, onehot);
  t1.backward(ad::sum_all(ad::cmul_const(st, w)));

  ad::Tape t2;
  ad::Var l2 = t2.input(logits);
  t2.backward(ad::sum_all(ad::cmul_const(latent_probs(l2, C), w)));

  CHECK((t1.grad(l1) - t2.grad(l2)).cwiseAbs().maxCoeff() < 1e-6);
  // Forward value is the exact one-hot sample.
  CHECK((st.val() - onehot).norm() == 0.0);
}

TEST_CASE("kl balanced: hand-computed value and identity with plain KL", "[core][latent]") {
  // 2 groups x 2 classes, q = (0.8,0.2)/(0.5,0.5), p = (0.5,0.5)/(0.9,0.1)
  auto logit2 = [](Real p0, Real p1) { return std::log(p0 / p1); };
  Mat q(1, 4), p(1, 4);
  q << logit2(0.8, 0.2), 0.0, 0.0, 0.0;
  p << 0.0, 0.0, logit2(0.9, 0.1), 0.0;
  // shift to logits (log p + const is fine for softmax)
  const Real kl1 = 0.8 * std::log(0.8 / 0.5) + 0.2 * std::log(0.2 / 0.5);
  const Real kl2 = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);

  ad::Tape t;
  ad::Var qv = t.input(q), pv = t.input(p);
  ad::Var balanced = kl_balanced(qv, pv, 2, 0.8, 0.2);
  CHECK(balanced.val()(0, 0) == Catch::Approx(kl1 + kl2).epsilon(1e-9));

  ad::Var plain = kl_groups(t.input(q), t.input(p), 2);
  CHECK(std::abs(balanced.val()(0, 0) - plain.val()(0, 0)) < 1e-7);

  // q == p => 0
  ad::Var zero = kl_balanced(t.input(q), t.input(q), 2, 0.8, 0.2);
  CHECK(std::abs(zero.val()(0, 0)) < 1e-7);

  CHECK_THROWS_AS(kl_balanced(qv, pv, 2, 0.9, 0.2), ConfigError);
}

namespace {

Real kl_value(const Mat& q, const Mat& p, int classes) {
  ad::Tape t;
  return ad::sum_all(kl_groups(t.constant(q), t.constant(p), classes)).val()(0, 0);
}

Mat grad_of_kl_wrt_q(const Mat& q, const Mat& p, int classes) {
  Mat g(q.rows(), q.cols());
  const Real h = 1e-6;
  for (Eigen::Index c = 0; c < q.cols(); ++c)
    for (Eigen::Index r = 0; r < q.rows(); ++r) {
      Mat up = q, down = q;
      up(r, c) += h;
      down(r, c) -= h;
      g(r, c) = (kl_value(up, p, classes) - kl_value(down, p, classes)) / (2 * h);
    }
  return g;
}

Mat grad_of_kl_wrt_p(const Mat& q, const Mat& p, int classes) {
  Mat g(p.rows(), p.cols());
  const Real h = 1e-6;
  for (Eigen::Index c = 0; c < p.cols(); ++c)
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      Mat up = p, down = p;
      up(r, c) += h;
      down(r, c) -= h;
      g(r, c) = (kl_value(q, up, classes) - kl_value(q, down, classes)) / (2 * h);
    }
  return g;
}

}  // namespace

TEST_CASE("kl balanced vs plain: values equal, gradients differ as specified", "[core][latent]") {
  RngStream rng(11);
  const int C = 4;
  Mat q = testutil::random_mat(3, 8, rng), p = testutil::random_mat(3, 8, rng);

  ad::Tape tb;
  ad::Var qb = tb.input(q), pb = tb.input(p);
  ad::Var vb = ad::sum_all(kl_balanced(qb, pb, C, 0.8, 0.2));
  tb.backward(vb);

  ad::Tape tp;
  ad::Var qp = tp.input(q), pp = tp.input(p);
  ad::Var vp = ad::sum_all(kl_groups(qp, pp, C));
  tp.backward(vp);

  CHECK(std::abs(vb.val()(0, 0) - vp.val()(0, 0)) < 1e-7);

  // Branch gradients match finite differences of the weighted stopgrad form:
  // d/dq balanced = 0.2 * d/dq KL(q || const p), d/dp balanced = 0.8 * d/dp KL(const q || p).
  CHECK((tb.grad(qb) - 0.2 * grad_of_kl_wrt_q(q, p, C)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((tb.grad(pb) - 0.8 * grad_of_kl_wrt_p(q, p, C)).cwiseAbs().maxCoeff() < 1e-6);
  // And they differ from the plain-KL gradients.
  CHECK((tb.grad(qb) - tp.grad(qp)).cwiseAbs().maxCoeff() > 1e-4);
}
