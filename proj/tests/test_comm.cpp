#include <catch2/catch_amalgamated.hpp>

#include "mamba/comm.hpp"
#include "mamba/latent.hpp"
#include "test_util.hpp"

using namespace mamba;
using testutil::random_mat;

namespace {

CommBlock make_block(int layers = 3, bool posenc = true, Real dropout = 0.1, std::uint64_t seed = 21) {
  CommConfig cc;
  cc.latent_dim = 12;  // 3 groups x 4 classes
  cc.num_actions = 3;
  cc.d_model = 16;
  cc.layers = layers;
  cc.dropout = dropout;
  cc.positional_encoding = posenc;
  RngStream rng(seed);
  CommBlock block;
  block.init(cc, rng);
  return block;
}

Mat onehot_rows(const std::vector<int>& actions, int num_actions) {
  Mat m = Mat::Zero(static_cast<Eigen::Index>(actions.size()), num_actions);
  for (std::size_t i = 0; i < actions.size(); ++i)
    if (actions[i] >= 0) m(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
  return m;
}

Mat run_block(CommBlock& block, const Mat& z, const std::vector<int>& actions, const BoolMat& mask,
              bool train, RngStream* rng = nullptr) {
  ad::Tape t;
  nn::Binder bind(t);
  ad::Var out = block.forward(bind, t.constant(z), onehot_rows(actions, block.cfg.num_actions), {mask},
                              static_cast<int>(z.rows()), train, rng);
  return out.val();
}

}  // namespace

TEST_CASE("soft attention collapses to V for a single row", "[comm]") {
  RngStream rng(1);
  Mat q = random_mat(1, 4, rng), k = random_mat(1, 4, rng), v = random_mat(1, 6, rng);
  Mat out = soft_attention(q, k, v, full_mask(1));
  CHECK((out - v).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("identical keys give the uniform mean of V", "[comm]") {
  RngStream rng(2);
  Mat q = random_mat(4, 5, rng);
  Mat k = Mat::Zero(4, 5);
  for (int i = 0; i < 4; ++i) k.row(i) = Mat::Constant(1, 5, 0.37);
  Mat v = random_mat(4, 3, rng);
  Mat out = soft_attention(q, k, v, full_mask(4));
  Mat mean = v.colwise().mean();
  for (int i = 0; i < 4; ++i) CHECK((out.row(i) - mean.row(0)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("masked row matches a hand-computed two-term softmax", "[comm]") {
  RngStream rng(3);
  const int n = 3, d = 5;
  Mat q = random_mat(n, d, rng), k = random_mat(n, d, rng), v = random_mat(n, 4, rng);
  BoolMat mask = full_mask(n);
  mask(0, 2) = false;  // agent 0 may not attend to agent 2

  Mat out = soft_attention(q, k, v, mask);

  const Real s0 = q.row(0).dot(k.row(0)) / std::sqrt(static_cast<Real>(d));
  const Real s1 = q.row(0).dot(k.row(1)) / std::sqrt(static_cast<Real>(d));
  const Real m = std::max(s0, s1);
  const Real z = std::exp(s0 - m) + std::exp(s1 - m);
  RowVec expect = (std::exp(s0 - m) / z) * v.row(0) + (std::exp(s1 - m) / z) * v.row(1);
  CHECK((out.row(0) - expect).cwiseAbs().maxCoeff() < 1e-6);

  // tape version agrees with the plain op
  ad::Tape t;
  ad::Var o2 = ad::block_attention(t.constant(q), t.constant(k), t.constant(v), {mask}, n);
  CHECK((o2.val() - out).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention requires a permitted diagonal", "[comm]") {
  Mat q = Mat::Ones(2, 2), k = q, v = q;
  BoolMat mask = full_mask(2);
  mask(1, 1) = false;
  mask(1, 0) = false;
  CHECK_THROWS_AS(soft_attention(q, k, v, mask), InternalError);
}

TEST_CASE("comm block inference is deterministic; dropout only in train mode", "[comm]") {
  CommBlock block = make_block();
  RngStream rng(4);
  Mat z = random_mat(3, 12, rng, 0.0, 1.0);
  std::vector<int> actions{0, 2, 1};
  BoolMat mask = full_mask(3);

  Mat a = run_block(block, z, actions, mask, false);
  Mat b = run_block(block, z, actions, mask, false);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);

  RngStream d1(100), d2(200);
  Mat c = run_block(block, z, actions, mask, true, &d1);
  Mat d = run_block(block, z, actions, mask, true, &d2);
  CHECK((c - d).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("comm block rejects mismatched agent counts", "[comm]") {
  CommBlock block = make_block();
  RngStream rng(5);
  Mat z = random_mat(3, 12, rng);
  ad::Tape t;
  nn::Binder bind(t);
  CHECK_THROWS_AS(
      block.forward(bind, t.constant(z), onehot_rows({0, 1}, 3), {full_mask(3)}, 3, false, nullptr),
      InvalidInputError);
}

TEST_CASE("non-neighbor perturbations never reach e_i, at any depth", "[comm]") {
  for (int layers = 1; layers <= 3; ++layers) {
    CommBlock block = make_block(layers);
    RngStream rng(6);
    const int n = 3;
    Mat z = random_mat(n, 12, rng, 0.0, 1.0);
    std::vector<int> actions{1, 0, 2};
    // agent 0 talks to agent 1 only; agents 1,2 fully connected
    BoolMat mask = full_mask(n);
    mask(0, 2) = false;

    Mat base = run_block(block, z, actions, mask, false);

    for (int trial = 0; trial < 5; ++trial) {
      Mat z2 = z;
      z2.row(2) = random_mat(1, 12, rng, -2.0, 2.0);
      std::vector<int> actions2 = actions;
      actions2[2] = static_cast<int>(rng.below(3));
      Mat pert = run_block(block, z2, actions2, mask, false);
      INFO("layers=" << layers);
      CHECK((pert.row(0) - base.row(0)).cwiseAbs().maxCoeff() < 1e-6);
      // agent 1 does see agent 2
      CHECK((pert.row(1) - base.row(1)).cwiseAbs().maxCoeff() > 1e-9);
    }
  }
}

TEST_CASE("without positional encoding identical inputs give identical rows", "[comm]") {
  CommBlock block = make_block(3, /*posenc=*/false);
  RngStream rng(7);
  Mat z = random_mat(2, 12, rng, 0.0, 1.0);
  z.row(1) = z.row(0);
  Mat e = run_block(block, z, {1, 1}, full_mask(2), false);
  CHECK((e.row(0) - e.row(1)).cwiseAbs().maxCoeff() < 1e-6);

  // with positional encoding the rows split
  CommBlock block_pe = make_block(3, /*posenc=*/true);
  Mat e2 = run_block(block_pe, z, {1, 1}, full_mask(2), false);
  CHECK((e2.row(0) - e2.row(1)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("per-agent execution path reproduces the batched forward", "[comm]") {
  CommBlock block = make_block();
  RngStream rng(8);
  const int n = 4;
  Mat z = random_mat(n, 12, rng, 0.0, 1.0);
  std::vector<int> actions{0, 1, 2, 0};
  BoolMat mask = full_mask(n);
  mask(0, 3) = false;
  mask(3, 0) = false;

  Mat batched = run_block(block, z, actions, mask, false);

  for (int i = 0; i < n; ++i) {
    std::vector<int> ids;
    std::vector<CommSummaries> sums;
    RowVec own;
    for (int j = 0; j < n; ++j) {
      if (!mask(i, j)) continue;
      RowVec ej = block.embed_row(z.row(j), actions[j], j);
      if (j == i) own = ej;
      ids.push_back(j);
      sums.push_back(block.summaries(ej));
    }
    RowVec e = block.refine(own, ids, sums);
    CHECK((e - batched.row(i)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("linear exchange matches the full-attention row and is O(n)", "[comm]") {
  RngStream rng(9);
  for (int n : {1, 4}) {
    const int d = 8;
    Mat q = random_mat(n, d, rng), k = random_mat(n, d, rng), v = random_mat(n, d, rng);
    std::uint64_t full_mults = 0;
    Mat full = soft_attention(q, k, v, full_mask(n), &full_mults);

    std::vector<int> ids(n);
    for (int j = 0; j < n; ++j) ids[j] = j;
    for (int i = 0; i < n; ++i) {
      std::uint64_t lin_mults = 0;
      RowVec row = linear_exchange_step(q.row(i), ids, k, v, &lin_mults);
      CHECK((row - full.row(i)).cwiseAbs().maxCoeff() < 1e-6);
    }
  }

  // multiply counts: per-agent linear step grows ~n, full matrix ~n^2
  const int d = 8;
  auto linear_cost = [&](int n) {
    Mat q = random_mat(n, d, rng), k = random_mat(n, d, rng), v = random_mat(n, d, rng);
    std::vector<int> ids(n);
    for (int j = 0; j < n; ++j) ids[j] = j;
    std::uint64_t c = 0;
    linear_exchange_step(q.row(0), ids, k, v, &c);
    return c;
  };
  auto full_cost = [&](int n) {
    Mat q = random_mat(n, d, rng), k = random_mat(n, d, rng), v = random_mat(n, d, rng);
    std::uint64_t c = 0;
    soft_attention(q, k, v, full_mask(n), &c);
    return c;
  };
  CHECK(linear_cost(16) == 4 * linear_cost(4));
  CHECK(full_cost(16) == 16 * full_cost(4));
}

TEST_CASE("linear exchange protocol errors", "[comm]") {
  Mat k = Mat::Ones(2, 4), v = Mat::Ones(2, 4);
  RowVec q = RowVec::Ones(4);
  CHECK_THROWS_AS(linear_exchange_step(q, {}, Mat(0, 4), Mat(0, 4)), ProtocolError);
  CHECK_THROWS_AS(linear_exchange_step(q, {1, 0}, k, v), ProtocolError);
  CHECK_THROWS_AS(linear_exchange_step(q, {0}, k, v), InvalidInputError);  // count mismatch
}

TEST_CASE("locality mask construction", "[comm]") {
  BoolMat neigh(3, 3);
  neigh.setConstant(false);
  neigh(0, 1) = neigh(1, 0) = true;
  std::vector<bool> alive{true, true, false};

  BoolMat m = build_locality_mask(neigh, alive, false);
  CHECK(m(0, 0));
  CHECK(m(1, 1));
  CHECK(m(2, 2));
  CHECK(m(0, 1));
  CHECK(!m(0, 2));
  CHECK(m(1, 2) == false);

  BoolMat md = build_locality_mask(full_mask(3), alive, true);
  CHECK(!md(0, 2));  // dead agent dropped from columns
  CHECK(md(2, 2));   // but keeps its own diagonal
}
