#include <gtest/gtest.h>

#include <cmath>

#include "cotrack/gradcheck.hpp"
#include "cotrack/matrix.hpp"
#include "cotrack/nn.hpp"
#include "cotrack/params.hpp"
#include "cotrack/rng.hpp"

using namespace cotrack;

namespace {

Matrix random_matrix(int r, int c, Rng& rng, double s = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = s * rng.normal();
  return m;
}

}  // namespace

TEST(Matrix, BasicOps) {
  Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  Matrix b = Matrix::from_rows({{5, 6}, {7, 8}});
  Matrix ab = matmul(a, b);
  EXPECT_DOUBLE_EQ(ab.at(0, 0), 19);
  EXPECT_DOUBLE_EQ(ab.at(1, 1), 50);
  EXPECT_DOUBLE_EQ(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 0);
  EXPECT_DOUBLE_EQ(max_abs_diff(matmul_tn(a, b), matmul(transpose(a), b)), 0);
  EXPECT_THROW(matmul(a, Matrix(3, 2)), std::invalid_argument);
}

TEST(Linear, IdentityCase) {
  Matrix w = Matrix::identity(2);
  Matrix b(1, 2);
  Matrix x = Matrix::from_rows({{3, 4}});
  Matrix y = linear_forward(w, b, x);
  EXPECT_DOUBLE_EQ(y.at(0, 0), 3);
  EXPECT_DOUBLE_EQ(y.at(0, 1), 4);
}

TEST(Linear, ZeroWeightsPassBias) {
  Matrix w(2, 2);
  Matrix b = Matrix::from_rows({{1, 2}});
  Matrix x = Matrix::from_rows({{9, 9}});
  Matrix y = linear_forward(w, b, x);
  EXPECT_DOUBLE_EQ(y.at(0, 0), 1);
  EXPECT_DOUBLE_EQ(y.at(0, 1), 2);
}

TEST(Linear, DirectArithmetic) {
  Matrix w = Matrix::from_rows({{1, 2}, {3, 4}});
  Matrix b(1, 2);
  Matrix x = Matrix::from_rows({{1, 1}});
  Matrix y = linear_forward(w, b, x);
  EXPECT_DOUBLE_EQ(y.at(0, 0), 3);
  EXPECT_DOUBLE_EQ(y.at(0, 1), 7);
}

TEST(Linear, ShapeMismatchThrows) {
  EXPECT_THROW(linear_forward(Matrix(2, 3), Matrix(1, 2), Matrix(1, 2)),
               std::invalid_argument);
  EXPECT_THROW(linear_forward(Matrix(2, 2), Matrix(1, 3), Matrix(1, 2)),
               std::invalid_argument);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(42);
  ParamStore ps;
  const int w = ps.create("w", 3, 4, Init::He, rng);
  const int b = ps.create("b", 1, 3, Init::Zero, rng);
  Matrix x = random_matrix(5, 4, rng);
  Matrix c = random_matrix(5, 3, rng);  // fixed projection making loss scalar

  auto loss = [&]() {
    Matrix y = linear_forward(ps.value(w), ps.value(b), x);
    double s = 0;
    for (size_t i = 0; i < y.data.size(); ++i) s += c.data[i] * y.data[i];
    return s;
  };
  loss();
  ps.zero_grads();
  Matrix dx = linear_backward(ps.value(w), x, c, ps.grad(w), ps.grad(b));
  auto rep = check_param_gradients(ps, loss, 1e-5, 64);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_param;
  auto repx = check_input_gradient(x, dx, loss);
  EXPECT_LT(repx.max_rel_err, 1e-4);
}

TEST(Mlp, IdentityLayerPassesThrough) {
  Rng rng(1);
  ParamStore ps;
  Mlp mlp;
  mlp.init(ps, "m", {3, 3}, rng);
  Param& w = ps.at("m.w0");
  w.value = Matrix::identity(3);
  Matrix x = random_matrix(4, 3, rng);
  EXPECT_DOUBLE_EQ(max_abs_diff(mlp.forward(ps, x), x), 0);
}

TEST(Mlp, ZeroLayersGiveZero) {
  Rng rng(1);
  ParamStore ps;
  Mlp mlp;
  mlp.init(ps, "m", {3, 5, 2}, rng);
  for (auto h : mlp.w)
    std::fill(ps.at(h).value.data.begin(), ps.at(h).value.data.end(), 0.0);
  Matrix y = mlp.forward(ps, random_matrix(4, 3, rng));
  EXPECT_DOUBLE_EQ(frobenius_norm(y), 0);
}

TEST(Mlp, EmptyConfigThrows) {
  Rng rng(1);
  ParamStore ps;
  Mlp mlp;
  EXPECT_THROW(mlp.init(ps, "m", {3}, rng), std::invalid_argument);
}

TEST(Mlp, FourLayerGradientMatchesFiniteDifferences) {
  Rng rng(7);
  ParamStore ps;
  Mlp mlp;
  mlp.init(ps, "m", {8, 8, 8, 8, 8}, rng);
  Matrix x = random_matrix(3, 8, rng);
  Matrix c = random_matrix(3, 8, rng);
  auto loss = [&]() {
    Matrix y = mlp.forward(ps, x);
    double s = 0;
    for (size_t i = 0; i < y.data.size(); ++i) s += c.data[i] * y.data[i];
    return s;
  };
  loss();
  ps.zero_grads();
  MlpCache cache;
  mlp.forward(ps, x, &cache);
  Matrix dx = mlp.backward(ps, cache, c);
  auto rep = check_param_gradients(ps, loss, 1e-5, 16);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_param;
  auto repx = check_input_gradient(x, dx, loss);
  EXPECT_LT(repx.max_rel_err, 1e-4);
}

TEST(Attention, SingleKeyReturnsValue) {
  Matrix q = Matrix::from_rows({{0.3, -0.2}});
  Matrix k = Matrix::from_rows({{1.0, 2.0}});
  Matrix v = Matrix::from_rows({{5.0, -3.0}});
  Mask mask{1};
  Matrix y = scaled_dot_attention(q, k, v, mask);
  EXPECT_DOUBLE_EQ(y.at(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(y.at(0, 1), -3.0);
}

TEST(Attention, IdenticalKeysAverageValues) {
  Matrix q = Matrix::from_rows({{0.5, 0.5}});
  Matrix k = Matrix::from_rows({{1.0, 2.0}, {1.0, 2.0}});
  Matrix v = Matrix::from_rows({{2.0, 0.0}, {4.0, 6.0}});
  Mask mask{1, 1};
  Matrix y = scaled_dot_attention(q, k, v, mask);
  EXPECT_NEAR(y.at(0, 0), 3.0, 1e-12);
  EXPECT_NEAR(y.at(0, 1), 3.0, 1e-12);
}

TEST(Attention, MaskedKeyEqualsSingleKeyCase) {
  Matrix q = Matrix::from_rows({{0.7, -1.0}});
  Matrix k = Matrix::from_rows({{1.0, 2.0}, {-3.0, 0.5}});
  Matrix v = Matrix::from_rows({{5.0, -3.0}, {9.0, 9.0}});
  Mask mask{1, 0};
  Matrix y = scaled_dot_attention(q, k, v, mask);
  EXPECT_DOUBLE_EQ(y.at(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(y.at(0, 1), -3.0);
}

TEST(Attention, FullyMaskedRowIsZero) {
  Matrix q = Matrix::from_rows({{0.7, -1.0}, {0.1, 0.2}});
  Matrix k = Matrix::from_rows({{1.0, 2.0}});
  Matrix v = Matrix::from_rows({{5.0, -3.0}});
  Mask mask{0, 1};
  Matrix y = scaled_dot_attention(q, k, v, mask);
  EXPECT_DOUBLE_EQ(y.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(y.at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(y.at(1, 0), 5.0);
}

TEST(Attention, SoftmaxRowsSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix logits = random_matrix(6, 5, rng, 3.0);
    Mask mask(30, 0);
    for (int i = 0; i < 30; ++i) mask[i] = rng.bernoulli(0.7);
    for (int i = 0; i < 6; ++i) mask[i * 5 + rng.uniform_int(0, 4)] = 1;
    Matrix p = masked_softmax_rows(logits, mask);
    for (int i = 0; i < 6; ++i) {
      double s = 0;
      for (int j = 0; j < 5; ++j) s += p.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Matrix q = random_matrix(4, 6, rng);
  Matrix k = random_matrix(5, 6, rng);
  Matrix v = random_matrix(5, 3, rng);
  Mask mask(20, 1);
  mask[2] = 0;
  mask[7] = 0;
  for (int j = 0; j < 5; ++j) mask[3 * 5 + j] = 0;  // fully masked row
  Matrix c = random_matrix(4, 3, rng);
  auto loss = [&]() {
    Matrix y = scaled_dot_attention(q, k, v, mask);
    double s = 0;
    for (size_t i = 0; i < y.data.size(); ++i) s += c.data[i] * y.data[i];
    return s;
  };
  AttentionCache cache;
  scaled_dot_attention(q, k, v, mask, &cache);
  AttentionGrads g = scaled_dot_attention_backward(cache, c);
  EXPECT_LT(check_input_gradient(q, g.dq, loss).max_rel_err, 1e-4);
  EXPECT_LT(check_input_gradient(k, g.dk, loss).max_rel_err, 1e-4);
  EXPECT_LT(check_input_gradient(v, g.dv, loss).max_rel_err, 1e-4);
}

TEST(Attention, MultiHeadGradientMatchesFiniteDifferences) {
  Rng rng(13);
  ParamStore ps;
  MultiHeadAttention mha;
  mha.init(ps, "a", 8, 4, rng, /*zero_out=*/false);
  Matrix xq = random_matrix(3, 8, rng);
  Matrix xkv = random_matrix(4, 8, rng);
  Mask mask(12, 1);
  mask[5] = 0;
  Matrix c = random_matrix(3, 8, rng);
  auto loss = [&]() {
    Matrix y = mha.forward(ps, xq, xkv, mask);
    double s = 0;
    for (size_t i = 0; i < y.data.size(); ++i) s += c.data[i] * y.data[i];
    return s;
  };
  ps.zero_grads();
  MhaCache cache;
  mha.forward(ps, xq, xkv, mask, &cache);
  auto g = mha.backward(ps, cache, c);
  EXPECT_LT(check_param_gradients(ps, loss, 1e-5, 16).max_rel_err, 1e-4);
  EXPECT_LT(check_input_gradient(xq, g.dxq, loss).max_rel_err, 1e-4);
  EXPECT_LT(check_input_gradient(xkv, g.dxkv, loss).max_rel_err, 1e-4);
}

TEST(PositionalEncoding, KnownValues) {
  Matrix p0 = sinusoidal_pe(0, 4);
  EXPECT_DOUBLE_EQ(p0.at(0, 0), 0);
  EXPECT_DOUBLE_EQ(p0.at(0, 1), 1);
  EXPECT_DOUBLE_EQ(p0.at(0, 2), 0);
  EXPECT_DOUBLE_EQ(p0.at(0, 3), 1);
  Matrix p1 = sinusoidal_pe(1, 2);
  EXPECT_NEAR(p1.at(0, 0), std::sin(1.0), 1e-15);
  EXPECT_NEAR(p1.at(0, 1), std::cos(1.0), 1e-15);
  EXPECT_THROW(sinusoidal_pe(0, 3), std::invalid_argument);
}

TEST(PositionalEncoding, SquaredNormIsHalfDim) {
  for (int pos : {0, 1, 5, 100}) {
    Matrix pe = sinusoidal_pe(pos, 16);
    double s = 0;
    for (double v : pe.data) s += v * v;
    EXPECT_NEAR(s, 8.0, 1e-12);
  }
}

TEST(FocalLoss, ClosedFormValues) {
  EXPECT_NEAR(focal_loss(0.5, 1, 0.25, 2.0), 0.25 * 0.25 * std::log(2.0),
              1e-12);
  EXPECT_NEAR(focal_loss(0.5, 0, 0.5, 1.0), 0.5 * 0.5 * std::log(2.0), 1e-12);
  EXPECT_NEAR(focal_loss(1.0 - 1e-9, 1, 0.25, 2.0), 0.0, 1e-12);
}

TEST(FocalLoss, NonNegativeAndMonotone) {
  double prev = focal_loss(0.01, 1, 0.25, 2.0);
  for (double p = 0.02; p < 1.0; p += 0.01) {
    const double cur = focal_loss(p, 1, 0.25, 2.0);
    EXPECT_GE(prev, cur);
    EXPECT_GE(cur, 0.0);
    prev = cur;
  }
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
  for (double p : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    for (int target : {0, 1}) {
      for (auto [a, g] : {std::pair{0.25, 2.0}, std::pair{0.5, 1.0}}) {
        double slot = p;
        const double fd = central_difference(
            &slot, 1e-6, [&]() { return focal_loss(slot, target, a, g); });
        EXPECT_LT(rel_err(focal_loss_grad(p, target, a, g), fd), 1e-4);
      }
    }
  }
}

TEST(L1Loss, Values) {
  Matrix a = Matrix::from_rows({{1, 2}});
  Matrix b(1, 2);
  EXPECT_DOUBLE_EQ(l1_loss(a, a), 0);
  EXPECT_DOUBLE_EQ(l1_loss(a, b), 1.5);
  EXPECT_THROW(l1_loss(a, Matrix(1, 3)), std::invalid_argument);
}

TEST(L1Loss, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Matrix pred = random_matrix(2, 4, rng);
  Matrix target = random_matrix(2, 4, rng);
  Matrix g = l1_loss_grad(pred, target);
  auto loss = [&]() { return l1_loss(pred, target); };
  EXPECT_LT(check_input_gradient(pred, g, loss).max_rel_err, 1e-4);
}

TEST(AdamW, ZeroGradZeroDecayLeavesParams) {
  Rng rng(2);
  ParamStore ps;
  const int h = ps.create("p", 2, 2, Init::He, rng);
  Matrix before = ps.value(h);
  ps.zero_grads();
  ps.adamw_step(1e-2, 0.0);
  EXPECT_DOUBLE_EQ(max_abs_diff(before, ps.value(h)), 0);
}

TEST(AdamW, PureDecayShrinksByFactor) {
  Rng rng(2);
  ParamStore ps;
  const int h = ps.create("p", 2, 2, Init::He, rng);
  Matrix before = ps.value(h);
  ps.zero_grads();
  const double lr = 1e-3;
  ps.adamw_step(lr, 0.01);
  for (size_t i = 0; i < before.data.size(); ++i)
    EXPECT_NEAR(ps.value(h).data[i], before.data[i] * (1.0 - lr * 0.01),
                1e-15);
}

TEST(AdamW, SingleStepDescendsQuadratic) {
  Rng rng(2);
  ParamStore ps;
  const int h = ps.create("w", 1, 1, Init::Zero, rng);
  ps.at(h).value.at(0, 0) = 1.0;
  ps.zero_grads();
  ps.grad(h).at(0, 0) = 2.0;  // d(w^2)/dw at w=1
  ps.adamw_step(0.1, 0.0);
  const double w = ps.value(h).at(0, 0);
  EXPECT_LT(w * w, 1.0);
}

TEST(CosineLr, Schedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 2e-4), 2e-4);
  EXPECT_NEAR(cosine_lr(100, 100, 2e-4), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(50, 100, 2e-4), 1e-4, 1e-18);
  EXPECT_THROW(cosine_lr(0, 0, 2e-4), std::invalid_argument);
}

TEST(ParamStore, CheckpointRoundTripsBitExact) {
  Rng rng(9);
  ParamStore ps;
  ps.create("a.w", 3, 4, Init::He, rng);
  ps.create("a.b", 1, 4, Init::Xavier, rng);
  ps.zero_grads();
  for (auto& p : ps.all())
    for (size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] = 0.5;
  ps.adamw_step(1e-3, 0.01);
  const std::string path = "/tmp/cotrack_test_ckpt.bin";
  ps.save(path);

  ParamStore ps2;
  Rng rng2(1234);
  ps2.create("a.w", 3, 4, Init::He, rng2);
  ps2.create("a.b", 1, 4, Init::Xavier, rng2);
  ps2.load(path);
  EXPECT_EQ(ps2.step_count(), ps.step_count());
  for (size_t i = 0; i < ps.count(); ++i) {
    EXPECT_DOUBLE_EQ(max_abs_diff(ps.at(int(i)).value, ps2.at(int(i)).value), 0);
    EXPECT_DOUBLE_EQ(max_abs_diff(ps.at(int(i)).m, ps2.at(int(i)).m), 0);
    EXPECT_DOUBLE_EQ(max_abs_diff(ps.at(int(i)).v, ps2.at(int(i)).v), 0);
  }
}

TEST(ParamStore, LoadRejectsShapeMismatch) {
  Rng rng(9);
  ParamStore ps;
  ps.create("a.w", 3, 4, Init::He, rng);
  const std::string path = "/tmp/cotrack_test_ckpt2.bin";
  ps.save(path);
  ParamStore ps2;
  ps2.create("a.w", 4, 3, Init::He, rng);
  EXPECT_THROW(ps2.load(path), std::runtime_error);
}

TEST(GradCheck, CatchesInjectedBackwardBug) {
  Rng rng(42);
  ParamStore ps;
  const int w = ps.create("w", 3, 3, Init::He, rng);
  Matrix x = random_matrix(2, 3, rng);
  Matrix c = random_matrix(2, 3, rng);
  auto loss = [&]() {
    Matrix y = matmul_nt(x, ps.value(w));
    double s = 0;
    for (size_t i = 0; i < y.data.size(); ++i) s += c.data[i] * y.data[i];
    return s;
  };
  ps.zero_grads();
  Matrix db(1, 3);
  linear_backward(ps.value(w), x, c, ps.grad(w), db);
  auto clean = check_param_gradients(ps, loss, 1e-5, 16);
  EXPECT_LT(clean.max_rel_err, 1e-4);
  auto mutated =
      check_param_gradients(ps, loss, 1e-5, 16, 17, "w", 1.001);
  EXPECT_GT(mutated.max_rel_err, 1e-4);
  EXPECT_EQ(mutated.worst_param, "w");
}
