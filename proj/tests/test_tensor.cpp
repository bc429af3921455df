#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "incarpose/checkpoint.hpp"
#include "incarpose/tensor.hpp"
#include "gradient_checks.hpp"

using namespace incarpose;
using incarpose::testing::max_rel_err;

namespace {

using incarpose::testing::grad_check;
using incarpose::testing::randn;

const std::vector<Shape> kShapes = {{5}, {3, 4}, {2, 3, 5}};

}  // namespace

TEST(TensorOps, MatmulIdentity) {
  std::mt19937_64 g(1);
  const Tensor a = randn({3, 5}, g, false);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.mutable_data()[4 * i] = 1.0;
  EXPECT_EQ(matmul(eye, a).data(), a.data());
}

TEST(TensorOps, SoftmaxUniform) {
  for (std::size_t n : {1, 3, 10}) {
    const Tensor s = softmax(Tensor::full({2, n}, 0.7), -1);
    for (double v : s.data()) EXPECT_NEAR(v, 1.0 / n, 1e-15);
  }
}

TEST(TensorOps, SoftmaxLargeLogitsStable) {
  const Tensor s = softmax(Tensor::from_data({3}, {1000, 1000, -1000}), 0);
  EXPECT_NEAR(s.data()[0], 0.5, 1e-15);
  EXPECT_EQ(s.data()[2], 0.0);
}

TEST(TensorOps, LayerNormMoments) {
  std::mt19937_64 g(2);
  const Tensor x = scale(randn({7, 16}, g, false), 5.0);
  const Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (int r = 0; r < 7; ++r) {
    double m = 0, v = 0;
    for (int j = 0; j < 16; ++j) m += y.data()[r * 16 + j];
    m /= 16;
    for (int j = 0; j < 16; ++j) v += std::pow(y.data()[r * 16 + j] - m, 2);
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);  // eps = 1e-5 against variance ~25
  }
}

TEST(TensorOps, GeluValues) {
  const Tensor y = gelu(Tensor::from_data({4}, {0.0, 1.0, -1.0, 3.0}));
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(y.data()[2], -0.15865525393145707, 1e-15);
  EXPECT_NEAR(y.data()[3], 2.99595030590511, 1e-15);
}

TEST(TensorOps, ShapeErrorsNameBothShapes) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4, 5]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(concat({a, b}, 0), ShapeError);
  EXPECT_THROW(reshape(a, {5}), ShapeError);
  EXPECT_THROW(slice(a, 1, 2, 4), ShapeError);
  EXPECT_THROW(softmax(a, 2), ShapeError);
}

TEST(TensorOps, ConcatSliceInverse) {
  std::mt19937_64 g(3);
  const Tensor a = randn({2, 3, 4}, g, false), b = randn({2, 1, 4}, g, false);
  const Tensor c = concat({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 4, 4}));
  EXPECT_EQ(slice(c, 1, 0, 3).data(), a.data());
  EXPECT_EQ(slice(c, 1, 3, 4).data(), b.data());
}

TEST(TensorOps, PermuteRoundTrip) {
  std::mt19937_64 g(4);
  const Tensor a = randn({2, 3, 4, 5}, g, false);
  const Tensor p = permute(a, {2, 0, 3, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 5, 3}));
  EXPECT_EQ(p.data()[((1 * 2 + 1) * 5 + 2) * 3 + 0], a.data()[((1 * 3 + 0) * 4 + 1) * 5 + 2]);
  EXPECT_EQ(permute(p, {1, 3, 0, 2}).data(), a.data());
}

TEST(TensorGrad, ElementwiseAndShapeOps) {
  std::mt19937_64 g(5);
  for (const Shape& s : kShapes) {
    const Shape tail{s.back()};
    EXPECT_LT(grad_check([](auto& in) { return add(in[0], in[1]); }, {randn(s, g), randn(s, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return add(in[0], in[1]); }, {randn(s, g), randn(tail, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return sub(in[0], in[1]); }, {randn(s, g), randn(tail, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return mul(in[0], in[1]); }, {randn(s, g), randn(s, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return mul(in[0], in[1]); }, {randn(s, g), randn(tail, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return scale(in[0], -2.5); }, {randn(s, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return gelu(in[0]); }, {randn(s, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return mul(in[0], in[0]); }, {randn(s, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return sum(in[0]); }, {randn(s, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return mean_all(in[0]); }, {randn(s, g)}, g), 1e-6);
    for (int ax = 0; ax < static_cast<int>(s.size()); ++ax) {
      EXPECT_LT(grad_check([ax](auto& in) { return softmax(in[0], ax); }, {randn(s, g)}, g), 1e-6);
      EXPECT_LT(grad_check([ax](auto& in) { return mean(in[0], ax); }, {randn(s, g)}, g), 1e-6);
      EXPECT_LT(grad_check([ax](auto& in) { return concat({in[0], in[1]}, ax); }, {randn(s, g), randn(s, g)}, g),
                1e-6);
      if (s[ax] > 1)
        EXPECT_LT(grad_check([ax](auto& in) { return slice(in[0], ax, 1, 2); }, {randn(s, g)}, g), 1e-6);
    }
    EXPECT_LT(grad_check([](auto& in) { return reshape(in[0], {in[0].numel()}); }, {randn(s, g)}, g), 1e-6);
    EXPECT_LT(grad_check([](auto& in) { return layer_norm(in[0], in[1], in[2]); },
                         {randn(s, g), randn(tail, g), randn(tail, g)}, g),
              1e-6);
    if (s.size() >= 2) {
      EXPECT_LT(grad_check([](auto& in) { return transpose(in[0]); }, {randn(s, g)}, g), 1e-6);
    }
  }
  const Shape s4{2, 3, 4, 2};
  EXPECT_LT(grad_check([](auto& in) { return permute(in[0], {3, 1, 0, 2}); }, {randn(s4, g)}, g), 1e-6);
}

TEST(TensorGrad, Matmul) {
  std::mt19937_64 g(6);
  EXPECT_LT(grad_check([](auto& in) { return matmul(in[0], in[1]); }, {randn({3, 4}, g), randn({4, 5}, g)}, g), 1e-6);
  EXPECT_LT(grad_check([](auto& in) { return matmul(in[0], in[1]); }, {randn({2, 3, 4}, g), randn({4, 2}, g)}, g),
            1e-6);
  EXPECT_LT(
      grad_check([](auto& in) { return matmul(in[0], in[1]); }, {randn({2, 2, 3, 4}, g), randn({2, 2, 4, 3}, g)}, g),
      1e-6);
  EXPECT_LT(grad_check([](auto& in) { return conv2d_1x1(in[0], in[1], in[2]); },
                       {randn({3, 4, 5}, g), randn({5, 2}, g), randn({2}, g)}, g),
            1e-6);
}

TEST(TensorGrad, SumOfMatmulAgainstFiniteDifferences) {
  std::mt19937_64 g(7);
  Tensor a = randn({4, 3}, g), b = randn({3, 6}, g);
  backward(sum(matmul(a, b)));
  // d/dA sum(AB) = 1 Bᵀ: row sums of B broadcast across rows.
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 3; ++k) {
      double rs = 0;
      for (int j = 0; j < 6; ++j) rs += b.data()[k * 6 + j];
      EXPECT_NEAR(a.grad()[i * 3 + k], rs, 1e-12);
    }
}

TEST(TensorGrad, PolynomialAndAccumulation) {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad();
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 6.0);
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(TensorGrad, DisconnectedLeafGetsZeros) {
  std::mt19937_64 g(8);
  Tensor a = randn({3}, g), unused = randn({4}, g);
  backward(sum(a));
  for (double v : unused.grad()) EXPECT_EQ(v, 0.0);
}

TEST(TensorGrad, StaleTapeAndNonScalar) {
  std::mt19937_64 g(9);
  Tensor a = randn({3}, g);
  const Tensor h = gelu(a);
  const Tensor loss = sum(h);
  backward(loss);
  EXPECT_THROW(backward(loss), StaleTape);
  // Reusing a consumed intermediate in a fresh graph is also stale.
  EXPECT_THROW(backward(sum(h)), StaleTape);
  EXPECT_THROW(backward(gelu(a)), InvalidArgument);
  backward(sum(gelu(a)));  // re-forward works
}

TEST(TensorGrad, TapeVisitsEachNodeOnce) {
  std::mt19937_64 g(10);
  Tensor a = randn({3}, g);
  const Tensor b = gelu(a);
  const Tensor c = add(b, b);
  const Tensor d = mul(c, b);
  const Tape t = record_tape(sum(d));
  EXPECT_EQ(t.size(), 5u);  // a, b, c, d, sum
  EXPECT_TRUE(t.nodes.front() == a.node());
}

TEST(TensorGrad, NoGraphWithoutGrad) {
  const Tensor a = Tensor::full({3}, 1.0);
  const Tensor b = gelu(a);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(b.node()->parents.empty());
}

TEST(TensorGrad, CustomOp) {
  std::mt19937_64 g(11);
  Tensor x = randn({4}, g);
  const auto cube = [](const std::vector<Tensor>& in) {
    std::vector<double> v = in[0].data();
    for (double& e : v) e = e * e * e;
    const auto x0 = in[0].data();
    return custom_op(in, in[0].shape(), v, [x0](std::span<const double> go, const auto& gi) {
      if (gi[0])
        for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += 3 * x0[i] * x0[i] * go[i];
    });
  };
  EXPECT_LT(grad_check(cube, {x}, g), 1e-6);
}

TEST(Dropout, IdentityCases) {
  std::mt19937_64 g(12);
  const Tensor x = randn({100}, g, false);
  EXPECT_TRUE(dropout(x, 0.5, {1, 2, 3}, false).same_node(x));
  EXPECT_TRUE(dropout(x, 0.0, {1, 2, 3}, true).same_node(x));
  EXPECT_THROW(dropout(x, 1.0, {}, true), InvalidArgument);
}

TEST(Dropout, ExpectationPreservedAndDeterministic) {
  const Tensor x = Tensor::full({1000000}, 1.0);
  for (double p : {0.1, 0.5}) {
    const Tensor y = dropout(x, p, {42, 3, 7}, true);
    double m = 0;
    std::size_t zeros = 0;
    for (double v : y.data()) {
      m += v;
      zeros += v == 0.0;
    }
    m /= 1e6;
    EXPECT_NEAR(m, 1.0, 0.01) << p;
    EXPECT_NEAR(zeros / 1e6, p, 0.01 * p) << p;
    EXPECT_EQ(y.data(), dropout(x, p, {42, 3, 7}, true).data());
  }
  EXPECT_NE(dropout(x, 0.1, {42, 3, 7}, true).data(), dropout(x, 0.1, {42, 3, 8}, true).data());
  EXPECT_NE(dropout(x, 0.1, {42, 3, 7}, true).data(), dropout(x, 0.1, {42, 4, 7}, true).data());
}

TEST(Dropout, Gradient) {
  std::mt19937_64 g(13);
  EXPECT_LT(grad_check([](auto& in) { return dropout(in[0], 0.3, {1, 1, 1}, true); }, {randn({50}, g)}, g), 1e-6);
}

TEST(AdamW, Defaults) {
  const AdamWConfig c;
  EXPECT_EQ(c.lr, 1e-6);
  EXPECT_EQ(c.weight_decay, 1e-5);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.eps, 1e-8);
}

TEST(AdamW, ZeroGradientNoDecayIsNoop) {
  std::vector<double> p{1.5, -2.0}, gr{0.0, 0.0};
  AdamWState st;
  st.cfg.weight_decay = 0.0;
  st.m = {{0, 0}};
  st.v = {{0, 0}};
  for (int i = 0; i < 5; ++i) adamw_step({&p}, {&gr}, st);
  EXPECT_EQ(p, (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, HandComputedSteps) {
  // Step 1: m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², so
  // p1 = p0 (1 - lr wd) - lr g / (|g| + eps).
  const double lr = 0.01, wd = 0.1, p0 = 2.0, g1 = 0.5, g2 = -0.3;
  std::vector<double> p{p0}, gr{g1};
  AdamWState st;
  st.cfg = {lr, 0.9, 0.999, 1e-8, wd};
  st.m = {{0}};
  st.v = {{0}};
  adamw_step({&p}, {&gr}, st);
  const double p1 = p0 * (1 - lr * wd) - lr * g1 / (std::abs(g1) + 1e-8);
  EXPECT_NEAR(p[0], p1, 1e-15);
  gr[0] = g2;
  adamw_step({&p}, {&gr}, st);
  const double m2 = 0.9 * 0.1 * g1 + 0.1 * g2, v2 = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
  const double mh = m2 / (1 - 0.81), vh = v2 / (1 - 0.999 * 0.999);
  const double p2 = p1 * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + 1e-8);
  EXPECT_NEAR(p[0], p2, 1e-15);
}

TEST(AdamW, TensorOverloadAndShapeErrors) {
  Tensor w = Tensor::from_data({2}, {1.0, 1.0});
  w.set_requires_grad();
  std::vector<Tensor> params{w};
  AdamWState st = make_adamw_state(params, {0.1, 0.9, 0.999, 1e-8, 0.0});
  backward(sum(mul(w, w)));
  adamw_step(params, st);
  EXPECT_NEAR(w.data()[0], 0.9, 1e-7);
  std::vector<double> p{1.0}, gr{1.0, 2.0};
  AdamWState bad;
  bad.m = {{0}};
  bad.v = {{0}};
  EXPECT_THROW(adamw_step({&p}, {&gr}, bad), ShapeError);
}

TEST(Checkpoint, ByteExactRoundTrip) {
  std::mt19937_64 g(14);
  Checkpoint ck;
  ck.tensors.push_back({"a.weight", {3, 4}, randn({3, 4}, g, false).data()});
  ck.tensors.push_back({"b", {}, {-0.0}});
  ck.tensors.push_back({"c", {5}, {1e-310, INFINITY, -1.0 / 3.0, 1e300, 0.1}});
  ck.meta = {{"repr", "quat"}, {"epoch", 3}};
  const std::string bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "INCKPT01");
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  ASSERT_EQ(back.tensors.size(), 3u);
  EXPECT_EQ(back.tensors[0], ck.tensors[0]);
  EXPECT_TRUE(std::signbit(back.at("b").values[0]));
  EXPECT_EQ(back.meta["repr"], "quat");

  const auto path = (std::filesystem::temp_directory_path() / "incarpose_ckpt.bin").string();
  save_checkpoint(path, ck);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptInput) {
  EXPECT_THROW(deserialize_checkpoint("garbage"), DataError);
  Checkpoint ck;
  ck.tensors.push_back({"a", {4}, {1, 2, 3, 4}});
  std::string bytes = serialize_checkpoint(ck);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), DataError);
  bytes[16] = '!';
  EXPECT_THROW(deserialize_checkpoint(bytes), DataError);
  EXPECT_THROW(ck.at("missing"), DataError);
}
