#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "tsuda/gradcheck.hpp"
#include "tsuda/ops.hpp"

using namespace tsuda;
using tsuda::testing::random_tensor;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 0}, {}), std::invalid_argument);
}

TEST(Tensor, CopiesShareStorageAndCloneDoesNot) {
  Tensor a = Tensor::full({2}, 1.0f);
  Tensor b = a;
  Tensor c = a.clone();
  b[0] = 5;
  EXPECT_EQ(a[0], 5);
  EXPECT_EQ(c[0], 1);
  EXPECT_TRUE(a.same_storage(b));
  EXPECT_FALSE(a.same_storage(c));
}

TEST(Tensor, GradBufferMatchesDataLength) {
  Tensor a = Tensor::zeros({3, 4}, true);
  EXPECT_FALSE(a.has_grad());
  EXPECT_EQ(a.ensure_grad().size(), a.size());
}

TEST(Conv2d, OneByOneHandCase) {
  Tensor in = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor k({1, 1, 1, 1}, {2.0f});
  Tensor b({1}, {0.5f});
  Tensor out = conv2d(in, k, b, 0);
  ASSERT_EQ(out.dims(), (Shape{1, 1, 3, 3}));
  for (float v : out.data()) EXPECT_FLOAT_EQ(v, 2.5f);
}

TEST(Conv2d, IdentityKernel) {
  Tensor in = random_tensor({2, 1, 4, 6}, 3);
  Tensor out = conv2d(in, Tensor({1, 1, 1, 1}, {1.0f}), Tensor({1}, {0.0f}), 0);
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(out[i], in[i]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  struct Case {
    Shape in, k;
    std::size_t pad;
  };
  const Case cases[] = {{{2, 2, 5, 5}, {3, 2, 3, 3}, 1}, {{2, 4, 8, 8}, {5, 4, 3, 3}, 1},
                        {{2, 4, 8, 8}, {3, 4, 3, 3}, 0}, {{1, 3, 7, 5}, {2, 3, 1, 1}, 0},
                        {{2, 4, 8, 8}, {2, 4, 5, 5}, 2}};
  std::uint64_t seed = 10;
  for (const auto& c : cases) {
    Tensor in = random_tensor(c.in, ++seed), k = random_tensor(c.k, ++seed), b = random_tensor({c.k[0]}, ++seed);
    Tensor out = conv2d(in, k, b, c.pad);
    const auto ref = tsuda::testing::conv_oracle(in, k, b, c.pad);
    ASSERT_EQ(out.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6 * (1 + std::abs(ref[i]))) << "case in=" << to_string(c.in);
  }
}

TEST(Conv2d, WideImagesUseSeveralBands) {
  Tensor in = random_tensor({1, 2, 20, 40}, 5), k = random_tensor({3, 2, 3, 3}, 6), b = random_tensor({3}, 7);
  Tensor out = conv2d(in, k, b, 1);
  const auto ref = tsuda::testing::conv_oracle(in, k, b, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-5);
}

TEST(Conv2d, ErrorsNameTheAxis) {
  Tensor in = Tensor::zeros({1, 2, 4, 4});
  try {
    conv2d(in, Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), 1);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("channel axis"), std::string::npos);
  }
  try {
    conv2d(in, Tensor::zeros({2, 2, 3, 3}), Tensor::zeros({3}), 1);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("bias"), std::string::npos);
  }
  EXPECT_THROW(conv2d(in, Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1}), 0), std::invalid_argument);
  EXPECT_THROW(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1}), 1),
               std::invalid_argument);
}

TEST(Relu, Values) {
  Tensor x({3}, {-1.0f, 0.0f, 2.0f});
  Tensor y = relu(x);
  EXPECT_EQ(y[0], 0);
  EXPECT_EQ(y[1], 0);
  EXPECT_EQ(y[2], 2);
  Tensor pos = random_tensor({10}, 1, 0.1, 1.0);
  Tensor r = relu(pos);
  for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_EQ(r[i], pos[i]);
}

TEST(Relu, GradientMasksNegativeInputs) {
  Tensor x({2}, {-1.0f, 2.0f}, true);
  Tape tape;
  Tensor loss = sum(relu(x, &tape), &tape);
  backward(tape, loss);
  EXPECT_EQ(x.grad()[0], 0);
  EXPECT_EQ(x.grad()[1], 1);
}

TEST(Maxpool2, SingleWindowAndHandCase) {
  EXPECT_EQ(maxpool2(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}))[0], 4);
  Tensor x({1, 1, 4, 4}, {1, 5, 2, 0, 3, 4, 8, 7, 9, 6, 10, 11, 12, 13, 15, 14});
  Tensor y = maxpool2(x);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{5, 8, 13, 15}));
}

TEST(Maxpool2, TiesRouteGradientToFirstPosition) {
  Tensor x = Tensor::full({1, 1, 4, 4}, 3.0f, true);
  Tape tape;
  Tensor y = maxpool2(x, &tape);
  for (float v : y.data()) EXPECT_EQ(v, 3);
  Tensor loss = sum(y, &tape);
  backward(tape, loss);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(x.grad()[r * 4 + c], (r % 2 == 0 && c % 2 == 0) ? 1.0f : 0.0f);
}

TEST(Maxpool2, RejectsOddSizes) {
  EXPECT_THROW(maxpool2(Tensor::zeros({1, 1, 3, 4})), std::invalid_argument);
  EXPECT_THROW(maxpool2(Tensor::zeros({1, 1, 4, 5})), std::invalid_argument);
}

TEST(Upsample2, ReplicatesAndRoundTrips) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  Tape tape;
  Tensor y = upsample2(x, &tape);
  ASSERT_EQ(y.dims(), (Shape{1, 1, 4, 4}));
  const float expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) EXPECT_EQ(y[i], expect[i]);
  Tensor back = maxpool2(y);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(back[i], x[i]);
  Tensor loss = sum(y, &tape);
  backward(tape, loss);
  for (float g : x.grad()) EXPECT_EQ(g, 4);
}

TEST(SoftmaxChannel, HandValues) {
  Tensor p = softmax_channel(Tensor({1, 2, 1, 3}, {0, 20, 1, 0, -20, 0}));
  EXPECT_FLOAT_EQ(p[0], 0.5f);
  EXPECT_FLOAT_EQ(p[3], 0.5f);
  EXPECT_NEAR(p[1], 1.0, 1e-7);
  EXPECT_NEAR(p[4], 0.0, 1e-7);
  EXPECT_NEAR(p[2], std::exp(1.0) / (std::exp(1.0) + 1), 1e-6);
  EXPECT_NEAR(p[5], 1 / (std::exp(1.0) + 1), 1e-6);
  Tensor big = softmax_channel(Tensor({1, 2, 1, 1}, {1e30f, -1e30f}));
  EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
}

TEST(SoftmaxChannel, SumsToOne) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor p = softmax_channel(random_tensor({3, 2, 5, 7}, seed, -30, 30));
    const std::size_t hw = 35;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const float a = p[b * 2 * hw + i], c = p[b * 2 * hw + hw + i];
        EXPECT_GE(a, 0);
        EXPECT_LE(a, 1);
        EXPECT_NEAR(a + c, 1.0, 1e-5);
      }
  }
  EXPECT_THROW(softmax_channel(Tensor::zeros({1, 3, 2, 2})), std::invalid_argument);
}

TEST(Backward, LinearAndQuadratic) {
  Tensor t = Tensor::full({4}, 3.0f, true);
  {
    Tape tape;
    Tensor loss = sum(t, &tape);
    backward(tape, loss);
    for (float g : t.grad()) EXPECT_EQ(g, 1);
  }
  t.zero_grad();
  Tape tape;
  Tensor loss = sum(mul(t, t, &tape), &tape);
  backward(tape, loss);
  for (float g : t.grad()) EXPECT_EQ(g, 6);
}

TEST(Backward, AccumulatesAcrossUses) {
  Tensor t = Tensor::full({2}, 1.0f, true);
  Tape tape;
  Tensor loss = sum(add(t, scale(t, 2.0f, &tape), &tape), &tape);
  backward(tape, loss);
  for (float g : t.grad()) EXPECT_EQ(g, 3);
}

TEST(Backward, RejectsNonScalarAndForeignLoss) {
  Tensor t = Tensor::full({2}, 1.0f, true);
  Tape tape;
  Tensor y = scale(t, 2.0f, &tape);
  EXPECT_THROW(backward(tape, y), std::invalid_argument);
  Tensor other = Tensor::scalar(1.0f, true);
  EXPECT_THROW(backward(tape, other), std::invalid_argument);
}

TEST(Tape, RecordsInTopologicalOrder) {
  Tensor x = random_tensor({1, 1, 4, 4}, 1, -1, 1, true);
  Tape tape;
  Tensor y = sum(relu(maxpool2(x, &tape), &tape), &tape);
  ASSERT_EQ(tape.size(), 3u);
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (const auto& in : tape.entries()[i].inputs) {
      if (in.same_storage(x)) continue;
      bool earlier = false;
      for (std::size_t j = 0; j < i; ++j) earlier |= tape.entries()[j].output.same_storage(in);
      EXPECT_TRUE(earlier);
    }
}

TEST(Tape, NothingRecordedWithoutGradOrTape) {
  Tensor x = random_tensor({1, 1, 4, 4}, 1);
  Tape tape;
  relu(x, &tape);
  EXPECT_TRUE(tape.empty());
  Tensor g = random_tensor({1, 1, 4, 4}, 1, -1, 1, true);
  EXPECT_FALSE(relu(g).requires_grad());
}

TEST(Tape, ReplayIsBitwiseDeterministic) {
  auto run = [] {
    Tensor in = random_tensor({2, 3, 8, 8}, 9, -1, 1, true);
    Tensor k = random_tensor({4, 3, 3, 3}, 10, -1, 1, true);
    Tensor b = random_tensor({4}, 11, -1, 1, true);
    Tape tape;
    Tensor loss = sum(relu(conv2d(in, k, b, 1, &tape), &tape), &tape);
    backward(tape, loss);
    std::vector<float> out{loss.item()};
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    out.insert(out.end(), in.grad().begin(), in.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, OutputsStayFiniteOnFiniteInputs) {
  Tensor in = random_tensor({2, 3, 8, 8}, 4, -50, 50, true);
  Tensor k = random_tensor({2, 3, 3, 3}, 5, -1, 1, true);
  Tensor b = random_tensor({2}, 6, -1, 1, true);
  Tape tape;
  Tensor p = softmax_channel(conv2d(in, k, b, 1, &tape), &tape);
  Tensor loss = sum(mul(p, p, &tape), &tape);
  backward(tape, loss);
  for (float v : p.data()) EXPECT_TRUE(std::isfinite(v));
  for (float v : k.grad()) EXPECT_TRUE(std::isfinite(v));
  for (float v : in.grad()) EXPECT_TRUE(std::isfinite(v));
}

TEST(FiniteDiffCheck, QuadraticAndZeroFunctions) {
  BasicModelParams<double> p(NetConfig{});
  p.add("w", BasicTensor<double>({3}, {0.5, -1.25, 2.0}));
  auto quad = [](BasicModelParams<double>& q, BasicTape<double>* tape) {
    const auto& w = q.at("w");
    return sum(mul(w, w, tape), tape);
  };
  EXPECT_LT(finite_diff_check(quad, p, 1e-3).max_rel_error, 1e-6);
  auto zero = [](BasicModelParams<double>& q, BasicTape<double>* tape) { return scale(sum(q.at("w"), tape), 0.0, tape); };
  const auto r = finite_diff_check(zero, p, 1e-3);
  EXPECT_EQ(r.max_rel_error, 0.0);
  EXPECT_EQ(r.checked, 3u);
  EXPECT_EQ(p.at("w")[1], -1.25);
}
