#include <gtest/gtest.h>

#include "gradcheck_cases.hpp"

using namespace tsuda;
using namespace tsuda::testing;

TEST(GradCheck, EveryOpAndNetworkInDouble) {
  for (std::uint64_t seed : {1, 2}) {
    for (const auto& c : gradcheck_cases(seed)) {
      EXPECT_LT(c.result.max_rel_error, 1e-3)
          << c.name << " seed " << seed << " worst " << c.result.worst_param << "[" << c.result.worst_index
          << "] analytic " << c.result.analytic << " numeric " << c.result.numeric;
      EXPECT_GT(c.result.checked, 0u) << c.name;
    }
  }
}

TEST(GradCheck, RefinementStepsPastReluKink) {
  // relu(x) at x = 2e-6 with step 1e-5: the first estimate straddles the kink.
  DParams p(NetConfig{});
  p.add("x", DTensor({1}, {2e-6}));
  auto f = [](DParams& q, DTape* t) { return sum(relu(q.at("x"), t), t); };
  const GradCheckResult r = finite_diff_check(f, p, 1e-5);
  EXPECT_EQ(r.refined, 1u);
  EXPECT_LT(r.max_rel_error, 1e-9);
  // A wrong gradient is not rescued by refinement.
  auto wrong = [](DParams& q, DTape* t) {
    DTensor y = sum(mul(q.at("x"), q.at("x"), t), t);
    if (t) return scale(y, 2.0, t);
    return y;
  };
  EXPECT_GT(finite_diff_check(wrong, p, 1e-5).max_rel_error, 0.4);
}

// Float kernels are the same templates; the float network agrees with the
// double one to float precision.
TEST(GradCheck, FloatGradientsTrackDouble) {
  const NetConfig cfg{1, 2, 2, 2};
  DParams d = build_net<double>(cfg, 3);
  ModelParams f = d.cast<float>();
  const DTensor xd = random_tensor<double>({2, 1, 8, 8}, 7, 0, 1);
  const DTensor td = softmax_channel(random_tensor<double>({2, 2, 8, 8}, 8, -2, 2));
  d.set_requires_grad(true);
  f.set_requires_grad(true);
  DTape dt;
  auto ld = composite_loss(forward(d, xd, &dt), td, &dt).total;
  backward(dt, ld);
  Tape ft;
  auto lf = composite_loss(forward(f, xd.cast<float>(), &ft), td.cast<float>(), &ft).total;
  backward(ft, lf);
  EXPECT_NEAR(lf.item(), ld.item(), 1e-5);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.tensor(i).size(); ++j) {
      const double a = d.tensor(i).grad()[j], b = f.tensor(i).grad()[j];
      num += (a - b) * (a - b);
      den += a * a;
    }
  EXPECT_LT(std::sqrt(num / den), 1e-4);
}
