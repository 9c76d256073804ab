#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "oracles.hpp"
#include "switchhead/numerics/gradcheck.hpp"
#include "switchhead/numerics/op_counter.hpp"
#include "switchhead/numerics/ops.hpp"
#include "switchhead/numerics/optimizer.hpp"
#include "switchhead/numerics/rng.hpp"
#include "switchhead/numerics/tensor.hpp"
#include "switchhead/numerics/topk.hpp"

using namespace switchhead;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

// ---- tensor ------------------------------------------------------------

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor::from({2, 3}, {1, 2, 3}), DimensionError);
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, NonFiniteInputRejected) {
  EXPECT_THROW(Tensor::from({1}, {std::numeric_limits<double>::quiet_NaN()}), ContractError);
  EXPECT_THROW(Tensor::from({1}, {std::numeric_limits<double>::infinity()}), ContractError);
}

TEST(Tensor, GradientMatchesValueLength) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
}

// ---- matmul ------------------------------------------------------------

TEST(Matmul, IdentityCase) {
  const Tensor a = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 1}, {3, 4});
  EXPECT_EQ(vals(matmul(a, b)), (std::vector<double>{3, 4}));
}

TEST(Matmul, RowTimesColumnCountsMacs) {
  OpCounter c;
  const Tensor r = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}), &c);
  EXPECT_EQ(r.item(), 11.0);
  EXPECT_EQ(c.macs(), 2u);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(7);
  const Tensor a = oracle::random_tensor({3, 4}, rng), b = oracle::random_tensor({4, 5}, rng);
  const auto ref = oracle::matmul(vals(a), vals(b), 3, 4, 5);
  EXPECT_LT(oracle::max_abs_diff(vals(matmul(a, b)), ref), 1e-12);
}

TEST(Matmul, TransposedVariantMatchesOracle) {
  Rng rng(8);
  const Tensor a = oracle::random_tensor({3, 4}, rng), b = oracle::random_tensor({5, 4}, rng);
  std::vector<double> bt(20);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) bt[j * 5 + i] = b.at(i, j);
  EXPECT_LT(oracle::max_abs_diff(vals(matmul_nt(a, b)), oracle::matmul(vals(a), bt, 3, 4, 5)), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, StorageCountedOnlyInsideStorageScope) {
  OpCounter c;
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 4});
  matmul(a, b, &c);
  EXPECT_EQ(c.mem_floats(), 0u);
  {
    auto s = count_as(&c, "projections", true);
    matmul(a, b, &c);
  }
  EXPECT_EQ(c.mem_floats(), 8u);
  EXPECT_EQ(c.terms().at("projections").mem_floats, 8u);
  EXPECT_EQ(c.macs(), 48u);
}

TEST(Matmul, AssociativityWithinTolerance) {
  Rng rng(11);
  const Tensor a = oracle::random_tensor({8, 8}, rng), b = oracle::random_tensor({8, 8}, rng),
               c = oracle::random_tensor({8, 8}, rng);
  EXPECT_LT(oracle::max_abs_diff(vals(matmul(matmul(a, b), c)), vals(matmul(a, matmul(b, c)))), 1e-9);
}

// ---- op counter ----------------------------------------------------------

TEST(OpCounter, DisabledCounterLeavesResultsUnchanged) {
  Rng rng(3);
  const Tensor a = oracle::random_tensor({4, 6}, rng), b = oracle::random_tensor({6, 2}, rng);
  OpCounter off(false);
  EXPECT_EQ(vals(matmul(a, b, &off)), vals(matmul(a, b)));
  EXPECT_EQ(off.macs(), 0u);
  EXPECT_EQ(off.mem_floats(), 0u);
}

TEST(OpCounter, CompositeEqualsSumOfPrimitives) {
  Rng rng(4);
  const Tensor x = oracle::random_tensor({5, 3}, rng), w1 = oracle::random_tensor({3, 7}, rng),
               w2 = oracle::random_tensor({7, 2}, rng), w3 = oracle::random_tensor({2, 4}, rng);
  OpCounter c;
  std::uint64_t last = 0;
  Tensor h = matmul(x, w1, &c);
  EXPECT_EQ(c.macs() - last, 5u * 3 * 7);
  last = c.macs();
  h = matmul(relu(h), w2, &c);
  EXPECT_EQ(c.macs() - last, 5u * 7 * 2);
  last = c.macs();
  matmul(h, w3, &c);
  EXPECT_EQ(c.macs() - last, 5u * 2 * 4);
  EXPECT_EQ(c.macs(), 5u * (3 * 7 + 7 * 2 + 2 * 4));
}

TEST(OpCounter, MonotoneWhileEnabled) {
  OpCounter c;
  std::uint64_t prev = 0;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    matmul(oracle::random_tensor({2, 3}, rng), oracle::random_tensor({3, 2}, rng), &c);
    EXPECT_GE(c.macs(), prev);
    prev = c.macs();
  }
}

// ---- softmax -------------------------------------------------------------

TEST(Softmax, UniformFromZeros) {
  const auto p = vals(softmax_last(Tensor::zeros({4})));
  for (double v : p) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LargeLogitIsStable) {
  const auto p = vals(softmax_last(Tensor::from({2}, {1000.0, 0.0})));
  EXPECT_EQ(p[0], 1.0);
  EXPECT_GE(p[1], 0.0);
  EXPECT_LT(p[1], 1e-300);
  EXPECT_FALSE(std::isnan(p[1]));
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
  Rng rng(9);
  const Tensor x = oracle::random_tensor({7}, rng, -3, 3);
  EXPECT_LT(oracle::max_abs_diff(vals(softmax_last(x)), oracle::softmax(vals(x))), 1e-12);
}

TEST(Softmax, EmptyLastDimensionRejected) { EXPECT_THROW(softmax_last(Tensor::zeros({3, 0})), DimensionError); }

TEST(Softmax, RowsAreDistributionsAndShiftInvariant) {
  Rng rng(10);
  const Tensor x = oracle::random_tensor({6, 9}, rng, -5, 5);
  const auto p = vals(softmax_last(x));
  std::vector<double> shifted(x.numel());
  for (std::size_t r = 0; r < 6; ++r) {
    const double c = rng.uniform(-50, 50);
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(p[r * 9 + j], 0.0);
      s += p[r * 9 + j];
      shifted[r * 9 + j] = x[r * 9 + j] + c;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_LT(oracle::max_abs_diff(vals(softmax_last(Tensor::from({6, 9}, shifted))), p), 1e-12);
}

// ---- backward ------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwiceInput) {
  Tensor x = Tensor::from({2}, {2, -1}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{4, -2}));
}

TEST(Backward, SecondCallRejected) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

// Every differentiable primitive against central differences on inputs in [-1, 1].
TEST(Backward, PrimitivesMatchFiniteDifferences) {
  Rng rng(21);
  Tensor a = oracle::random_tensor({3, 4}, rng, -1, 1, true);
  Tensor b = oracle::random_tensor({4, 5}, rng, -1, 1, true);
  Tensor c = oracle::random_tensor({3, 4}, rng, -1, 1, true);
  Tensor bt = oracle::random_tensor({5, 4}, rng, -1, 1, true);
  Tensor g = oracle::random_tensor({4}, rng, -1, 1, true);
  Tensor bias = oracle::random_tensor({4}, rng, -1, 1, true);
  Tensor w = oracle::random_tensor({3}, rng, -1, 1, true);
  Tensor bank = oracle::random_tensor({2, 4, 3}, rng, -1, 1, true);
  const std::vector<std::size_t> rows{2, 0, 2}, cols_idx{1, 3, 0, 2, 2, 1}, elems{0, 5, 11};
  const std::vector<std::size_t> positions{0, 3, 5};
  const std::vector<std::size_t> targets{1, 0, 4};
  const std::vector<std::uint8_t> allowed{1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 0, 0};
  const std::vector<std::size_t> starts{0, 1}, counts{2, 2};
  std::vector<std::function<Tensor()>> cases = {
      [&] { return sum(mul(matmul(a, b), matmul(a, b))); },
      [&] { return sum(mul(matmul_nt(a, bt), matmul_nt(a, bt))); },
      [&] { return sum(mul(sub(add(a, c), mul(a, c)), a)); },
      [&] { return sum(mul(softmax_last(a), c)); },
      [&] { return sum(mul(masked_softmax_last(a, allowed), c)); },
      [&] { return sum(mul(layer_norm(a, g, bias), c)); },
      [&] { return sum(mul(sigmoid(a), c)); },
      [&] { return sum(mul(add_row(a, bias), add_row(c, g))); },
      [&] { return sum(mul(scale_rows(a, w), c)); },
      [&] { return sum(mul(gather_rows(a, rows), c)); },
      [&] { return sum(mul(gather_elements(a, elems), w)); },
      [&] { return sum(mul(gather_cols_per_row(a, cols_idx, 2), gather_cols_per_row(c, cols_idx, 2))); },
      [&] { return sum(mul(rotary(a, positions), c)); },
      [&] { return sum(mul(matmul(a, expert_slice(bank, 1)), matmul(c, expert_slice(bank, 0)))); },
      [&] { return sum(mul(mean_row_groups(a, starts, counts), slice_rows(c, 0, 2))); },
      [&] { return sum(mul(concat_cols({slice_cols(a, 0, 2), slice_cols(c, 2, 2)}), a)); },
      [&] { return sum(mul(concat_rows({slice_rows(a, 1, 2), slice_rows(c, 0, 1)}), c)); },
      [&] { return cross_entropy(matmul(a, b), targets); },
  };
  std::vector<std::pair<std::string, Tensor>> inputs{{"a", a}, {"b", b}, {"c", c}, {"bt", bt}, {"g", g},
                                                     {"bias", bias}, {"w", w}, {"bank", bank}};
  for (std::size_t i = 0; i < cases.size(); ++i) {
    std::vector<std::pair<std::string, Tensor>> used;
    for (auto& in : inputs) used.push_back(in);
    const auto r = check_gradients(cases[i], used);
    EXPECT_LT(r.max_rel_error, 1e-5) << "case " << i << " worst " << r.worst;
  }
}

// ---- adam ----------------------------------------------------------------

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  Tensor p = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
  Adam opt({p}, AdamConfig{});
  auto g = p.mutable_grad();
  std::fill(g.begin(), g.end(), 0.0);
  opt.step();
  EXPECT_EQ(vals(p), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Adam, ClipsGlobalNormToKappa) {
  Tensor p = Tensor::from({2}, {0, 0}, true), q = Tensor::from({1}, {0}, true);
  auto gp = p.mutable_grad();
  gp[0] = 6.0;
  gp[1] = 0.0;
  q.mutable_grad()[0] = 8.0;  // norm 10
  std::vector<Tensor> ps{p, q};
  const double before = clip_grad_norm(ps, 0.25);
  EXPECT_DOUBLE_EQ(before, 10.0);
  EXPECT_NEAR(global_grad_norm(ps), 0.25, 1e-9);
}

TEST(Adam, ScalarTraceMatchesReference) {
  Tensor p = Tensor::from({1}, {0.3}, true);
  AdamConfig cfg;
  cfg.base_lr = 0.01;
  cfg.clip_norm = 0.0;
  Adam opt({p}, cfg);
  const std::vector<double> grads{0.7, -0.2, 1.3};
  const auto ref = oracle::adam_trace(0.3, grads, 0.01);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    p.mutable_grad()[0] = grads[i];
    opt.step();
    EXPECT_NEAR(p[0], ref[i], 1e-12) << "step " << i + 1;
  }
}

TEST(Adam, MissingGradientsRejected) {
  Tensor p = Tensor::from({1}, {1.0}, true);
  Adam opt({p}, AdamConfig{});
  EXPECT_THROW(opt.step(), ContractError);
}

TEST(Adam, WarmupScheduleIsLinear) {
  AdamConfig cfg;
  cfg.base_lr = 0.00025;
  cfg.warmup_steps = 4000;
  Adam opt({Tensor::zeros({1}, true)}, cfg);
  EXPECT_DOUBLE_EQ(opt.lr_at(2000), 0.000125);
  EXPECT_DOUBLE_EQ(opt.lr_at(4000), 0.00025);
  EXPECT_DOUBLE_EQ(opt.lr_at(9000), 0.00025);
  EXPECT_GE(opt.lr_at(0), 0.0);
}

TEST(Adam, MomentsShapedLikeParameters) {
  Adam opt({Tensor::zeros({2, 3}, true), Tensor::zeros({5}, true)}, AdamConfig{});
  ASSERT_EQ(opt.first_moments().size(), 2u);
  EXPECT_EQ(opt.first_moments()[0].size(), 6u);
  EXPECT_EQ(opt.second_moments()[1].size(), 5u);
}

// Within the clip bound, clipping must not touch a single bit.
TEST(Adam, ClippingInactiveBelowKappaIsBitExact) {
  Rng rng(13);
  Tensor a = oracle::random_tensor({4}, rng, -1, 1, true), b = Tensor::from({4}, vals(a), true);
  AdamConfig clipped, free;
  clipped.base_lr = free.base_lr = 0.01;
  clipped.clip_norm = 1e6;
  free.clip_norm = 0.0;
  Adam oa({a}, clipped), ob({b}, free);
  for (int s = 0; s < 5; ++s) {
    std::vector<double> g(4);
    for (double& x : g) x = rng.uniform(-0.05, 0.05);
    std::copy(g.begin(), g.end(), a.mutable_grad().begin());
    std::copy(g.begin(), g.end(), b.mutable_grad().begin());
    oa.step();
    ob.step();
  }
  EXPECT_EQ(vals(a), vals(b));
}

// ---- argtopk -------------------------------------------------------------

TEST(ArgTopK, PicksLargest) {
  const std::vector<double> v{0.1, 0.9, 0.5};
  EXPECT_EQ(argtopk(v, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(ArgTopK, TieGoesToLowestIndex) {
  const std::vector<double> v{0.5, 0.5, 0.1};
  EXPECT_EQ(argtopk(v, 1), (std::vector<std::size_t>{0}));
}

TEST(ArgTopK, MatchesSortOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(16);
    for (double& x : v) x = std::round(rng.uniform(-4, 4) * 2.0) / 2.0;  // many ties
    EXPECT_EQ(argtopk(v, 4), oracle::topk(v, 4));
  }
}

TEST(ArgTopK, BadKRejected) {
  const std::vector<double> v{1, 2, 3};
  EXPECT_THROW(argtopk(v, 0), ContractError);
  EXPECT_THROW(argtopk(v, 4), ContractError);
}

// ---- rng -----------------------------------------------------------------

TEST(Rng, SameSeedSameStreamAndSplitsDiffer) {
  Rng a(42), b(42);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng s1 = Rng(42).split(1), s2 = Rng(42).split(2);
  EXPECT_NE(s1.next_u64(), s2.next_u64());
}
