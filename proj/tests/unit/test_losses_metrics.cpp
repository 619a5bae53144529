#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "mmseg/losses.hpp"
#include "mmseg/metrics.hpp"
#include "oracles.hpp"

using namespace mmseg;
using namespace mmseg::test;

namespace {

BinaryMask mask(Grid3 g, std::initializer_list<Eigen::Index> on) {
  BinaryMask m{g, MaskArray::Constant(g.numel(), false)};
  for (auto i : on) m.data[i] = true;
  return m;
}

LabelVolume labels(Grid3 g, std::initializer_list<int> raw) {
  ClassArray v(g.numel());
  Eigen::Index i = 0;
  for (int r : raw) v[i++] = static_cast<std::uint8_t>(r);
  return LabelVolume::from_values(g, v);
}

} // namespace

TEST_CASE("dice loss: perfect prediction is zero") {
  const auto gt = labels({1, 2, 2}, {0, 1, 2, 4});
  const auto t = one_hot<double>({&gt});
  CHECK(dice_loss(t, t).value == doctest::Approx(0).epsilon(1e-15));
}

TEST_CASE("dice loss: uniform probabilities") {
  const auto gt = labels({2, 2, 2}, {0, 0, 1, 2, 4, 4, 0, 2});
  const auto t = one_hot<double>({&gt});
  Tensor5<double> p(t.shape());
  p.data().setConstant(0.25);
  const double n = 8, eps = kDiceEpsilon;
  const double expected = 1 - (0.5 * n + eps) / (2 * n + eps);
  CHECK(dice_loss(p, t).value == doctest::Approx(expected).epsilon(1e-14));
  CHECK(dice_loss(p, t).value == doctest::Approx(0.75).epsilon(1e-5));
}

TEST_CASE("dice loss: empty everything is zero") {
  Tensor5<double> z({1, 4, 2, 2, 2});
  CHECK(dice_loss(z, z).value == 0);
}

TEST_CASE("dice loss: shape mismatch") {
  Tensor5<double> a({1, 4, 2, 2, 2}), b({1, 3, 2, 2, 2});
  CHECK_THROWS_AS(dice_loss(a, b), Error);
}

TEST_CASE("gradient: dice loss on 2-class 2^3") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_tensor({1, 2, 2, 2, 2}, rng, 0, 1);
    Tensor5<double> t(p.shape());
    std::bernoulli_distribution coin(0.5);
    for (Index v = 0; v < 8; ++v) t.sample(0)(coin(rng) ? 1 : 0, v) = 1;
    const auto r = dice_loss(p, t, kDiceEpsilon, true);
    const double e =
        gradient_error(p.data(), r.grad.data(), [&] { return dice_loss(p, t).value; });
    CHECK(e <= kTolerance);
  }
}

TEST_CASE("gradient: dice through softmax") {
  std::mt19937_64 rng(2);
  auto logits = random_tensor({2, 4, 2, 2, 2}, rng, -2, 2);
  const auto a = labels({2, 2, 2}, {0, 1, 2, 4, 0, 0, 2, 2});
  const auto b = labels({2, 2, 2}, {4, 4, 2, 0, 0, 1, 1, 0});
  const auto t = one_hot<double>({&a, &b});
  const auto p = softmax_channels(logits);
  const auto r = dice_loss(p, t, kDiceEpsilon, true);
  const auto dl = softmax_channels_backward(p, r.grad);
  const double e = gradient_error(logits.data(), dl.data(), [&] {
    return dice_loss(softmax_channels(logits), t).value;
  });
  CHECK(e <= kTolerance);
}

TEST_CASE("softmax sums to one per voxel") {
  std::mt19937_64 rng(3);
  const auto p = softmax_channels(random_tensor({2, 4, 3, 3, 3}, rng, -30, 30));
  for (Index n = 0; n < 2; ++n)
    CHECK(((p.sample(n).colwise().sum().array() - 1).abs() < 1e-12).all());
}

TEST_CASE("total loss") {
  CHECK(total_loss(0.3, 0.5, 0.1) == doctest::Approx(0.35).epsilon(1e-15));
  CHECK(total_loss(0.3, 0.5, 0.0) == 0.3);
  CHECK(total_loss(0.3, 0.5) == doctest::Approx(0.35));
  CHECK(kDefaultLambda == 0.1);
}

TEST_CASE("region masks") {
  const Grid3 g{1, 1, 4};
  SUBCASE("all enhancing") {
    const auto m = region_masks(labels(g, {4, 4, 4, 4}));
    CHECK(m.et.count() == 4);
    CHECK(m.tc.count() == 4);
    CHECK(m.wt.count() == 4);
  }
  SUBCASE("edema only") {
    const auto m = region_masks(labels(g, {0, 2, 2, 0}));
    CHECK(m.et.count() == 0);
    CHECK(m.tc.count() == 0);
    CHECK((m.wt.data == (MaskArray(4) << false, true, true, false).finished()).all());
  }
  SUBCASE("nesting on random labels") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> pick(0, 3);
    ClassArray c(64);
    for (auto& v : c) v = static_cast<std::uint8_t>(pick(rng));
    const auto m = region_masks(LabelVolume{{4, 4, 4}, Spacing::Ones(), c});
    CHECK((!m.et.data || m.tc.data).all());
    CHECK((!m.tc.data || m.wt.data).all());
  }
}

TEST_CASE("dice score hand cases") {
  const Grid3 g{1, 1, 10};
  CHECK(dice_score(mask(g, {1, 2}), mask(g, {1, 2})) == 1.0);
  CHECK(dice_score(mask(g, {1, 2}), mask(g, {3, 4})) == 0.0);
  CHECK(dice_score(mask(g, {}), mask(g, {})) == 1.0);
  // TP = 5, FP = 3, FN = 2.
  const auto pred = mask(g, {0, 1, 2, 3, 4, 5, 6, 7});
  const auto gt = mask(g, {0, 1, 2, 3, 4, 8, 9});
  CHECK(std::abs(dice_score(pred, gt) - 10.0 / 15.0) <= 1e-9);
  CHECK(std::abs(dice_score(pred, gt) - 0.6667) <= 1e-4);
  CHECK_THROWS_AS(dice_score(mask(g, {}), mask({1, 2, 5}, {})), Error);
}

TEST_CASE("hausdorff hand cases") {
  const Grid3 g{1, 1, 8};
  CHECK(hausdorff(mask(g, {1}), mask(g, {4})).value() == 3.0);
  CHECK(hausdorff(mask(g, {1, 2, 3}), mask(g, {1, 2, 3})).value() == 0.0);
  CHECK_FALSE(hausdorff(mask(g, {}), mask(g, {2})).has_value());
  CHECK_FALSE(hausdorff(mask(g, {2}), mask(g, {})).has_value());
  CHECK(hausdorff(mask(g, {1}), mask(g, {4}), Spacing(1, 1, 2.5)).value() == 7.5);
  const Grid3 cube{3, 3, 3};
  CHECK(hausdorff(mask(cube, {0}), mask(cube, {26})).value() == doctest::Approx(std::sqrt(12.0)));
}

TEST_CASE("interior voxels are not boundary") {
  BinaryMask full{{3, 3, 3}, MaskArray::Constant(27, true)};
  CHECK(boundary_voxels(full).size() == 26);
}

TEST_CASE("metric oracles on 200 random mask pairs") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> density(0.0, 0.6);
  for (int trial = 0; trial < 200; ++trial) {
    const Grid3 g = random_grid(rng, 8);
    const auto a = random_mask(g, density(rng), rng);
    const auto b = random_mask(g, density(rng), rng);
    CHECK(dice_score(a, b) == brute_dice(a, b));
    const auto h = hausdorff(a, b);
    const auto ref = brute_hausdorff(a, b);
    REQUIRE(h.has_value() == ref.has_value());
    if (h) CHECK(*h == *ref);
  }
}

TEST_CASE("metric symmetry and triangle inequality") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Grid3 g = random_grid(rng, 6);
    const auto a = random_mask(g, 0.3, rng);
    const auto b = random_mask(g, 0.3, rng);
    const auto c = random_mask(g, 0.3, rng);
    CHECK(dice_score(a, b) == dice_score(b, a));
    const auto ab = hausdorff(a, b), ba = hausdorff(b, a), bc = hausdorff(b, c),
               ac = hausdorff(a, c);
    CHECK(ab == ba);
    if (ab && bc && ac) CHECK(*ac <= *ab + *bc + 1e-12);
  }
}

TEST_CASE("dice score is invariant under a common voxel permutation") {
  std::mt19937_64 rng(7);
  const Grid3 g{1, 1, 64};
  const auto a = random_mask(g, 0.4, rng);
  const auto b = random_mask(g, 0.4, rng);
  std::vector<Eigen::Index> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  BinaryMask pa = a, pb = b;
  for (Eigen::Index i = 0; i < 64; ++i) {
    pa.data[i] = a.data[perm[static_cast<std::size_t>(i)]];
    pb.data[i] = b.data[perm[static_cast<std::size_t>(i)]];
  }
  CHECK(dice_score(pa, pb) == dice_score(a, b));
}

TEST_CASE("metrics csv") {
  const Grid3 g{1, 1, 4};
  const auto gt = labels(g, {0, 2, 2, 0});
  const auto pred = labels(g, {0, 2, 0, 0});
  MetricsReport report;
  report.cases.push_back(evaluate_case("c1", pred, gt));
  report.cases.push_back(evaluate_case("c2", gt, gt));
  const std::string csv = report.to_csv();
  CHECK(csv.rfind("case_id,region,dice,hausdorff_mm\n", 0) == 0);
  CHECK(csv.find("c1,ET,1,NA\n") != std::string::npos);
  CHECK(csv.find("c1,WT,0.6666666667,1\n") != std::string::npos);
  CHECK(csv.find("c2,WT,1,0\n") != std::string::npos);
  CHECK(csv.find("mean,WT,0.8333333333,0.5\n") != std::string::npos);
  CHECK(csv.find("mean,TC,1,NA\n") != std::string::npos);
}
