#include <doctest.h>

#include <cmath>
#include <random>

#include "blockcheck.hpp"
#include "mmseg/attention.hpp"

using namespace mmseg;
using namespace mmseg::test;

TEST_CASE("reduction is half the unit count, at least one") {
  CHECK(attention_reduction(4) == 2);
  CHECK(attention_reduction(5) == 2);
  CHECK(attention_reduction(1) == 1);
  DualFusion<float> f(4, 8);
  CHECK(f.squeeze.shape == std::vector<Index>{2, 4});
  CHECK(f.excite.shape == std::vector<Index>{4, 2});
  CHECK(f.spatial_weight.size() == 32);
}

TEST_CASE("zero weights leave the input unchanged") {
  std::mt19937_64 rng(1);
  DualFusion<double> f(5, 3);
  const auto z = random_tensor({2, 15, 2, 3, 4}, rng);
  AttentionWeights<double> w;
  const auto out = dual_fusion_forward(f, z, static_cast<FusionCache<double>*>(nullptr), &w);
  CHECK((out.data().array() == z.data().array()).all());
  CHECK((w.modality.array() == 0.5).all());
  CHECK((w.spatial.data().array() == 0.5).all());
}

TEST_CASE("modality gates by hand") {
  // Two units of one channel over two voxels: g = (1, 3).
  DualFusion<double> f(2, 1);
  f.squeeze.value << 0.5, -0.25;    // 1 x 2
  f.excite.value << 2.0, -1.0;      // 2 x 1
  Tensor5<double> z({1, 2, 1, 1, 2});
  z.data() << 0.0, 2.0, 3.0, 3.0;
  ModalityAttentionCache<double> cache;
  const auto out = modality_attention_forward(f, z, &cache);
  const double hidden = std::max(0.0, 0.5 * 1.0 - 0.25 * 3.0);
  CHECK(hidden == 0.0);
  const double gate = 1.0 / (1.0 + std::exp(-0.0));
  CHECK(cache.gates(0, 0) == doctest::Approx(gate));
  CHECK(out(0, 1, 0, 0, 0) == doctest::Approx(3.0 * gate));

  f.squeeze.value << 0.5, 0.25;
  modality_attention_forward(f, z, &cache);
  const double h2 = 0.5 + 0.75;
  CHECK(cache.gates(0, 0) == doctest::Approx(1 / (1 + std::exp(-2.0 * h2))));
  CHECK(cache.gates(0, 1) == doctest::Approx(1 / (1 + std::exp(1.0 * h2))));
}

TEST_CASE("spatial gate by hand") {
  DualFusion<double> f(2, 1);
  f.spatial_weight.value << 1.0, -2.0;
  f.spatial_bias.value << 0.5;
  Tensor5<double> z({1, 2, 1, 1, 2});
  z.data() << 1.0, 0.0, 1.0, -1.0;
  Tensor5<double> gates;
  const auto out = spatial_attention_forward(f, z, gates);
  const double q0 = 1.0 - 2.0 + 0.5;
  const double q1 = 0.0 + 2.0 + 0.5;
  CHECK(gates(0, 0, 0, 0, 0) == doctest::Approx(1 / (1 + std::exp(-q0))));
  CHECK(gates(0, 0, 0, 0, 1) == doctest::Approx(1 / (1 + std::exp(-q1))));
  CHECK(out(0, 1, 0, 0, 1) == doctest::Approx(-1 / (1 + std::exp(-q1))));
}

TEST_CASE("attention weights lie strictly inside (0, 1)") {
  std::mt19937_64 rng(4);
  DualFusion<double> f(4, 2);
  f.init(rng);
  const auto z = random_tensor({2, 8, 3, 3, 3}, rng, -4, 4);
  AttentionWeights<double> w;
  dual_fusion_forward(f, z, static_cast<FusionCache<double>*>(nullptr), &w);
  CHECK((w.modality.array() > 0).all());
  CHECK((w.modality.array() < 1).all());
  CHECK((w.spatial.data().array() > 0).all());
  CHECK((w.spatial.data().array() < 1).all());
}

TEST_CASE("unit list overload equals concatenation") {
  std::mt19937_64 rng(5);
  DualFusion<double> f(3, 2);
  f.init(rng);
  std::vector<Tensor5<double>> units;
  for (int i = 0; i < 3; ++i) units.push_back(random_tensor({1, 2, 2, 2, 2}, rng));
  const auto a = dual_fusion_forward(f, units);
  const auto b = dual_fusion_forward(f, concat_channels(units));
  CHECK((a.data().array() == b.data().array()).all());
  units.pop_back();
  CHECK_THROWS_AS(dual_fusion_forward(f, units), Error);
}

TEST_CASE("gradient: modality attention") {
  std::mt19937_64 rng(6);
  for (Index units : {4, 5}) {
    DualFusion<double> f(units, 2);
    f.init(rng);
    const auto z = random_tensor({2, units * 2, 3, 3, 3}, rng);
    ModalityAttentionCache<double> cache;
    const auto r = check_module(
        f, z,
        [&](const Tensor5<double>& x, bool rec) {
          return modality_attention_forward(f, x, rec ? &cache : nullptr);
        },
        [&](const Tensor5<double>& dy) { return modality_attention_backward(f, cache, z, dy); });
    for (const auto& g : r)
      if (g.name == "input" || g.name == ".squeeze" || g.name == ".excite")
        CHECK_MESSAGE(g.error <= kTolerance, g.name);
  }
}

TEST_CASE("gradient: spatial attention") {
  std::mt19937_64 rng(7);
  DualFusion<double> f(4, 2);
  f.init(rng);
  randomize(f.spatial_bias.value, rng);
  const auto z = random_tensor({2, 8, 3, 3, 3}, rng);
  Tensor5<double> gates;
  const auto r = check_module(
      f, z,
      [&](const Tensor5<double>& x, bool rec) {
        Tensor5<double> g;
        auto y = spatial_attention_forward(f, x, g);
        if (rec) gates = g;
        return y;
      },
      [&](const Tensor5<double>& dy) { return spatial_attention_backward(f, gates, z, dy); });
  for (const auto& g : r)
    if (g.name == "input" || g.name == ".spatial_weight" || g.name == ".spatial_bias")
      CHECK_MESSAGE(g.error <= kTolerance, g.name);
}

TEST_CASE("gradient: dual fusion") {
  std::mt19937_64 rng(8);
  DualFusion<double> f(5, 2);
  f.init(rng);
  const auto z = random_tensor({1, 10, 4, 4, 4}, rng);
  FusionCache<double> cache;
  const auto r = check_module(
      f, z,
      [&](const Tensor5<double>& x, bool rec) {
        return dual_fusion_forward(f, x, rec ? &cache : nullptr);
      },
      [&](const Tensor5<double>& dy) { return dual_fusion_backward(f, cache, dy); });
  for (const auto& g : r) CHECK_MESSAGE(g.error <= kTolerance, g.name);
}
