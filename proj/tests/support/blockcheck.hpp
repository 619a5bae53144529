#ifndef MMSEG_TEST_BLOCKCHECK_HPP
#define MMSEG_TEST_BLOCKCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace mmseg::test {

struct GradReport {
  std::string name;
  double error = 0;
};

/// Finite-difference check of a layer with an input and parameters.
/// `forward(x, record)` returns the output (caching when record is set);
/// `backward(dy)` accumulates parameter gradients and returns dx.
template <class Module>
std::vector<GradReport> check_module(
    Module& module, Tensor5<double> x,
    const std::function<Tensor5<double>(const Tensor5<double>&, bool)>& forward,
    const std::function<Tensor5<double>(const Tensor5<double>&)>& backward,
    std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  const auto y = forward(x, true);
  const auto w = random_tensor(y.shape(), rng);
  module.for_each_param("", [](const std::string&, Param<double>& p) { p.zero_grad(); });
  const auto dx = backward(w);
  auto loss = [&]() { return project(forward(x, false), w); };
  std::vector<GradReport> out;
  out.push_back({"input", gradient_error(x.data(), dx.data(), loss)});
  module.for_each_param("", [&](const std::string& name, Param<double>& p) {
    const Vector<double> analytic = p.grad;
    out.push_back({name, gradient_error(p.value, analytic, loss)});
  });
  return out;
}

inline double worst(const std::vector<GradReport>& r) {
  double e = 0;
  for (const auto& g : r) e = std::max(e, g.error);
  return e;
}

} // namespace mmseg::test

#endif
