#ifndef MMSEG_CORRELATION_HPP
#define MMSEG_CORRELATION_HPP

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmseg/layers.hpp"
#include "mmseg/tensor.hpp"

namespace mmseg {

/// Ordered (source -> target) modality pairs, indices into the canonical
/// modality order.
struct ModalityPairing {
  std::vector<std::pair<Index, Index>> pairs;

  /// Chain 0->1->2->...; for four modalities FLAIR>T1, T1>T1c, T1c>T2.
  static ModalityPairing chain(Index modalities);

  /// Parse "SRC>DST,SRC>DST" against the given modality names.
  static ModalityPairing parse(const std::string& text,
                               const std::vector<std::string>& names);

  std::string format(const std::vector<std::string>& names) const;
  Index size() const { return static_cast<Index>(pairs.size()); }
  void validate(Index modalities) const;
};

/// Per-sample correlation parameters: rows are samples, columns channels.
template <typename Scalar>
struct CorrelationParams {
  RowMatrix<Scalar> alpha;
  RowMatrix<Scalar> beta;
};

/// Two fully connected layers, C -> C (LeakyReLU) -> 2C, mapping the pooled
/// source representation to [alpha; beta].
template <typename Scalar>
struct CorrelationMlp {
  Index channels = 0;
  Param<Scalar> fc1_weight; // C x C
  Param<Scalar> fc1_bias;
  Param<Scalar> fc2_weight; // 2C x C
  Param<Scalar> fc2_bias;

  CorrelationMlp() = default;
  explicit CorrelationMlp(Index c)
      : channels(c), fc1_weight({c, c}), fc1_bias({c}),
        fc2_weight({2 * c, c}), fc2_bias({2 * c}) {}

  auto fc1() const {
    return Eigen::Map<const RowMatrix<Scalar>>(fc1_weight.value.data(),
                                               channels, channels);
  }
  auto fc2() const {
    return Eigen::Map<const RowMatrix<Scalar>>(fc2_weight.value.data(),
                                               2 * channels, channels);
  }

  template <class Rng>
  void init(Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(channels));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < fc1_weight.size(); ++i)
      fc1_weight.value[i] = static_cast<Scalar>(dist(rng));
    for (Index i = 0; i < fc2_weight.size(); ++i)
      fc2_weight.value[i] = static_cast<Scalar>(dist(rng));
    fc1_bias.value.setZero();
    fc2_bias.value.setZero();
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".fc1.weight", fc1_weight);
    f(prefix + ".fc1.bias", fc1_bias);
    f(prefix + ".fc2.weight", fc2_weight);
    f(prefix + ".fc2.bias", fc2_bias);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    f(prefix + ".fc1.weight", fc1_weight);
    f(prefix + ".fc1.bias", fc1_bias);
    f(prefix + ".fc2.weight", fc2_weight);
    f(prefix + ".fc2.bias", fc2_bias);
  }
};

template <typename Scalar>
struct EstimateCache {
  RowMatrix<Scalar> pooled;  // batch x C
  RowMatrix<Scalar> hidden;  // batch x C, post-activation
};

template <typename Scalar>
CorrelationParams<Scalar> estimate_params(const CorrelationMlp<Scalar>& mlp,
                                          const Tensor5<Scalar>& source,
                                          EstimateCache<Scalar>* cache = nullptr) {
  if (source.channels() != mlp.channels)
    throw Error(ErrorCode::ShapeMismatch,
                "correlation MLP expects " + std::to_string(mlp.channels) +
                    " channels, got " + to_string(source.shape()));
  const Index batch = source.batch();
  const Index c = mlp.channels;
  RowMatrix<Scalar> pooled(batch, c);
  for (Index n = 0; n < batch; ++n)
    pooled.row(n) = source.sample(n).rowwise().mean().transpose();
  RowMatrix<Scalar> hidden = pooled * mlp.fc1().transpose();
  hidden.rowwise() += mlp.fc1_bias.value.transpose();
  const Scalar slope = static_cast<Scalar>(kLeakySlope);
  hidden = hidden.unaryExpr([slope](Scalar v) { return v > 0 ? v : slope * v; });
  RowMatrix<Scalar> out = hidden * mlp.fc2().transpose();
  out.rowwise() += mlp.fc2_bias.value.transpose();
  if (cache) *cache = {pooled, hidden};
  return {out.leftCols(c), out.rightCols(c)};
}

/// F[c, x] = alpha[c] * Z[c, x] + beta[c], per sample.
template <typename Scalar>
Tensor5<Scalar> linear_correlate(const Tensor5<Scalar>& z,
                                 const CorrelationParams<Scalar>& gamma) {
  if (gamma.alpha.cols() != z.channels() || gamma.beta.cols() != z.channels() ||
      gamma.alpha.rows() != z.batch() || gamma.beta.rows() != z.batch())
    throw Error(ErrorCode::ShapeMismatch,
                "correlation parameters do not match " + to_string(z.shape()));
  Tensor5<Scalar> f(z.shape());
  for (Index n = 0; n < z.batch(); ++n) {
    f.sample(n) = gamma.alpha.row(n).transpose().asDiagonal() * z.sample(n);
    f.sample(n).colwise() += gamma.beta.row(n).transpose();
  }
  return f;
}

/// Backward through linear_correlate and the MLP that produced gamma.
/// Accumulates MLP gradients and returns dL/dZ_source.
template <typename Scalar>
Tensor5<Scalar> correlation_block_backward(CorrelationMlp<Scalar>& mlp,
                                           const EstimateCache<Scalar>& cache,
                                           const CorrelationParams<Scalar>& gamma,
                                           const Tensor5<Scalar>& source,
                                           const Tensor5<Scalar>& d_estimate) {
  const Index c = mlp.channels;
  const Scalar slope = static_cast<Scalar>(kLeakySlope);
  const Scalar voxels = static_cast<Scalar>(source.spatial());
  auto d_fc1 = Eigen::Map<RowMatrix<Scalar>>(mlp.fc1_weight.grad.data(), c, c);
  auto d_fc2 =
      Eigen::Map<RowMatrix<Scalar>>(mlp.fc2_weight.grad.data(), 2 * c, c);

  Tensor5<Scalar> dz(source.shape());
  for (Index n = 0; n < source.batch(); ++n) {
    const auto zn = source.sample(n);
    const auto dn = d_estimate.sample(n);
    Vector<Scalar> d_out(2 * c);
    d_out.head(c) = dn.cwiseProduct(zn).rowwise().sum();
    d_out.tail(c) = dn.rowwise().sum();
    dz.sample(n) = gamma.alpha.row(n).transpose().asDiagonal() * dn;

    const Vector<Scalar> h = cache.hidden.row(n).transpose();
    d_fc2.noalias() += d_out * h.transpose();
    mlp.fc2_bias.grad += d_out;
    Vector<Scalar> d_h = mlp.fc2().transpose() * d_out;
    for (Index j = 0; j < c; ++j)
      if (!(h[j] > Scalar(0))) d_h[j] *= slope;
    d_fc1.noalias() += d_h * cache.pooled.row(n);
    mlp.fc1_bias.grad += d_h;
    const Vector<Scalar> d_pooled = mlp.fc1().transpose() * d_h;
    dz.sample(n).colwise() += d_pooled / voxels;
  }
  return dz;
}

/// Softmax over the flattened representation of each sample. Rows are
/// samples.
template <typename Scalar>
RowMatrix<Scalar> to_distribution(const Tensor5<Scalar>& fm) {
  const Index per = fm.channels() * fm.spatial();
  RowMatrix<Scalar> p(fm.batch(), per);
  for (Index n = 0; n < fm.batch(); ++n) {
    const auto flat = fm.data().segment(n * per, per);
    const Scalar top = flat.maxCoeff();
    p.row(n) = (flat.array() - top).exp().transpose();
    p.row(n) /= p.row(n).sum();
  }
  return p;
}

inline constexpr double kKlFloor = 1e-12;

/// KL(P || Q) with Q clamped from below inside the logarithm.
template <typename Scalar>
Scalar kl_divergence(const Eigen::Ref<const Vector<Scalar>>& p,
                     const Eigen::Ref<const Vector<Scalar>>& q) {
  const Scalar floor = static_cast<Scalar>(kKlFloor);
  Scalar sum = 0;
  for (Index i = 0; i < p.size(); ++i)
    if (p[i] > Scalar(0))
      sum += p[i] * (std::log(p[i]) - std::log(std::max(q[i], floor)));
  return sum;
}

template <typename Scalar>
struct CorrelationLossResult {
  Scalar value = 0;
  std::vector<Tensor5<Scalar>> d_bottleneck; // one per modality
  std::vector<Tensor5<Scalar>> d_estimates;  // one per pair
};

/// Mean over pairs and batch of KL(softmax(Z_target) || softmax(F_pair)).
/// Gradients are filled when `with_grad` is set.
template <typename Scalar>
CorrelationLossResult<Scalar>
correlation_loss(const std::vector<Tensor5<Scalar>>& bottleneck,
                 const std::vector<Tensor5<Scalar>>& estimates,
                 const ModalityPairing& pairing, bool with_grad = false) {
  if (static_cast<Index>(estimates.size()) != pairing.size())
    throw Error(ErrorCode::ShapeMismatch,
                "one estimate per modality pair is required");
  CorrelationLossResult<Scalar> result;
  if (with_grad) {
    for (const auto& z : bottleneck) result.d_bottleneck.emplace_back(z.shape());
    for (const auto& f : estimates) result.d_estimates.emplace_back(f.shape());
  }
  if (pairing.size() == 0) return result;
  const Scalar floor = static_cast<Scalar>(kKlFloor);
  const Index batch = bottleneck.front().batch();
  const Scalar scale = Scalar(1) / static_cast<Scalar>(pairing.size() * batch);

  for (Index k = 0; k < pairing.size(); ++k) {
    const Index target = pairing.pairs[k].second;
    const auto& z = bottleneck[target];
    const auto& f = estimates[k];
    if (!(z.shape() == f.shape()))
      throw Error(ErrorCode::ShapeMismatch, "estimate/target shape mismatch");
    const RowMatrix<Scalar> p = to_distribution(z);
    const RowMatrix<Scalar> q = to_distribution(f);
    const Index per = p.cols();
    for (Index n = 0; n < batch; ++n) {
      const Vector<Scalar> pn = p.row(n).transpose();
      const Vector<Scalar> qn = q.row(n).transpose();
      result.value += scale * kl_divergence<Scalar>(pn, qn);
      if (!with_grad) continue;
      // dL/dP = log P + 1 - log Qc ; dL/dQ = -P/Q where Q is unclamped.
      Vector<Scalar> dp(per), dq(per);
      for (Index i = 0; i < per; ++i) {
        const Scalar qc = std::max(qn[i], floor);
        dp[i] = pn[i] > 0 ? std::log(pn[i]) + Scalar(1) - std::log(qc) : 0;
        dq[i] = qn[i] > floor ? -pn[i] / qn[i] : Scalar(0);
      }
      // Softmax backward: dx = s * (ds - <s, ds>).
      const Vector<Scalar> dzn = pn.cwiseProduct(
          (dp.array() - pn.dot(dp)).matrix());
      const Vector<Scalar> dfn = qn.cwiseProduct(
          (dq.array() - qn.dot(dq)).matrix());
      result.d_bottleneck[target].data().segment(n * per, per) += scale * dzn;
      result.d_estimates[k].data().segment(n * per, per) += scale * dfn;
    }
  }
  return result;
}

} // namespace mmseg

#endif
