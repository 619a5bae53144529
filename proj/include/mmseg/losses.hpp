#ifndef MMSEG_LOSSES_HPP
#define MMSEG_LOSSES_HPP

#include "mmseg/tensor.hpp"
#include "mmseg/volume.hpp"

namespace mmseg {

inline constexpr double kDiceEpsilon = 1e-5;
inline constexpr double kDefaultLambda = 0.1;

/// Per-voxel softmax across the channel axis.
template <typename Scalar>
Tensor5<Scalar> softmax_channels(const Tensor5<Scalar>& logits) {
  Tensor5<Scalar> p(logits.shape());
  for (Index n = 0; n < logits.batch(); ++n) {
    const auto x = logits.sample(n);
    auto y = p.sample(n);
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> top = x.colwise().maxCoeff();
    y = (x.rowwise() - top).array().exp();
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> sum = y.colwise().sum();
    y.array().rowwise() /= sum.array();
  }
  return p;
}

template <typename Scalar>
Tensor5<Scalar> softmax_channels_backward(const Tensor5<Scalar>& probs,
                                          const Tensor5<Scalar>& dprobs) {
  Tensor5<Scalar> dx(probs.shape());
  for (Index n = 0; n < probs.batch(); ++n) {
    const auto p = probs.sample(n);
    const auto dp = dprobs.sample(n);
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> inner =
        p.cwiseProduct(dp).colwise().sum();
    dx.sample(n) = p.cwiseProduct((dp.rowwise() - inner));
  }
  return dx;
}

/// One-hot encode class indices into (batch, classes, D, H, W).
template <typename Scalar>
Tensor5<Scalar> one_hot(const std::vector<const LabelVolume*>& labels,
                        Index classes = kNumClasses) {
  const Grid3 g = labels.front()->grid;
  Tensor5<Scalar> t({static_cast<Index>(labels.size()), classes, g.depth,
                     g.height, g.width});
  for (Index n = 0; n < t.batch(); ++n) {
    const auto& l = *labels[static_cast<std::size_t>(n)];
    if (!(l.grid == g))
      throw Error(ErrorCode::ShapeMismatch, "label grids differ within batch");
    auto s = t.sample(n);
    for (Index v = 0; v < g.numel(); ++v) s(l.classes[v], v) = Scalar(1);
  }
  return t;
}

template <typename Scalar>
struct DiceLossResult {
  Scalar value = 0;
  Tensor5<Scalar> grad; // dL/dprobs, filled on request
};

/// 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), one global ratio over
/// every class, voxel and sample.
template <typename Scalar>
DiceLossResult<Scalar> dice_loss(const Tensor5<Scalar>& probs,
                                 const Tensor5<Scalar>& target,
                                 Scalar eps = Scalar(kDiceEpsilon),
                                 bool with_grad = false) {
  if (!(probs.shape() == target.shape()))
    throw Error(ErrorCode::ShapeMismatch, "dice_loss: " + to_string(probs.shape()) +
                                              " vs " + to_string(target.shape()));
  const Scalar inter = probs.data().dot(target.data());
  const Scalar denom = probs.data().sum() + target.data().sum() + eps;
  const Scalar numer = Scalar(2) * inter + eps;
  DiceLossResult<Scalar> r;
  r.value = Scalar(1) - numer / denom;
  if (with_grad) {
    r.grad = Tensor5<Scalar>(probs.shape());
    r.grad.data() =
        ((numer - Scalar(2) * denom * target.data().array()) / (denom * denom))
            .matrix();
  }
  return r;
}

template <typename Scalar>
Scalar total_loss(Scalar dice, Scalar correlation,
                  Scalar lambda = Scalar(kDefaultLambda)) {
  return dice + lambda * correlation;
}

} // namespace mmseg

#endif
