#ifndef MMSEG_ATTENTION_HPP
#define MMSEG_ATTENTION_HPP

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mmseg/tensor.hpp"

namespace mmseg {

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

inline Index attention_reduction(Index units) {
  return std::max<Index>(1, units / 2);
}

/// Parameters of one dual-attention fusion block over `units` equally sized
/// representations of `unit_channels` channels each.
///
/// Modality path: g (units) -> squeeze (reduction x units) -> ReLU ->
/// excite (units x reduction) -> sigmoid, one gate per unit.
/// Spatial path: a 1x1x1 convolution over every concatenated channel
/// (spatial_weight, spatial_bias) -> sigmoid, one gate per voxel.
template <typename Scalar>
struct DualFusion {
  Index units = 0;
  Index unit_channels = 0;
  Param<Scalar> squeeze;
  Param<Scalar> excite;
  Param<Scalar> spatial_weight;
  Param<Scalar> spatial_bias;

  DualFusion() = default;
  DualFusion(Index units_, Index unit_channels_)
      : units(units_), unit_channels(unit_channels_),
        squeeze({attention_reduction(units_), units_}),
        excite({units_, attention_reduction(units_)}),
        spatial_weight({units_ * unit_channels_}), spatial_bias({1}) {}

  Index reduction() const { return attention_reduction(units); }
  Index total_channels() const { return units * unit_channels; }

  auto squeeze_matrix() const {
    return Eigen::Map<const RowMatrix<Scalar>>(squeeze.value.data(),
                                               reduction(), units);
  }
  auto excite_matrix() const {
    return Eigen::Map<const RowMatrix<Scalar>>(excite.value.data(), units,
                                               reduction());
  }

  template <class Rng>
  void init(Rng& rng) {
    auto fill = [&rng](Param<Scalar>& p, Index fan_in) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Index i = 0; i < p.size(); ++i)
        p.value[i] = static_cast<Scalar>(dist(rng));
    };
    fill(squeeze, units);
    fill(excite, reduction());
    fill(spatial_weight, total_channels());
    spatial_bias.value.setZero();
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".squeeze", squeeze);
    f(prefix + ".excite", excite);
    f(prefix + ".spatial_weight", spatial_weight);
    f(prefix + ".spatial_bias", spatial_bias);
  }
  template <class F>
  void for_each_param(const std::string& prefix, F&& f) const {
    f(prefix + ".squeeze", squeeze);
    f(prefix + ".excite", excite);
    f(prefix + ".spatial_weight", spatial_weight);
    f(prefix + ".spatial_bias", spatial_bias);
  }
};

/// Per-sample attention outputs. modality is batch x units; spatial holds the
/// voxel gate with a single channel.
template <typename Scalar>
struct AttentionWeights {
  RowMatrix<Scalar> modality;
  Tensor5<Scalar> spatial;
};

template <typename Scalar>
struct ModalityAttentionCache {
  RowMatrix<Scalar> pooled;  // batch x units
  RowMatrix<Scalar> hidden;  // batch x reduction, pre-ReLU
  RowMatrix<Scalar> gates;   // batch x units, sigmoid output
};

namespace detail {

template <typename Scalar>
void check_fusion_input(const DualFusion<Scalar>& p, const Tensor5<Scalar>& z) {
  if (z.channels() != p.total_channels())
    throw Error(ErrorCode::ShapeMismatch,
                "fusion expects " + std::to_string(p.total_channels()) +
                    " channels, got " + to_string(z.shape()));
}

} // namespace detail

/// Modality attention on the concatenated representation. Each unit is
/// average-pooled over its channels and voxels to one scalar, the gates are
/// sigmoid(excite * relu(squeeze * g)), and each unit is scaled by its gate.
template <typename Scalar>
Tensor5<Scalar> modality_attention_forward(
    const DualFusion<Scalar>& p, const Tensor5<Scalar>& z,
    ModalityAttentionCache<Scalar>* cache = nullptr) {
  detail::check_fusion_input(p, z);
  const Index batch = z.batch();
  const Index c = p.unit_channels;
  RowMatrix<Scalar> pooled(batch, p.units);
  for (Index n = 0; n < batch; ++n)
    for (Index k = 0; k < p.units; ++k)
      pooled(n, k) = z.sample(n).middleRows(k * c, c).mean();
  const RowMatrix<Scalar> hidden =
      pooled * p.squeeze_matrix().transpose();
  const RowMatrix<Scalar> excited =
      hidden.cwiseMax(Scalar(0)) * p.excite_matrix().transpose();
  const RowMatrix<Scalar> gates =
      excited.unaryExpr([](Scalar v) { return sigmoid(v); });

  Tensor5<Scalar> out(z.shape());
  for (Index n = 0; n < batch; ++n)
    for (Index k = 0; k < p.units; ++k)
      out.sample(n).middleRows(k * c, c) =
          gates(n, k) * z.sample(n).middleRows(k * c, c);
  if (cache) *cache = {pooled, hidden, gates};
  return out;
}

template <typename Scalar>
Tensor5<Scalar> modality_attention_backward(
    DualFusion<Scalar>& p, const ModalityAttentionCache<Scalar>& cache,
    const Tensor5<Scalar>& z, const Tensor5<Scalar>& dout) {
  const Index batch = z.batch();
  const Index c = p.unit_channels;
  const Index r = p.reduction();
  const Scalar per_unit = static_cast<Scalar>(c * z.spatial());
  auto d_squeeze =
      Eigen::Map<RowMatrix<Scalar>>(p.squeeze.grad.data(), r, p.units);
  auto d_excite =
      Eigen::Map<RowMatrix<Scalar>>(p.excite.grad.data(), p.units, r);

  Tensor5<Scalar> dz(z.shape());
  for (Index n = 0; n < batch; ++n) {
    Vector<Scalar> d_gate(p.units);
    for (Index k = 0; k < p.units; ++k)
      d_gate[k] = dout.sample(n)
                      .middleRows(k * c, c)
                      .cwiseProduct(z.sample(n).middleRows(k * c, c))
                      .sum();
    const Vector<Scalar> g = cache.gates.row(n).transpose();
    const Vector<Scalar> d_excited =
        d_gate.cwiseProduct(g.cwiseProduct(Vector<Scalar>::Ones(p.units) - g));
    const Vector<Scalar> pre = cache.hidden.row(n).transpose();
    const Vector<Scalar> act = pre.cwiseMax(Scalar(0));
    d_excite.noalias() += d_excited * act.transpose();
    Vector<Scalar> d_hidden = p.excite_matrix().transpose() * d_excited;
    for (Index j = 0; j < r; ++j)
      if (!(pre[j] > Scalar(0))) d_hidden[j] = Scalar(0);
    d_squeeze.noalias() += d_hidden * cache.pooled.row(n);
    const Vector<Scalar> d_pooled = p.squeeze_matrix().transpose() * d_hidden;
    for (Index k = 0; k < p.units; ++k)
      dz.sample(n).middleRows(k * c, c) =
          (g[k] * dout.sample(n).middleRows(k * c, c)).array() +
          d_pooled[k] / per_unit;
  }
  return dz;
}

/// Spatial attention: q = w . z[:, v] + b per voxel, gate = sigmoid(q), and
/// every channel at voxel v is scaled by the gate. Returns the gated tensor;
/// the gate map is written to `gate_out` (batch, 1, D, H, W).
template <typename Scalar>
Tensor5<Scalar> spatial_attention_forward(const DualFusion<Scalar>& p,
                                          const Tensor5<Scalar>& z,
                                          Tensor5<Scalar>& gate_out) {
  detail::check_fusion_input(p, z);
  Shape5 gs = z.shape();
  gs.channels = 1;
  gate_out = Tensor5<Scalar>(gs);
  Tensor5<Scalar> out(z.shape());
  for (Index n = 0; n < z.batch(); ++n) {
    auto gate = gate_out.sample(n);
    gate.noalias() = p.spatial_weight.value.transpose() * z.sample(n);
    gate.array() += p.spatial_bias.value[0];
    gate = gate.unaryExpr([](Scalar v) { return sigmoid(v); });
    out.sample(n) = z.sample(n).array().rowwise() * gate.row(0).array();
  }
  return out;
}

template <typename Scalar>
Tensor5<Scalar> spatial_attention_backward(DualFusion<Scalar>& p,
                                           const Tensor5<Scalar>& gates,
                                           const Tensor5<Scalar>& z,
                                           const Tensor5<Scalar>& dout) {
  Tensor5<Scalar> dz(z.shape());
  for (Index n = 0; n < z.batch(); ++n) {
    const auto zn = z.sample(n);
    const auto dn = dout.sample(n);
    const auto m = gates.sample(n).row(0).array();
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> d_gate =
        dn.cwiseProduct(zn).colwise().sum().array();
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> dq =
        d_gate * m * (Scalar(1) - m);
    p.spatial_weight.grad.noalias() += zn * dq.matrix().transpose();
    p.spatial_bias.grad[0] += dq.sum();
    dz.sample(n) = dn.array().rowwise() * m;
    dz.sample(n).noalias() += p.spatial_weight.value * dq.matrix();
  }
  return dz;
}

template <typename Scalar>
struct FusionCache {
  Tensor5<Scalar> input;
  ModalityAttentionCache<Scalar> modality;
  Tensor5<Scalar> spatial_gates;
};

/// Z_f = Z_m + Z_s over the channel-concatenation of `units`.
template <typename Scalar>
Tensor5<Scalar> dual_fusion_forward(const DualFusion<Scalar>& p,
                                    const Tensor5<Scalar>& z_cat,
                                    FusionCache<Scalar>* cache = nullptr,
                                    AttentionWeights<Scalar>* weights = nullptr) {
  ModalityAttentionCache<Scalar> mcache;
  Tensor5<Scalar> gates;
  auto out = modality_attention_forward(p, z_cat, &mcache);
  out += spatial_attention_forward(p, z_cat, gates);
  if (weights) *weights = {mcache.gates, gates};
  if (cache) *cache = {z_cat, std::move(mcache), std::move(gates)};
  return out;
}

template <typename Scalar>
Tensor5<Scalar> dual_fusion_forward(const DualFusion<Scalar>& p,
                                    const std::vector<Tensor5<Scalar>>& units,
                                    FusionCache<Scalar>* cache = nullptr,
                                    AttentionWeights<Scalar>* weights = nullptr) {
  if (static_cast<Index>(units.size()) != p.units)
    throw Error(ErrorCode::ShapeMismatch,
                "fusion expects " + std::to_string(p.units) + " units");
  for (const auto& u : units)
    if (!(u.shape() == units.front().shape()))
      throw Error(ErrorCode::ShapeMismatch, "fusion units differ in shape");
  return dual_fusion_forward(p, concat_channels(units), cache, weights);
}

template <typename Scalar>
Tensor5<Scalar> dual_fusion_backward(DualFusion<Scalar>& p,
                                     const FusionCache<Scalar>& cache,
                                     const Tensor5<Scalar>& dout) {
  auto dz = modality_attention_backward(p, cache.modality, cache.input, dout);
  dz += spatial_attention_backward(p, cache.spatial_gates, cache.input, dout);
  return dz;
}

} // namespace mmseg

#endif
