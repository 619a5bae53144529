#ifndef MMSEG_TENSOR_HPP
#define MMSEG_TENSOR_HPP

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "mmseg/error.hpp"

namespace mmseg {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// (batch, channel, depth, height, width).
struct Shape5 {
  Index batch = 0;
  Index channels = 0;
  Index depth = 0;
  Index height = 0;
  Index width = 0;

  Index spatial() const { return depth * height * width; }
  Index numel() const { return batch * channels * spatial(); }
  bool same_spatial(const Shape5& o) const {
    return depth == o.depth && height == o.height && width == o.width;
  }
  friend bool operator==(const Shape5&, const Shape5&) = default;
};

std::string to_string(const Shape5& s);

/// Dense rank-5 grid stored contiguously in NCDHW order. Each sample is
/// addressable as a (channels x voxels) row-major matrix, which is the view
/// every layer works through.
template <typename Scalar>
class Tensor5 {
public:
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor5() = default;
  explicit Tensor5(const Shape5& shape)
      : shape_(shape), data_(Vector<Scalar>::Zero(shape.numel())) {}
  Tensor5(const Shape5& shape, Vector<Scalar> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw Error(ErrorCode::ShapeMismatch,
                  "payload size does not match " + to_string(shape_));
  }

  const Shape5& shape() const { return shape_; }
  Index batch() const { return shape_.batch; }
  Index channels() const { return shape_.channels; }
  Index spatial() const { return shape_.spatial(); }
  Index size() const { return data_.size(); }

  Vector<Scalar>& data() { return data_; }
  const Vector<Scalar>& data() const { return data_; }

  MatrixMap sample(Index n) {
    return MatrixMap(data_.data() + n * shape_.channels * spatial(),
                     shape_.channels, spatial());
  }
  ConstMatrixMap sample(Index n) const {
    return ConstMatrixMap(data_.data() + n * shape_.channels * spatial(),
                          shape_.channels, spatial());
  }

  Scalar& operator()(Index n, Index c, Index d, Index h, Index w) {
    return data_[offset(n, c, d, h, w)];
  }
  Scalar operator()(Index n, Index c, Index d, Index h, Index w) const {
    return data_[offset(n, c, d, h, w)];
  }

  void set_zero() { data_.setZero(); }
  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor5<Other> cast() const {
    return Tensor5<Other>(shape_, data_.template cast<Other>());
  }

  Tensor5& operator+=(const Tensor5& o) {
    if (!(o.shape_ == shape_))
      throw Error(ErrorCode::ShapeMismatch,
                  to_string(shape_) + " += " + to_string(o.shape_));
    data_ += o.data_;
    return *this;
  }

private:
  Index offset(Index n, Index c, Index d, Index h, Index w) const {
    return (((n * shape_.channels + c) * shape_.depth + d) * shape_.height +
            h) * shape_.width + w;
  }

  Shape5 shape_;
  Vector<Scalar> data_;
};

/// A trainable parameter: value, accumulated gradient, logical shape.
template <typename Scalar>
struct Param {
  std::vector<Index> shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;

  Param() = default;
  explicit Param(std::vector<Index> dims) : shape(std::move(dims)) {
    Index n = 1;
    for (Index d : shape) n *= d;
    value = Vector<Scalar>::Zero(n);
    grad = Vector<Scalar>::Zero(n);
  }

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

/// Concatenate along the channel axis. All parts must agree on batch and
/// spatial extent.
template <typename Scalar>
Tensor5<Scalar> concat_channels(const std::vector<Tensor5<Scalar>>& parts) {
  if (parts.empty())
    throw Error(ErrorCode::ShapeMismatch, "concat of zero tensors");
  Shape5 out = parts.front().shape();
  out.channels = 0;
  for (const auto& p : parts) {
    if (p.batch() != out.batch || !p.shape().same_spatial(out))
      throw Error(ErrorCode::ShapeMismatch,
                  "concat operand " + to_string(p.shape()));
    out.channels += p.channels();
  }
  Tensor5<Scalar> result(out);
  for (Index n = 0; n < out.batch; ++n) {
    Index row = 0;
    for (const auto& p : parts) {
      result.sample(n).middleRows(row, p.channels()) = p.sample(n);
      row += p.channels();
    }
  }
  return result;
}

/// Inverse of concat_channels for equally sized groups.
template <typename Scalar>
std::vector<Tensor5<Scalar>> split_channels(const Tensor5<Scalar>& t,
                                            Index groups) {
  if (groups <= 0 || t.channels() % groups != 0)
    throw Error(ErrorCode::ShapeMismatch,
                "cannot split " + std::to_string(t.channels()) +
                    " channels into " + std::to_string(groups) + " groups");
  Shape5 part = t.shape();
  part.channels = t.channels() / groups;
  std::vector<Tensor5<Scalar>> out(groups, Tensor5<Scalar>(part));
  for (Index g = 0; g < groups; ++g)
    for (Index n = 0; n < t.batch(); ++n)
      out[g].sample(n) = t.sample(n).middleRows(g * part.channels,
                                                 part.channels);
  return out;
}

/// Slice a batch range [first, first+count).
template <typename Scalar>
Tensor5<Scalar> slice_batch(const Tensor5<Scalar>& t, Index first,
                            Index count) {
  Shape5 s = t.shape();
  s.batch = count;
  const Index stride = t.channels() * t.spatial();
  return Tensor5<Scalar>(s, t.data().segment(first * stride, count * stride));
}

} // namespace mmseg

#endif
