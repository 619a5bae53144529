#include "mmseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace mmseg {

std::string to_string(const Grid3& g) {
  return std::to_string(g.depth) + "x" + std::to_string(g.height) + "x" +
         std::to_string(g.width);
}

std::uint8_t label_to_class(std::uint8_t value) {
  for (std::size_t k = 0; k < kLabelValues.size(); ++k)
    if (kLabelValues[k] == value) return static_cast<std::uint8_t>(k);
  throw Error(ErrorCode::BadLabel,
              "label value " + std::to_string(value) +
                  " is not one of {0, 1, 2, 4}");
}

LabelVolume LabelVolume::from_values(Grid3 g, const ClassArray& values,
                                     Spacing s) {
  if (values.size() != g.numel())
    throw Error(ErrorCode::ShapeMismatch,
                "label payload does not match grid " + to_string(g));
  LabelVolume out{g, s, ClassArray(values.size())};
  for (Eigen::Index i = 0; i < values.size(); ++i)
    out.classes[i] = label_to_class(values[i]);
  return out;
}

ClassArray LabelVolume::values() const {
  return classes.unaryExpr([](std::uint8_t c) { return kLabelValues[c]; });
}

void MultiModalCase::validate() const {
  if (modalities.empty())
    throw Error(ErrorCode::ShapeMismatch, case_id + ": no modalities");
  const auto& ref = modalities.front();
  for (const auto& m : modalities) {
    if (!(m.grid == ref.grid) || !m.spacing.isApprox(ref.spacing))
      throw Error(ErrorCode::ShapeMismatch,
                  case_id + ": modality " + m.tag + " is " +
                      to_string(m.grid) + ", expected " + to_string(ref.grid));
    if (m.data.size() != m.grid.numel())
      throw Error(ErrorCode::ShapeMismatch, case_id + ": bad payload size");
  }
  if (labels && (!(labels->grid == ref.grid) ||
                 labels->classes.size() != ref.grid.numel()))
    throw Error(ErrorCode::ShapeMismatch,
                case_id + ": label grid " + to_string(labels->grid) +
                    " differs from " + to_string(ref.grid));
}

ModalityVolume znormalize(const ModalityVolume& vol) {
  ModalityVolume out = vol;
  const auto fg = (vol.data != 0.0f);
  const Eigen::Index count = fg.count();
  if (count == 0) return out;
  const double mean =
      fg.select(vol.data.cast<double>(), 0.0).sum() / static_cast<double>(count);
  const double var =
      fg.select((vol.data.cast<double>() - mean).square(), 0.0).sum() /
      static_cast<double>(count);
  const double sd = std::sqrt(var);
  for (Eigen::Index i = 0; i < vol.data.size(); ++i) {
    if (!fg[i]) continue;
    out.data[i] =
        sd < 1e-8 ? 0.0f : static_cast<float>((vol.data[i] - mean) / sd);
  }
  return out;
}

std::optional<BoundingBox> nonzero_bounding_box(const MultiModalCase& c) {
  const Grid3 g = c.grid();
  BoundingBox box;
  box.lo = {g.depth, g.height, g.width};
  box.hi = {0, 0, 0};
  bool any = false;
  for (Eigen::Index d = 0; d < g.depth; ++d)
    for (Eigen::Index h = 0; h < g.height; ++h)
      for (Eigen::Index w = 0; w < g.width; ++w) {
        const Eigen::Index i = g.offset(d, h, w);
        const bool nz = std::any_of(
            c.modalities.begin(), c.modalities.end(),
            [i](const ModalityVolume& m) { return m.data[i] != 0.0f; });
        if (!nz) continue;
        any = true;
        const std::array<Eigen::Index, 3> p{d, h, w};
        for (int a = 0; a < 3; ++a) {
          box.lo[a] = std::min(box.lo[a], p[a]);
          box.hi[a] = std::max(box.hi[a], p[a] + 1);
        }
      }
  if (!any) return std::nullopt;
  return box;
}

namespace {

// Half-voxel-centred source coordinate of a target index along one axis.
double source_coord(Eigen::Index i, Eigen::Index src_len, Eigen::Index dst_len) {
  const double scale = static_cast<double>(src_len) / static_cast<double>(dst_len);
  const double x = (static_cast<double>(i) + 0.5) * scale - 0.5;
  return std::clamp(x, 0.0, static_cast<double>(src_len - 1));
}

Eigen::Index nearest_index(Eigen::Index i, Eigen::Index src_len,
                           Eigen::Index dst_len) {
  const Eigen::Index j = static_cast<Eigen::Index>(std::floor(
      (static_cast<double>(i) + 0.5) * static_cast<double>(src_len) /
      static_cast<double>(dst_len)));
  return std::clamp<Eigen::Index>(j, 0, src_len - 1);
}

Spacing rescaled_spacing(const Spacing& s, const Grid3& from, const Grid3& to) {
  return {s[0] * static_cast<double>(from.depth) / static_cast<double>(to.depth),
          s[1] * static_cast<double>(from.height) / static_cast<double>(to.height),
          s[2] * static_cast<double>(from.width) / static_cast<double>(to.width)};
}

} // namespace

ModalityVolume resample_trilinear(const ModalityVolume& vol,
                                  const BoundingBox& box, const Grid3& target) {
  const Grid3 ext = box.extent();
  ModalityVolume out(vol.tag, target, rescaled_spacing(vol.spacing, ext, target));
  for (Eigen::Index d = 0; d < target.depth; ++d) {
    const double zd = source_coord(d, ext.depth, target.depth);
    const Eigen::Index z0 = static_cast<Eigen::Index>(std::floor(zd));
    const Eigen::Index z1 = std::min(z0 + 1, ext.depth - 1);
    const double fz = zd - static_cast<double>(z0);
    for (Eigen::Index h = 0; h < target.height; ++h) {
      const double yh = source_coord(h, ext.height, target.height);
      const Eigen::Index y0 = static_cast<Eigen::Index>(std::floor(yh));
      const Eigen::Index y1 = std::min(y0 + 1, ext.height - 1);
      const double fy = yh - static_cast<double>(y0);
      for (Eigen::Index w = 0; w < target.width; ++w) {
        const double xw = source_coord(w, ext.width, target.width);
        const Eigen::Index x0 = static_cast<Eigen::Index>(std::floor(xw));
        const Eigen::Index x1 = std::min(x0 + 1, ext.width - 1);
        const double fx = xw - static_cast<double>(x0);
        auto v = [&](Eigen::Index z, Eigen::Index y, Eigen::Index x) {
          return static_cast<double>(
              vol.at(box.lo[0] + z, box.lo[1] + y, box.lo[2] + x));
        };
        const double c00 = v(z0, y0, x0) * (1 - fx) + v(z0, y0, x1) * fx;
        const double c01 = v(z0, y1, x0) * (1 - fx) + v(z0, y1, x1) * fx;
        const double c10 = v(z1, y0, x0) * (1 - fx) + v(z1, y0, x1) * fx;
        const double c11 = v(z1, y1, x0) * (1 - fx) + v(z1, y1, x1) * fx;
        const double c0 = c00 * (1 - fy) + c01 * fy;
        const double c1 = c10 * (1 - fy) + c11 * fy;
        out.at(d, h, w) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

LabelVolume resample_nearest(const LabelVolume& vol, const BoundingBox& box,
                             const Grid3& target) {
  const Grid3 ext = box.extent();
  LabelVolume out{target, rescaled_spacing(vol.spacing, ext, target),
                  ClassArray::Zero(target.numel())};
  for (Eigen::Index d = 0; d < target.depth; ++d) {
    const Eigen::Index sd = box.lo[0] + nearest_index(d, ext.depth, target.depth);
    for (Eigen::Index h = 0; h < target.height; ++h) {
      const Eigen::Index sh =
          box.lo[1] + nearest_index(h, ext.height, target.height);
      for (Eigen::Index w = 0; w < target.width; ++w) {
        const Eigen::Index sw =
            box.lo[2] + nearest_index(w, ext.width, target.width);
        out.classes[target.offset(d, h, w)] =
            vol.classes[vol.grid.offset(sd, sh, sw)];
      }
    }
  }
  return out;
}

MultiModalCase crop_resize(const MultiModalCase& c, const Grid3& target) {
  c.validate();
  if (!target.valid())
    throw Error(ErrorCode::ConfigError, "invalid target grid " + to_string(target));
  const auto box = nonzero_bounding_box(c);
  if (!box)
    throw Error(ErrorCode::EmptyCase, c.case_id + ": no nonzero voxels");
  MultiModalCase out;
  out.case_id = c.case_id;
  for (const auto& m : c.modalities)
    out.modalities.push_back(resample_trilinear(m, *box, target));
  if (c.labels) out.labels = resample_nearest(*c.labels, *box, target);
  return out;
}

DatasetSplit split_dataset(const std::vector<std::string>& ids, double ratio,
                           std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw Error(ErrorCode::ConfigError, "split ratio must lie in (0, 1)");
  std::set<std::string> seen;
  for (const auto& id : ids)
    if (!seen.insert(id).second)
      throw Error(ErrorCode::DuplicateId, "duplicate case id '" + id + "'");

  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(ids.size()) + 1e-9));
  DatasetSplit split;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? split.train : split.test).push_back(ids[order[i]]);
  return split;
}

} // namespace mmseg
