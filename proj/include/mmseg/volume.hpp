#ifndef MMSEG_VOLUME_HPP
#define MMSEG_VOLUME_HPP

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmseg/error.hpp"

namespace mmseg {

/// Spatial extent (depth, height, width); voxels are stored depth-major.
struct Grid3 {
  Eigen::Index depth = 0;
  Eigen::Index height = 0;
  Eigen::Index width = 0;

  Eigen::Index numel() const { return depth * height * width; }
  Eigen::Index offset(Eigen::Index d, Eigen::Index h, Eigen::Index w) const {
    return (d * height + h) * width + w;
  }
  bool valid() const { return depth >= 1 && height >= 1 && width >= 1; }
  friend bool operator==(const Grid3&, const Grid3&) = default;
};

std::string to_string(const Grid3& g);

using Spacing = Eigen::Vector3d;

inline const std::array<std::string, 4> kModalityNames = {"FLAIR", "T1", "T1c",
                                                          "T2"};

struct ModalityVolume {
  std::string tag;
  Grid3 grid;
  Spacing spacing = Spacing::Ones();
  Eigen::ArrayXf data;

  ModalityVolume() = default;
  ModalityVolume(std::string tag_, Grid3 g, Spacing s = Spacing::Ones())
      : tag(std::move(tag_)), grid(g), spacing(s),
        data(Eigen::ArrayXf::Zero(g.numel())) {}

  float& at(Eigen::Index d, Eigen::Index h, Eigen::Index w) {
    return data[grid.offset(d, h, w)];
  }
  float at(Eigen::Index d, Eigen::Index h, Eigen::Index w) const {
    return data[grid.offset(d, h, w)];
  }
};

/// Raw label values {0, 1, 2, 4} are stored as contiguous class indices
/// {0, 1, 2, 3}; kLabelValues is the inverse map.
inline constexpr std::array<std::uint8_t, 4> kLabelValues = {0, 1, 2, 4};
inline constexpr int kNumClasses = 4;

using ClassArray = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

struct LabelVolume {
  Grid3 grid;
  Spacing spacing = Spacing::Ones();
  ClassArray classes;

  static LabelVolume from_values(Grid3 g, const ClassArray& values,
                                 Spacing s = Spacing::Ones());
  ClassArray values() const;
};

/// Map a raw label value to its class index, throwing BAD_LABEL.
std::uint8_t label_to_class(std::uint8_t value);

using MaskArray = Eigen::Array<bool, Eigen::Dynamic, 1>;

struct BinaryMask {
  Grid3 grid;
  MaskArray data;

  bool at(Eigen::Index d, Eigen::Index h, Eigen::Index w) const {
    return data[grid.offset(d, h, w)];
  }
  Eigen::Index count() const { return data.count(); }
};

struct MultiModalCase {
  std::string case_id;
  std::vector<ModalityVolume> modalities;
  std::optional<LabelVolume> labels;

  const Grid3& grid() const { return modalities.front().grid; }
  /// Throws SHAPE_MISMATCH unless every member shares grid and spacing.
  void validate() const;
};

/// Z-score over the nonzero voxels (population std); background stays 0 and a
/// foreground with std below 1e-8 is zeroed.
ModalityVolume znormalize(const ModalityVolume& vol);

struct BoundingBox {
  std::array<Eigen::Index, 3> lo{};
  std::array<Eigen::Index, 3> hi{}; // exclusive
  Grid3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
};

/// Joint nonzero bounding box over all modalities; nullopt when empty.
std::optional<BoundingBox> nonzero_bounding_box(const MultiModalCase& c);

ModalityVolume resample_trilinear(const ModalityVolume& vol,
                                  const BoundingBox& box, const Grid3& target);
LabelVolume resample_nearest(const LabelVolume& vol, const BoundingBox& box,
                             const Grid3& target);

/// Crop every member to the joint nonzero box, then resample to target
/// (trilinear for intensities, nearest for labels). Spacing is rescaled so
/// the physical extent of the box is kept. Throws EMPTY_CASE.
MultiModalCase crop_resize(const MultiModalCase& c, const Grid3& target);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Deterministic shuffle-and-cut; |train| = floor(ratio * N).
DatasetSplit split_dataset(const std::vector<std::string>& ids, double ratio,
                           std::uint64_t seed);

} // namespace mmseg

#endif
