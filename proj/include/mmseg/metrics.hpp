#ifndef MMSEG_METRICS_HPP
#define MMSEG_METRICS_HPP

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmseg/volume.hpp"

namespace mmseg {

enum class Region { ET, WT, TC };
inline constexpr std::array<Region, 3> kRegions = {Region::ET, Region::WT,
                                                   Region::TC};
std::string to_string(Region r);

struct RegionMasks {
  BinaryMask wt;
  BinaryMask tc;
  BinaryMask et;
  const BinaryMask& get(Region r) const;
};

/// WT = {1,2,4}, TC = {1,4}, ET = {4} in raw label values.
RegionMasks region_masks(const LabelVolume& labels);

/// 2TP / (2TP + FP + FN); two empty masks score 1.
double dice_score(const BinaryMask& pred, const BinaryMask& gt);

/// Mask voxels with at least one of their six face neighbours outside the
/// mask or outside the grid.
std::vector<std::array<Eigen::Index, 3>> boundary_voxels(const BinaryMask& m);

/// Symmetric Hausdorff distance between 6-connected boundaries in mm. nullopt
/// when either mask is empty.
std::optional<double> hausdorff(const BinaryMask& pred, const BinaryMask& gt,
                                const Spacing& spacing = Spacing::Ones());

struct RegionScore {
  double dice = 0;
  std::optional<double> hausdorff_mm;
};

struct CaseMetrics {
  std::string case_id;
  std::array<RegionScore, 3> regions; // ET, WT, TC
};

struct MetricsReport {
  std::vector<CaseMetrics> cases;

  /// Mean dice over cases and mean Hausdorff over cases where defined.
  RegionScore mean(Region r) const;
  /// CSV: case_id,region,dice,hausdorff_mm with "NA" for undefined distances,
  /// followed by one aggregate row per region (case_id "mean").
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

CaseMetrics evaluate_case(const std::string& case_id, const LabelVolume& pred,
                          const LabelVolume& gt);

} // namespace mmseg

#endif
