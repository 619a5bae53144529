#ifndef MMSEG_PHANTOM_HPP
#define MMSEG_PHANTOM_HPP

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "mmseg/volume.hpp"
#include "mmseg/volume_io.hpp"

namespace mmseg {

struct PhantomConfig {
  std::uint64_t seed = 0;
  Grid3 shape{32, 32, 32};
  int n_cases = 4;
  double noise_std = 0.05;
  /// (slope, offset) per modality, FLAIR, T1, T1c, T2 order.
  std::vector<std::pair<double, double>> modality_coeffs = {
      {40.0, 5.0}, {25.0, 10.0}, {30.0, 8.0}, {45.0, 2.0}};

  /// Throws CONFIG_ERROR.
  void validate() const;
};

// Latent intensity that replaces the smooth field inside each sub-region.
inline constexpr double kEdemaLatent = 1.4;
inline constexpr double kNecroticLatent = 1.8;
inline constexpr double kEnhancingLatent = 2.2;

/// Shared latent volume of one phantom case together with its labels.
struct PhantomLatent {
  Eigen::ArrayXd latent;
  LabelVolume labels;
};

PhantomLatent phantom_latent(const Grid3& shape, std::uint64_t seed);

/// Case i is drawn from its own generator seeded with seed + i.
std::vector<MultiModalCase> generate_phantom(const PhantomConfig& config);

/// Raw fixtures plus manifest.csv under dir; returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir,
                                    const std::vector<MultiModalCase>& cases);

struct JointHistogram {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts; // a rows, b cols
  Eigen::VectorXd edges_a;
  Eigen::VectorXd edges_b;
  std::int64_t total = 0;

  /// Share of the mass off the main diagonal (bin i of a, bin j != i of b).
  double off_diagonal_fraction() const;
};

/// Foreground = voxels where either volume is nonzero.
MaskArray foreground(const ModalityVolume& a, const ModalityVolume& b);

/// 2D histogram over foreground voxel pairs with per-axis min/max edges.
JointHistogram joint_histogram(const ModalityVolume& a, const ModalityVolume& b,
                               int bins);

/// Pearson correlation over foreground voxels.
double pearson(const ModalityVolume& a, const ModalityVolume& b);

} // namespace mmseg

#endif
