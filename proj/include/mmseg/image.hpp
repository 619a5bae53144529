#ifndef MMSEG_IMAGE_HPP
#define MMSEG_IMAGE_HPP

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>

#include "mmseg/phantom.hpp"
#include "mmseg/volume.hpp"

namespace mmseg {

using Gray8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Rgb8 {
  Gray8 r, g, b;
};

void write_pgm(const std::filesystem::path& path, const Gray8& img);
void write_ppm(const std::filesystem::path& path, const Rgb8& img);

/// log(1 + count) scaled to 0..255; row 0 is the highest bin of `b` so the
/// diagonal runs bottom-left to top-right.
Gray8 histogram_image(const JointHistogram& h);

/// Bins x bins text matrix of raw counts.
void write_histogram_text(const std::filesystem::path& path, const JointHistogram& h);

/// Axial slice d of a volume, min/max scaled to 0..255.
Gray8 slice_image(const ModalityVolume& v, Eigen::Index d);
Gray8 mask_slice(const BinaryMask& m, Eigen::Index d);

/// Grayscale slice with labels painted: necrotic red, edema yellow,
/// enhancing green.
Rgb8 label_overlay(const ModalityVolume& background, const LabelVolume& labels,
                   Eigen::Index d);

} // namespace mmseg

#endif
