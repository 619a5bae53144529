#include "mmseg/image.hpp"

#include <cmath>
#include <fstream>

namespace mmseg {

namespace {

std::ofstream open_binary(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  return f;
}

} // namespace

void write_pgm(const std::filesystem::path& path, const Gray8& img) {
  auto f = open_binary(path);
  f << "P5\n" << img.cols() << ' ' << img.rows() << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data()), img.size());
  if (!f) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Rgb8& img) {
  auto f = open_binary(path);
  f << "P6\n" << img.r.cols() << ' ' << img.r.rows() << "\n255\n";
  for (Eigen::Index y = 0; y < img.r.rows(); ++y)
    for (Eigen::Index x = 0; x < img.r.cols(); ++x) {
      const char px[3] = {static_cast<char>(img.r(y, x)), static_cast<char>(img.g(y, x)),
                          static_cast<char>(img.b(y, x))};
      f.write(px, 3);
    }
  if (!f) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

Gray8 histogram_image(const JointHistogram& h) {
  const auto bins = h.counts.rows();
  Gray8 img = Gray8::Zero(bins, bins);
  const double top = std::log1p(static_cast<double>(h.counts.maxCoeff()));
  if (top <= 0) return img;
  for (Eigen::Index i = 0; i < bins; ++i)
    for (Eigen::Index j = 0; j < bins; ++j)
      img(bins - 1 - j, i) = static_cast<std::uint8_t>(
          std::lround(255.0 * std::log1p(static_cast<double>(h.counts(i, j))) / top));
  return img;
}

void write_histogram_text(const std::filesystem::path& path, const JointHistogram& h) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (Eigen::Index i = 0; i < h.counts.rows(); ++i) {
    for (Eigen::Index j = 0; j < h.counts.cols(); ++j) f << (j ? " " : "") << h.counts(i, j);
    f << '\n';
  }
}

Gray8 slice_image(const ModalityVolume& v, Eigen::Index d) {
  const Grid3& g = v.grid;
  Gray8 img(g.height, g.width);
  const auto s = v.data.segment(g.offset(d, 0, 0), g.height * g.width);
  const float lo = s.minCoeff();
  const float span = s.maxCoeff() - lo;
  for (Eigen::Index h = 0; h < g.height; ++h)
    for (Eigen::Index w = 0; w < g.width; ++w)
      img(h, w) = span > 0 ? static_cast<std::uint8_t>(
                                 std::lround(255.0f * (v.at(d, h, w) - lo) / span))
                           : 0;
  return img;
}

Gray8 mask_slice(const BinaryMask& m, Eigen::Index d) {
  Gray8 img(m.grid.height, m.grid.width);
  for (Eigen::Index h = 0; h < m.grid.height; ++h)
    for (Eigen::Index w = 0; w < m.grid.width; ++w) img(h, w) = m.at(d, h, w) ? 255 : 0;
  return img;
}

Rgb8 label_overlay(const ModalityVolume& background, const LabelVolume& labels,
                   Eigen::Index d) {
  if (!(background.grid == labels.grid))
    throw Error(ErrorCode::ShapeMismatch, "overlay background and labels differ");
  const Gray8 base = slice_image(background, d);
  Rgb8 out{base, base, base};
  // Indexed by class: background, necrotic, edema, enhancing.
  static constexpr std::uint8_t colour[4][3] = {
      {0, 0, 0}, {255, 0, 0}, {255, 255, 0}, {0, 255, 0}};
  const Grid3& g = labels.grid;
  for (Eigen::Index h = 0; h < g.height; ++h)
    for (Eigen::Index w = 0; w < g.width; ++w) {
      const auto c = labels.classes[g.offset(d, h, w)];
      if (c == 0) continue;
      out.r(h, w) = colour[c][0];
      out.g(h, w) = colour[c][1];
      out.b(h, w) = colour[c][2];
    }
  return out;
}

} // namespace mmseg
