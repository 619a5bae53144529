#include "mmseg/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace mmseg {

std::string to_string(Region r) {
  switch (r) {
  case Region::ET: return "ET";
  case Region::WT: return "WT";
  case Region::TC: return "TC";
  }
  return "?";
}

const BinaryMask& RegionMasks::get(Region r) const {
  switch (r) {
  case Region::ET: return et;
  case Region::WT: return wt;
  case Region::TC: return tc;
  }
  return wt;
}

RegionMasks region_masks(const LabelVolume& labels) {
  // Class indices: 1 necrotic, 2 edema, 3 enhancing.
  const auto& c = labels.classes;
  return {{labels.grid, c != 0}, {labels.grid, (c == 1) || (c == 3)},
          {labels.grid, c == 3}};
}

double dice_score(const BinaryMask& pred, const BinaryMask& gt) {
  if (!(pred.grid == gt.grid))
    throw Error(ErrorCode::ShapeMismatch, "dice_score: " + to_string(pred.grid) +
                                              " vs " + to_string(gt.grid));
  const auto tp = static_cast<double>((pred.data && gt.data).count());
  const auto fp = static_cast<double>((pred.data && !gt.data).count());
  const auto fn = static_cast<double>((!pred.data && gt.data).count());
  const double denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2 * tp / denom;
}

std::vector<std::array<Eigen::Index, 3>> boundary_voxels(const BinaryMask& m) {
  const Grid3& g = m.grid;
  std::vector<std::array<Eigen::Index, 3>> out;
  for (Eigen::Index d = 0; d < g.depth; ++d)
    for (Eigen::Index h = 0; h < g.height; ++h)
      for (Eigen::Index w = 0; w < g.width; ++w) {
        if (!m.at(d, h, w)) continue;
        const bool edge = d == 0 || h == 0 || w == 0 || d == g.depth - 1 ||
                          h == g.height - 1 || w == g.width - 1;
        if (edge || !m.at(d - 1, h, w) || !m.at(d + 1, h, w) ||
            !m.at(d, h - 1, w) || !m.at(d, h + 1, w) || !m.at(d, h, w - 1) ||
            !m.at(d, h, w + 1))
          out.push_back({d, h, w});
      }
  return out;
}

namespace {

using Points = std::vector<std::array<double, 3>>;

Points to_mm(const std::vector<std::array<Eigen::Index, 3>>& voxels,
             const Spacing& s) {
  Points p;
  p.reserve(voxels.size());
  for (const auto& v : voxels)
    p.push_back({static_cast<double>(v[0]) * s[0],
                 static_cast<double>(v[1]) * s[1],
                 static_cast<double>(v[2]) * s[2]});
  return p;
}

// Squared directed distance sup_a min_b |a-b|^2. The inner scan stops as soon
// as a point closer than the running maximum is found; the result is exact.
double directed_sq(const Points& a, const Points& b) {
  double cmax = 0;
  for (const auto& p : a) {
    double cmin = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      const double dx = p[0] - q[0];
      const double dy = p[1] - q[1];
      const double dz = p[2] - q[2];
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < cmin) cmin = d;
      if (cmin < cmax) break;
    }
    if (cmin > cmax) cmax = cmin;
  }
  return cmax;
}

} // namespace

std::optional<double> hausdorff(const BinaryMask& pred, const BinaryMask& gt,
                                const Spacing& spacing) {
  if (!(pred.grid == gt.grid))
    throw Error(ErrorCode::ShapeMismatch, "hausdorff: " + to_string(pred.grid) +
                                              " vs " + to_string(gt.grid));
  if (pred.count() == 0 || gt.count() == 0) return std::nullopt;
  const Points a = to_mm(boundary_voxels(pred), spacing);
  const Points b = to_mm(boundary_voxels(gt), spacing);
  return std::sqrt(std::max(directed_sq(a, b), directed_sq(b, a)));
}

RegionScore MetricsReport::mean(Region r) const {
  const auto idx = static_cast<std::size_t>(r);
  RegionScore m;
  double hd_sum = 0;
  int hd_n = 0;
  for (const auto& c : cases) {
    m.dice += c.regions[idx].dice;
    if (c.regions[idx].hausdorff_mm) {
      hd_sum += *c.regions[idx].hausdorff_mm;
      ++hd_n;
    }
  }
  if (!cases.empty()) m.dice /= static_cast<double>(cases.size());
  if (hd_n > 0) m.hausdorff_mm = hd_sum / hd_n;
  return m;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(10);
  auto row = [&out](const std::string& id, Region r, const RegionScore& s) {
    out << id << ',' << to_string(r) << ',' << s.dice << ',';
    if (s.hausdorff_mm)
      out << *s.hausdorff_mm;
    else
      out << "NA";
    out << '\n';
  };
  out << "case_id,region,dice,hausdorff_mm\n";
  for (const auto& c : cases)
    for (Region r : kRegions) row(c.case_id, r, c.regions[static_cast<std::size_t>(r)]);
  for (Region r : kRegions) row("mean", r, mean(r));
  return out.str();
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  f << to_csv();
}

CaseMetrics evaluate_case(const std::string& case_id, const LabelVolume& pred,
                          const LabelVolume& gt) {
  if (!(pred.grid == gt.grid))
    throw Error(ErrorCode::ShapeMismatch, case_id + ": prediction grid differs");
  const auto pm = region_masks(pred);
  const auto gm = region_masks(gt);
  CaseMetrics m{case_id, {}};
  for (Region r : kRegions) {
    auto& s = m.regions[static_cast<std::size_t>(r)];
    s.dice = dice_score(pm.get(r), gm.get(r));
    s.hausdorff_mm = hausdorff(pm.get(r), gm.get(r), gt.spacing);
  }
  return m;
}

} // namespace mmseg
