#include "mmseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace mmseg {

using Eigen::Index;

void PhantomConfig::validate() const {
  if (n_cases < 1) throw Error(ErrorCode::ConfigError, "n_cases must be >= 1");
  if (!shape.valid()) throw Error(ErrorCode::ConfigError, "phantom shape " + to_string(shape));
  if (!(noise_std >= 0)) throw Error(ErrorCode::ConfigError, "noise_std must be >= 0");
  if (modality_coeffs.empty())
    throw Error(ErrorCode::ConfigError, "at least one modality is required");
  for (const auto& [a, b] : modality_coeffs)
    if (a == 0 || !std::isfinite(a) || !std::isfinite(b))
      throw Error(ErrorCode::ConfigError, "modality slope must be finite and nonzero");
}

namespace {

struct Ellipsoid {
  Eigen::Vector3d center;
  Eigen::Vector3d radii;

  bool contains(const Eigen::Vector3d& p) const {
    return ((p - center).array() / radii.array()).square().sum() <= 1.0;
  }
};

} // namespace

PhantomLatent phantom_latent(const Grid3& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const Eigen::Vector3d dims(static_cast<double>(g.depth), static_cast<double>(g.height),
                             static_cast<double>(g.width));

  constexpr int kTerms = 5;
  std::array<Eigen::Vector3d, kTerms> freq;
  std::array<Eigen::Vector3d, kTerms> phase;
  for (int t = 0; t < kTerms; ++t)
    for (int a = 0; a < 3; ++a) {
      freq[t][a] = uniform(0.5, 2.5);
      phase[t][a] = uniform(0.0, 2 * std::numbers::pi);
    }

  Ellipsoid outer{{uniform(0.4, 0.6), uniform(0.4, 0.6), uniform(0.4, 0.6)}, {}};
  for (int a = 0; a < 3; ++a) outer.radii[a] = uniform(0.25, 0.35);
  Ellipsoid middle{outer.center, outer.radii * uniform(0.55, 0.7)};
  Ellipsoid inner{outer.center, middle.radii * uniform(0.45, 0.6)};
  for (auto* e : {&outer, &middle, &inner}) {
    e->center = e->center.cwiseProduct(dims);
    e->radii = e->radii.cwiseProduct(dims);
  }

  PhantomLatent out;
  out.latent.resize(g.numel());
  ClassArray classes(g.numel());
  for (Index d = 0; d < g.depth; ++d)
    for (Index h = 0; h < g.height; ++h)
      for (Index w = 0; w < g.width; ++w) {
        const Eigen::Vector3d p(static_cast<double>(d) + 0.5, static_cast<double>(h) + 0.5,
                                static_cast<double>(w) + 0.5);
        double v = 0;
        for (int t = 0; t < kTerms; ++t) {
          double term = 1;
          for (int a = 0; a < 3; ++a)
            term *= std::cos(2 * std::numbers::pi * freq[t][a] * p[a] / dims[a] + phase[t][a]);
          v += term;
        }
        out.latent[g.offset(d, h, w)] = v;
      }
  const double lo = out.latent.minCoeff();
  const double span = out.latent.maxCoeff() - lo;
  out.latent = span > 0 ? ((out.latent - lo) / span).eval()
                        : Eigen::ArrayXd::Zero(g.numel()).eval();

  for (Index d = 0; d < g.depth; ++d)
    for (Index h = 0; h < g.height; ++h)
      for (Index w = 0; w < g.width; ++w) {
        const Eigen::Vector3d p(static_cast<double>(d) + 0.5, static_cast<double>(h) + 0.5,
                                static_cast<double>(w) + 0.5);
        const Index i = g.offset(d, h, w);
        std::uint8_t c = 0;
        if (inner.contains(p)) {
          c = 3;
          out.latent[i] = kEnhancingLatent;
        } else if (middle.contains(p)) {
          c = 1;
          out.latent[i] = kNecroticLatent;
        } else if (outer.contains(p)) {
          c = 2;
          out.latent[i] = kEdemaLatent;
        }
        classes[i] = c;
      }
  out.labels.grid = g;
  out.labels.classes = std::move(classes);
  return out;
}

std::vector<MultiModalCase> generate_phantom(const PhantomConfig& config) {
  config.validate();
  std::vector<MultiModalCase> cases;
  const std::size_t nm = config.modality_coeffs.size();
  for (int i = 0; i < config.n_cases; ++i) {
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(i);
    auto lat = phantom_latent(config.shape, seed);
    std::mt19937_64 noise_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> noise(0.0, config.noise_std);

    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03d", i);
    MultiModalCase c;
    c.case_id = id;
    for (std::size_t m = 0; m < nm; ++m) {
      const auto [a, b] = config.modality_coeffs[m];
      ModalityVolume v(nm == kModalityNames.size() ? kModalityNames[m] : "M" + std::to_string(m),
                       config.shape);
      for (Index k = 0; k < v.data.size(); ++k) {
        float x = static_cast<float>(a) * static_cast<float>(lat.latent[k]) +
                  static_cast<float>(b);
        if (config.noise_std > 0) x += static_cast<float>(noise(noise_rng));
        v.data[k] = x;
      }
      c.modalities.push_back(std::move(v));
    }
    c.labels = std::move(lat.labels);
    cases.push_back(std::move(c));
  }
  return cases;
}

std::filesystem::path write_dataset(const std::filesystem::path& dir,
                                    const std::vector<MultiModalCase>& cases) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (const auto& c : cases) {
    ManifestEntry e{c.case_id, {}, {}};
    for (const auto& m : c.modalities) {
      const std::string name = c.case_id + "_" + m.tag + ".mmsv";
      write_raw_volume(dir / name, m);
      e.modalities.push_back(dir / name);
    }
    if (c.labels) {
      const std::string name = c.case_id + "_seg.mmsv";
      write_raw_labels(dir / name, *c.labels);
      e.labels = dir / name;
    }
    entries.push_back(std::move(e));
  }
  const auto manifest = dir / "manifest.csv";
  write_manifest(manifest, entries);
  return manifest;
}

double JointHistogram::off_diagonal_fraction() const {
  if (total == 0) return 0.0;
  const auto diag = counts.diagonal().sum();
  return static_cast<double>(total - diag) / static_cast<double>(total);
}

MaskArray foreground(const ModalityVolume& a, const ModalityVolume& b) {
  if (!(a.grid == b.grid))
    throw Error(ErrorCode::ShapeMismatch, to_string(a.grid) + " vs " + to_string(b.grid));
  return (a.data != 0.0f) || (b.data != 0.0f);
}

namespace {

Eigen::VectorXd edges(double lo, double hi, int bins) {
  if (hi <= lo) hi = lo + 1.0;
  return Eigen::VectorXd::LinSpaced(bins + 1, lo, hi);
}

int bin_of(double v, const Eigen::VectorXd& e) {
  const int bins = static_cast<int>(e.size()) - 1;
  const double t = (v - e[0]) / (e[bins] - e[0]);
  return std::clamp(static_cast<int>(std::floor(t * bins)), 0, bins - 1);
}

} // namespace

JointHistogram joint_histogram(const ModalityVolume& a, const ModalityVolume& b, int bins) {
  if (bins < 2) throw Error(ErrorCode::ConfigError, "bins must be >= 2");
  const MaskArray fg = foreground(a, b);
  JointHistogram h;
  h.counts.setZero(bins, bins);
  double lo_a = INFINITY, hi_a = -INFINITY, lo_b = INFINITY, hi_b = -INFINITY;
  for (Index i = 0; i < fg.size(); ++i)
    if (fg[i]) {
      lo_a = std::min<double>(lo_a, a.data[i]);
      hi_a = std::max<double>(hi_a, a.data[i]);
      lo_b = std::min<double>(lo_b, b.data[i]);
      hi_b = std::max<double>(hi_b, b.data[i]);
    }
  if (!std::isfinite(lo_a)) {
    h.edges_a = edges(0, 1, bins);
    h.edges_b = edges(0, 1, bins);
    return h;
  }
  h.edges_a = edges(lo_a, hi_a, bins);
  h.edges_b = edges(lo_b, hi_b, bins);
  for (Index i = 0; i < fg.size(); ++i)
    if (fg[i]) {
      ++h.counts(bin_of(a.data[i], h.edges_a), bin_of(b.data[i], h.edges_b));
      ++h.total;
    }
  return h;
}

double pearson(const ModalityVolume& a, const ModalityVolume& b) {
  const MaskArray fg = foreground(a, b);
  const auto n = static_cast<double>(fg.count());
  if (n < 2) return 0.0;
  double ma = 0, mb = 0;
  for (Index i = 0; i < fg.size(); ++i)
    if (fg[i]) {
      ma += a.data[i];
      mb += b.data[i];
    }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (Index i = 0; i < fg.size(); ++i)
    if (fg[i]) {
      const double da = a.data[i] - ma;
      const double db = b.data[i] - mb;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

} // namespace mmseg
