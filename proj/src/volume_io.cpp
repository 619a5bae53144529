#include "mmseg/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmseg {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little,
              "byte-order helpers assume a little-endian host");

template <typename T>
void put(std::vector<char>& buf, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

template <typename T>
T get(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

std::vector<char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

std::vector<char> raw_header(const Grid3& g) {
  std::vector<char> buf(kRawMagic, kRawMagic + 4);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(g.depth));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(g.height));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(g.width));
  return buf;
}

Grid3 parse_raw_header(const std::vector<char>& bytes, const fs::path& path,
                       std::size_t element_size) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kRawMagic, 4) != 0)
    throw Error(ErrorCode::IoError, path.string() + ": not an MMSV volume");
  const Grid3 g{get<std::uint32_t>(bytes.data() + 4),
                get<std::uint32_t>(bytes.data() + 8),
                get<std::uint32_t>(bytes.data() + 12)};
  if (!g.valid())
    throw Error(ErrorCode::IoError, path.string() + ": empty grid");
  if (bytes.size() != 16 + static_cast<std::size_t>(g.numel()) * element_size)
    throw Error(ErrorCode::IoError, path.string() + ": payload size mismatch");
  return g;
}

bool is_nifti(const fs::path& path) {
  const std::string name = path.filename().string();
  auto ends_with = [&name](const std::string& s) {
    return name.size() >= s.size() &&
           name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".nii") || ends_with(".nii.gz");
}

// --- NIfTI-1 -------------------------------------------------------------

constexpr int kNiftiHeaderSize = 348;
constexpr int kNiftiVoxOffset = 352;

enum NiftiType : std::int16_t {
  kUInt8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kFloat64 = 64,
  kInt8 = 256, kUInt16 = 512, kUInt32 = 768,
};

struct NiftiImage {
  Grid3 grid;
  Spacing spacing = Spacing::Ones();
  std::vector<double> values;
};

std::vector<char> gz_slurp(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<char> out;
  char chunk[1 << 16];
  int n;
  while ((n = gzread(f, chunk, sizeof(chunk))) > 0) out.insert(out.end(), chunk, chunk + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw Error(ErrorCode::IoError, "corrupt stream in " + path.string());
  return out;
}

NiftiImage read_nifti(const fs::path& path) {
  const auto bytes = gz_slurp(path);
  if (bytes.size() < kNiftiHeaderSize ||
      get<std::int32_t>(bytes.data()) != kNiftiHeaderSize)
    throw Error(ErrorCode::IoError,
                path.string() + ": not a little-endian NIfTI-1 file");
  const char* h = bytes.data();
  const auto rank = get<std::int16_t>(h + 40);
  if (rank < 3)
    throw Error(ErrorCode::IoError, path.string() + ": fewer than 3 dimensions");
  for (int i = 4; i <= rank; ++i)
    if (get<std::int16_t>(h + 40 + 2 * i) > 1)
      throw Error(ErrorCode::IoError, path.string() + ": 4D volumes unsupported");
  NiftiImage img;
  img.grid = {get<std::int16_t>(h + 46), get<std::int16_t>(h + 44),
              get<std::int16_t>(h + 42)};
  if (!img.grid.valid())
    throw Error(ErrorCode::IoError, path.string() + ": empty grid");
  for (int a = 0; a < 3; ++a) {
    const float p = get<float>(h + 76 + 4 * (3 - a));
    img.spacing[a] = p > 0 ? p : 1.0;
  }
  const auto type = get<std::int16_t>(h + 70);
  const auto offset =
      static_cast<std::size_t>(std::max(0.0f, get<float>(h + 108)));
  const float slope = get<float>(h + 112);
  const float inter = get<float>(h + 116);

  std::size_t width = 0;
  switch (type) {
  case kUInt8: case kInt8: width = 1; break;
  case kInt16: case kUInt16: width = 2; break;
  case kInt32: case kUInt32: case kFloat32: width = 4; break;
  case kFloat64: width = 8; break;
  default:
    throw Error(ErrorCode::IoError,
                path.string() + ": unsupported datatype " + std::to_string(type));
  }
  const auto n = static_cast<std::size_t>(img.grid.numel());
  if (bytes.size() < offset + n * width)
    throw Error(ErrorCode::IoError, path.string() + ": truncated payload");
  img.values.resize(n);
  const char* p = bytes.data() + offset;
  for (std::size_t i = 0; i < n; ++i, p += width) {
    double v = 0;
    switch (type) {
    case kUInt8: v = get<std::uint8_t>(p); break;
    case kInt8: v = get<std::int8_t>(p); break;
    case kInt16: v = get<std::int16_t>(p); break;
    case kUInt16: v = get<std::uint16_t>(p); break;
    case kInt32: v = get<std::int32_t>(p); break;
    case kUInt32: v = get<std::uint32_t>(p); break;
    case kFloat32: v = get<float>(p); break;
    case kFloat64: v = get<double>(p); break;
    }
    img.values[i] = (slope != 0.0f && std::isfinite(slope)) ? v * slope + inter : v;
  }
  return img;
}

void write_nifti(const fs::path& path, const Grid3& g, const Spacing& s,
                 std::int16_t type, const std::vector<char>& payload) {
  std::vector<char> h(kNiftiVoxOffset, 0);
  auto set = [&h](std::size_t off, auto v) { std::memcpy(h.data() + off, &v, sizeof(v)); };
  set(0, std::int32_t{kNiftiHeaderSize});
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(g.width),
                                static_cast<std::int16_t>(g.height),
                                static_cast<std::int16_t>(g.depth), 1, 1, 1, 1};
  std::memcpy(h.data() + 40, dims, sizeof(dims));
  set(70, type);
  set(72, static_cast<std::int16_t>(type == kUInt8 ? 8 : 32));
  const float pix[8] = {1.0f, static_cast<float>(s[2]), static_cast<float>(s[1]),
                        static_cast<float>(s[0]), 1, 1, 1, 1};
  std::memcpy(h.data() + 76, pix, sizeof(pix));
  set(108, static_cast<float>(kNiftiVoxOffset));
  set(112, 1.0f);
  set(123, static_cast<char>(2)); // xyzt_units: mm
  std::memcpy(h.data() + 344, "n+1\0", 4);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const bool gz = path.extension() == ".gz";
  gzFile f = gzopen(path.string().c_str(), gz ? "wb6" : "wbT");
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  const bool ok =
      gzwrite(f, h.data(), static_cast<unsigned>(h.size())) == static_cast<int>(h.size()) &&
      gzwrite(f, payload.data(), static_cast<unsigned>(payload.size())) ==
          static_cast<int>(payload.size());
  if (gzclose(f) != Z_OK || !ok)
    throw Error(ErrorCode::IoError, "short write to " + path.string());
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

} // namespace

void write_raw_volume(const fs::path& path, const ModalityVolume& v) {
  auto buf = raw_header(v.grid);
  const auto* p = reinterpret_cast<const char*>(v.data.data());
  buf.insert(buf.end(), p, p + v.data.size() * sizeof(float));
  dump(path, buf);
}

void write_raw_labels(const fs::path& path, const LabelVolume& l) {
  auto buf = raw_header(l.grid);
  const ClassArray values = l.values();
  const auto* p = reinterpret_cast<const char*>(values.data());
  buf.insert(buf.end(), p, p + values.size());
  dump(path, buf);
}

ModalityVolume read_raw_volume(const fs::path& path, const std::string& tag) {
  const auto bytes = slurp(path);
  const Grid3 g = parse_raw_header(bytes, path, sizeof(float));
  ModalityVolume v(tag, g);
  std::memcpy(v.data.data(), bytes.data() + 16, g.numel() * sizeof(float));
  if (!v.data.allFinite())
    throw Error(ErrorCode::IoError, path.string() + ": non-finite intensities");
  return v;
}

LabelVolume read_raw_labels(const fs::path& path) {
  const auto bytes = slurp(path);
  const Grid3 g = parse_raw_header(bytes, path, 1);
  ClassArray values(g.numel());
  std::memcpy(values.data(), bytes.data() + 16, g.numel());
  return LabelVolume::from_values(g, values);
}

ModalityVolume read_nifti_volume(const fs::path& path, const std::string& tag) {
  const auto img = read_nifti(path);
  ModalityVolume v(tag, img.grid, img.spacing);
  for (std::size_t i = 0; i < img.values.size(); ++i)
    v.data[static_cast<Eigen::Index>(i)] = static_cast<float>(img.values[i]);
  if (!v.data.allFinite())
    throw Error(ErrorCode::IoError, path.string() + ": non-finite intensities");
  return v;
}

LabelVolume read_nifti_labels(const fs::path& path) {
  const auto img = read_nifti(path);
  ClassArray values(img.grid.numel());
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    const double v = img.values[i];
    if (v < 0 || v > 255 || v != std::round(v))
      throw Error(ErrorCode::BadLabel,
                  path.string() + ": label value " + std::to_string(v));
    values[static_cast<Eigen::Index>(i)] = static_cast<std::uint8_t>(v);
  }
  return LabelVolume::from_values(img.grid, values, img.spacing);
}

void write_nifti_volume(const fs::path& path, const ModalityVolume& v) {
  const auto* p = reinterpret_cast<const char*>(v.data.data());
  write_nifti(path, v.grid, v.spacing, kFloat32,
              std::vector<char>(p, p + v.data.size() * sizeof(float)));
}

void write_nifti_labels(const fs::path& path, const LabelVolume& l) {
  const ClassArray values = l.values();
  const auto* p = reinterpret_cast<const char*>(values.data());
  write_nifti(path, l.grid, l.spacing, kUInt8,
              std::vector<char>(p, p + values.size()));
}

ModalityVolume read_volume(const fs::path& path, const std::string& tag) {
  if (!fs::exists(path))
    throw Error(ErrorCode::IoError, "missing file " + path.string());
  return is_nifti(path) ? read_nifti_volume(path, tag) : read_raw_volume(path, tag);
}

LabelVolume read_labels(const fs::path& path) {
  if (!fs::exists(path))
    throw Error(ErrorCode::IoError, "missing file " + path.string());
  return is_nifti(path) ? read_nifti_labels(path) : read_raw_labels(path);
}

void write_volume(const fs::path& path, const ModalityVolume& v) {
  is_nifti(path) ? write_nifti_volume(path, v) : write_raw_volume(path, v);
}

void write_labels(const fs::path& path, const LabelVolume& l) {
  is_nifti(path) ? write_nifti_labels(path, l) : write_raw_labels(path, l);
}

std::vector<ManifestEntry> read_manifest(const fs::path& path,
                                         std::size_t modalities) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  auto resolve = [&base](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(trim(field));
    if (fields.size() != modalities + 1 && fields.size() != modalities + 2)
      throw Error(ErrorCode::IoError, path.string() + ":" + std::to_string(lineno) +
                                          ": expected case_id, " +
                                          std::to_string(modalities) +
                                          " modality paths and an optional label");
    ManifestEntry e;
    e.case_id = fields[0];
    for (std::size_t m = 0; m < modalities; ++m)
      e.modalities.push_back(resolve(fields[1 + m]));
    if (fields.size() == modalities + 2 && !fields.back().empty())
      e.labels = resolve(fields.back());
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  const fs::path base = path.parent_path();
  auto rel = [&base](const fs::path& p) {
    return base.empty() ? p.generic_string()
                        : p.lexically_relative(base).generic_string();
  };
  for (const auto& e : entries) {
    out << e.case_id;
    for (const auto& m : e.modalities) out << ',' << rel(m);
    if (e.labels) out << ',' << rel(*e.labels);
    out << '\n';
  }
  const std::string text = out.str();
  dump(path, std::vector<char>(text.begin(), text.end()));
}

MultiModalCase load_case(const std::string& case_id,
                         const std::vector<fs::path>& modalities,
                         const std::optional<fs::path>& labels) {
  MultiModalCase c;
  c.case_id = case_id;
  for (std::size_t m = 0; m < modalities.size(); ++m) {
    const std::string tag =
        m < kModalityNames.size() ? kModalityNames[m] : "M" + std::to_string(m);
    c.modalities.push_back(read_volume(modalities[m], tag));
  }
  if (labels) {
    c.labels = read_labels(*labels);
    c.labels->spacing = c.modalities.front().spacing;
  }
  c.validate();
  return c;
}

MultiModalCase load_case(const ManifestEntry& entry) {
  return load_case(entry.case_id, entry.modalities, entry.labels);
}

} // namespace mmseg
