#include "mmseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace mmseg {

namespace {

struct Record {
  std::string name;
  std::vector<Index> shape;
  std::vector<float> values;
};

struct Contents {
  std::string config_text;
  std::vector<Record> params;
};

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  }

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw Error(ErrorCode::IoError, path_.string() + ": truncated checkpoint");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  }
  std::string str(std::uint32_t limit = 1u << 20) {
    const auto n = u32();
    if (n > limit) throw Error(ErrorCode::IoError, path_.string() + ": corrupt string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
  std::filesystem::path path_;
  std::ifstream in_;
};

Contents read_contents(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw Error(ErrorCode::IoError, path.string() + ": not a checkpoint");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw Error(ErrorCode::IoError,
                path.string() + ": unsupported checkpoint version " + std::to_string(v));
  Contents c;
  c.config_text = r.str();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    Record rec;
    rec.name = r.str(4096);
    const auto rank = r.u32();
    if (rank > 8) throw Error(ErrorCode::IoError, path.string() + ": corrupt tensor rank");
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.shape.push_back(r.u32());
      numel *= static_cast<std::uint64_t>(rec.shape.back());
    }
    if (numel > (1ull << 31)) throw Error(ErrorCode::IoError, path.string() + ": corrupt tensor");
    rec.values.resize(numel);
    r.bytes(reinterpret_cast<char*>(rec.values.data()), numel * sizeof(float));
    c.params.push_back(std::move(rec));
  }
  if (!r.at_end()) throw Error(ErrorCode::IoError, path.string() + ": trailing bytes");
  return c;
}

std::string shape_string(const std::vector<Index>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out.write(kCheckpointMagic, 8);
    put_u32(out, kCheckpointVersion);
    put_string(out, model.config.serialize());
    std::uint32_t n = 0;
    model.for_each_param([&n](const std::string&, const Param<float>&) { ++n; });
    put_u32(out, n);
    model.for_each_param([&out](const std::string& name, const Param<float>& p) {
      put_string(out, name);
      put_u32(out, static_cast<std::uint32_t>(p.shape.size()));
      for (Index d : p.shape) put_u32(out, static_cast<std::uint32_t>(d));
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(float)));
    });
    out.flush();
    if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  const Contents c = read_contents(path);
  NetworkConfig cfg;
  try {
    cfg = NetworkConfig::parse(c.config_text);
  } catch (const Error& e) {
    throw Error(ErrorCode::CheckpointMismatch, path.string() + ": " + e.what());
  }
  Model<float> model(cfg);
  std::size_t i = 0;
  model.for_each_param([&](const std::string& name, Param<float>& p) {
    if (i >= c.params.size())
      throw Error(ErrorCode::CheckpointMismatch, path.string() + ": missing " + name);
    const Record& rec = c.params[i++];
    if (rec.name != name || rec.shape != p.shape)
      throw Error(ErrorCode::CheckpointMismatch,
                  path.string() + ": expected " + name + shape_string(p.shape) + ", found " +
                      rec.name + shape_string(rec.shape));
    p.value = Eigen::Map<const Vector<float>>(rec.values.data(), p.size());
  });
  if (i != c.params.size())
    throw Error(ErrorCode::CheckpointMismatch, path.string() + ": unexpected extra tensors");
  return model;
}

Model<float> load_checkpoint(const std::filesystem::path& path, const NetworkConfig& expected) {
  auto model = load_checkpoint(path);
  if (!(model.config == expected))
    throw Error(ErrorCode::CheckpointMismatch,
                path.string() + ": stored config differs:\n" + model.config.serialize() +
                    "expected:\n" + expected.serialize());
  return model;
}

std::string inspect_checkpoint(const std::filesystem::path& path) {
  const Contents c = read_contents(path);
  std::ostringstream out;
  out << "format: MMSEGCKP v" << kCheckpointVersion << "\n[config]\n" << c.config_text
      << "[parameters]\n";
  std::size_t total = 0;
  for (const auto& r : c.params) {
    out << r.name << ' ' << shape_string(r.shape) << ' ' << r.values.size() << '\n';
    total += r.values.size();
  }
  out << "tensors: " << c.params.size() << "\ntotal: " << total << '\n';
  return out.str();
}

} // namespace mmseg
