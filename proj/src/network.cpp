#include "mmseg/network.hpp"

#include <map>
#include <sstream>

namespace mmseg {

ModalityPairing ModalityPairing::chain(Index modalities) {
  ModalityPairing p;
  for (Index i = 0; i + 1 < modalities; ++i) p.pairs.emplace_back(i, i + 1);
  return p;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

} // namespace

ModalityPairing ModalityPairing::parse(const std::string& text,
                                       const std::vector<std::string>& names) {
  auto lookup = [&names, &text](const std::string& n) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == n) return static_cast<Index>(i);
    throw Error(ErrorCode::ConfigError,
                "unknown modality '" + n + "' in pairing '" + text + "'");
  };
  ModalityPairing p;
  if (trim(text).empty()) return p;
  for (const auto& item : split(text, ',')) {
    const auto gt = item.find('>');
    if (gt == std::string::npos)
      throw Error(ErrorCode::ConfigError, "pair '" + item + "' is not SRC>DST");
    p.pairs.emplace_back(lookup(trim(item.substr(0, gt))),
                         lookup(trim(item.substr(gt + 1))));
  }
  p.validate(static_cast<Index>(names.size()));
  return p;
}

std::string ModalityPairing::format(const std::vector<std::string>& names) const {
  std::string out;
  for (const auto& [s, t] : pairs) {
    if (!out.empty()) out += ',';
    out += names[static_cast<std::size_t>(s)] + ">" + names[static_cast<std::size_t>(t)];
  }
  return out;
}

void ModalityPairing::validate(Index modalities) const {
  for (const auto& [s, t] : pairs) {
    if (s == t)
      throw Error(ErrorCode::ConfigError, "pair maps a modality onto itself");
    if (s < 0 || t < 0 || s >= modalities || t >= modalities)
      throw Error(ErrorCode::ConfigError, "pair index out of range");
  }
}

std::vector<std::string> NetworkConfig::modality_names() const {
  std::vector<std::string> names;
  for (Index m = 0; m < modalities; ++m)
    names.push_back(modalities == 4 ? kModalityNames[static_cast<std::size_t>(m)]
                                    : "M" + std::to_string(m));
  return names;
}

void NetworkConfig::validate() const {
  if (modalities < 1) throw Error(ErrorCode::ConfigError, "modalities must be >= 1");
  if (classes < 2) throw Error(ErrorCode::ConfigError, "classes must be >= 2");
  if (base_filters < 1) throw Error(ErrorCode::ConfigError, "base_filters must be >= 1");
  if (levels < 2) throw Error(ErrorCode::ConfigError, "levels must be >= 2");
  if (dilation_a < 1 || dilation_b < 1)
    throw Error(ErrorCode::ConfigError, "dilation rates must be >= 1");
  if (!(lambda >= 0)) throw Error(ErrorCode::ConfigError, "lambda must be >= 0");
  pairing.validate(modalities);
  validate_grid(input);
}

void NetworkConfig::validate_grid(const Grid3& g) const {
  const Index q = granularity();
  if (!g.valid() || g.depth % q || g.height % q || g.width % q)
    throw Error(ErrorCode::ConfigError,
                "input " + to_string(g) + " must be divisible by " + std::to_string(q));
}

std::string NetworkConfig::serialize() const {
  std::ostringstream out;
  out.precision(17);
  out << "modalities=" << modalities << '\n'
      << "classes=" << classes << '\n'
      << "base_filters=" << base_filters << '\n'
      << "levels=" << levels << '\n'
      << "dilation_a=" << dilation_a << '\n'
      << "dilation_b=" << dilation_b << '\n'
      << "lambda=" << lambda << '\n'
      << "input=" << input.depth << ',' << input.height << ',' << input.width << '\n'
      << "use_fusion=" << (use_fusion ? 1 : 0) << '\n'
      << "use_correlation=" << (use_correlation ? 1 : 0) << '\n'
      << "pairs=" << pairing.format(modality_names()) << '\n';
  return out.str();
}

NetworkConfig NetworkConfig::parse(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::ConfigError, "malformed config line '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  NetworkConfig c;
  auto integer = [&kv](const char* key, Index& dst) {
    if (auto it = kv.find(key); it != kv.end()) dst = std::stoll(it->second);
  };
  integer("modalities", c.modalities);
  integer("classes", c.classes);
  integer("base_filters", c.base_filters);
  integer("levels", c.levels);
  integer("dilation_a", c.dilation_a);
  integer("dilation_b", c.dilation_b);
  if (auto it = kv.find("lambda"); it != kv.end()) c.lambda = std::stod(it->second);
  if (auto it = kv.find("input"); it != kv.end()) {
    const auto dims = split(it->second, ',');
    if (dims.size() != 3) throw Error(ErrorCode::ConfigError, "input needs D,H,W");
    c.input = {std::stoll(dims[0]), std::stoll(dims[1]), std::stoll(dims[2])};
  }
  if (auto it = kv.find("use_fusion"); it != kv.end()) c.use_fusion = it->second == "1";
  if (auto it = kv.find("use_correlation"); it != kv.end())
    c.use_correlation = it->second == "1";
  if (auto it = kv.find("pairs"); it != kv.end())
    c.pairing = ModalityPairing::parse(it->second, c.modality_names());
  else
    c.pairing = ModalityPairing::chain(c.modalities);
  c.validate();
  return c;
}

} // namespace mmseg
