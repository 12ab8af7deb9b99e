#pragma once

// File formats.  All multi-byte integers and floats are little-endian.
//
//   image        binary PGM (P5, 1 channel) or PPM (P6, 3 channels), maxval 255
//   token grid   u32 height, u32 width, then height*width i32 cells (MASK = -1)
//   infill mask  height*width bytes in raster order, 0 = known, 1 = generate
//   checkpoint   "EVQCKPT\0", u32 version, u64 seed, u32 n + n bytes of config
//                text, u32 tensor count, then per tensor: u32 n + name bytes,
//                u32 ndim, ndim x u64 extents, u8 dtype (0 = f32, 1 = f64), data

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "evq/grid.hpp"
#include "evq/nn.hpp"
#include "json.hpp"

namespace evq {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace io {

namespace detail {

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError("unexpected end of file");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t limit = 1u << 24) {
  const auto n = get<std::uint32_t>(is);
  if (n > limit) throw IoError("string field too long");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("unexpected end of file");
  return s;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return f;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

// Reads the next PNM header integer, skipping whitespace and '#' comments.
inline long pnm_int(std::istream& is) {
  int c = is.get();
  for (;;) {
    while (c != EOF && std::isspace(c)) c = is.get();
    if (c != '#') break;
    while (c != EOF && c != '\n') c = is.get();
  }
  if (c == EOF || !std::isdigit(c)) throw IoError("malformed PNM header");
  long v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1'000'000) throw IoError("PNM dimension too large");
    c = is.get();
  }
  return v;  // the single whitespace byte after the value has been consumed
}

}  // namespace detail

/// 8-bit quantization used by the image writer: round(clamp(v) * 255).
inline std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline void write_pnm(std::ostream& os, const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("PNM supports 1 or 3 channels");
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<char>(to_byte(img.pixels[i]));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ImageBuffer read_pnm(std::istream& is) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw IoError("not a binary PGM/PPM file");
  const long w = detail::pnm_int(is), h = detail::pnm_int(is), maxval = detail::pnm_int(is);
  if (w <= 0 || h <= 0) throw IoError("PNM image has no pixels");
  if (maxval != 255) throw IoError("only maxval 255 is supported");
  ImageBuffer img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), magic[1] == '5' ? 1 : 3);
  std::vector<unsigned char> bytes(img.pixels.size());
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw IoError("truncated PNM pixel data");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

inline void write_pnm(const std::string& path, const ImageBuffer& img) {
  auto f = detail::open_out(path);
  write_pnm(f, img);
  if (!f) throw IoError("write failed: " + path);
}

inline ImageBuffer read_pnm(const std::string& path) {
  auto f = detail::open_in(path);
  return read_pnm(f);
}

/// Images side by side (same height and channels), for reconstruction previews.
inline ImageBuffer hconcat(const std::vector<ImageBuffer>& parts) {
  if (parts.empty()) return {};
  std::size_t w = 0;
  for (const auto& p : parts) {
    if (p.height != parts[0].height || p.channels != parts[0].channels) throw DimensionError("hconcat: shape mismatch");
    w += p.width;
  }
  ImageBuffer out(parts[0].height, w, parts[0].channels);
  std::size_t x0 = 0;
  for (const auto& p : parts) {
    for (std::size_t y = 0; y < p.height; ++y)
      for (std::size_t x = 0; x < p.width; ++x)
        for (std::size_t c = 0; c < p.channels; ++c) out.at(y, x0 + x, c) = p.at(y, x, c);
    x0 += p.width;
  }
  return out;
}

inline void write_tokens(std::ostream& os, const TokenGrid& g) {
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(g.height));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(g.width));
  os.write(reinterpret_cast<const char*>(g.cells.data()), static_cast<std::streamsize>(g.cells.size() * 4));
}

inline TokenGrid read_tokens(std::istream& is) {
  const auto h = detail::get<std::uint32_t>(is), w = detail::get<std::uint32_t>(is);
  if (static_cast<std::uint64_t>(h) * w > (1u << 26)) throw IoError("token grid too large");
  TokenGrid g(h, w);
  if (!is.read(reinterpret_cast<char*>(g.cells.data()), static_cast<std::streamsize>(g.cells.size() * 4)))
    throw IoError("truncated token grid");
  for (auto c : g.cells)
    if (c < TokenGrid::kMask) throw IoError("token grid holds a negative code other than MASK");
  return g;
}

inline void write_tokens(const std::string& path, const TokenGrid& g) {
  auto f = detail::open_out(path);
  write_tokens(f, g);
  if (!f) throw IoError("write failed: " + path);
}

inline TokenGrid read_tokens(const std::string& path) {
  auto f = detail::open_in(path);
  return read_tokens(f);
}

/// Reads an infill mask of exactly h*w bytes, each 0 or 1.
inline std::vector<std::uint8_t> read_mask(const std::string& path, std::size_t h, std::size_t w) {
  auto f = detail::open_in(path);
  std::vector<std::uint8_t> m((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (m.size() != h * w)
    throw IoError("mask file has " + std::to_string(m.size()) + " bytes, expected " + std::to_string(h * w));
  for (auto v : m)
    if (v > 1) throw IoError("mask bytes must be 0 or 1");
  return m;
}

inline void write_mask(const std::string& path, const std::vector<std::uint8_t>& m) {
  auto f = detail::open_out(path);
  f.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size()));
  if (!f) throw IoError("write failed: " + path);
}

/// Flat key=value settings.  '#' starts a comment; blank lines are ignored.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text) {
    KeyValueConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  /// Applies "key=value" overrides in order.
  void override_with(const std::vector<std::string>& kvs) {
    for (const auto& kv : kvs) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
      set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
  }

  void set(const std::string& k, const std::string& v) {
    if (k.empty()) throw ConfigError("empty config key");
    values_[k] = v;
  }

  bool has(const std::string& k) const { return values_.count(k) != 0; }

  std::string get(const std::string& k, const std::string& fallback) const {
    auto it = values_.find(k);
    return it == values_.end() ? fallback : it->second;
  }

  std::size_t get_size(const std::string& k, std::size_t fallback) const {
    if (!has(k)) return fallback;
    const std::string v = values_.at(k);
    std::size_t pos = 0;
    unsigned long long r = 0;
    try {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      r = std::stoull(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("config key " + k + " needs a non-negative integer, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("config key " + k + " needs a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(r);
  }

  double get_double(const std::string& k, double fallback) const {
    if (!has(k)) return fallback;
    const std::string v = values_.at(k);
    std::size_t pos = 0;
    double r = 0;
    try {
      r = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("config key " + k + " needs a number, got '" + v + "'");
    }
    if (pos != v.size() || !std::isfinite(r)) throw ConfigError("config key " + k + " needs a number, got '" + v + "'");
    return r;
  }

  bool get_bool(const std::string& k, bool fallback) const {
    if (!has(k)) return fallback;
    const std::string v = values_.at(k);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config key " + k + " needs true/false, got '" + v + "'");
  }

  /// Rejects keys outside `known` so typos do not pass silently.
  void require_known(const std::vector<std::string>& known) const {
    for (const auto& [k, _] : values_)
      if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key: " + k);
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
    return s;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

struct StoredTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;   ///< dtype 0
  std::vector<double> f64;  ///< dtype 1
  bool is_f64 = false;

  std::size_t count() const { return is_f64 ? f64.size() : f32.size(); }
};

/// In-memory checkpoint image; see the format note at the top of this file.
struct Checkpoint {
  static constexpr char kMagic[8] = {'E', 'V', 'Q', 'C', 'K', 'P', 'T', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint64_t seed = 0;
  std::string config;  ///< key=value echo of the run configuration
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const StoredTensor& require(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw IoError("checkpoint has no tensor " + name);
  }

  void add_f32(const std::string& name, std::vector<std::uint64_t> dims, std::vector<float> data) {
    tensors.push_back({name, std::move(dims), std::move(data), {}, false});
  }

  void add_f64(const std::string& name, std::vector<std::uint64_t> dims, std::vector<double> data) {
    tensors.push_back({name, std::move(dims), {}, std::move(data), true});
  }

  KeyValueConfig config_values() const { return KeyValueConfig::parse(config); }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  os.write(Checkpoint::kMagic, 8);
  detail::put<std::uint32_t>(os, c.version);
  detail::put<std::uint64_t>(os, c.seed);
  detail::put_string(os, c.config);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    detail::put_string(os, t.name);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint64_t>(os, d);
    detail::put<std::uint8_t>(os, t.is_f64 ? 1 : 0);
    if (t.is_f64)
      os.write(reinterpret_cast<const char*>(t.f64.data()), static_cast<std::streamsize>(t.f64.size() * 8));
    else
      os.write(reinterpret_cast<const char*>(t.f32.data()), static_cast<std::streamsize>(t.f32.size() * 4));
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, Checkpoint::kMagic, 8) != 0) throw IoError("not a checkpoint file");
  Checkpoint c;
  c.version = detail::get<std::uint32_t>(is);
  if (c.version != Checkpoint::kVersion)
    throw IoError("checkpoint version " + std::to_string(c.version) + " is not supported (expected " +
                  std::to_string(Checkpoint::kVersion) + ")");
  c.seed = detail::get<std::uint64_t>(is);
  c.config = detail::get_string(is);
  const auto n = detail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    StoredTensor t;
    t.name = detail::get_string(is, 4096);
    const auto nd = detail::get<std::uint32_t>(is);
    if (nd > 8) throw IoError("tensor rank too large in " + t.name);
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      t.dims.push_back(detail::get<std::uint64_t>(is));
      count *= t.dims.back();
      if (count > (1ull << 32)) throw IoError("tensor too large: " + t.name);
    }
    const auto dtype = detail::get<std::uint8_t>(is);
    if (dtype > 1) throw IoError("unknown dtype in " + t.name);
    t.is_f64 = dtype == 1;
    if (t.is_f64) {
      t.f64.resize(count);
      if (!is.read(reinterpret_cast<char*>(t.f64.data()), static_cast<std::streamsize>(count * 8)))
        throw IoError("truncated tensor " + t.name);
    } else {
      t.f32.resize(count);
      if (!is.read(reinterpret_cast<char*>(t.f32.data()), static_cast<std::streamsize>(count * 4)))
        throw IoError("truncated tensor " + t.name);
    }
    c.tensors.push_back(std::move(t));
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  auto f = detail::open_out(path);
  write_checkpoint(f, c);
  if (!f) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto f = detail::open_in(path);
  return read_checkpoint(f);
}

/// Stores every parameter as f32 under its ParamStore name.
inline void store_params(Checkpoint& c, const ParamStore<float>& ps) {
  for (const auto& [name, t] : ps.items()) {
    std::vector<std::uint64_t> dims(t.shape().begin(), t.shape().end());
    c.add_f32(name, std::move(dims), std::vector<float>(t.data().begin(), t.data().end()));
  }
}

/// Copies stored values into the parameters; names and shapes must match.
inline void restore_params(const Checkpoint& c, ParamStore<float>& ps) {
  for (const auto& [name, cref] : ps.items()) {
    const StoredTensor& s = c.require(name);
    Tensor<float> t = cref;
    if (s.is_f64 || s.dims.size() != t.shape().size() ||
        !std::equal(s.dims.begin(), s.dims.end(), t.shape().begin()))
      throw IoError("checkpoint tensor " + name + " does not match the model's shape " + shape_str(t.shape()));
    std::copy(s.f32.begin(), s.f32.end(), t.mutable_data().begin());
  }
}

/// Adam moments (f64) under "<prefix>.m.<param>" / "<prefix>.v.<param>" plus the step count.
inline void store_adam(Checkpoint& c, const ParamStore<float>& ps, const Adam<float>& opt,
                       const std::string& prefix) {
  std::size_t i = 0;
  for (const auto& [name, t] : ps.items()) {
    c.add_f64(prefix + ".m." + name, {t.size()}, opt.first_moment(i));
    c.add_f64(prefix + ".v." + name, {t.size()}, opt.second_moment(i));
    ++i;
  }
  c.add_f64(prefix + ".step", {1}, {static_cast<double>(opt.steps())});
}

inline void restore_adam(const Checkpoint& c, const ParamStore<float>& ps, Adam<float>& opt,
                         const std::string& prefix) {
  std::size_t i = 0;
  for (const auto& [name, t] : ps.items()) {
    const auto& m = c.require(prefix + ".m." + name);
    const auto& v = c.require(prefix + ".v." + name);
    if (!m.is_f64 || !v.is_f64 || m.f64.size() != t.size() || v.f64.size() != t.size())
      throw IoError("optimizer state for " + name + " does not match");
    opt.first_moment(i) = m.f64;
    opt.second_moment(i) = v.f64;
    ++i;
  }
  const auto& s = c.require(prefix + ".step");
  if (!s.is_f64 || s.f64.size() != 1) throw IoError("bad optimizer step record");
  opt.set_steps(static_cast<std::uint64_t>(s.f64[0]));
}

/// One row per call, written both as CSV (header on first row) and as JSON lines.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  MetricsWriter(std::ostream* csv, std::ostream* jsonl) : csv_(csv), jsonl_(jsonl) {}

  using Value = std::variant<double, std::int64_t, std::string>;

  void row(const std::vector<std::pair<std::string, Value>>& fields) {
    if (csv_) {
      if (!header_written_) {
        for (std::size_t i = 0; i < fields.size(); ++i) *csv_ << (i ? "," : "") << fields[i].first;
        *csv_ << '\n';
        header_written_ = true;
      }
      for (std::size_t i = 0; i < fields.size(); ++i) {
        *csv_ << (i ? "," : "");
        std::visit([&](const auto& v) { write_csv(*csv_, v); }, fields[i].second);
      }
      *csv_ << '\n';
      csv_->flush();
    }
    if (jsonl_) {
      nlohmann::ordered_json j;
      for (const auto& [k, v] : fields) std::visit([&](const auto& x) { j[k] = x; }, v);
      *jsonl_ << j.dump() << '\n';
      jsonl_->flush();
    }
  }

 private:
  static void write_csv(std::ostream& os, double v) {
    std::ostringstream s;
    s.precision(9);
    s << v;
    os << s.str();
  }
  static void write_csv(std::ostream& os, std::int64_t v) { os << v; }
  static void write_csv(std::ostream& os, const std::string& v) { os << v; }

  std::ostream* csv_ = nullptr;
  std::ostream* jsonl_ = nullptr;
  bool header_written_ = false;
};

}  // namespace io
}  // namespace evq
