#pragma once

// On-disk formats: STKC image stacks with a JSON sidecar, CSV tables, and a
// dataset directory whose manifest records payload checksums.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "ramseycal/datasets.hpp"
#include "ramseycal/errors.hpp"
#include "ramseycal/image.hpp"
#include "ramseycal/synth.hpp"

namespace ramseycal {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kStackVersion = 1;
inline constexpr int kDatasetSchemaVersion = 1;
inline constexpr std::size_t kStackHeaderBytes = 64;
inline constexpr std::uint32_t kElementFloat64LE = 1;

// ---------------------------------------------------------------------------
// Checksums and raw files

inline std::string sha256_hex(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) throw FormatError("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string sha256_hex(const std::string& bytes) { return sha256_hex(bytes.data(), bytes.size()); }

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// STKC: 64-byte little-endian header, then frames row-major as float64 LE.
//
//   0  char[4]  "STKC"
//   4  u32      version
//   8  u64      frame count
//  16  u64      height (rows)
//  24  u64      width (cols)
//  32  u32      element type, 1 = float64 little-endian
//  36  28 bytes reserved, zero

namespace detail {

template <class T>
void put_le(std::string& buf, std::size_t at, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[at + i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
}

template <class T>
T get_le(const std::string& buf, std::size_t at) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace detail

inline std::string encode_stkc(const std::vector<Image>& frames) {
  const std::uint64_t rows = frames.empty() ? 0 : static_cast<std::uint64_t>(frames.front().rows());
  const std::uint64_t cols = frames.empty() ? 0 : static_cast<std::uint64_t>(frames.front().cols());
  for (const auto& f : frames)
    if (static_cast<std::uint64_t>(f.rows()) != rows || static_cast<std::uint64_t>(f.cols()) != cols)
      throw FormatError("write_stack: frames differ in shape");
  std::string buf(kStackHeaderBytes + frames.size() * rows * cols * 8, '\0');
  std::memcpy(buf.data(), "STKC", 4);
  detail::put_le<std::uint32_t>(buf, 4, kStackVersion);
  detail::put_le<std::uint64_t>(buf, 8, frames.size());
  detail::put_le<std::uint64_t>(buf, 16, rows);
  detail::put_le<std::uint64_t>(buf, 24, cols);
  detail::put_le<std::uint32_t>(buf, 32, kElementFloat64LE);
  std::size_t at = kStackHeaderBytes;
  for (const auto& f : frames)
    for (Eigen::Index i = 0; i < f.size(); ++i, at += 8) detail::put_le(buf, at, std::bit_cast<std::uint64_t>(f(i)));
  return buf;
}

inline std::vector<Image> decode_stkc(const std::string& buf, const std::string& what = "stack") {
  if (buf.size() < kStackHeaderBytes)
    throw FormatError(what + ": truncated header, expected " + std::to_string(kStackHeaderBytes) + " bytes, got " +
                      std::to_string(buf.size()));
  if (std::memcmp(buf.data(), "STKC", 4) != 0) throw FormatError(what + ": bad magic, expected \"STKC\"");
  const auto version = detail::get_le<std::uint32_t>(buf, 4);
  if (version != kStackVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version) + ", expected " +
                      std::to_string(kStackVersion));
  const auto n = detail::get_le<std::uint64_t>(buf, 8);
  const auto rows = detail::get_le<std::uint64_t>(buf, 16);
  const auto cols = detail::get_le<std::uint64_t>(buf, 24);
  const auto type = detail::get_le<std::uint32_t>(buf, 32);
  if (type != kElementFloat64LE)
    throw FormatError(what + ": unsupported element type " + std::to_string(type) + ", expected 1 (float64 LE)");
  constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;
  if (rows > kMaxElements || cols > kMaxElements || n > kMaxElements || (rows && cols && n > kMaxElements / rows / cols))
    throw FormatError(what + ": implausible dimensions in header");
  const std::uint64_t expected = kStackHeaderBytes + n * rows * cols * 8;
  if (buf.size() != expected)
    throw FormatError(what + (buf.size() < expected ? ": truncated" : ": trailing bytes") + ", expected " +
                      std::to_string(expected) + " bytes, got " + std::to_string(buf.size()));
  std::vector<Image> frames;
  frames.reserve(n);
  std::size_t at = kStackHeaderBytes;
  for (std::uint64_t k = 0; k < n; ++k) {
    Image f(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < f.size(); ++i, at += 8)
      f(i) = std::bit_cast<double>(detail::get_le<std::uint64_t>(buf, at));
    frames.push_back(std::move(f));
  }
  return frames;
}

inline fs::path sidecar_path(const fs::path& stack) { return fs::path(stack.string() + ".json"); }

inline fs::path dark_path(const fs::path& stack) {
  fs::path p = stack;
  return p.replace_extension(".dark.stkc");
}

// Writes `path` plus a sidecar manifest (and a one-frame dark stack when present).
// Returns the SHA-256 of the frame file.
inline std::string write_stack(const fs::path& path, const ImageStack& stack) {
  stack.validate();
  const std::string bytes = encode_stkc(stack.frames);
  write_file(path, bytes);
  json side = {{"kind", "image_stack"},
               {"schema_version", kStackVersion},
               {"frames", stack.frames.size()},
               {"rows", stack.rows()},
               {"cols", stack.cols()},
               {"pixel_pitch_m", stack.pixel_pitch_m},
               {"exposure_s", stack.exposure_s},
               {"sha256", sha256_hex(bytes)},
               {"dark", nullptr}};
  if (stack.dark) {
    const std::string dbytes = encode_stkc({*stack.dark});
    write_file(dark_path(path), dbytes);
    side["dark"] = {{"file", dark_path(path).filename().string()}, {"sha256", sha256_hex(dbytes)}};
  }
  write_json(sidecar_path(path), side);
  return side["sha256"].get<std::string>();
}

// Reads a stack and, when the sidecar exists, verifies its checksum and restores metadata.
inline ImageStack read_stack(const fs::path& path) {
  const std::string bytes = read_file(path);
  ImageStack st;
  st.frames = decode_stkc(bytes, path.string());
  const fs::path side_p = sidecar_path(path);
  if (!fs::exists(side_p)) return st;
  const json side = read_json(side_p);
  if (side.value("schema_version", -1) != kStackVersion)
    throw FormatError(side_p.string() + ": unsupported schema_version");
  const std::string want = side.value("sha256", "");
  const std::string got = sha256_hex(bytes);
  if (want != got) throw FormatError(path.string() + ": checksum mismatch, manifest " + want + ", file " + got);
  st.pixel_pitch_m = side.value("pixel_pitch_m", st.pixel_pitch_m);
  st.exposure_s = side.value("exposure_s", 0.0);
  if (side.contains("dark") && side["dark"].is_object()) {
    const fs::path dp = path.parent_path() / side["dark"]["file"].get<std::string>();
    const std::string dbytes = read_file(dp);
    if (sha256_hex(dbytes) != side["dark"]["sha256"].get<std::string>())
      throw FormatError(dp.string() + ": checksum mismatch");
    auto d = decode_stkc(dbytes, dp.string());
    if (d.size() != 1) throw FormatError(dp.string() + ": dark stack must hold one frame");
    st.dark = std::move(d.front());
  }
  st.validate();
  return st;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError("csv: no column '" + name + "'");
  }
  std::vector<double> get(const std::string& name) const {
    const auto c = column(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
  }
};

inline std::string to_csv(const CsvTable& t) {
  std::string out;
  for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + t.header[i];
  out += '\n';
  for (const auto& r : t.rows) {
    if (r.size() != t.header.size()) throw FormatError("csv: row width differs from header");
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + format_double(r[i]);
    out += '\n';
  }
  return out;
}

inline CsvTable parse_csv(const std::string& text, const std::string& what = "csv") {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur += c;
      }
    }
    f.push_back(cur);
    return f;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = split(line);
    if (t.header.empty()) {
      t.header = fields;
      continue;
    }
    if (fields.size() != t.header.size())
      throw FormatError(what + ": line " + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                        " fields, got " + std::to_string(fields.size()));
    std::vector<double> row;
    for (const auto& f : fields) {
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (f.empty() || end != f.c_str() + f.size())
        throw FormatError(what + ": line " + std::to_string(lineno) + ": not a number: '" + f + "'");
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw FormatError(what + ": empty file");
  return t;
}

inline void write_csv(const fs::path& path, const CsvTable& t) { write_file(path, to_csv(t)); }
inline CsvTable read_csv(const fs::path& path) { return parse_csv(read_file(path), path.string()); }

inline CsvTable image_table(const Image& img) {
  CsvTable t;
  for (Eigen::Index x = 0; x < img.cols(); ++x) t.header.push_back("x" + std::to_string(x));
  for (Eigen::Index y = 0; y < img.rows(); ++y) {
    std::vector<double> r(static_cast<std::size_t>(img.cols()));
    for (Eigen::Index x = 0; x < img.cols(); ++x) r[static_cast<std::size_t>(x)] = img(y, x);
    t.rows.push_back(std::move(r));
  }
  return t;
}

// ---------------------------------------------------------------------------
// JSON conversions for domain types

inline json image_to_json(const Image& img) {
  json rows = json::array();
  for (Eigen::Index y = 0; y < img.rows(); ++y) {
    json r = json::array();
    for (Eigen::Index x = 0; x < img.cols(); ++x) r.push_back(img(y, x));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Image image_from_json(const json& j) {
  if (!j.is_array()) throw FormatError("image: expected an array of rows");
  if (j.empty()) return {};
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Image img(rows, cols);
  for (Eigen::Index y = 0; y < rows; ++y) {
    const auto& r = j[static_cast<std::size_t>(y)];
    if (!r.is_array() || static_cast<Eigen::Index>(r.size()) != cols) throw FormatError("image: ragged rows");
    for (Eigen::Index x = 0; x < cols; ++x) img(y, x) = r[static_cast<std::size_t>(x)].get<double>();
  }
  return img;
}

inline json to_json(const AtomSpec& a) {
  return {{"gamma_rad_per_s", a.gamma},
          {"lambda_m", a.lambda},
          {"delta_g_rad_per_s", a.delta_g},
          {"delta_e_rad_per_s", a.delta_e},
          {"i_sat_w_per_m2", a.i_sat}};
}

inline AtomSpec atom_from_json(const json& j) {
  AtomSpec a;
  a.gamma = j.at("gamma_rad_per_s").get<double>();
  a.lambda = j.at("lambda_m").get<double>();
  a.delta_g = j.at("delta_g_rad_per_s").get<double>();
  a.delta_e = j.at("delta_e_rad_per_s").get<double>();
  a.i_sat = j.at("i_sat_w_per_m2").get<double>();
  return a;
}

inline json to_json(const SensorModel& s) {
  return {{"conversion_adu_per_e", s.conversion},
          {"qe", s.qe},
          {"read_noise_adu", s.read_noise_adu},
          {"excess_noise_factor", s.excess_noise_factor},
          {"dark_level_adu", s.dark_level_adu}};
}

inline SensorModel sensor_from_json(const json& j) {
  SensorModel s;
  s.conversion = j.at("conversion_adu_per_e").get<double>();
  s.qe = j.at("qe").get<double>();
  s.read_noise_adu = j.at("read_noise_adu").get<double>();
  s.excess_noise_factor = j.at("excess_noise_factor").get<double>();
  s.dark_level_adu = j.at("dark_level_adu").get<double>();
  return s;
}

inline json to_json(const GroundTruth& g) {
  json j = {{"n_sat_counts_per_px_per_us", g.n_sat},
            {"phi0_rad", g.phi0},
            {"dt0_s", g.dt0},
            {"atom", to_json(g.atom)},
            {"sensor", to_json(g.sensor)},
            {"intensity_map", nullptr}};
  if (g.intensity_map.size() > 0) j["intensity_map"] = image_to_json(g.intensity_map);
  return j;
}

inline GroundTruth ground_truth_from_json(const json& j) {
  try {
    GroundTruth g;
    g.n_sat = j.at("n_sat_counts_per_px_per_us").get<double>();
    g.phi0 = j.at("phi0_rad").get<double>();
    g.dt0 = j.at("dt0_s").get<double>();
    g.atom = atom_from_json(j.at("atom"));
    g.sensor = sensor_from_json(j.at("sensor"));
    if (j.contains("intensity_map") && !j["intensity_map"].is_null())
      g.intensity_map = image_from_json(j["intensity_map"]);
    return g;
  } catch (const json::exception& e) {
    throw FormatError(std::string("ground truth: ") + e.what());
  }
}

// Fringe tables: one row per (fringe, phase) sample.
inline CsvTable fringe_table(const std::vector<FringeDataset>& sets) {
  CsvTable t;
  t.header = {"fringe", "dphi_rad", "f2", "f2_sigma", "n_adu", "n_adu_exposure_s", "delta_bar", "t_p_s"};
  for (std::size_t k = 0; k < sets.size(); ++k) {
    const auto& d = sets[k];
    for (std::size_t i = 0; i < d.dphi.size(); ++i)
      t.rows.push_back({static_cast<double>(k), d.dphi[i], d.f2[i], d.f2_sigma.empty() ? 0.0 : d.f2_sigma[i],
                        d.probe.n_adu, d.probe.n_adu_exposure_s, d.probe.delta_bar, d.probe.t_p});
  }
  return t;
}

inline std::vector<FringeDataset> fringes_from_table(const CsvTable& t) {
  const auto c_k = t.column("fringe"), c_x = t.column("dphi_rad"), c_f = t.column("f2"), c_s = t.column("f2_sigma");
  const auto c_n = t.column("n_adu"), c_e = t.column("n_adu_exposure_s"), c_d = t.column("delta_bar"),
             c_t = t.column("t_p_s");
  std::vector<FringeDataset> out;
  std::vector<bool> weighted;
  for (const auto& r : t.rows) {
    if (!(r[c_k] >= 0) || r[c_k] != std::floor(r[c_k])) throw FormatError("fringe table: bad fringe index");
    const auto k = static_cast<std::size_t>(r[c_k]);
    if (k == out.size()) {
      FringeDataset d;
      d.probe = {r[c_n], r[c_e], r[c_d], r[c_t]};
      out.push_back(d);
      weighted.push_back(false);
    } else if (k + 1 != out.size()) {
      throw FormatError("fringe table: rows must be grouped by consecutive fringe index");
    }
    out[k].dphi.push_back(r[c_x]);
    out[k].f2.push_back(r[c_f]);
    out[k].f2_sigma.push_back(r[c_s]);
    if (r[c_s] > 0) weighted[k] = true;
  }
  for (std::size_t k = 0; k < out.size(); ++k)
    if (!weighted[k]) out[k].f2_sigma.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Dataset container: a directory holding manifest.json plus payload files.

struct PayloadEntry {
  std::string file;
  std::string format;  // "stkc", "csv" or "json"
  std::string sha256;
  std::uint64_t bytes = 0;
};

struct DatasetManifest {
  std::string kind;
  int schema_version = kDatasetSchemaVersion;
  json config = json::object();
  std::uint64_t seed = 0;
  std::optional<GroundTruth> truth;
  json extra = json::object();  // kind-specific metadata
  std::map<std::string, PayloadEntry> payloads;

  json to_json() const {
    json p = json::object();
    for (const auto& [name, e] : payloads)
      p[name] = {{"file", e.file}, {"format", e.format}, {"sha256", e.sha256}, {"bytes", e.bytes}};
    return {{"kind", kind},
            {"schema_version", schema_version},
            {"seed", seed},
            {"config", config},
            {"ground_truth", truth ? ramseycal::to_json(*truth) : json(nullptr)},
            {"extra", extra},
            {"payloads", p}};
  }
};

class DatasetWriter {
 public:
  DatasetWriter(fs::path dir, std::string kind, json config, std::uint64_t seed) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    m_.kind = std::move(kind);
    m_.config = std::move(config);
    m_.seed = seed;
  }

  void set_truth(const GroundTruth& g) { m_.truth = g; }
  json& extra() { return m_.extra; }

  void add_stack(const std::string& name, const ImageStack& st) {
    const std::string file = name + ".stkc";
    write_stack(dir_ / file, st);
    record(name, file, "stkc");
  }
  void add_frames(const std::string& name, const std::vector<Image>& frames) {
    ImageStack st;
    st.frames = frames;
    add_stack(name, st);
  }
  void add_csv(const std::string& name, const CsvTable& t) {
    const std::string file = name + ".csv";
    write_csv(dir_ / file, t);
    record(name, file, "csv");
  }
  void add_json(const std::string& name, const json& j) {
    const std::string file = name + ".json";
    write_json(dir_ / file, j);
    record(name, file, "json");
  }

  const DatasetManifest& finish() {
    write_json(dir_ / "manifest.json", m_.to_json());
    return m_;
  }

 private:
  void record(const std::string& name, const std::string& file, const std::string& format) {
    if (m_.payloads.count(name)) throw FormatError("dataset: duplicate payload '" + name + "'");
    const std::string bytes = read_file(dir_ / file);
    m_.payloads[name] = {file, format, sha256_hex(bytes), bytes.size()};
  }

  fs::path dir_;
  DatasetManifest m_;
};

class Dataset {
 public:
  // Loads the manifest, checks the schema version and verifies every payload checksum.
  explicit Dataset(fs::path dir) : dir_(std::move(dir)) {
    const fs::path mp = dir_ / "manifest.json";
    if (!fs::exists(mp)) throw FormatError(dir_.string() + ": no manifest.json");
    const json j = read_json(mp);
    try {
      m_.schema_version = j.at("schema_version").get<int>();
      if (m_.schema_version != kDatasetSchemaVersion)
        throw FormatError(mp.string() + ": schema_version " + std::to_string(m_.schema_version) +
                          " unsupported, expected " + std::to_string(kDatasetSchemaVersion));
      m_.kind = j.at("kind").get<std::string>();
      m_.seed = j.at("seed").get<std::uint64_t>();
      m_.config = j.value("config", json::object());
      m_.extra = j.value("extra", json::object());
      if (j.contains("ground_truth") && !j["ground_truth"].is_null()) m_.truth = ground_truth_from_json(j["ground_truth"]);
      for (const auto& [name, e] : j.at("payloads").items())
        m_.payloads[name] = {e.at("file").get<std::string>(), e.at("format").get<std::string>(),
                             e.at("sha256").get<std::string>(), e.at("bytes").get<std::uint64_t>()};
    } catch (const json::exception& e) {
      throw FormatError(mp.string() + ": " + e.what());
    }
    for (const auto& [name, e] : m_.payloads) {
      const std::string got = sha256_file(dir_ / e.file);
      if (got != e.sha256)
        throw FormatError(dir_.string() + ": payload '" + name + "' checksum mismatch, manifest " + e.sha256 +
                          ", file " + got);
    }
  }

  const DatasetManifest& manifest() const { return m_; }
  const fs::path& dir() const { return dir_; }

  void expect_kind(const std::string& kind) const {
    if (m_.kind != kind) throw FormatError(dir_.string() + ": dataset kind is '" + m_.kind + "', expected '" + kind + "'");
  }

  const PayloadEntry& entry(const std::string& name) const {
    auto it = m_.payloads.find(name);
    if (it == m_.payloads.end()) throw FormatError(dir_.string() + ": no payload '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return m_.payloads.count(name) > 0; }

  ImageStack stack(const std::string& name) const { return read_stack(dir_ / entry(name).file); }
  CsvTable csv(const std::string& name) const { return read_csv(dir_ / entry(name).file); }
  json json_payload(const std::string& name) const { return read_json(dir_ / entry(name).file); }

  // name -> sha256 for embedding in reports
  json checksums() const {
    json c = json::object();
    for (const auto& [name, e] : m_.payloads) c[name] = e.sha256;
    return c;
  }

 private:
  fs::path dir_;
  DatasetManifest m_;
};

// Hashes payloads exactly as DatasetWriter would write them, without touching
// disk. Used to give in-memory inputs the same checksums as their files.
class ChecksumSink {
 public:
  json& extra() { return extra_; }
  void add_stack(const std::string& name, const ImageStack& st) { c_[name] = sha256_hex(encode_stkc(st.frames)); }
  void add_frames(const std::string& name, const std::vector<Image>& frames) {
    c_[name] = sha256_hex(encode_stkc(frames));
  }
  void add_csv(const std::string& name, const CsvTable& t) { c_[name] = sha256_hex(to_csv(t)); }
  void add_json(const std::string& name, const json& j) { c_[name] = sha256_hex(j.dump(2) + "\n"); }
  const json& checksums() const { return c_; }

 private:
  json c_ = json::object();
  json extra_ = json::object();
};

// ---------------------------------------------------------------------------
// Kind-specific payload layouts

// Named run of consecutive fringes (one sweep), for plotting and bookkeeping.
struct FringeGroup {
  std::string name;
  std::size_t count = 0;
};

struct FringeData {
  FringeCampaign campaign;
  std::vector<FringeGroup> groups;  // partition of campaign.sweeps
};

template <class Sink>
void save_fringe_campaign(Sink& w, const FringeData& d) {
  w.add_csv("sweeps", fringe_table(d.campaign.sweeps));
  w.add_csv("leakage", fringe_table(d.campaign.leakage));
  json g = json::array();
  for (const auto& x : d.groups) g.push_back({{"name", x.name}, {"count", x.count}});
  w.extra()["groups"] = g;
}

inline FringeData load_fringe_campaign(const Dataset& d) {
  d.expect_kind("fringe_campaign");
  FringeData out;
  out.campaign = {fringes_from_table(d.csv("sweeps")), fringes_from_table(d.csv("leakage"))};
  std::size_t total = 0;
  for (const auto& g : d.manifest().extra.value("groups", json::array())) {
    out.groups.push_back({g.at("name").get<std::string>(), g.at("count").get<std::size_t>()});
    total += out.groups.back().count;
  }
  if (out.groups.empty()) out.groups.push_back({"all", out.campaign.sweeps.size()});
  else if (total != out.campaign.sweeps.size())
    throw FormatError(d.dir().string() + ": fringe groups do not partition the sweeps");
  return out;
}

inline json probe_to_json(const ProbeMeta& p) {
  return {{"n_adu", p.n_adu}, {"n_adu_exposure_s", p.n_adu_exposure_s}, {"delta_bar", p.delta_bar}, {"t_p_s", p.t_p}};
}

inline ProbeMeta probe_from_json(const json& j) {
  return {j.at("n_adu").get<double>(), j.at("n_adu_exposure_s").get<double>(), j.at("delta_bar").get<double>(),
          j.at("t_p_s").get<double>()};
}

// Shots for level l go to one stack, ordered [dphi][repeat].
template <class Sink>
void save_map_campaign(Sink& w, const MapCampaign& c) {
  json levels = json::array();
  for (std::size_t l = 0; l < c.shots.size(); ++l) {
    std::vector<Image> frames;
    for (const auto& reps : c.shots[l])
      for (const auto& img : reps) frames.push_back(img);
    const std::string name = "level_" + std::to_string(l);
    w.add_frames(name, frames);
    levels.push_back({{"payload", name}, {"probe", probe_to_json(c.probes[l])}});
  }
  if (!c.reference.empty()) w.add_frames("reference", c.reference);
  w.extra()["dphi_grid_rad"] = c.dphi_grid;
  w.extra()["levels"] = levels;
  w.extra()["shots_per_point"] = c.shots.empty() || c.shots[0].empty() ? 0 : c.shots[0][0].size();
}

inline MapCampaign load_map_campaign(const Dataset& d) {
  d.expect_kind("map_campaign");
  const auto& ex = d.manifest().extra;
  MapCampaign c;
  try {
    c.dphi_grid = ex.at("dphi_grid_rad").get<std::vector<double>>();
    const auto reps = ex.at("shots_per_point").get<std::size_t>();
    for (const auto& lv : ex.at("levels")) {
      c.probes.push_back(probe_from_json(lv.at("probe")));
      const auto frames = d.stack(lv.at("payload").get<std::string>()).frames;
      if (frames.size() != c.dphi_grid.size() * reps) throw FormatError("map campaign: level frame count mismatch");
      auto& level = c.shots.emplace_back();
      for (std::size_t p = 0; p < c.dphi_grid.size(); ++p)
        level.emplace_back(frames.begin() + static_cast<std::ptrdiff_t>(p * reps),
                           frames.begin() + static_cast<std::ptrdiff_t>((p + 1) * reps));
    }
  } catch (const json::exception& e) {
    throw FormatError(d.dir().string() + ": " + e.what());
  }
  if (d.has("reference")) c.reference = d.stack("reference").frames;
  return c;
}

// Probe image stacks at several mean levels, one STKC file (plus dark) per level.
struct SensorStacks {
  std::vector<double> levels_adu;  // nominal
  std::vector<ImageStack> stacks;
};

template <class Sink>
void save_sensor_stacks(Sink& w, const SensorStacks& s) {
  // darks travel in each stack's sidecar, which carries its own checksum
  for (std::size_t i = 0; i < s.stacks.size(); ++i) w.add_stack("level_" + std::to_string(i), s.stacks[i]);
  w.extra()["levels_adu"] = s.levels_adu;
}

inline SensorStacks load_sensor_stacks(const Dataset& d) {
  d.expect_kind("sensor_stacks");
  SensorStacks s;
  s.levels_adu = d.manifest().extra.at("levels_adu").get<std::vector<double>>();
  for (std::size_t i = 0; i < s.levels_adu.size(); ++i) s.stacks.push_back(d.stack("level_" + std::to_string(i)));
  return s;
}

// Gaussian beam exposures with their power-meter readings.
struct QeBeams {
  std::vector<double> powers_w;  // as read on the meter
  std::vector<Image> frames;
  double t_m_s = 0;
  double lambda_m = 0;
};

template <class Sink>
void save_qe_beams(Sink& w, const QeBeams& q) {
  w.add_frames("beams", q.frames);
  w.extra()["powers_w"] = q.powers_w;
  w.extra()["t_m_s"] = q.t_m_s;
  w.extra()["lambda_m"] = q.lambda_m;
}

inline QeBeams load_qe_beams(const Dataset& d) {
  d.expect_kind("qe_beams");
  QeBeams q;
  const auto& ex = d.manifest().extra;
  q.powers_w = ex.at("powers_w").get<std::vector<double>>();
  q.t_m_s = ex.at("t_m_s").get<double>();
  q.lambda_m = ex.at("lambda_m").get<double>();
  q.frames = d.stack("beams").frames;
  if (q.frames.size() != q.powers_w.size()) throw FormatError(d.dir().string() + ": beam count mismatch");
  return q;
}

// Traces go to one stack: frame k has two rows (t, v).
struct TraceRecord {
  Trace trace;
  double update_time = 0;
  double commanded_dphi = 0;
  double realized_dphi = 0;  // truth, when known
};

template <class Sink>
void save_traces(Sink& w, const std::vector<TraceRecord>& traces) {
  std::vector<Image> frames;
  json meta = json::array();
  for (const auto& r : traces) {
    Image f(2, static_cast<Eigen::Index>(r.trace.t.size()));
    for (std::size_t i = 0; i < r.trace.t.size(); ++i) {
      f(0, static_cast<Eigen::Index>(i)) = r.trace.t[i];
      f(1, static_cast<Eigen::Index>(i)) = r.trace.v[i];
    }
    frames.push_back(std::move(f));
    meta.push_back({{"f_nominal_hz", r.trace.f_nominal},
                    {"update_time_s", r.update_time},
                    {"commanded_dphi_rad", r.commanded_dphi},
                    {"realized_dphi_rad", r.realized_dphi}});
  }
  w.add_frames("traces", frames);
  w.add_json("trace_meta", meta);
}

inline std::vector<TraceRecord> load_traces(const Dataset& d) {
  d.expect_kind("rf_traces");
  const auto frames = d.stack("traces").frames;
  const json meta = d.json_payload("trace_meta");
  if (meta.size() != frames.size()) throw FormatError(d.dir().string() + ": trace metadata count mismatch");
  std::vector<TraceRecord> out;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    TraceRecord r;
    const auto& f = frames[k];
    if (f.rows() != 2) throw FormatError(d.dir().string() + ": trace frame must have 2 rows");
    for (Eigen::Index i = 0; i < f.cols(); ++i) {
      r.trace.t.push_back(f(0, i));
      r.trace.v.push_back(f(1, i));
    }
    r.trace.f_nominal = meta[k].at("f_nominal_hz").get<double>();
    r.update_time = meta[k].at("update_time_s").get<double>();
    r.commanded_dphi = meta[k].at("commanded_dphi_rad").get<double>();
    r.realized_dphi = meta[k].at("realized_dphi_rad").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ramseycal
