#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dtomo/field.hpp"
#include "dtomo/geometry.hpp"
#include "dtomo/metrics.hpp"

namespace dtomo {

// ---------------------------------------------------------------------------
// Serialization. All writers are deterministic byte-for-byte (no timestamps,
// fixed formatting); all numeric text uses %.17g so doubles round-trip
// exactly. MRC is the 2014 dialect, mode 2 (32-bit float), little-endian,
// which is what CryoET viewers expect. This code assumes a little-endian
// host.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void put_i32(std::vector<char>& h, size_t off, int32_t v) {
  std::memcpy(h.data() + off, &v, 4);
}
inline void put_f32(std::vector<char>& h, size_t off, float v) {
  std::memcpy(h.data() + off, &v, 4);
}
inline int32_t get_i32(const std::vector<char>& h, size_t off) {
  int32_t v;
  std::memcpy(&v, h.data() + off, 4);
  return v;
}

inline void write_mrc_raw(const std::string& path, int64_t nx, int64_t ny, int64_t nz,
                          const std::vector<double>& data, bool is_volume) {
  std::vector<char> header(1024, 0);
  put_i32(header, 0, static_cast<int32_t>(nx));
  put_i32(header, 4, static_cast<int32_t>(ny));
  put_i32(header, 8, static_cast<int32_t>(nz));
  put_i32(header, 12, 2);  // mode 2: float32
  // nxstart/nystart/nzstart stay 0
  put_i32(header, 28, static_cast<int32_t>(nx));  // mx
  put_i32(header, 32, static_cast<int32_t>(ny));  // my
  put_i32(header, 36, static_cast<int32_t>(nz));  // mz
  put_f32(header, 40, static_cast<float>(nx));    // cella, 1 angstrom per sample
  put_f32(header, 44, static_cast<float>(ny));
  put_f32(header, 48, static_cast<float>(nz));
  put_f32(header, 52, 90.0f);  // cellb
  put_f32(header, 56, 90.0f);
  put_f32(header, 60, 90.0f);
  put_i32(header, 64, 1);  // mapc
  put_i32(header, 68, 2);  // mapr
  put_i32(header, 72, 3);  // maps
  double dmin = data.empty() ? 0.0 : data[0], dmax = dmin, dsum = 0.0;
  for (double v : data) {
    dmin = std::min(dmin, v);
    dmax = std::max(dmax, v);
    dsum += v;
  }
  const double dmean = data.empty() ? 0.0 : dsum / static_cast<double>(data.size());
  put_f32(header, 76, static_cast<float>(dmin));
  put_f32(header, 80, static_cast<float>(dmax));
  put_f32(header, 84, static_cast<float>(dmean));
  put_i32(header, 88, is_volume ? 1 : 0);  // ispg: 0 = image stack, 1 = volume
  put_i32(header, 92, 0);                  // nsymbt
  put_i32(header, 108, 20140);             // nversion
  std::memcpy(header.data() + 208, "MAP ", 4);
  header[212] = 0x44;  // little-endian machine stamp
  header[213] = 0x44;
  double rss = 0.0;
  for (double v : data) rss += (v - dmean) * (v - dmean);
  const double rms = data.empty() ? 0.0 : std::sqrt(rss / static_cast<double>(data.size()));
  put_f32(header, 216, static_cast<float>(rms));
  put_i32(header, 220, 0);  // nlabl

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<float> f32(data.size());
  for (size_t i = 0; i < data.size(); ++i) f32[i] = static_cast<float>(data[i]);
  f.write(reinterpret_cast<const char*>(f32.data()),
          static_cast<std::streamsize>(f32.size() * 4));
  if (!f) throw IoError("write failed for '" + path + "'");
}

struct MrcRaw {
  int64_t nx, ny, nz;
  std::vector<double> data;  // nx fastest
};

inline MrcRaw read_mrc_raw(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  const std::streamsize size = f.tellg();
  f.seekg(0);
  if (size < 1024) throw IoError("malformed header in '" + path + "': shorter than 1024 bytes");
  std::vector<char> header(1024);
  f.read(header.data(), 1024);
  if (std::memcmp(header.data() + 208, "MAP ", 4) != 0)
    throw IoError("malformed header in '" + path + "': missing MAP stamp");
  const int64_t nx = get_i32(header, 0);
  const int64_t ny = get_i32(header, 4);
  const int64_t nz = get_i32(header, 8);
  const int32_t mode = get_i32(header, 12);
  const int32_t nsymbt = get_i32(header, 92);
  if (nx <= 0 || ny <= 0 || nz <= 0 || nsymbt < 0)
    throw IoError("malformed header in '" + path + "': bad dimensions");
  if (mode != 2)
    throw IoError("unsupported mode " + std::to_string(mode) + " in '" + path +
                  "' (only mode 2 float32)");
  const int64_t need = 1024 + nsymbt + 4 * nx * ny * nz;
  if (size < need)
    throw IoError("truncated file '" + path + "': have " + std::to_string(size) +
                  " bytes, need " + std::to_string(need));
  f.seekg(1024 + nsymbt);
  std::vector<float> f32(static_cast<size_t>(nx * ny * nz));
  f.read(reinterpret_cast<char*>(f32.data()), static_cast<std::streamsize>(f32.size() * 4));
  if (!f) throw IoError("read failed for '" + path + "'");
  MrcRaw raw{nx, ny, nz, {}};
  raw.data.assign(f32.begin(), f32.end());
  return raw;
}

}  // namespace detail

// ---------------------------------- MRC ------------------------------------

/// Volume (n1,n2,n3) is stored with nx = n3, ny = n2, nz = n1, matching the
/// in-memory axis-3-fastest layout byte for byte.
inline void write_mrc(const std::string& path, const Volume& v) {
  detail::write_mrc_raw(path, v.n3, v.n2, v.n1, v.data, true);
}

/// Stacks are stored one tilt per section: nx = ny = N, nz = M.
inline void write_mrc(const std::string& path, const Stack& s) {
  detail::write_mrc_raw(path, s.n, s.n, s.m, s.data, false);
}

inline Volume read_mrc_volume(const std::string& path) {
  detail::MrcRaw raw = detail::read_mrc_raw(path);
  Volume v(raw.nz, raw.ny, raw.nx);
  v.data = std::move(raw.data);
  return v;
}

inline Stack read_mrc_stack(const std::string& path) {
  detail::MrcRaw raw = detail::read_mrc_raw(path);
  if (raw.nx != raw.ny)
    throw IoError("stack in '" + path + "' is not square: nx=" + std::to_string(raw.nx) +
                  " ny=" + std::to_string(raw.ny));
  Stack s(raw.nz, raw.nx);
  s.data = std::move(raw.data);
  return s;
}

// ------------------------------ deformation CSV -----------------------------

inline const char* kDeformationCsvHeader = "m,theta_deg,shift_x_px,shift_y_px,shear,rot_deg";

inline void write_deformations(const std::string& path,
                               const std::vector<DeformationParams>& phis,
                               const TiltAngles& angles) {
  if (static_cast<int64_t>(phis.size()) != angles.count())
    throw ShapeError("write_deformations: list/angle length mismatch");
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << kDeformationCsvHeader << "\n";
  for (size_t m = 0; m < phis.size(); ++m) {
    f << m << ',' << detail::fmt_g17(angles.deg[m]) << ','
      << detail::fmt_g17(phis[m].shift1_px) << ',' << detail::fmt_g17(phis[m].shift2_px)
      << ',' << detail::fmt_g17(phis[m].shear) << ',' << detail::fmt_g17(phis[m].rot_deg)
      << "\n";
  }
  if (!f) throw IoError("write failed for '" + path + "'");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_number(const std::string& s, const std::string& path, size_t line_no) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw IoError("non-numeric cell '" + s + "' in '" + path + "' line " +
                  std::to_string(line_no));
  return v;
}

}  // namespace detail

inline std::pair<std::vector<DeformationParams>, TiltAngles> read_deformations(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty deformation file '" + path + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kDeformationCsvHeader)
    throw IoError("unexpected header in '" + path + "': " + line);
  std::vector<DeformationParams> phis;
  std::vector<double> angles;
  size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 6)
      throw IoError("expected 6 columns, got " + std::to_string(cells.size()) + " in '" +
                    path + "' line " + std::to_string(line_no));
    angles.push_back(detail::parse_number(cells[1], path, line_no));
    DeformationParams p;
    p.shift1_px = detail::parse_number(cells[2], path, line_no);
    p.shift2_px = detail::parse_number(cells[3], path, line_no);
    p.shear = detail::parse_number(cells[4], path, line_no);
    p.rot_deg = detail::parse_number(cells[5], path, line_no);
    phis.push_back(p);
  }
  return {std::move(phis), TiltAngles(std::move(angles))};
}

// --------------------------------- FSC CSV ----------------------------------

/// Headerless two-column (frequency, correlation) rows, one per shell.
inline void write_fsc_csv(const std::string& path, const FscCurve& curve) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  for (size_t i = 0; i < curve.freq.size(); ++i)
    f << detail::fmt_g17(curve.freq[i]) << ',' << detail::fmt_g17(curve.value[i]) << "\n";
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline FscCurve read_fsc_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  FscCurve curve;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 2)
      throw IoError("expected 2 columns in '" + path + "' line " + std::to_string(line_no));
    curve.freq.push_back(detail::parse_number(cells[0], path, line_no));
    curve.value.push_back(detail::parse_number(cells[1], path, line_no));
    curve.empty_shell.push_back(false);
  }
  return curve;
}

// -------------------------------- history CSV --------------------------------

inline void write_history_csv(const std::string& path,
                              const std::vector<double>& data_terms,
                              const std::vector<double>& op_terms,
                              const std::vector<double>& reg_terms,
                              const std::vector<double>& totals) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "iteration,L_data,L_op,L_reg,total\n";
  for (size_t i = 0; i < totals.size(); ++i)
    f << i << ',' << detail::fmt_g17(data_terms[i]) << ',' << detail::fmt_g17(op_terms[i])
      << ',' << detail::fmt_g17(reg_terms[i]) << ',' << detail::fmt_g17(totals[i]) << "\n";
  if (!f) throw IoError("write failed for '" + path + "'");
}

// -------------------------------- run manifest -------------------------------

/// Ordered key=value text file; writing is deterministic, and re-running a
/// command from a manifest reproduces its outputs bit-exactly (no wall-clock
/// content).
struct RunManifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries)
      if (k == key) {
        v = value;
        return;
      }
    entries.emplace_back(key, value);
  }
  void set(const std::string& key, double value) { set(key, detail::fmt_g17(value)); }
  void set(const std::string& key, int64_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, uint64_t value) { set(key, std::to_string(value)); }

  std::optional<std::string> get(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return v;
    return std::nullopt;
  }

  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& [k, v] : entries) f << k << '=' << v << "\n";
    if (!f) throw IoError("write failed for '" + path + "'");
  }

  static RunManifest read(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    RunManifest m;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw IoError("missing '=' in '" + path + "' line " + std::to_string(line_no));
      m.entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return m;
  }
};

// ------------------------------ weight checkpoint ----------------------------

/// Flat binary: u64 layer count, then (u64 fan_in, u64 fan_out) per layer,
/// then per layer the weight matrix (row-major) and bias as f64. A text
/// sidecar at path + ".cfg" carries the architecture.
inline void write_weights(const std::string& path, const FieldWeights& fw) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const uint64_t layers = fw.w.size();
  f.write(reinterpret_cast<const char*>(&layers), 8);
  for (const auto& w : fw.w) {
    const uint64_t fan_in = static_cast<uint64_t>(w.shape[0]);
    const uint64_t fan_out = static_cast<uint64_t>(w.shape[1]);
    f.write(reinterpret_cast<const char*>(&fan_in), 8);
    f.write(reinterpret_cast<const char*>(&fan_out), 8);
  }
  for (size_t i = 0; i < fw.w.size(); ++i) {
    f.write(reinterpret_cast<const char*>(fw.w[i].data.data()),
            static_cast<std::streamsize>(fw.w[i].data.size() * 8));
    f.write(reinterpret_cast<const char*>(fw.b[i].data.data()),
            static_cast<std::streamsize>(fw.b[i].data.size() * 8));
  }
  if (!f) throw IoError("write failed for '" + path + "'");

  RunManifest cfg;
  cfg.set("frequencies", static_cast<int64_t>(fw.config.frequencies));
  cfg.set("hidden_layers", static_cast<int64_t>(fw.config.hidden_layers));
  cfg.set("width", static_cast<int64_t>(fw.config.width));
  cfg.set("activation", std::string(activation_to_string(fw.config.activation)));
  cfg.write(path + ".cfg");
}

inline FieldWeights read_weights(const std::string& path) {
  const RunManifest cfg = RunManifest::read(path + ".cfg");
  FieldConfig fc;
  fc.frequencies = std::stoll(cfg.get("frequencies").value_or("0"));
  fc.hidden_layers = std::stoll(cfg.get("hidden_layers").value_or("0"));
  fc.width = std::stoll(cfg.get("width").value_or("0"));
  fc.activation = activation_from_string(cfg.get("activation").value_or(""));
  fc.validate();

  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  uint64_t layers = 0;
  f.read(reinterpret_cast<char*>(&layers), 8);
  if (!f || layers == 0 || layers > 64) throw IoError("malformed weight file '" + path + "'");
  std::vector<std::pair<uint64_t, uint64_t>> dims(layers);
  for (auto& [in, out] : dims) {
    f.read(reinterpret_cast<char*>(&in), 8);
    f.read(reinterpret_cast<char*>(&out), 8);
  }
  if (static_cast<int64_t>(layers) != fc.hidden_layers + 1 ||
      static_cast<int64_t>(dims[0].first) != fc.encoding_width() ||
      dims.back().second != 1)
    throw IoError("weight file '" + path + "' does not match its sidecar config");
  FieldWeights fw;
  fw.config = fc;
  for (const auto& [in, out] : dims) {
    Tensor w = Tensor::zeros({static_cast<int64_t>(in), static_cast<int64_t>(out)});
    Tensor b = Tensor::zeros({1, static_cast<int64_t>(out)});
    f.read(reinterpret_cast<char*>(w.data.data()),
           static_cast<std::streamsize>(w.data.size() * 8));
    f.read(reinterpret_cast<char*>(b.data.data()),
           static_cast<std::streamsize>(b.data.size() * 8));
    if (!f) throw IoError("truncated weight file '" + path + "'");
    fw.w.push_back(std::move(w));
    fw.b.push_back(std::move(b));
  }
  return fw;
}

}  // namespace dtomo
