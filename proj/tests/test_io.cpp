#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dtomo/dtomo.hpp"

using namespace dtomo;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  REQUIRE(f.good());
  std::vector<char> bytes(static_cast<size_t>(f.tellg()));
  f.seekg(0);
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  return bytes;
}

int32_t header_i32(const std::vector<char>& bytes, size_t off) {
  int32_t v;
  std::memcpy(&v, bytes.data() + off, 4);
  return v;
}

float header_f32(const std::vector<char>& bytes, size_t off) {
  float v;
  std::memcpy(&v, bytes.data() + off, 4);
  return v;
}

// Values of the form k/256 are exactly representable in float32, so MRC
// round-trips of them are bit-exact even through the 32-bit payload.
Volume f32_exact_volume(int64_t n1, int64_t n2, int64_t n3) {
  Volume v(n1, n2, n3);
  for (size_t i = 0; i < v.data.size(); ++i)
    v.data[i] = static_cast<double>((static_cast<int64_t>(i) * 37 % 512) - 256) / 256.0;
  return v;
}

}  // namespace

// ------------------------------------ MRC -----------------------------------

TEST_CASE("MRC volume round-trip is exact for float32-representable data") {
  const std::string path = tmp_path("dtomo_vol.mrc");
  const Volume v = f32_exact_volume(6, 5, 4);
  write_mrc(path, v);
  const Volume r = read_mrc_volume(path);
  REQUIRE(r.n1 == v.n1);
  REQUIRE(r.n2 == v.n2);
  REQUIRE(r.n3 == v.n3);
  REQUIRE(r.data == v.data);
  std::filesystem::remove(path);
}

TEST_CASE("MRC header carries the 2014-dialect fields") {
  const std::string path = tmp_path("dtomo_hdr.mrc");
  const Volume v = f32_exact_volume(6, 5, 4);
  write_mrc(path, v);
  const std::vector<char> bytes = slurp(path);
  REQUIRE(bytes.size() == 1024 + 4u * 6 * 5 * 4);
  // Axis 3 is fastest in memory, so it maps to nx.
  REQUIRE(header_i32(bytes, 0) == 4);    // nx = n3
  REQUIRE(header_i32(bytes, 4) == 5);    // ny = n2
  REQUIRE(header_i32(bytes, 8) == 6);    // nz = n1
  REQUIRE(header_i32(bytes, 12) == 2);   // mode 2 float32
  REQUIRE(header_i32(bytes, 64) == 1);   // mapc
  REQUIRE(header_i32(bytes, 68) == 2);   // mapr
  REQUIRE(header_i32(bytes, 72) == 3);   // maps
  REQUIRE(header_i32(bytes, 88) == 1);   // ispg: volume
  REQUIRE(header_i32(bytes, 108) == 20140);
  REQUIRE(std::memcmp(bytes.data() + 208, "MAP ", 4) == 0);
  REQUIRE(bytes[212] == 0x44);  // little-endian machine stamp
  REQUIRE(bytes[213] == 0x44);
  double dmin = v.data[0], dmax = v.data[0], dsum = 0.0;
  for (double x : v.data) {
    dmin = std::min(dmin, x);
    dmax = std::max(dmax, x);
    dsum += x;
  }
  REQUIRE(header_f32(bytes, 76) == static_cast<float>(dmin));
  REQUIRE(header_f32(bytes, 80) == static_cast<float>(dmax));
  REQUIRE(header_f32(bytes, 84) ==
          static_cast<float>(dsum / static_cast<double>(v.data.size())));
  std::filesystem::remove(path);
}

TEST_CASE("MRC stack round-trip preserves shape and marks an image stack") {
  const std::string path = tmp_path("dtomo_stack.mrc");
  Stack s(3, 8);
  for (size_t i = 0; i < s.data.size(); ++i)
    s.data[i] = static_cast<double>(static_cast<int64_t>(i) % 128) / 128.0;
  write_mrc(path, s);
  const std::vector<char> bytes = slurp(path);
  REQUIRE(header_i32(bytes, 0) == 8);   // nx = N
  REQUIRE(header_i32(bytes, 4) == 8);   // ny = N
  REQUIRE(header_i32(bytes, 8) == 3);   // nz = M sections
  REQUIRE(header_i32(bytes, 88) == 0);  // ispg: image stack
  const Stack r = read_mrc_stack(path);
  REQUIRE(r.m == s.m);
  REQUIRE(r.n == s.n);
  REQUIRE(r.data == s.data);
  std::filesystem::remove(path);
}

TEST_CASE("MRC payload rounds doubles to nearest float32") {
  const std::string path = tmp_path("dtomo_round.mrc");
  Volume v(2, 2, 2);
  v.data[0] = 1.0 / 3.0;  // not float32-representable
  v.data[1] = 1e-300;     // underflows float32
  write_mrc(path, v);
  const Volume r = read_mrc_volume(path);
  REQUIRE(r.data[0] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
  REQUIRE(r.data[1] == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("MRC writer output is deterministic byte for byte") {
  const std::string p1 = tmp_path("dtomo_det1.mrc");
  const std::string p2 = tmp_path("dtomo_det2.mrc");
  const Volume v = f32_exact_volume(4, 4, 4);
  write_mrc(p1, v);
  write_mrc(p2, v);
  REQUIRE(slurp(p1) == slurp(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("MRC reader rejects malformed files with named reasons") {
  const std::string path = tmp_path("dtomo_bad.mrc");

  SECTION("unsupported sample mode") {
    const Volume v = f32_exact_volume(2, 2, 2);
    write_mrc(path, v);
    std::vector<char> bytes = slurp(path);
    const int32_t mode1 = 1;
    std::memcpy(bytes.data() + 12, &mode1, 4);
    std::ofstream(path, std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE_THROWS_WITH(read_mrc_volume(path),
                        Catch::Matchers::ContainsSubstring("mode 1"));
  }

  SECTION("missing MAP stamp") {
    std::vector<char> junk(2048, 0);
    std::ofstream(path, std::ios::binary)
        .write(junk.data(), static_cast<std::streamsize>(junk.size()));
    REQUIRE_THROWS_WITH(read_mrc_volume(path),
                        Catch::Matchers::ContainsSubstring("MAP"));
  }

  SECTION("header shorter than 1024 bytes") {
    std::ofstream(path, std::ios::binary).write("tiny", 4);
    REQUIRE_THROWS_WITH(read_mrc_volume(path),
                        Catch::Matchers::ContainsSubstring("1024"));
  }

  SECTION("payload shorter than the header promises") {
    const Volume v = f32_exact_volume(4, 4, 4);
    write_mrc(path, v);
    std::vector<char> bytes = slurp(path);
    bytes.resize(bytes.size() - 8);
    std::ofstream(path, std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE_THROWS_WITH(read_mrc_volume(path),
                        Catch::Matchers::ContainsSubstring("truncated"));
  }

  SECTION("nonexistent file") {
    REQUIRE_THROWS_AS(read_mrc_volume(tmp_path("dtomo_nope.mrc")), IoError);
  }

  std::filesystem::remove(path);
}

TEST_CASE("reading a non-square image as a stack fails") {
  const std::string path = tmp_path("dtomo_rect.mrc");
  write_mrc(path, f32_exact_volume(3, 5, 4));  // nx=4, ny=5
  REQUIRE_THROWS_WITH(read_mrc_stack(path),
                      Catch::Matchers::ContainsSubstring("not square"));
  std::filesystem::remove(path);
}

// ------------------------------ deformation CSV ------------------------------

TEST_CASE("deformation CSV round-trips doubles exactly") {
  const std::string path = tmp_path("dtomo_phi.csv");
  TiltAngles angles({-60.5, 0.0, 33.333333333333336});
  std::vector<DeformationParams> phis(3);
  phis[0] = {1.0 / 3.0, -2.7182818284590452, 0.049999999999999996, -4.9};
  phis[1] = {0.0, 0.0, 0.0, 0.0};
  phis[2] = {1e-17, -1e+17, 0.1, 179.99999999999997};
  write_deformations(path, phis, angles);
  const auto [rphis, rangles] = read_deformations(path);
  REQUIRE(rphis.size() == 3);
  REQUIRE(rangles.count() == 3);
  for (size_t i = 0; i < 3; ++i) {
    REQUIRE(rangles.deg[i] == angles.deg[i]);
    REQUIRE(rphis[i].shift1_px == phis[i].shift1_px);
    REQUIRE(rphis[i].shift2_px == phis[i].shift2_px);
    REQUIRE(rphis[i].shear == phis[i].shear);
    REQUIRE(rphis[i].rot_deg == phis[i].rot_deg);
  }
  std::filesystem::remove(path);
}

TEST_CASE("deformation CSV writer emits the documented header and row count") {
  const std::string path = tmp_path("dtomo_phi_hdr.csv");
  write_deformations(path, std::vector<DeformationParams>(2), TiltAngles({-10.0, 10.0}));
  std::ifstream f(path);
  std::string line;
  REQUIRE(std::getline(f, line));
  REQUIRE(line == std::string(kDeformationCsvHeader));
  size_t rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  REQUIRE(rows == 2);
  std::filesystem::remove(path);
}

TEST_CASE("deformation CSV reader names the offending line") {
  const std::string path = tmp_path("dtomo_phi_bad.csv");

  SECTION("wrong column count") {
    std::ofstream f(path);
    f << kDeformationCsvHeader << "\n";
    f << "0,-60,1.5,0.5,0.01,2\n";
    f << "1,-30,1.5,0.5,0.01\n";  // five columns
    f.close();
    REQUIRE_THROWS_WITH(read_deformations(path),
                        Catch::Matchers::ContainsSubstring("line 3") &&
                            Catch::Matchers::ContainsSubstring("5"));
  }

  SECTION("non-numeric cell") {
    std::ofstream f(path);
    f << kDeformationCsvHeader << "\n";
    f << "0,-60,abc,0.5,0.01,2\n";
    f.close();
    REQUIRE_THROWS_WITH(read_deformations(path),
                        Catch::Matchers::ContainsSubstring("abc") &&
                            Catch::Matchers::ContainsSubstring("line 2"));
  }

  SECTION("wrong header") {
    std::ofstream f(path);
    f << "a,b,c\n";
    f.close();
    REQUIRE_THROWS_WITH(read_deformations(path),
                        Catch::Matchers::ContainsSubstring("header"));
  }

  SECTION("length mismatch on write") {
    REQUIRE_THROWS_AS(
        write_deformations(path, std::vector<DeformationParams>(2), TiltAngles({-10.0})),
        ShapeError);
  }

  std::filesystem::remove(path);
}

TEST_CASE("deformation CSV tolerates CRLF line endings and blank lines") {
  const std::string path = tmp_path("dtomo_phi_crlf.csv");
  std::ofstream f(path, std::ios::binary);
  f << kDeformationCsvHeader << "\r\n";
  f << "0,-60,1.5,-0.5,0.01,2\r\n";
  f << "\r\n";
  f << "1,60,0,0,0,0\r\n";
  f.close();
  const auto [phis, angles] = read_deformations(path);
  REQUIRE(phis.size() == 2);
  REQUIRE(angles.deg[0] == -60.0);
  REQUIRE(phis[0].shift1_px == 1.5);
  REQUIRE(phis[0].shift2_px == -0.5);
  std::filesystem::remove(path);
}

// --------------------------------- FSC CSV -----------------------------------

TEST_CASE("FSC CSV round-trips a measured curve exactly") {
  const std::string path = tmp_path("dtomo_fsc.csv");
  Volume a(8, 8, 8), b(8, 8, 8);
  Rng rng(21);
  for (double& x : a.data) x = rng.normal();
  for (size_t i = 0; i < b.data.size(); ++i) b.data[i] = a.data[i] + 0.3 * rng.normal();
  const FscCurve c = fsc(a, b, 4);
  write_fsc_csv(path, c);
  const FscCurve r = read_fsc_csv(path);
  REQUIRE(r.freq == c.freq);
  REQUIRE(r.value == c.value);
  std::filesystem::remove(path);
}

TEST_CASE("FSC CSV reader rejects rows with the wrong shape") {
  const std::string path = tmp_path("dtomo_fsc_bad.csv");
  std::ofstream f(path);
  f << "0.125,0.9\n0.375,0.7,extra\n";
  f.close();
  REQUIRE_THROWS_WITH(read_fsc_csv(path),
                      Catch::Matchers::ContainsSubstring("line 2"));
  std::filesystem::remove(path);
}

// -------------------------------- history CSV --------------------------------

TEST_CASE("history CSV lists one labelled row per iteration") {
  const std::string path = tmp_path("dtomo_hist.csv");
  const std::vector<double> d = {10.0, 5.0, 2.5};
  const std::vector<double> o = {1.0, 0.5, 0.25};
  const std::vector<double> g = {0.1, 0.1, 0.1};
  const std::vector<double> t = {11.1, 5.6, 2.85};
  write_history_csv(path, d, o, g, t);
  std::ifstream f(path);
  std::string line;
  REQUIRE(std::getline(f, line));
  REQUIRE(line == "iteration,L_data,L_op,L_reg,total");
  REQUIRE(std::getline(f, line));
  REQUIRE(line == "0,10,1,0.10000000000000001,11.1");
  size_t rows = 1;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  REQUIRE(rows == 3);
  std::filesystem::remove(path);
}

// -------------------------------- run manifest -------------------------------

TEST_CASE("run manifest preserves order, updates in place, and round-trips") {
  const std::string path = tmp_path("dtomo_manifest.txt");
  RunManifest m;
  m.set("command", std::string("simulate"));
  m.set("seed", static_cast<uint64_t>(42));
  m.set("snr_db", 10.5);
  m.set("seed", static_cast<uint64_t>(43));  // update must not duplicate the key
  REQUIRE(m.entries.size() == 3);
  REQUIRE(m.entries[1].first == "seed");
  m.write(path);
  const RunManifest r = RunManifest::read(path);
  REQUIRE(r.entries == m.entries);
  REQUIRE(r.get("command").value() == "simulate");
  REQUIRE(r.get("seed").value() == "43");
  REQUIRE(std::stod(r.get("snr_db").value()) == 10.5);
  REQUIRE_FALSE(r.get("absent").has_value());
  std::filesystem::remove(path);
}

TEST_CASE("run manifest reader rejects lines without a separator") {
  const std::string path = tmp_path("dtomo_manifest_bad.txt");
  std::ofstream f(path);
  f << "key=value\nnot a pair\n";
  f.close();
  REQUIRE_THROWS_WITH(RunManifest::read(path),
                      Catch::Matchers::ContainsSubstring("line 2"));
  std::filesystem::remove(path);
}

// ------------------------------ weight checkpoint -----------------------------

TEST_CASE("weight checkpoint round-trips bit-exactly with its sidecar") {
  const std::string path = tmp_path("dtomo_weights.bin");
  FieldConfig fc;
  fc.width = 24;
  fc.hidden_layers = 2;
  fc.frequencies = 4;
  const FieldWeights fw = field_init(fc, 99);
  write_weights(path, fw);
  const FieldWeights r = read_weights(path);
  REQUIRE(r.config.width == fc.width);
  REQUIRE(r.config.hidden_layers == fc.hidden_layers);
  REQUIRE(r.config.frequencies == fc.frequencies);
  REQUIRE(r.config.activation == fc.activation);
  REQUIRE(r.w.size() == fw.w.size());
  for (size_t i = 0; i < fw.w.size(); ++i) {
    REQUIRE(r.w[i].shape == fw.w[i].shape);
    REQUIRE(r.w[i].data == fw.w[i].data);
    REQUIRE(r.b[i].data == fw.b[i].data);
  }
  // The restored field evaluates identically.
  Tensor coords = Tensor::zeros({5, 3});
  for (int64_t i = 0; i < 15; ++i) coords[i] = 0.05 * static_cast<double>(i) - 0.2;
  REQUIRE(field_eval(fw, coords).data == field_eval(r, coords).data);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".cfg");
}

TEST_CASE("weight checkpoint detects sidecar drift and truncation") {
  const std::string path = tmp_path("dtomo_weights_bad.bin");
  FieldConfig fc;
  fc.width = 16;
  fc.hidden_layers = 1;
  fc.frequencies = 3;
  const FieldWeights fw = field_init(fc, 7);
  write_weights(path, fw);

  SECTION("sidecar width no longer matches the binary") {
    RunManifest cfg = RunManifest::read(path + ".cfg");
    cfg.set("frequencies", static_cast<int64_t>(5));
    cfg.write(path + ".cfg");
    REQUIRE_THROWS_WITH(read_weights(path),
                        Catch::Matchers::ContainsSubstring("sidecar"));
  }

  SECTION("binary truncated mid-tensor") {
    std::vector<char> bytes = slurp(path);
    bytes.resize(bytes.size() - 16);
    std::ofstream(path, std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE_THROWS_WITH(read_weights(path),
                        Catch::Matchers::ContainsSubstring("truncated"));
  }

  SECTION("missing sidecar") {
    std::filesystem::remove(path + ".cfg");
    REQUIRE_THROWS_AS(read_weights(path), IoError);
  }

  std::filesystem::remove(path);
  std::filesystem::remove(path + ".cfg");
}

TEST_CASE("weight checkpoint writer is deterministic") {
  const std::string p1 = tmp_path("dtomo_w1.bin");
  const std::string p2 = tmp_path("dtomo_w2.bin");
  FieldConfig fc;
  fc.width = 16;
  fc.hidden_layers = 1;
  const FieldWeights fw = field_init(fc, 3);
  write_weights(p1, fw);
  write_weights(p2, fw);
  REQUIRE(slurp(p1) == slurp(p2));
  REQUIRE(slurp(p1 + ".cfg") == slurp(p2 + ".cfg"));
  for (const auto& p : {p1, p2}) {
    std::filesystem::remove(p);
    std::filesystem::remove(p + ".cfg");
  }
}
