#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "dtomo/common.hpp"

namespace dtomo {

// ---------------------------------------------------------------------------
// Single-axis tomography forward model: tilt rotation about axis 1, beam
// integration along axis 3 at zero tilt, per-projection affine deformation
// on the sensor plane, Gaussian noise at a prescribed SNR.
//
// Conventions, fixed here and relied on everywhere:
//   * The volume lives on the cube [-1,1]^3 with uniform voxel size
//     h = 2/max(n_i); voxel (i1,i2,i3) is centered at
//     x_a = (i_a + 0.5 - n_a/2) * h.
//   * The sensor is an N x N grid over [-1,1]^2 with N = max(n_i); image
//     row i <-> x1 (the tilt axis), column j <-> x2. Pixel centers follow
//     the same (i + 0.5 - N/2)*h rule, so at zero tilt sensor pixels and
//     voxel columns coincide.
//   * A projection at angle theta samples the volume at
//     p = (x1, c*x2 + s*t, -s*x2 + c*t), c = cos(theta), s = sin(theta),
//     for equispaced ray parameters t (step = one voxel), trilinear
//     interpolation, zero outside the cube, result scaled by the step.
// ---------------------------------------------------------------------------

struct Volume {
  int64_t n1 = 0, n2 = 0, n3 = 0;
  std::vector<double> data;  // row-major, axis 3 fastest

  Volume() = default;
  Volume(int64_t a, int64_t b, int64_t c)
      : n1(a), n2(b), n3(c), data(static_cast<size_t>(a * b * c), 0.0) {
    if (a < 2 || b < 2 || c < 2) throw ShapeError("Volume: each dimension must be >= 2");
  }

  int64_t numel() const { return n1 * n2 * n3; }
  double& at(int64_t i1, int64_t i2, int64_t i3) {
    return data[static_cast<size_t>((i1 * n2 + i2) * n3 + i3)];
  }
  double at(int64_t i1, int64_t i2, int64_t i3) const {
    return data[static_cast<size_t>((i1 * n2 + i2) * n3 + i3)];
  }
  int64_t max_dim() const { return std::max(n1, std::max(n2, n3)); }
  double voxel_size() const { return 2.0 / static_cast<double>(max_dim()); }
};

struct TiltAngles {
  std::vector<double> deg;

  TiltAngles() = default;
  explicit TiltAngles(std::vector<double> d) : deg(std::move(d)) {
    if (deg.empty()) throw ValueError("TiltAngles: need at least one angle");
    for (size_t i = 0; i < deg.size(); ++i) {
      if (deg[i] < -90.0 || deg[i] > 90.0)
        throw ValueError("TiltAngles: angle out of [-90, 90]");
      if (i > 0 && deg[i] <= deg[i - 1])
        throw ValueError("TiltAngles: angles must be strictly increasing");
    }
  }

  /// M angles uniformly covering [lo, hi] inclusive.
  static TiltAngles uniform(int64_t m, double lo_deg, double hi_deg) {
    if (m < 1) throw ValueError("TiltAngles: M must be >= 1");
    std::vector<double> d(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i)
      d[static_cast<size_t>(i)] =
          m == 1 ? 0.5 * (lo_deg + hi_deg)
                 : lo_deg + (hi_deg - lo_deg) * static_cast<double>(i) / static_cast<double>(m - 1);
    return TiltAngles(std::move(d));
  }

  int64_t count() const { return static_cast<int64_t>(deg.size()); }
};

/// Per-projection affine deformation. Shifts are in sensor pixels, shear is
/// the dimensionless off-diagonal entry (reported as percent elsewhere),
/// rotation in degrees.
struct DeformationParams {
  double shift1_px = 0.0;  // along the tilt axis (image rows)
  double shift2_px = 0.0;  // along the filter direction (image columns)
  double shear = 0.0;
  double rot_deg = 0.0;

  void validate() const {
    if (std::fabs(shear) > 0.5) throw ValueError("DeformationParams: |shear| > 0.5");
    if (std::fabs(rot_deg) > 45.0) throw ValueError("DeformationParams: |rotation| > 45 deg");
  }
};

struct Stack {
  int64_t m = 0, n = 0;
  std::vector<double> data;  // [tilt][row][col], row-major

  Stack() = default;
  Stack(int64_t tilts, int64_t size)
      : m(tilts), n(size), data(static_cast<size_t>(tilts * size * size), 0.0) {}

  int64_t numel() const { return m * n * n; }
  double& at(int64_t t, int64_t i, int64_t j) {
    return data[static_cast<size_t>((t * n + i) * n + j)];
  }
  double at(int64_t t, int64_t i, int64_t j) const {
    return data[static_cast<size_t>((t * n + i) * n + j)];
  }
  double* image(int64_t t) { return data.data() + t * n * n; }
  const double* image(int64_t t) const { return data.data() + t * n * n; }
};

struct TiltSeries {
  Stack stack;
  TiltAngles angles;
  std::optional<std::vector<DeformationParams>> truth;
  uint64_t noise_seed = 0;
  double snr_db = std::numeric_limits<double>::infinity();
};

// ------------------------- affine sensor transform -------------------------

/// T(x) = Rot(alpha) * Shear(k) * x + s_norm on [-1,1]^2, with
/// Shear(k) = [[1,k],[0,1]] and s_norm = 2*s_px/N.
inline std::array<double, 2> transform_point(const DeformationParams& phi,
                                             std::array<double, 2> x, int64_t n) {
  const double x1s = x[0] + phi.shear * x[1];
  const double a = deg2rad(phi.rot_deg);
  const double c = std::cos(a), s = std::sin(a);
  const double scale = 2.0 / static_cast<double>(n);
  return {c * x1s - s * x[1] + scale * phi.shift1_px,
          s * x1s + c * x[1] + scale * phi.shift2_px};
}

// ------------------------------- projector --------------------------------

/// Precomputed sampling plan for one volume/angle-set pairing. The in-plane
/// part of every ray sample is independent of the slice index along the tilt
/// axis, so each angle stores one sparse (sensor column, slice offset,
/// weight) list reused across slices. forward() and the two backprojections
/// in the fbp layer are exact transposes of each other by construction.
class Projector {
 public:
  struct Entry {
    int32_t col;   // sensor column j
    int32_t src;   // offset into an (n2 x n3) slice
    double w;      // trilinear weight (in-plane bilinear part)
  };

  Projector(int64_t n1, int64_t n2, int64_t n3, TiltAngles angles)
      : n1_(n1), n2_(n2), n3_(n3), angles_(std::move(angles)) {
    ns_ = std::max(n1, std::max(n2, n3));
    h_ = 2.0 / static_cast<double>(ns_);
    // Ray samples t_k = (k + 0.5 - K/2) * h must cover the rotated in-plane
    // extent (<= sqrt(2)) and keep K = n3 (mod 2) so zero tilt lands exactly
    // on voxel centers.
    k_ = static_cast<int64_t>(std::ceil(1.5 * static_cast<double>(std::max(n2, n3))));
    if (((k_ - n3) & 1) != 0) ++k_;
    plans_.resize(angles_.deg.size());
    for (size_t mi = 0; mi < angles_.deg.size(); ++mi) build_plan(mi);

    // Sensor row i reads volume slice f1 = i + (n1 - ns)/2 (the axis-1
    // fractional index is angle-independent because rotation fixes axis 1).
    const double off = static_cast<double>(n1 - ns_) / 2.0;
    rows_.resize(static_cast<size_t>(ns_));
    for (int64_t i = 0; i < ns_; ++i) {
      const double f1 = static_cast<double>(i) + off;
      const int64_t i0 = static_cast<int64_t>(std::floor(f1));
      const double w1 = f1 - static_cast<double>(i0);
      auto& r = rows_[static_cast<size_t>(i)];
      r = {-1, -1, 0.0, 0.0};
      if (i0 >= 0 && i0 < n1) { r.ia = i0; r.wa = 1.0 - w1; }
      if (w1 != 0.0 && i0 + 1 >= 0 && i0 + 1 < n1) { r.ib = i0 + 1; r.wb = w1; }
    }
  }

  int64_t sensor_size() const { return ns_; }
  int64_t tilt_count() const { return angles_.count(); }
  const TiltAngles& angles() const { return angles_; }
  double step() const { return h_; }

  /// stack = h * S v  (projection scaled by the ray step).
  Stack forward(const Volume& v) const {
    check_volume(v);
    Stack out(angles_.count(), ns_);
    const int64_t rows_total = angles_.count() * ns_;
    parallel_for(rows_total, [&](int64_t ri) {
      const int64_t mi = ri / ns_;
      const int64_t i = ri % ns_;
      const auto& rw = rows_[static_cast<size_t>(i)];
      double* dst = out.image(mi) + i * ns_;
      if (rw.ia >= 0) project_row(v.data.data() + rw.ia * n2_ * n3_, plans_[static_cast<size_t>(mi)], rw.wa, dst);
      if (rw.ib >= 0) project_row(v.data.data() + rw.ib * n2_ * n3_, plans_[static_cast<size_t>(mi)], rw.wb, dst);
      for (int64_t j = 0; j < ns_; ++j) dst[j] *= h_;
    });
    return out;
  }

  /// v = scale * S^T stack, the exact transpose of forward up to `scale`.
  Volume transpose_apply(const Stack& s, double scale) const {
    if (s.m != angles_.count() || s.n != ns_)
      throw ShapeError("Projector: stack shape does not match plan");
    Volume v(n1_, n2_, n3_);
    // Which sensor rows touch a given volume slice (at most two per row).
    std::vector<std::vector<std::pair<int32_t, double>>> feed(static_cast<size_t>(n1_));
    for (int64_t i = 0; i < ns_; ++i) {
      const auto& rw = rows_[static_cast<size_t>(i)];
      if (rw.ia >= 0) feed[static_cast<size_t>(rw.ia)].push_back({static_cast<int32_t>(i), rw.wa});
      if (rw.ib >= 0) feed[static_cast<size_t>(rw.ib)].push_back({static_cast<int32_t>(i), rw.wb});
    }
    parallel_for(n1_, [&](int64_t i1) {
      double* slice = v.data.data() + i1 * n2_ * n3_;
      for (int64_t mi = 0; mi < angles_.count(); ++mi) {
        const auto& plan = plans_[static_cast<size_t>(mi)];
        for (const auto& [row, w1] : feed[static_cast<size_t>(i1)]) {
          const double* src = s.image(mi) + static_cast<int64_t>(row) * ns_;
          const double k = w1 * scale;
          for (const Entry& e : plan)
            slice[e.src] += k * e.w * src[e.col];
        }
      }
    });
    return v;
  }

 private:
  struct RowWeights {
    int64_t ia, ib;
    double wa, wb;
  };

  void check_volume(const Volume& v) const {
    if (v.n1 != n1_ || v.n2 != n2_ || v.n3 != n3_)
      throw ShapeError("Projector: volume shape does not match plan");
  }

  static void project_row(const double* slice, const std::vector<Entry>& plan, double w1,
                          double* dst) {
    for (const Entry& e : plan) dst[e.col] += w1 * e.w * slice[e.src];
  }

  void build_plan(size_t mi) {
    const double theta = deg2rad(angles_.deg[mi]);
    const double c = std::cos(theta), s = std::sin(theta);
    auto& plan = plans_[mi];
    plan.reserve(static_cast<size_t>(ns_ * k_ * 4));
    // All index arithmetic, no coordinate round-trips: fractional indices are
    // exact at zero tilt.
    const double off2 = static_cast<double>(n2_) / 2.0 - 0.5;
    const double off3 = static_cast<double>(n3_) / 2.0 - 0.5;
    for (int64_t j = 0; j < ns_; ++j) {
      const double u = static_cast<double>(j) + 0.5 - static_cast<double>(ns_) / 2.0;  // x2 / h
      for (int64_t k = 0; k < k_; ++k) {
        const double t = static_cast<double>(k) + 0.5 - static_cast<double>(k_) / 2.0;  // t / h
        const double f2 = c * u + s * t + off2;
        const double f3 = -s * u + c * t + off3;
        const int64_t i2 = static_cast<int64_t>(std::floor(f2));
        const int64_t i3 = static_cast<int64_t>(std::floor(f3));
        const double w2 = f2 - static_cast<double>(i2);
        const double w3 = f3 - static_cast<double>(i3);
        const double ww[4] = {(1 - w2) * (1 - w3), (1 - w2) * w3, w2 * (1 - w3), w2 * w3};
        const int64_t ii2[4] = {i2, i2, i2 + 1, i2 + 1};
        const int64_t ii3[4] = {i3, i3 + 1, i3, i3 + 1};
        for (int q = 0; q < 4; ++q) {
          if (ww[q] == 0.0) continue;
          if (ii2[q] < 0 || ii2[q] >= n2_ || ii3[q] < 0 || ii3[q] >= n3_) continue;
          plan.push_back({static_cast<int32_t>(j),
                          static_cast<int32_t>(ii2[q] * n3_ + ii3[q]), ww[q]});
        }
      }
    }
  }

  int64_t n1_, n2_, n3_, ns_ = 0, k_ = 0;
  double h_ = 0.0;
  TiltAngles angles_;
  std::vector<std::vector<Entry>> plans_;
  std::vector<RowWeights> rows_;
};

// ------------------------------ projections -------------------------------

inline Stack forward_all(const Volume& v, const TiltAngles& angles) {
  return Projector(v.n1, v.n2, v.n3, angles).forward(v);
}

/// Single-angle projection (P R(theta) v) as an N x N image (row-major).
inline std::vector<double> project_volume(const Volume& v, double theta_deg) {
  if (theta_deg < -90.0 || theta_deg > 90.0)
    throw ValueError("project_volume: angle out of [-90, 90]");
  Stack s = forward_all(v, TiltAngles({theta_deg}));
  return std::vector<double>(s.data.begin(), s.data.end());
}

// ------------------------------ deformation -------------------------------

/// Pull-back resampling: out(x) = img(T_phi(x)), bilinear, zero outside the
/// sensor square. Works in index space so the identity transform is
/// bit-exact and integer pixel shifts translate exactly.
inline void deform_image(const double* img, int64_t n, const DeformationParams& phi,
                         double* out) {
  const double a = deg2rad(phi.rot_deg);
  const double c = std::cos(a), s = std::sin(a);
  // Index-space affine: f = R*K*(i - ctr) + ctr + s_px, ctr = (n-1)/2.
  const double ctr = (static_cast<double>(n) - 1.0) / 2.0;
  const double m11 = c, m12 = c * phi.shear - s;
  const double m21 = s, m22 = s * phi.shear + c;
  for (int64_t i = 0; i < n; ++i) {
    const double d1 = static_cast<double>(i) - ctr;
    for (int64_t j = 0; j < n; ++j) {
      const double d2 = static_cast<double>(j) - ctr;
      const double f1 = m11 * d1 + m12 * d2 + ctr + phi.shift1_px;
      const double f2 = m21 * d1 + m22 * d2 + ctr + phi.shift2_px;
      const int64_t i0 = static_cast<int64_t>(std::floor(f1));
      const int64_t j0 = static_cast<int64_t>(std::floor(f2));
      const double w1 = f1 - static_cast<double>(i0);
      const double w2 = f2 - static_cast<double>(j0);
      double acc = 0.0;
      const double ww[4] = {(1 - w1) * (1 - w2), (1 - w1) * w2, w1 * (1 - w2), w1 * w2};
      const int64_t ii[4] = {i0, i0, i0 + 1, i0 + 1};
      const int64_t jj[4] = {j0, j0 + 1, j0, j0 + 1};
      for (int q = 0; q < 4; ++q) {
        if (ww[q] == 0.0) continue;
        if (ii[q] < 0 || ii[q] >= n || jj[q] < 0 || jj[q] >= n) continue;
        acc += ww[q] * img[ii[q] * n + jj[q]];
      }
      out[i * n + j] = acc;
    }
  }
}

inline Stack deform_stack(const Stack& s, const std::vector<DeformationParams>& phis) {
  if (static_cast<int64_t>(phis.size()) != s.m)
    throw ShapeError("deform_stack: parameter count != tilt count");
  Stack out(s.m, s.n);
  parallel_for(s.m, [&](int64_t t) {
    deform_image(s.image(t), s.n, phis[static_cast<size_t>(t)], out.image(t));
  });
  return out;
}

// --------------------------------- noise ----------------------------------

inline double population_variance(const std::vector<double>& x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  return var / static_cast<double>(x.size());
}

/// Adds iid Gaussian noise sized so 10*log10(Var(stack)/Var(noise)) equals
/// snr_db. An infinite target disables noise.
inline Stack add_noise(const Stack& s, double snr_db, uint64_t seed) {
  Stack out = s;
  if (std::isinf(snr_db) && snr_db > 0) return out;
  const double var = population_variance(s.data);
  if (var <= 0.0) throw ValueError("add_noise: input stack has zero variance");
  const double sigma = std::sqrt(var / std::pow(10.0, snr_db / 10.0));
  Rng rng(seed);
  for (double& v : out.data) v += sigma * rng.normal();
  return out;
}

// ------------------------------- simulation --------------------------------

struct DeformationBounds {
  double shift_px = 10.0;
  double shear = 0.10;  // fraction, reported as percent elsewhere
  double rot_deg = 10.0;
};

/// Independent uniform draws in +-bound per parameter; draw order is
/// (shift1, shift2, shear, rot) per tilt.
inline std::vector<DeformationParams> sample_deformations(int64_t m, const DeformationBounds& b,
                                                          uint64_t seed) {
  if (b.shift_px < 0 || b.shear < 0 || b.rot_deg < 0)
    throw ValueError("sample_deformations: bounds must be nonnegative");
  Rng rng(seed);
  std::vector<DeformationParams> out(static_cast<size_t>(m));
  for (auto& p : out) {
    p.shift1_px = rng.uniform(-b.shift_px, b.shift_px);
    p.shift2_px = rng.uniform(-b.shift_px, b.shift_px);
    p.shear = rng.uniform(-b.shear, b.shear);
    p.rot_deg = rng.uniform(-b.rot_deg, b.rot_deg);
  }
  return out;
}

/// Full acquisition: project, deform per tilt, add noise. Ground truth and
/// the noise seed ride along in the result.
inline TiltSeries simulate(const Volume& v, const TiltAngles& angles,
                           const std::vector<DeformationParams>& phis, double snr_db,
                           uint64_t seed) {
  if (static_cast<int64_t>(phis.size()) != angles.count())
    throw ShapeError("simulate: deformation count != angle count");
  TiltSeries ts;
  ts.angles = angles;
  ts.stack = add_noise(deform_stack(forward_all(v, angles), phis), snr_db, seed);
  ts.truth = phis;
  ts.noise_seed = seed;
  ts.snr_db = snr_db;
  return ts;
}

// -------------------------------- phantoms --------------------------------

enum class PhantomKind { Ball, Ellipsoids, Blobs };

inline PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "ball") return PhantomKind::Ball;
  if (s == "ellipsoids") return PhantomKind::Ellipsoids;
  if (s == "blobs") return PhantomKind::Blobs;
  throw ValueError("unknown phantom kind '" + s + "'");
}

/// Procedural test volumes on [-1,1]^3.
///   ball: centered sphere, radius 0.5, value 1.
///   ellipsoids: 8 random axis-aligned ellipsoids, densities in [0.2,1],
///               edges softened over ~1.5 voxels so projections stay
///               representable by a smooth field.
///   blobs: sum of 20 random anisotropic Gaussians.
inline Volume make_phantom(PhantomKind kind, int64_t n, uint64_t seed) {
  if (n < 8) throw ValueError("make_phantom: N must be >= 8");
  Volume v(n, n, n);
  const double h = v.voxel_size();
  auto coord = [&](int64_t i) { return (static_cast<double>(i) + 0.5 - static_cast<double>(n) / 2.0) * h; };

  if (kind == PhantomKind::Ball) {
    for (int64_t i1 = 0; i1 < n; ++i1)
      for (int64_t i2 = 0; i2 < n; ++i2)
        for (int64_t i3 = 0; i3 < n; ++i3) {
          const double x = coord(i1), y = coord(i2), z = coord(i3);
          v.at(i1, i2, i3) = (x * x + y * y + z * z <= 0.25) ? 1.0 : 0.0;
        }
    return v;
  }

  Rng rng(seed);
  if (kind == PhantomKind::Ellipsoids) {
    struct Ell { double c[3], r[3], d; };
    std::vector<Ell> es(8);
    for (auto& e : es) {
      for (double& c : e.c) c = rng.uniform(-0.4, 0.4);
      for (double& r : e.r) r = rng.uniform(0.12, 0.35);
      e.d = rng.uniform(0.2, 1.0);
    }
    const double edge = 1.5 * h;  // soft boundary width in normalized units
    for (int64_t i1 = 0; i1 < n; ++i1)
      for (int64_t i2 = 0; i2 < n; ++i2)
        for (int64_t i3 = 0; i3 < n; ++i3) {
          const double x[3] = {coord(i1), coord(i2), coord(i3)};
          double acc = 0.0;
          for (const auto& e : es) {
            double q = 0.0;
            for (int a = 0; a < 3; ++a) {
              const double d = (x[a] - e.c[a]) / e.r[a];
              q += d * d;
            }
            // signed distance proxy: rmin*(1 - sqrt(q)), smoothstep over edge
            const double rmin = std::min(e.r[0], std::min(e.r[1], e.r[2]));
            const double sd = rmin * (1.0 - std::sqrt(q));
            double t = (sd + edge) / (2.0 * edge);
            t = std::clamp(t, 0.0, 1.0);
            acc += e.d * t * t * (3.0 - 2.0 * t);
          }
          v.at(i1, i2, i3) = acc;
        }
    return v;
  }

  // blobs
  struct Blob { double c[3], s[3], a; };
  std::vector<Blob> bs(20);
  for (auto& b : bs) {
    for (double& c : b.c) c = rng.uniform(-0.5, 0.5);
    for (double& s : b.s) s = rng.uniform(0.05, 0.25);
    b.a = rng.uniform(0.2, 1.0);
  }
  for (int64_t i1 = 0; i1 < n; ++i1)
    for (int64_t i2 = 0; i2 < n; ++i2)
      for (int64_t i3 = 0; i3 < n; ++i3) {
        const double x[3] = {coord(i1), coord(i2), coord(i3)};
        double acc = 0.0;
        for (const auto& b : bs) {
          double q = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double d = (x[a] - b.c[a]) / b.s[a];
            q += d * d;
          }
          acc += b.a * std::exp(-0.5 * q);
        }
        v.at(i1, i2, i3) = acc;
      }
  return v;
}

}  // namespace dtomo
