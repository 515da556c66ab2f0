#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "dtomo/geometry.hpp"

namespace dtomo {

// ------------------------------------ SNR ----------------------------------

/// 10*log10(Var(signal)/Var(noise)), population variances over all elements.
inline double snr_db(const std::vector<double>& signal, const std::vector<double>& noise) {
  if (signal.size() != noise.size()) throw ShapeError("snr_db: size mismatch");
  const double vn = population_variance(noise);
  if (vn <= 0.0) throw ValueError("snr_db: noise has zero variance");
  return 10.0 * std::log10(population_variance(signal) / vn);
}

inline double snr_db(const Stack& signal, const Stack& noise) {
  if (signal.m != noise.m || signal.n != noise.n) throw ShapeError("snr_db: shape mismatch");
  return snr_db(signal.data, noise.data);
}

// ------------------------------------ FSC ----------------------------------

struct FscCurve {
  std::vector<double> freq;      // shell centers, cycles per voxel (Nyquist = 0.5)
  std::vector<double> value;     // correlation in [-1, 1]
  std::vector<bool> empty_shell; // true where no frequency fell in the shell
};

namespace detail {

inline std::vector<std::complex<double>> fft3(const Volume& v) {
  const int64_t n1 = v.n1, n2 = v.n2, n3 = v.n3;
  std::vector<std::complex<double>> out(static_cast<size_t>(n1 * n2 * n3));
  fftw_complex* buf = fftw_alloc_complex(static_cast<size_t>(n1 * n2 * n3));
  for (int64_t i = 0; i < n1 * n2 * n3; ++i) {
    buf[i][0] = v.data[static_cast<size_t>(i)];
    buf[i][1] = 0.0;
  }
  fftw_plan plan = fftw_plan_dft_3d(static_cast<int>(n1), static_cast<int>(n2),
                                    static_cast<int>(n3), buf, buf, FFTW_FORWARD,
                                    FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  for (int64_t i = 0; i < n1 * n2 * n3; ++i)
    out[static_cast<size_t>(i)] = {buf[i][0], buf[i][1]};
  fftw_free(buf);
  return out;
}

inline double signed_freq(int64_t k, int64_t n) {
  const int64_t s = k <= n / 2 ? k : k - n;
  return static_cast<double>(s) / static_cast<double>(n);
}

}  // namespace detail

/// Correlation of the two volumes' Fourier coefficients within equal-width
/// radial shells up to Nyquist (0.5 cycles/voxel). DC lands in shell 0;
/// frequencies beyond Nyquist (cube corners) are ignored.
inline FscCurve fsc(const Volume& a, const Volume& b, int64_t shells) {
  if (a.n1 != b.n1 || a.n2 != b.n2 || a.n3 != b.n3) throw ShapeError("fsc: shape mismatch");
  if (shells < 1) throw ValueError("fsc: need at least one shell");
  const auto fa = detail::fft3(a);
  const auto fb = detail::fft3(b);
  std::vector<double> num(static_cast<size_t>(shells), 0.0);
  std::vector<double> da(static_cast<size_t>(shells), 0.0);
  std::vector<double> db(static_cast<size_t>(shells), 0.0);
  const double width = 0.5 / static_cast<double>(shells);
  int64_t idx = 0;
  for (int64_t k1 = 0; k1 < a.n1; ++k1)
    for (int64_t k2 = 0; k2 < a.n2; ++k2)
      for (int64_t k3 = 0; k3 < a.n3; ++k3, ++idx) {
        const double f1 = detail::signed_freq(k1, a.n1);
        const double f2 = detail::signed_freq(k2, a.n2);
        const double f3 = detail::signed_freq(k3, a.n3);
        const double r = std::sqrt(f1 * f1 + f2 * f2 + f3 * f3);
        const auto s = static_cast<int64_t>(std::floor(r / width));
        if (s >= shells) continue;
        const auto& ca = fa[static_cast<size_t>(idx)];
        const auto& cb = fb[static_cast<size_t>(idx)];
        num[static_cast<size_t>(s)] += ca.real() * cb.real() + ca.imag() * cb.imag();
        da[static_cast<size_t>(s)] += std::norm(ca);
        db[static_cast<size_t>(s)] += std::norm(cb);
      }
  FscCurve curve;
  for (int64_t s = 0; s < shells; ++s) {
    curve.freq.push_back((static_cast<double>(s) + 0.5) * width);
    const double denom = std::sqrt(da[static_cast<size_t>(s)] * db[static_cast<size_t>(s)]);
    const bool empty = da[static_cast<size_t>(s)] == 0.0 && db[static_cast<size_t>(s)] == 0.0;
    curve.empty_shell.push_back(empty);
    curve.value.push_back(empty || denom == 0.0 ? 0.0 : num[static_cast<size_t>(s)] / denom);
  }
  return curve;
}

/// First frequency where the curve drops below the threshold, linearly
/// interpolated between shell centers; Nyquist (0.5) if it never does.
inline double fsc_resolution(const FscCurve& curve, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0)
    throw ValueError("fsc_resolution: threshold must be in (0,1)");
  if (curve.value.empty()) throw ValueError("fsc_resolution: empty curve");
  if (curve.value[0] < threshold) return curve.freq[0];
  for (size_t i = 1; i < curve.value.size(); ++i) {
    if (curve.value[i] < threshold) {
      const double f0 = curve.freq[i - 1], f1 = curve.freq[i];
      const double v0 = curve.value[i - 1], v1 = curve.value[i];
      return f0 + (f1 - f0) * (v0 - threshold) / (v0 - v1);
    }
  }
  return 0.5;
}

// ----------------------------- deformation error ----------------------------

struct DeformationErrorSummary {
  double shift_px = 0.0;       // mean Euclidean norm of the shift residual
  double shear_percent = 0.0;  // mean |shear residual| * 100
  double rot_deg = 0.0;        // mean |rotation residual|
};

inline DeformationErrorSummary deformation_error(const std::vector<DeformationParams>& est,
                                                 const std::vector<DeformationParams>& truth) {
  if (est.size() != truth.size()) throw ShapeError("deformation_error: length mismatch");
  if (est.empty()) throw ValueError("deformation_error: empty lists");
  DeformationErrorSummary s;
  for (size_t i = 0; i < est.size(); ++i) {
    const double d1 = est[i].shift1_px - truth[i].shift1_px;
    const double d2 = est[i].shift2_px - truth[i].shift2_px;
    s.shift_px += std::sqrt(d1 * d1 + d2 * d2);
    s.shear_percent += std::fabs(est[i].shear - truth[i].shear) * 100.0;
    s.rot_deg += std::fabs(est[i].rot_deg - truth[i].rot_deg);
  }
  const double inv = 1.0 / static_cast<double>(est.size());
  s.shift_px *= inv;
  s.shear_percent *= inv;
  s.rot_deg *= inv;
  return s;
}

/// Same summary after removing the mean shift residual (a constant shift of
/// every projection trades off against a shifted volume, so this isolates
/// the recoverable part). Shear/rotation have no such global trade-off and
/// are left untouched.
inline DeformationErrorSummary deformation_error_gauge_removed(
    const std::vector<DeformationParams>& est, const std::vector<DeformationParams>& truth) {
  if (est.size() != truth.size()) throw ShapeError("deformation_error: length mismatch");
  if (est.empty()) throw ValueError("deformation_error: empty lists");
  double m1 = 0.0, m2 = 0.0;
  for (size_t i = 0; i < est.size(); ++i) {
    m1 += est[i].shift1_px - truth[i].shift1_px;
    m2 += est[i].shift2_px - truth[i].shift2_px;
  }
  m1 /= static_cast<double>(est.size());
  m2 /= static_cast<double>(est.size());
  std::vector<DeformationParams> adj = est;
  for (auto& p : adj) {
    p.shift1_px -= m1;
    p.shift2_px -= m2;
  }
  return deformation_error(adj, truth);
}

}  // namespace dtomo
