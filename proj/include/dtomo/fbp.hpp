#pragma once

#include <fftw3.h>

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtomo/geometry.hpp"
#include "dtomo/tensor.hpp"

namespace dtomo {

// ---------------------------------------------------------------------------
// Filtered backprojection. The backprojector is the exact transpose of the
// trilinear ray-sampling matrix S of the Projector; scaling conventions:
//   forward_all            = h * S          (h = voxel/step size 2/N)
//   backproject_unscaled   = h * S^T        (exact transpose of forward_all)
//   backproject            = (pi / 2M) * S^T (the FBP smearing step)
//   fbp_reconstruct        = backproject . ramp_filter
// With the band-limited ramp kernel below, fbp_reconstruct . forward_all is
// an approximate identity on full angular coverage.
// ---------------------------------------------------------------------------

/// 1D Ram-Lak filter applied along image columns (the detector coordinate
/// perpendicular to the tilt axis), one line per image row, zero-padded to
/// the next power of two >= 2N. The frequency multiplier is the DFT of the
/// band-limited ramp kernel (center N/4, odd taps -N/(pi^2 n^2), zero at
/// even offsets). Using the kernel's DFT rather than sampled |frequency|
/// keeps the small positive DC term of the truncated kernel, which is what
/// makes discrete FBP an accurate inverse at low frequencies (sampling
/// |frequency| directly introduces a DC-offset bias); `power` exponentiates
/// the multiplier. Exactly self-adjoint on the unpadded domain. Not
/// thread-safe: one instance per thread.
class RampFilter {
 public:
  explicit RampFilter(int64_t n, int power = 1) : n_(n), p_(next_pow2(2 * n)) {
    real_ = fftw_alloc_real(static_cast<size_t>(p_));
    freq_ = fftw_alloc_complex(static_cast<size_t>(p_ / 2 + 1));
    fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(p_), real_, freq_, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(p_), freq_, real_, FFTW_ESTIMATE);

    // Spatial kernel laid out circularly (tap n at index n mod P); P >= 2N
    // makes circular convolution equal linear convolution on the N outputs.
    const double nd = static_cast<double>(n_);
    for (int64_t j = 0; j < p_; ++j) {
      const int64_t tap = j <= p_ / 2 ? j : j - p_;
      if (tap == 0)
        real_[j] = nd / 4.0;
      else if (tap & 1)
        real_[j] = -nd / (kPi * kPi * static_cast<double>(tap) * static_cast<double>(tap));
      else
        real_[j] = 0.0;
    }
    fftw_execute(fwd_);
    mult_.resize(static_cast<size_t>(p_ / 2 + 1));
    for (int64_t k = 0; k <= p_ / 2; ++k)
      mult_[static_cast<size_t>(k)] =
          std::pow(freq_[k][0], static_cast<double>(power));  // kernel is even: DFT real
  }

  ~RampFilter() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(real_);
    fftw_free(freq_);
  }

  RampFilter(const RampFilter&) = delete;
  RampFilter& operator=(const RampFilter&) = delete;

  int64_t line_length() const { return n_; }
  int64_t padded_length() const { return p_; }

  /// Filters one contiguous line of length N in place (zero-pads to P,
  /// filters, crops back to the leading N samples).
  void apply_line(double* line) {
    for (int64_t i = 0; i < n_; ++i) real_[i] = line[i];
    for (int64_t i = n_; i < p_; ++i) real_[i] = 0.0;
    fftw_execute(fwd_);
    for (int64_t k = 0; k <= p_ / 2; ++k) {
      freq_[k][0] *= mult_[static_cast<size_t>(k)];
      freq_[k][1] *= mult_[static_cast<size_t>(k)];
    }
    fftw_execute(inv_);
    const double inv_p = 1.0 / static_cast<double>(p_);
    for (int64_t i = 0; i < n_; ++i) line[i] = real_[i] * inv_p;
  }

  /// Filters one full padded line of length P in place, no padding or crop.
  /// On this circular domain the filter composes exactly: applying it twice
  /// equals one application with `power` 2.
  void apply_padded(double* line) {
    for (int64_t i = 0; i < p_; ++i) real_[i] = line[i];
    fftw_execute(fwd_);
    for (int64_t k = 0; k <= p_ / 2; ++k) {
      freq_[k][0] *= mult_[static_cast<size_t>(k)];
      freq_[k][1] *= mult_[static_cast<size_t>(k)];
    }
    fftw_execute(inv_);
    const double inv_p = 1.0 / static_cast<double>(p_);
    for (int64_t i = 0; i < p_; ++i) line[i] = real_[i] * inv_p;
  }

  Stack apply(const Stack& s) {
    if (s.n != n_) throw ShapeError("RampFilter: image size does not match filter");
    Stack out = s;
    for (int64_t t = 0; t < s.m; ++t)
      for (int64_t i = 0; i < s.n; ++i) apply_line(out.image(t) + i * s.n);
    return out;
  }

 private:
  int64_t n_, p_;
  std::vector<double> mult_;
  double* real_;
  fftw_complex* freq_;
  fftw_plan fwd_, inv_;
};

inline Stack ramp_filter(const Stack& s) { return RampFilter(s.n).apply(s); }

// ---------------------------- backprojection ------------------------------

/// (pi / 2M) * S^T, the smearing half of filtered backprojection.
inline Volume backproject(const Stack& s, const TiltAngles& angles, int64_t n) {
  Projector proj(n, n, n, angles);
  return proj.transpose_apply(s, kPi / (2.0 * static_cast<double>(angles.count())));
}

/// h * S^T: the exact matrix transpose of forward_all, the dot-product-test
/// partner.
inline Volume backproject_unscaled(const Stack& s, const TiltAngles& angles, int64_t n) {
  Projector proj(n, n, n, angles);
  return proj.transpose_apply(s, proj.step());
}

inline Volume fbp_reconstruct(const Stack& s, const TiltAngles& angles, int64_t n) {
  return backproject(ramp_filter(s), angles, n);
}

// ------------------------------ adjoint test -------------------------------

struct LinearOperator {
  std::string desc;
  int64_t domain_size = 0;  // x lives here
  int64_t range_size = 0;   // A x lives here
  std::function<std::vector<double>(const std::vector<double>&)> forward;
  std::function<std::vector<double>(const std::vector<double>&)> adjoint;
};

/// |<A x, y> - <x, A^T y>| / (|A x| * |y|) on Gaussian random x, y.
inline double adjoint_check(const LinearOperator& op, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(static_cast<size_t>(op.domain_size));
  std::vector<double> y(static_cast<size_t>(op.range_size));
  for (double& v : x) v = rng.normal();
  for (double& v : y) v = rng.normal();
  const std::vector<double> ax = op.forward(x);
  const std::vector<double> aty = op.adjoint(y);
  if (ax.size() != y.size() || aty.size() != x.size())
    throw ShapeError("adjoint_check: operator returned wrong sizes");
  double lhs = 0.0, rhs = 0.0, na = 0.0, ny = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    lhs += ax[i] * y[i];
    na += ax[i] * ax[i];
    ny += y[i] * y[i];
  }
  for (size_t i = 0; i < x.size(); ++i) rhs += x[i] * aty[i];
  const double denom = std::sqrt(na) * std::sqrt(ny);
  return std::fabs(lhs - rhs) / (denom > 0 ? denom : 1.0);
}

/// The projector/backprojector pair as a LinearOperator over flat vectors.
inline LinearOperator projection_operator(int64_t n, const TiltAngles& angles) {
  auto proj = std::make_shared<Projector>(n, n, n, angles);
  LinearOperator op;
  op.desc = "tilt projection (trilinear ray sampling) vs its transpose";
  op.domain_size = n * n * n;
  op.range_size = angles.count() * n * n;
  op.forward = [proj, n](const std::vector<double>& x) {
    Volume v(n, n, n);
    v.data = x;
    return proj->forward(v).data;
  };
  op.adjoint = [proj, n, m = angles.count()](const std::vector<double>& y) {
    Stack s(m, n);
    s.data = y;
    return proj->transpose_apply(s, proj->step()).data;
  };
  return op;
}

// ----------------------- operator-consistency pipeline ---------------------

/// Residual map r(g) = g - A A† g on a stack-shaped tensor (M,N,N), with a
/// hand-written adjoint for the backward pass:
///   A A†      = h*S . (pi/2M)*S^T . Ramp
///   (A A†)^T  = Ramp . (pi/2M)*S . h*S^T        (Ramp is self-adjoint)
/// Shared by the training objective and by standalone reconstruction checks.
class OpPipeline {
 public:
  OpPipeline(int64_t n, const TiltAngles& angles)
      : n_(n), proj_(n, n, n, angles), ramp_(n),
        bp_scale_(kPi / (2.0 * static_cast<double>(angles.count()))) {}

  int64_t sensor_size() const { return n_; }
  const Projector& projector() const { return proj_; }

  Stack tensor_to_stack(const Tensor& t) const {
    if (t.ndim() != 3 || t.shape[1] != n_ || t.shape[2] != n_)
      throw ShapeError("OpPipeline: expected (M,N,N) tensor, got " + t.shape_str());
    Stack s(t.shape[0], n_);
    s.data = t.data;
    return s;
  }

  Tensor stack_to_tensor(const Stack& s) const {
    return Tensor({s.m, s.n, s.n}, s.data);
  }

  /// A A† g
  Stack project_consistent(const Stack& g) {
    return proj_.forward(proj_.transpose_apply(ramp_.apply(g), bp_scale_));
  }

  Tensor residual(const Tensor& g) {
    Stack gs = tensor_to_stack(g);
    Stack back = project_consistent(gs);
    Tensor out = g;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= back.data[i];
    return out;
  }

  Tensor residual_vjp(const Tensor& u) {
    Stack us = tensor_to_stack(u);
    Stack v = ramp_.apply(proj_.forward(proj_.transpose_apply(us, bp_scale_)));
    Tensor out = u;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= v.data[i];
    return out;
  }

 private:
  int64_t n_;
  Projector proj_;
  RampFilter ramp_;
  double bp_scale_;
};

}  // namespace dtomo
