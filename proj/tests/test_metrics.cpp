#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dtomo/dtomo.hpp"
#include "oracles.hpp"

using namespace dtomo;

namespace {

Volume random_volume(int64_t n, uint64_t seed) {
  Volume v(n, n, n);
  Rng rng(seed);
  for (double& x : v.data) x = rng.normal();
  return v;
}

}  // namespace

// ------------------------------------ SNR ----------------------------------

TEST_CASE("snr_db reproduces hand-computed variance ratios") {
  // Var(signal) = 4, Var(noise) = 0.04 -> ratio 100 -> exactly 20 dB.
  const std::vector<double> signal = {2.0, -2.0, 2.0, -2.0};
  const std::vector<double> noise = {0.2, -0.2, 0.2, -0.2};
  REQUIRE(snr_db(signal, noise) == Catch::Approx(20.0).margin(1e-12));

  // Equal variances -> 0 dB regardless of the means.
  const std::vector<double> a = {5.0, 7.0, 5.0, 7.0};
  const std::vector<double> b = {-1.0, 1.0, -1.0, 1.0};
  REQUIRE(snr_db(a, b) == Catch::Approx(0.0).margin(1e-12));

  // Scaling the noise by 10 costs exactly 20 dB.
  std::vector<double> big = noise;
  for (double& x : big) x *= 10.0;
  REQUIRE(snr_db(signal, noise) - snr_db(signal, big) ==
          Catch::Approx(20.0).margin(1e-12));
}

TEST_CASE("snr_db uses population variance, so constant offsets do not count") {
  const std::vector<double> signal = {1.0, -1.0, 1.0, -1.0};
  std::vector<double> shifted_noise = {100.1, 99.9, 100.1, 99.9};  // var 0.01
  REQUIRE(snr_db(signal, shifted_noise) == Catch::Approx(20.0).margin(1e-12));
}

TEST_CASE("snr_db rejects degenerate input") {
  const std::vector<double> s = {1.0, 2.0};
  REQUIRE_THROWS_AS(snr_db(s, std::vector<double>{1.0}), ShapeError);
  REQUIRE_THROWS_AS(snr_db(s, std::vector<double>{3.0, 3.0}), ValueError);
}

TEST_CASE("snr_db on stacks matches the flat-vector form") {
  Stack sig(2, 4), noi(2, 4);
  Rng rng(7);
  for (double& x : sig.data) x = rng.normal();
  for (double& x : noi.data) x = 0.1 * rng.normal();
  REQUIRE(snr_db(sig, noi) == snr_db(sig.data, noi.data));
  Stack bad(3, 4);
  REQUIRE_THROWS_AS(snr_db(sig, bad), ShapeError);
}

// ------------------------------------ FSC ----------------------------------

TEST_CASE("fsc of a volume with itself is one on every populated shell") {
  const Volume v = random_volume(16, 3);
  const FscCurve c = fsc(v, v, 8);
  REQUIRE(c.value.size() == 8);
  REQUIRE(c.freq.size() == 8);
  for (size_t s = 0; s < c.value.size(); ++s) {
    REQUIRE_FALSE(c.empty_shell[s]);
    REQUIRE(c.value[s] == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("fsc of a volume with its negation is minus one") {
  const Volume v = random_volume(12, 4);
  Volume neg = v;
  for (double& x : neg.data) x = -x;
  const FscCurve c = fsc(v, neg, 6);
  for (double val : c.value) REQUIRE(val == Catch::Approx(-1.0).margin(1e-12));
}

TEST_CASE("fsc is symmetric and invariant to positive rescaling") {
  const Volume a = random_volume(12, 5);
  const Volume b = random_volume(12, 6);
  const FscCurve ab = fsc(a, b, 6);
  const FscCurve ba = fsc(b, a, 6);
  Volume b3 = b;
  for (double& x : b3.data) x *= 3.0;
  const FscCurve ab3 = fsc(a, b3, 6);
  for (size_t s = 0; s < ab.value.size(); ++s) {
    REQUIRE(ab.value[s] == Catch::Approx(ba.value[s]).margin(1e-13));
    REQUIRE(ab.value[s] == Catch::Approx(ab3.value[s]).margin(1e-12));
  }
}

TEST_CASE("fsc of independent white noise is small away from DC") {
  // Expected shell correlation ~ 1/sqrt(#coefficients in shell); at N = 32
  // every shell past the first two holds hundreds of coefficients.
  const Volume a = random_volume(32, 10);
  const Volume b = random_volume(32, 11);
  const FscCurve c = fsc(a, b, 8);
  for (size_t s = 2; s < c.value.size(); ++s) REQUIRE(std::fabs(c.value[s]) < 0.15);
}

TEST_CASE("fsc matches the naive DFT reference") {
  // Odd size: no frequency lands exactly on Nyquist, so the half-open shell
  // binning cannot differ between the two implementations.
  const int64_t n = 7;
  const Volume a = random_volume(n, 8);
  const Volume b = random_volume(n, 9);
  for (int64_t shells : {3, 4}) {
    const FscCurve fast = fsc(a, b, shells);
    const std::vector<double> slow = oracles::fsc_reference(a, b, shells);
    for (int64_t s = 0; s < shells; ++s)
      REQUIRE(fast.value[static_cast<size_t>(s)] ==
              Catch::Approx(slow[static_cast<size_t>(s)]).margin(1e-10));
  }
}

TEST_CASE("fsc shell centers cover (0, 0.5) uniformly") {
  const Volume v = random_volume(8, 12);
  const FscCurve c = fsc(v, v, 4);
  const double w = 0.5 / 4.0;
  for (size_t s = 0; s < 4; ++s)
    REQUIRE(c.freq[s] == Catch::Approx((s + 0.5) * w).margin(1e-15));
}

TEST_CASE("fsc flags shells with no frequencies as empty") {
  // At N = 4 the available radii are coarse; a fine shell grid must leave
  // gaps, and those shells report value 0 with the empty flag set.
  const Volume v = random_volume(4, 13);
  const FscCurve c = fsc(v, v, 16);
  bool any_empty = false;
  for (size_t s = 0; s < c.value.size(); ++s)
    if (c.empty_shell[s]) {
      any_empty = true;
      REQUIRE(c.value[s] == 0.0);
    }
  REQUIRE(any_empty);
}

TEST_CASE("fsc validates its arguments") {
  const Volume a = random_volume(8, 1);
  REQUIRE_THROWS_AS(fsc(a, Volume(4, 4, 4), 4), ShapeError);
  REQUIRE_THROWS_AS(fsc(a, a, 0), ValueError);
}

// ------------------------------ fsc_resolution ------------------------------

TEST_CASE("fsc_resolution interpolates the first threshold crossing") {
  FscCurve c;
  c.freq = {0.1, 0.2, 0.3, 0.4};
  c.value = {1.0, 0.8, 0.2, 0.1};
  c.empty_shell = {false, false, false, false};
  // Crossing of 0.5 sits between shells 1 and 2:
  // 0.2 + 0.1 * (0.8 - 0.5) / (0.8 - 0.2) = 0.25.
  REQUIRE(fsc_resolution(c, 0.5) == Catch::Approx(0.25).margin(1e-12));
  // A threshold the curve never reaches from above -> the first shell center.
  c.value = {0.3, 0.2, 0.1, 0.05};
  REQUIRE(fsc_resolution(c, 0.5) == 0.1);
}

TEST_CASE("fsc_resolution returns Nyquist when the curve never drops") {
  FscCurve c;
  c.freq = {0.125, 0.375};
  c.value = {0.99, 0.95};
  c.empty_shell = {false, false};
  REQUIRE(fsc_resolution(c, 0.5) == 0.5);
}

TEST_CASE("fsc_resolution of a self-comparison is Nyquist") {
  const Volume v = random_volume(16, 14);
  REQUIRE(fsc_resolution(fsc(v, v, 8), 0.5) == 0.5);
}

TEST_CASE("fsc_resolution validates threshold and curve") {
  FscCurve c;
  c.freq = {0.25};
  c.value = {0.9};
  c.empty_shell = {false};
  REQUIRE_THROWS_AS(fsc_resolution(c, 0.0), ValueError);
  REQUIRE_THROWS_AS(fsc_resolution(c, 1.0), ValueError);
  REQUIRE_THROWS_AS(fsc_resolution(c, -0.5), ValueError);
  REQUIRE_THROWS_AS(fsc_resolution(FscCurve{}, 0.5), ValueError);
}

TEST_CASE("a blurred volume resolves more coarsely than the original") {
  // Box-blur the ball along one axis; correlation against the original decays
  // with frequency, so the measured resolution must drop strictly.
  const Volume v = make_phantom(PhantomKind::Ball, 32, 0);
  Volume blurred = v;
  const int64_t n = v.n1;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (int64_t d = -2; d <= 2; ++d) {
          const int64_t kk = std::clamp<int64_t>(k + d, 0, n - 1);
          acc += v.data[static_cast<size_t>((i * n + j) * n + kk)];
        }
        blurred.data[static_cast<size_t>((i * n + j) * n + k)] = acc / 5.0;
      }
  const double r_self = fsc_resolution(fsc(v, v, 16), 0.5);
  const double r_blur = fsc_resolution(fsc(v, blurred, 16), 0.5);
  REQUIRE(r_self == 0.5);
  REQUIRE(r_blur < 0.5);
}

// ---------------------------- deformation error -----------------------------

TEST_CASE("deformation_error averages per-tilt residual magnitudes") {
  std::vector<DeformationParams> truth(2), est(2);
  // Tilt 0: classic 3-4-5 shift residual, shear off by +0.02, rot by -1.5 deg.
  est[0].shift1_px = 3.0;
  est[0].shift2_px = 4.0;
  est[0].shear = 0.02;
  est[0].rot_deg = -1.5;
  // Tilt 1: exact.
  const DeformationErrorSummary e = deformation_error(est, truth);
  REQUIRE(e.shift_px == Catch::Approx(2.5).margin(1e-12));        // (5 + 0) / 2
  REQUIRE(e.shear_percent == Catch::Approx(1.0).margin(1e-12));   // (2 + 0) / 2
  REQUIRE(e.rot_deg == Catch::Approx(0.75).margin(1e-12));        // (1.5 + 0) / 2
  // Identical lists -> all zero.
  const DeformationErrorSummary z = deformation_error(truth, truth);
  REQUIRE(z.shift_px == 0.0);
  REQUIRE(z.shear_percent == 0.0);
  REQUIRE(z.rot_deg == 0.0);
}

TEST_CASE("deformation_error validates its inputs") {
  std::vector<DeformationParams> two(2), three(3);
  REQUIRE_THROWS_AS(deformation_error(two, three), ShapeError);
  REQUIRE_THROWS_AS(deformation_error({}, {}), ValueError);
}

TEST_CASE("gauge removal cancels a constant shift of every tilt") {
  const DeformationBounds bounds{4.0, 0.03, 3.0};
  const std::vector<DeformationParams> truth = sample_deformations(12, bounds, 5);
  std::vector<DeformationParams> est = truth;
  for (auto& p : est) {
    p.shift1_px += 2.0;  // global drift, unobservable against a shifted volume
    p.shift2_px -= 1.0;
  }
  const DeformationErrorSummary raw = deformation_error(est, truth);
  const DeformationErrorSummary gauged = deformation_error_gauge_removed(est, truth);
  REQUIRE(raw.shift_px == Catch::Approx(std::sqrt(5.0)).margin(1e-12));
  REQUIRE(gauged.shift_px == Catch::Approx(0.0).margin(1e-12));
  // Shear and rotation have no global trade-off and must pass through.
  REQUIRE(gauged.shear_percent == raw.shear_percent);
  REQUIRE(gauged.rot_deg == raw.rot_deg);
}

TEST_CASE("gauge removal never increases the shift error") {
  const DeformationBounds bounds{5.0, 0.05, 5.0};
  for (uint64_t seed : {1u, 2u, 3u}) {
    const auto truth = sample_deformations(20, bounds, seed);
    const auto est = sample_deformations(20, bounds, seed + 100);
    const double raw = deformation_error(est, truth).shift_px;
    const double gauged = deformation_error_gauge_removed(est, truth).shift_px;
    REQUIRE(gauged <= raw + 1e-12);
  }
}
