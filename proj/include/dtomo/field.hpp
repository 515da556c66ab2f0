#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtomo/autodiff.hpp"
#include "dtomo/geometry.hpp"
#include "dtomo/tensor.hpp"

namespace dtomo {

// ---------------------------------------------------------------------------
// Coordinate network f(theta_norm, x1, x2) -> intensity over the tilt-series
// domain. theta_norm = theta_deg / 180 lives in [-1,1); spatial coordinates
// are the sensor coordinates in [-1,1]. Fourier-feature encoding followed by
// an MLP, built entirely from autodiff ops so gradients reach both the
// weights and the input coordinates.
// ---------------------------------------------------------------------------

enum class Activation { Relu, Sine };

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "sine") return Activation::Sine;
  throw ValueError("unknown activation '" + s + "'");
}

inline const char* activation_to_string(Activation a) {
  return a == Activation::Relu ? "relu" : "sine";
}

struct FieldConfig {
  int64_t frequencies = 8;    // L octaves per coordinate
  int64_t hidden_layers = 3;  // H
  int64_t width = 128;        // W
  Activation activation = Activation::Relu;

  void validate() const {
    if (frequencies < 1 || hidden_layers < 1 || width < 8)
      throw ValueError("FieldConfig: need L >= 1, H >= 1, W >= 8");
  }

  int64_t encoding_width() const { return 6 * frequencies; }
};

/// Layer parameters as plain tensors; wrap with make_leaves() to train.
struct FieldWeights {
  FieldConfig config;
  std::vector<Tensor> w;  // (fan_in x fan_out), hidden_layers + 1 matrices
  std::vector<Tensor> b;  // (1 x fan_out)
};

/// Graph-leaf view of FieldWeights (differentiable parameters).
struct FieldLeaves {
  std::vector<Expr> w, b;
};

inline FieldLeaves make_leaves(const FieldWeights& fw, bool requires_grad = true) {
  FieldLeaves l;
  for (const auto& t : fw.w) l.w.push_back(leaf(t, requires_grad));
  for (const auto& t : fw.b) l.b.push_back(leaf(t, requires_grad));
  return l;
}

inline FieldWeights weights_from_leaves(const FieldConfig& cfg, const FieldLeaves& l) {
  FieldWeights fw;
  fw.config = cfg;
  for (const auto& e : l.w) fw.w.push_back(e.value());
  for (const auto& e : l.b) fw.b.push_back(e.value());
  return fw;
}

// -------------------------------- encoding --------------------------------

/// Per coordinate p emits [sin(2^l pi p), cos(2^l pi p)] for l = 0..L-1;
/// column layout is level-major: [sin_l0 (3 cols), cos_l0 (3), sin_l1, ...],
/// total width 6L. Coordinates are first folded into [-1,1) (the features
/// have integer frequency, so folding is an exact no-op mathematically and
/// makes the period-2 invariance bit-exact). Higher octaves come from the
/// double-angle recurrence, which autodiff differentiates exactly.
inline Expr encode(const Expr& coords, int64_t frequencies) {
  const int64_t b = coords.value().shape[0];
  const int64_t c = coords.value().shape[1];
  Expr folded = wrap_periodic(coords);
  Expr s = dtomo::sin(scale(folded, kPi));
  Expr co = dtomo::cos(scale(folded, kPi));
  std::vector<Expr> feats{s, co};
  if (frequencies > 1) {
    Expr ones = constant(Tensor::full({b, c}, 1.0));
    for (int64_t l = 1; l < frequencies; ++l) {
      Expr s2 = scale(mul(s, co), 2.0);                     // sin(2x) = 2 sin x cos x
      Expr c2 = sub(ones, scale(square(s), 2.0));           // cos(2x) = 1 - 2 sin^2 x
      feats.push_back(s2);
      feats.push_back(c2);
      s = s2;
      co = c2;
    }
  }
  return concat(feats, 1);
}

/// Octave weights for coarse-to-fine registration: octave l carries weight
/// smoothstep(clamp(alpha - l, 0, 1)), so alpha = 1 leaves only the base
/// octave active and alpha = L activates everything. Returned as a (1 x 6L)
/// row matching the encode() column layout. Low octaves keep wide basins of
/// attraction for the deformation parameters; high octaves are blended in
/// once coarse alignment has locked on.
inline Tensor encode_octave_mask(int64_t frequencies, double alpha) {
  Tensor m = Tensor::zeros({1, 6 * frequencies});
  for (int64_t l = 0; l < frequencies; ++l) {
    const double a = std::clamp(alpha - static_cast<double>(l), 0.0, 1.0);
    const double w = 0.5 * (1.0 - std::cos(kPi * a));
    for (int64_t k = 0; k < 6; ++k) m[l * 6 + k] = w;
  }
  return m;
}

// ------------------------------ initialization ------------------------------

/// He-scaled Gaussians for relu; uniform +-sqrt(6/fan_in) for sine. Biases
/// start at zero. Draw order: per layer, weights row-major, deterministic
/// under the seed.
inline FieldWeights field_init(const FieldConfig& cfg, uint64_t seed) {
  cfg.validate();
  FieldWeights fw;
  fw.config = cfg;
  Rng rng(seed);
  std::vector<int64_t> dims{cfg.encoding_width()};
  for (int64_t i = 0; i < cfg.hidden_layers; ++i) dims.push_back(cfg.width);
  dims.push_back(1);
  for (size_t layer = 0; layer + 1 < dims.size(); ++layer) {
    const int64_t fan_in = dims[layer], fan_out = dims[layer + 1];
    Tensor w = Tensor::zeros({fan_in, fan_out});
    if (cfg.activation == Activation::Relu) {
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : w.data) v = std * rng.normal();
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : w.data) v = rng.uniform(-bound, bound);
    }
    fw.w.push_back(std::move(w));
    fw.b.push_back(Tensor::zeros({1, fan_out}));
  }
  return fw;
}

// -------------------------------- evaluation --------------------------------

/// MLP on precomputed encoded features (B x 6L) -> (B x 1). An octave mask
/// (see encode_octave_mask) scales the feature columns before the first layer.
inline Expr field_mlp(const FieldConfig& cfg, const FieldLeaves& l, const Expr& features,
                      const std::optional<Tensor>& octave_mask = std::nullopt) {
  if (features.value().shape[1] != cfg.encoding_width())
    throw ShapeError("field_mlp: feature width does not match config");
  const int64_t b = features.value().shape[0];
  Expr x = features;
  if (octave_mask) {
    if (octave_mask->shape != std::vector<int64_t>{1, cfg.encoding_width()})
      throw ShapeError("field_mlp: octave mask must be (1 x 6L)");
    x = mul(x, broadcast(constant(*octave_mask), {b, cfg.encoding_width()}));
  }
  for (size_t layer = 0; layer < l.w.size(); ++layer) {
    const int64_t out = l.w[layer].value().shape[1];
    x = add(matmul(x, l.w[layer]), broadcast(l.b[layer], {b, out}));
    if (layer + 1 < l.w.size())
      x = cfg.activation == Activation::Relu ? relu(x) : dtomo::sin(x);
  }
  return x;  // identity output: projections are signed after noise
}

/// Full field graph on raw coordinates (B x 3): encode then MLP.
inline Expr field_graph(const FieldConfig& cfg, const FieldLeaves& l, const Expr& coords,
                        const std::optional<Tensor>& octave_mask = std::nullopt) {
  if (coords.value().ndim() != 2 || coords.value().shape[1] != 3)
    throw ShapeError("field_graph: coords must be (B,3)");
  return field_mlp(cfg, l, encode(coords, cfg.frequencies), octave_mask);
}

/// Value-level evaluation (builds a transient graph).
inline Tensor field_eval(const FieldWeights& fw, const Tensor& coords) {
  if (!coords.all_finite()) throw ValueError("field_eval: non-finite coordinates");
  FieldLeaves l = make_leaves(fw, false);
  return field_graph(fw.config, l, constant(coords)).value();
}

// --------------------------------- grids -----------------------------------

/// (N^2 x 2) tensor of sensor coordinates, row-major in (row, column).
inline Tensor sensor_grid(int64_t n) {
  Tensor g = Tensor::zeros({n * n, 2});
  const double h = 2.0 / static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      g[(i * n + j) * 2] = (static_cast<double>(i) + 0.5 - static_cast<double>(n) / 2.0) * h;
      g[(i * n + j) * 2 + 1] = (static_cast<double>(j) + 0.5 - static_cast<double>(n) / 2.0) * h;
    }
  return g;
}

inline double normalize_angle_deg(double theta_deg) { return theta_deg / 180.0; }

/// (M*N^2 x 3) coordinates covering every tilt's sensor grid.
inline Tensor grid_coords(const TiltAngles& angles, int64_t n) {
  const Tensor g = sensor_grid(n);
  const int64_t bpt = n * n;
  Tensor out = Tensor::zeros({angles.count() * bpt, 3});
  for (int64_t m = 0; m < angles.count(); ++m) {
    const double th = normalize_angle_deg(angles.deg[static_cast<size_t>(m)]);
    for (int64_t r = 0; r < bpt; ++r) {
      out[(m * bpt + r) * 3] = th;
      out[(m * bpt + r) * 3 + 1] = g[r * 2];
      out[(m * bpt + r) * 3 + 2] = g[r * 2 + 1];
    }
  }
  return out;
}

/// Samples the field on the N x N sensor grid at one tilt; returns (N,N).
inline Tensor field_grid(const FieldWeights& fw, double theta_deg, int64_t n) {
  const Tensor g = sensor_grid(n);
  Tensor coords = Tensor::zeros({n * n, 3});
  const double th = normalize_angle_deg(theta_deg);
  for (int64_t r = 0; r < n * n; ++r) {
    coords[r * 3] = th;
    coords[r * 3 + 1] = g[r * 2];
    coords[r * 3 + 2] = g[r * 2 + 1];
  }
  Tensor v = field_eval(fw, coords);
  return Tensor({n, n}, std::move(v.data));
}

/// Field sampled at every tilt as a measurement stack (one batched pass).
inline Stack field_grid_stack(const FieldWeights& fw, const TiltAngles& angles, int64_t n) {
  Tensor v = field_eval(fw, grid_coords(angles, n));
  Stack s(angles.count(), n);
  s.data = std::move(v.data);
  return s;
}

}  // namespace dtomo
