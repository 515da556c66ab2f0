#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dtomo/adam.hpp"
#include "dtomo/autodiff.hpp"
#include "dtomo/fbp.hpp"
#include "dtomo/field.hpp"
#include "dtomo/geometry.hpp"

namespace dtomo {

// ---------------------------------------------------------------------------
// Joint minimization of
//   lambda1 * L_data + lambda2 * L_op + L_reg
// over field weights and per-tilt deformation parameters.
//   L_data = sum_m || f(theta_m, T_phi_m(X)) - y_m ||^2        (pull-back)
//   L_op   = || g - A A† g ||^2, g = field on the undeformed grid
//   L_reg  = lambda_theta * TV along tilts + lambda_x * spatial TV on g
// Deformations are parameterized internally as (shift1_px, shift2_px,
// shear_percent, rot_deg) so one learning rate moves all four at a
// comparable resolution; conversions to normalized units happen in-graph.
//
// The encoding octaves follow a coarse-to-fine schedule (octave_alpha_at):
// high-frequency Fourier features shrink the basin of attraction of the
// deformation parameters to a fraction of a pixel, so registration from
// multi-pixel initial errors only succeeds when early iterations see a
// low-pass view of the field. Octaves blend in smoothly over the first part
// of the run and the schedule ends well before the iteration budget, leaving
// the full-resolution field time to converge.
// ---------------------------------------------------------------------------

struct TrainConfig {
  FieldConfig field;
  double lambda1 = 10.0;
  double lambda2 = 1.0;
  double lambda_theta = 1e-5;
  double lambda_x = 1e-5;
  int64_t iterations = 1500;
  double lr_field = 1e-3;
  double lr_deform = 1e-2;
  DeformationBounds bounds{10.0, 0.10, 10.0};
  uint64_t seed = 0;
  int64_t warmup_op = 0;    // L_op participates from this iteration on
  double subsample = 1.0;   // fraction of sensor pixels per tilt in L_data
  bool optimize_deformations = true;

  void validate() const {
    field.validate();
    if (lambda1 < 0 || lambda2 < 0 || lambda_theta < 0 || lambda_x < 0)
      throw ValueError("TrainConfig: loss weights must be nonnegative");
    if (iterations < 0) throw ValueError("TrainConfig: iterations must be >= 0");
    if (subsample <= 0.0 || subsample > 1.0)
      throw ValueError("TrainConfig: subsample must be in (0, 1]");
  }
};

struct TrainResult {
  FieldWeights weights;
  std::vector<DeformationParams> deformations;
  struct LossRow {
    double data = 0, op = 0, reg = 0, total = 0;
  };
  std::vector<LossRow> history;
  double wall_seconds = 0;
};

// --------------------------- octave schedule --------------------------------

/// Coarse-to-fine schedule: alpha rises linearly from 1 (base octave only)
/// to L (all octaves) over the first min(600, ceil(iterations/2)) iterations.
inline double octave_alpha_at(int64_t iteration, int64_t total_iterations, int64_t frequencies) {
  const int64_t horizon = std::min<int64_t>(600, (total_iterations + 1) / 2);
  if (horizon <= 0 || iteration >= horizon) return static_cast<double>(frequencies);
  const double t = static_cast<double>(iteration) / static_cast<double>(horizon);
  return 1.0 + (static_cast<double>(frequencies) - 1.0) * t;
}

/// Mask for octave_alpha_at, or nullopt once every octave is fully active.
inline std::optional<Tensor> octave_mask_at(int64_t iteration, int64_t total_iterations,
                                            int64_t frequencies) {
  const double alpha = octave_alpha_at(iteration, total_iterations, frequencies);
  if (alpha >= static_cast<double>(frequencies)) return std::nullopt;
  return encode_octave_mask(frequencies, alpha);
}

// ----------------------- internal phi parameterization ---------------------

inline Tensor phi_tensor_from_params(const std::vector<DeformationParams>& ps) {
  Tensor t = Tensor::zeros({static_cast<int64_t>(ps.size()), 4});
  for (size_t m = 0; m < ps.size(); ++m) {
    t[static_cast<int64_t>(m) * 4 + 0] = ps[m].shift1_px;
    t[static_cast<int64_t>(m) * 4 + 1] = ps[m].shift2_px;
    t[static_cast<int64_t>(m) * 4 + 2] = ps[m].shear * 100.0;
    t[static_cast<int64_t>(m) * 4 + 3] = ps[m].rot_deg;
  }
  return t;
}

inline std::vector<DeformationParams> params_from_phi_tensor(const Tensor& t) {
  std::vector<DeformationParams> ps(static_cast<size_t>(t.shape[0]));
  for (int64_t m = 0; m < t.shape[0]; ++m) {
    ps[static_cast<size_t>(m)].shift1_px = t[m * 4 + 0];
    ps[static_cast<size_t>(m)].shift2_px = t[m * 4 + 1];
    ps[static_cast<size_t>(m)].shear = t[m * 4 + 2] / 100.0;
    ps[static_cast<size_t>(m)].rot_deg = t[m * 4 + 3];
  }
  return ps;
}

// ----------------------------- objective builder ----------------------------

/// Precomputes everything constant across iterations (grid coordinates,
/// encoded grid features, measurement targets, the A A† pipeline) and builds
/// the per-iteration loss graphs.
class ObjectiveBuilder {
 public:
  ObjectiveBuilder(const TiltSeries& ts, const TrainConfig& cfg)
      : cfg_(cfg), angles_(ts.angles), n_(ts.stack.n), m_(ts.stack.m) {
    cfg_.validate();
    if (ts.stack.m != angles_.count())
      throw ShapeError("ObjectiveBuilder: stack/angle count mismatch");
    const Tensor grid = sensor_grid(n_);
    const int64_t bpt = n_ * n_;
    Tensor x1 = Tensor::zeros({bpt, 1}), x2 = Tensor::zeros({bpt, 1});
    for (int64_t r = 0; r < bpt; ++r) {
      x1[r] = grid[r * 2];
      x2[r] = grid[r * 2 + 1];
    }
    x1_full_ = constant(x1);
    x2_full_ = constant(x2);
    y_full_ = constant(Tensor({m_ * bpt, 1}, ts.stack.data));
    for (int64_t mi = 0; mi < m_; ++mi)
      theta_full_.push_back(constant(Tensor::full(
          {bpt, 1}, normalize_angle_deg(angles_.deg[static_cast<size_t>(mi)]))));

    const bool needs_grid = cfg_.lambda2 > 0 || cfg_.lambda_theta > 0 || cfg_.lambda_x > 0;
    if (needs_grid)
      grid_features_ = constant(encode(constant(grid_coords(angles_, n_)),
                                       cfg_.field.frequencies).value());
    if (cfg_.lambda2 > 0) pipeline_ = std::make_shared<OpPipeline>(n_, angles_);

    grid_values_ = grid;
    stack_values_ = ts.stack.data;
  }

  int64_t sensor_size() const { return n_; }
  int64_t tilt_count() const { return m_; }
  const TiltAngles& angles() const { return angles_; }

  /// Pull-back data term. `rows`, if nonempty, holds per-tilt pixel subsets
  /// (all tilts share the index list layout: rows[m] are row indices into
  /// the N^2 sensor grid of tilt m).
  Expr data_term(const FieldLeaves& leaves, const Expr& phi,
                 const std::vector<std::vector<int32_t>>& rows = {},
                 const std::optional<Tensor>& octave_mask = std::nullopt) const {
    if (phi.value().ndim() != 2 || phi.value().shape[0] != m_ || phi.value().shape[1] != 4)
      throw ShapeError("data_term: phi must be (M,4)");
    const bool use_subset = !rows.empty();
    std::vector<Expr> blocks;
    blocks.reserve(static_cast<size_t>(m_));
    std::vector<Expr> targets;
    const int64_t bpt = n_ * n_;
    for (int64_t mi = 0; mi < m_; ++mi) {
      Expr x1 = x1_full_, x2 = x2_full_, th = theta_full_[static_cast<size_t>(mi)];
      if (use_subset) {
        const auto& idx = rows[static_cast<size_t>(mi)];
        const int64_t bs = static_cast<int64_t>(idx.size());
        Tensor x1t = Tensor::zeros({bs, 1}), x2t = Tensor::zeros({bs, 1}),
               yt = Tensor::zeros({bs, 1});
        for (int64_t r = 0; r < bs; ++r) {
          x1t[r] = grid_values_[idx[static_cast<size_t>(r)] * 2];
          x2t[r] = grid_values_[idx[static_cast<size_t>(r)] * 2 + 1];
          yt[r] = stack_values_[static_cast<size_t>(mi * bpt + idx[static_cast<size_t>(r)])];
        }
        x1 = constant(x1t);
        x2 = constant(x2t);
        th = constant(Tensor::full({bs, 1},
                                   normalize_angle_deg(angles_.deg[static_cast<size_t>(mi)])));
        targets.push_back(constant(yt));
      }
      const int64_t b = x1.value().shape[0];
      // per-tilt scalars from the phi leaf, converted to graph units
      Expr row = slice(phi, 0, mi, mi + 1);
      Expr s1 = scale(slice(row, 1, 0, 1), 2.0 / static_cast<double>(n_));
      Expr s2 = scale(slice(row, 1, 1, 2), 2.0 / static_cast<double>(n_));
      Expr k = scale(slice(row, 1, 2, 3), 0.01);
      Expr a = scale(slice(row, 1, 3, 4), kPi / 180.0);
      Expr c = broadcast(dtomo::cos(a), {b, 1});
      Expr s = broadcast(dtomo::sin(a), {b, 1});
      Expr kb = broadcast(k, {b, 1});
      Expr sh1 = broadcast(s1, {b, 1});
      Expr sh2 = broadcast(s2, {b, 1});
      // T(x) = Rot(a) * Shear(k) * x + s_norm
      Expr x1s = add(x1, mul(kb, x2));
      Expr u = add(sub(mul(c, x1s), mul(s, x2)), sh1);
      Expr v = add(add(mul(s, x1s), mul(c, x2)), sh2);
      blocks.push_back(concat({th, u, v}, 1));
    }
    Expr coords = concat(blocks, 0);
    Expr pred = field_graph(cfg_.field, leaves, coords, octave_mask);
    Expr y = use_subset ? concat(targets, 0) : y_full_;
    return sum(square(sub_expr(pred, y)));
  }

  /// Field evaluated on the undeformed grid of every tilt, shaped (M,N,N).
  Expr grid_term(const FieldLeaves& leaves,
                 const std::optional<Tensor>& octave_mask = std::nullopt) const {
    Expr flat = field_mlp(cfg_.field, leaves, grid_features_, octave_mask);
    return reshape(flat, {m_, n_, n_});
  }

  Expr op_term(const Expr& g) const {
    auto p = pipeline_;
    if (!p) throw ValueError("op_term: pipeline not built (lambda2 was 0)");
    return sum(square(custom_linear(
        g, [p](const Tensor& t) { return p->residual(t); },
        [p](const Tensor& t) { return p->residual_vjp(t); }, "op_residual")));
  }

  Expr reg_term(const Expr& g) const {
    std::vector<Expr> parts;
    if (cfg_.lambda_theta > 0 && m_ > 1)
      parts.push_back(scale(sum(abs(sub_expr(slice(g, 0, 1, m_), slice(g, 0, 0, m_ - 1)))),
                            cfg_.lambda_theta));
    if (cfg_.lambda_x > 0) {
      parts.push_back(scale(sum(abs(sub_expr(slice(g, 1, 1, n_), slice(g, 1, 0, n_ - 1)))),
                            cfg_.lambda_x));
      parts.push_back(scale(sum(abs(sub_expr(slice(g, 2, 1, n_), slice(g, 2, 0, n_ - 1)))),
                            cfg_.lambda_x));
    }
    if (parts.empty()) return constant(Tensor::scalar(0.0));
    Expr acc = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return acc;
  }

  struct Terms {
    Expr total, data, op, reg;
    bool has_op = false, has_reg = false;
  };

  /// Assembles lambda1*L_data + lambda2*L_op + L_reg; lambda2 acts as 0
  /// before the warm-up iteration. Both the data term and the grid view of
  /// the field see the same octave mask so every loss term describes one
  /// consistent (possibly low-passed) field. The coarse-to-fine schedule only
  /// serves deformation registration, so pure field fits skip it and train at
  /// full resolution from the first step.
  Terms build(const FieldLeaves& leaves, const Expr& phi, int64_t iteration,
              const std::vector<std::vector<int32_t>>& rows = {}) const {
    const std::optional<Tensor> mask =
        cfg_.optimize_deformations
            ? octave_mask_at(iteration, cfg_.iterations, cfg_.field.frequencies)
            : std::nullopt;
    Terms t;
    t.data = data_term(leaves, phi, rows, mask);
    t.total = scale(t.data, cfg_.lambda1);
    const bool want_op = cfg_.lambda2 > 0 && iteration >= cfg_.warmup_op;
    const bool want_reg = cfg_.lambda_theta > 0 || cfg_.lambda_x > 0;
    if (want_op || want_reg) {
      Expr g = grid_term(leaves, mask);
      if (want_op) {
        t.op = op_term(g);
        t.has_op = true;
        t.total = add(t.total, scale(t.op, cfg_.lambda2));
      }
      if (want_reg) {
        t.reg = reg_term(g);
        t.has_reg = true;
        t.total = add(t.total, t.reg);
      }
    }
    return t;
  }

 private:
  static Expr sub_expr(const Expr& a, const Expr& b) { return sub(a, b); }

  TrainConfig cfg_;
  TiltAngles angles_;
  int64_t n_, m_;
  Expr x1_full_, x2_full_, y_full_;
  std::vector<Expr> theta_full_;
  Expr grid_features_;
  Tensor grid_values_;
  std::vector<double> stack_values_;
  std::shared_ptr<OpPipeline> pipeline_;
};

// --------------------------- standalone loss views --------------------------

inline Expr loss_data(const FieldConfig& field, const FieldLeaves& leaves, const Expr& phi,
                      const TiltSeries& ts) {
  TrainConfig cfg;
  cfg.field = field;
  cfg.lambda2 = 0.0;
  cfg.lambda_theta = 0.0;
  cfg.lambda_x = 0.0;
  return ObjectiveBuilder(ts, cfg).data_term(leaves, phi);
}

inline Expr loss_op(const FieldConfig& field, const FieldLeaves& leaves,
                    const TiltAngles& angles, int64_t n) {
  TrainConfig cfg;
  cfg.field = field;
  TiltSeries ts;
  ts.angles = angles;
  ts.stack = Stack(angles.count(), n);
  ObjectiveBuilder b(ts, cfg);
  return b.op_term(b.grid_term(leaves));
}

inline Expr loss_reg(const FieldConfig& field, const FieldLeaves& leaves,
                     const TiltAngles& angles, int64_t n, double lambda_theta,
                     double lambda_x) {
  TrainConfig cfg;
  cfg.field = field;
  cfg.lambda2 = 0.0;
  cfg.lambda_theta = lambda_theta;
  cfg.lambda_x = lambda_x;
  if (lambda_theta <= 0 && lambda_x <= 0) return constant(Tensor::scalar(0.0));
  TiltSeries ts;
  ts.angles = angles;
  ts.stack = Stack(angles.count(), n);
  ObjectiveBuilder b(ts, cfg);
  return b.reg_term(b.grid_term(leaves));
}

inline Expr objective(const ObjectiveBuilder& builder, const FieldLeaves& leaves,
                      const Expr& phi, int64_t iteration) {
  return builder.build(leaves, phi, iteration).total;
}

// --------------------------------- training ---------------------------------

inline TrainResult train(const TiltSeries& ts, const TrainConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const int64_t n = ts.stack.n, m = ts.stack.m;

  FieldWeights fw = field_init(cfg.field, derive_seed(cfg.seed, 0));
  Tensor phi = Tensor::zeros({m, 4});
  ObjectiveBuilder builder(ts, cfg);

  std::vector<AdamState> w_state, b_state;
  for (const auto& t : fw.w) w_state.emplace_back(t.shape);
  for (const auto& t : fw.b) b_state.emplace_back(t.shape);
  AdamState phi_state(phi.shape);
  const AdamConfig field_adam{cfg.lr_field, 0.9, 0.999, 1e-8};
  const AdamConfig deform_adam{cfg.lr_deform, 0.9, 0.999, 1e-8};

  Rng subsample_rng(derive_seed(cfg.seed, 1));
  const int64_t bpt = n * n;
  const int64_t bs = cfg.subsample < 1.0
                         ? std::max<int64_t>(1, static_cast<int64_t>(std::llround(
                               cfg.subsample * static_cast<double>(bpt))))
                         : bpt;

  // Box bounds in internal units (pixels, percent, degrees).
  const double box[4] = {cfg.bounds.shift_px, cfg.bounds.shift_px, cfg.bounds.shear * 100.0,
                         cfg.bounds.rot_deg};

  TrainResult res;
  res.history.reserve(static_cast<size_t>(cfg.iterations));

  std::vector<int32_t> perm(static_cast<size_t>(bpt));
  for (int64_t it = 0; it < cfg.iterations; ++it) {
    std::vector<std::vector<int32_t>> rows;
    if (bs < bpt) {
      rows.resize(static_cast<size_t>(m));
      for (auto& r : rows) {
        std::iota(perm.begin(), perm.end(), 0);
        for (int64_t i = 0; i < bs; ++i) {
          const int64_t j = i + static_cast<int64_t>(subsample_rng.next_u64() %
                                                     static_cast<uint64_t>(bpt - i));
          std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
        }
        r.assign(perm.begin(), perm.begin() + bs);
      }
    }

    FieldLeaves leaves = make_leaves(fw);
    Expr phi_leaf = leaf(phi, cfg.optimize_deformations);
    auto terms = builder.build(leaves, phi_leaf, it, rows);

    TrainResult::LossRow row;
    row.data = terms.data.value()[0];
    row.op = terms.has_op ? terms.op.value()[0] : 0.0;
    row.reg = terms.has_reg ? terms.reg.value()[0] : 0.0;
    row.total = terms.total.value()[0];
    auto check = [&](double v, const char* name) {
      if (!std::isfinite(v))
        throw NonFiniteError("training: non-finite " + std::string(name) +
                             " at iteration " + std::to_string(it));
    };
    check(row.data, "L_data");
    check(row.op, "L_op");
    check(row.reg, "L_reg");
    res.history.push_back(row);

    backward(terms.total);
    for (size_t li = 0; li < fw.w.size(); ++li) {
      if (leaves.w[li].node->grad.numel())
        adam_step(fw.w[li], leaves.w[li].node->grad, w_state[li], field_adam);
      if (leaves.b[li].node->grad.numel())
        adam_step(fw.b[li], leaves.b[li].node->grad, b_state[li], field_adam);
    }
    if (cfg.optimize_deformations && phi_leaf.node->grad.numel()) {
      adam_step(phi, phi_leaf.node->grad, phi_state, deform_adam);
      for (int64_t mi = 0; mi < m; ++mi)
        for (int col = 0; col < 4; ++col) {
          double& v = phi[mi * 4 + col];
          v = std::clamp(v, -box[col], box[col]);
        }
    }
  }

  res.weights = fw;
  res.deformations = params_from_phi_tensor(phi);
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

/// Final tomogram: filtered backprojection of the field sampled at the
/// acquisition angles.
inline Volume extract_tomogram(const FieldWeights& fw, const TiltAngles& angles, int64_t n) {
  return fbp_reconstruct(field_grid_stack(fw, angles, n), angles, n);
}

}  // namespace dtomo
