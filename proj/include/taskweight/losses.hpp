// Scene/event losses, their focal variants, DWA weight adaptation, and the
// focal-weight diagnostics exported into training trajectories.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "taskweight/autodiff.hpp"
#include "taskweight/common.hpp"
#include "taskweight/tensor.hpp"

namespace taskweight {

struct ConstantWeights {
  double lambda_scene = 1.0;
  double lambda_event = 1.0;

  void validate() const {
    if (!(std::isfinite(lambda_scene) && lambda_scene >= 0.0))
      throw ValidationError("ConstantWeights: lambda_scene must be finite and >= 0");
    if (!(std::isfinite(lambda_event) && lambda_event >= 0.0))
      throw ValidationError("ConstantWeights: lambda_event must be finite and >= 0");
  }
};

struct MflParams {
  double eta = 1.0;    // scene focusing
  double gamma = 1.0;  // event focusing, active cells
  double zeta = 1.0;   // event focusing, inactive cells
  ConstantWeights weights;

  void validate() const {
    weights.validate();
    if (!(std::isfinite(eta) && eta >= 0.0)) throw ValidationError("MflParams: eta must be finite and >= 0");
    if (!(std::isfinite(gamma) && gamma >= 0.0)) throw ValidationError("MflParams: gamma must be finite and >= 0");
    if (!(std::isfinite(zeta) && zeta >= 0.0)) throw ValidationError("MflParams: zeta must be finite and >= 0");
  }
};

// Per-task loss-history state for dynamic weight average. One task per
// scene class plus one per event class (K = N + M), scene tasks first.
struct DwaState {
  std::size_t n_tasks = 0;
  double temperature = 1.0;
  std::vector<double> loss_prev1;  // task losses at epoch t-1
  std::vector<double> loss_prev2;  // task losses at epoch t-2
  std::vector<double> weights;     // lambda_k in effect for epoch t
  std::size_t epoch = 1;           // t
};

inline DwaState make_dwa_state(std::size_t n_tasks, double temperature) {
  if (n_tasks == 0) throw ValidationError("dwa: need at least one task");
  if (!(temperature > 0.0)) throw ValidationError("dwa: temperature must be > 0");
  DwaState s;
  s.n_tasks = n_tasks;
  s.temperature = temperature;
  s.weights.assign(n_tasks, 1.0);
  return s;
}

namespace detail {

inline void check_scene_shapes(const Tensor& y, const Tensor& z) {
  if (!(y.shape == z.shape))
    throw ValidationError("scene loss: posterior " + y.shape_string() + " vs target " +
                          z.shape_string());
  if (y.rank() != 1 && y.rank() != 2)
    throw ValidationError("scene loss: expected (N) or (B,N), got " + y.shape_string());
}

inline void check_one_hot(const Tensor& z) {
  std::size_t n = z.shape.back();
  std::size_t rows = z.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double v = z.data[r * n + i];
      if (v == 1.0)
        ++ones;
      else if (v != 0.0)
        throw ValidationError("scene loss: target is not one-hot");
    }
    if (ones != 1) throw ValidationError("scene loss: target is not one-hot");
  }
}

inline void check_event_shapes(const Tensor& y, const Tensor& z) {
  if (!(y.shape == z.shape))
    throw ValidationError("event loss: posterior " + y.shape_string() + " vs target " +
                          z.shape_string());
  if (y.rank() != 2 && y.rank() != 3)
    throw ValidationError("event loss: expected (L,M) or (B,L,M), got " + y.shape_string());
}

inline void check_binary(const Tensor& z) {
  for (double v : z.data)
    if (v != 0.0 && v != 1.0) throw ValidationError("event loss: target roll is not binary");
}

inline double clamped_log(double v) { return std::log(std::max(v, kPosteriorClamp)); }
inline double clamped_pow(double v, double p) {
  return std::pow(std::max(v, kPosteriorClamp), p);
}

}  // namespace detail

// Eq.-style scene cross-entropy: -sum_n z_n log(y_n). Batched inputs sum
// over the batch; averaging is the trainer's business.
inline Value scene_ce(Graph& g, Value y, const Tensor& z) {
  detail::check_scene_shapes(g.value(y), z);
  detail::check_one_hot(z);
  Value zc = g.constant(z);
  return g.affine(g.reduce_sum(g.mul(zc, g.log(y))), -1.0, 0.0);
}

// Binary cross-entropy over the event roll:
// -sum_{l,m} [ z log(y) + (1-z) log(1-y) ].
inline Value event_bce(Graph& g, Value y, const Tensor& z) {
  detail::check_event_shapes(g.value(y), z);
  detail::check_binary(z);
  Value zc = g.constant(z);
  Value active = g.mul(zc, g.log(y));
  Value inactive = g.mul(g.affine(zc, -1.0, 1.0), g.log(g.affine(y, -1.0, 1.0)));
  return g.affine(g.reduce_sum(g.add(active, inactive)), -1.0, 0.0);
}

// lambda1 * L_scene + lambda2 * L_event with constant weights.
inline Value mtl_constant_loss(Graph& g, Value scene_loss, Value event_loss,
                               const ConstantWeights& w) {
  w.validate();
  if (!g.value(scene_loss).all_finite() || !g.value(event_loss).all_finite())
    throw NumericError("mtl_constant_loss: non-finite task loss");
  return g.add(g.affine(scene_loss, w.lambda_scene, 0.0),
               g.affine(event_loss, w.lambda_event, 0.0));
}

// Focal scene loss: -sum_n (1-y_n)^eta z_n log(y_n). eta = 0 reduces to
// scene_ce exactly (the focal factor is exactly 1.0).
inline Value scene_focal(Graph& g, Value y, const Tensor& z, double eta) {
  detail::check_scene_shapes(g.value(y), z);
  detail::check_one_hot(z);
  if (!(std::isfinite(eta) && eta >= 0.0)) throw ValidationError("scene_focal: bad eta");
  Value zc = g.constant(z);
  Value focus = g.pow(g.affine(y, -1.0, 1.0), eta);
  return g.affine(g.reduce_sum(g.mul(focus, g.mul(zc, g.log(y)))), -1.0, 0.0);
}

// Focal event loss:
// -sum_{l,m} [ (1-y)^gamma z log(y) + y^zeta (1-z) log(1-y) ].
inline Value event_focal(Graph& g, Value y, const Tensor& z, double gamma, double zeta) {
  detail::check_event_shapes(g.value(y), z);
  detail::check_binary(z);
  if (!(std::isfinite(gamma) && gamma >= 0.0)) throw ValidationError("event_focal: bad gamma");
  if (!(std::isfinite(zeta) && zeta >= 0.0)) throw ValidationError("event_focal: bad zeta");
  Value zc = g.constant(z);
  Value one_minus_y = g.affine(y, -1.0, 1.0);
  Value active = g.mul(g.pow(one_minus_y, gamma), g.mul(zc, g.log(y)));
  Value inactive =
      g.mul(g.pow(y, zeta), g.mul(g.affine(zc, -1.0, 1.0), g.log(one_minus_y)));
  return g.affine(g.reduce_sum(g.add(active, inactive)), -1.0, 0.0);
}

// Multi-focal MTL objective: the focal losses combined with the constant
// weights of the plain MTL loss.
inline Value mfl_loss(Graph& g, Value y_scene, const Tensor& z_scene, Value y_event,
                      const Tensor& z_event, const MflParams& p) {
  p.validate();
  Value ls = scene_focal(g, y_scene, z_scene, p.eta);
  Value le = event_focal(g, y_event, z_event, p.gamma, p.zeta);
  return mtl_constant_loss(g, ls, le, p.weights);
}

// Recomputes DWA weights from the loss-rate history. The first two epochs
// bootstrap with w_k = 1 (so all weights stay 1); afterwards
// w_k = L_k(t-1)/L_k(t-2) and lambda = K softmax(w/T). Histories near zero
// also fall back to w_k = 1 (the ratio is undefined for a vanished task).
inline DwaState dwa_update(DwaState state, const std::vector<double>& epoch_losses) {
  if (!(state.temperature > 0.0)) throw ValidationError("dwa_update: temperature must be > 0");
  if (epoch_losses.size() != state.n_tasks)
    throw ValidationError("dwa_update: expected " + std::to_string(state.n_tasks) +
                          " task losses, got " + std::to_string(epoch_losses.size()));
  for (double v : epoch_losses)
    if (!std::isfinite(v) || v < 0.0)
      throw ValidationError("dwa_update: task losses must be finite and non-negative");

  state.loss_prev2 = std::move(state.loss_prev1);
  state.loss_prev1 = epoch_losses;
  state.epoch += 1;

  std::vector<double> w(state.n_tasks, 1.0);
  if (state.epoch >= 3) {
    for (std::size_t k = 0; k < state.n_tasks; ++k)
      if (state.loss_prev2[k] >= 1e-12) w[k] = state.loss_prev1[k] / state.loss_prev2[k];
  }
  double m = *std::max_element(w.begin(), w.end());
  double denom = 0.0;
  for (double v : w) denom += std::exp((v - m) / state.temperature);
  const double k_tasks = static_cast<double>(state.n_tasks);
  for (std::size_t k = 0; k < state.n_tasks; ++k)
    state.weights[k] = k_tasks * std::exp((w[k] - m) / state.temperature) / denom;
  return state;
}

struct DwaLossResult {
  Value total;
  // Unweighted per-task losses (scene classes first, then event classes),
  // summed over the batch; these feed the next dwa_update after epoch
  // averaging.
  std::vector<double> per_task;
};

// Per-class weighted MTL loss:
// -sum_n lambda_n z_n log(y_n) - sum_{l,m} lambda_m [z log(y) + (1-z) log(1-y)].
inline DwaLossResult dwa_loss(Graph& g, Value y_scene, const Tensor& z_scene, Value y_event,
                              const Tensor& z_event, const DwaState& state) {
  const Tensor& ys = g.value(y_scene);
  const Tensor& ye = g.value(y_event);
  detail::check_scene_shapes(ys, z_scene);
  detail::check_one_hot(z_scene);
  detail::check_event_shapes(ye, z_event);
  detail::check_binary(z_event);
  std::size_t n_scenes = ys.shape.back();
  std::size_t n_events = ye.shape.back();
  if (state.n_tasks != n_scenes + n_events)
    throw ValidationError("dwa_loss: state has " + std::to_string(state.n_tasks) +
                          " tasks but N+M = " + std::to_string(n_scenes + n_events));

  Tensor lam_scene({n_scenes});
  Tensor lam_event({n_events});
  for (std::size_t n = 0; n < n_scenes; ++n) lam_scene.data[n] = state.weights[n];
  for (std::size_t m = 0; m < n_events; ++m) lam_event.data[m] = state.weights[n_scenes + m];

  std::vector<std::size_t> ls_shape(ys.rank(), 1);
  ls_shape.back() = n_scenes;
  Value lam_s = g.broadcast(g.reshape(g.constant(lam_scene), ls_shape), ys.shape);
  std::vector<std::size_t> le_shape(ye.rank(), 1);
  le_shape.back() = n_events;
  Value lam_e = g.broadcast(g.reshape(g.constant(lam_event), le_shape), ye.shape);

  Value zc_s = g.constant(z_scene);
  Value scene_terms = g.mul(lam_s, g.mul(zc_s, g.log(y_scene)));
  Value scene_part = g.affine(g.reduce_sum(scene_terms), -1.0, 0.0);

  Value zc_e = g.constant(z_event);
  Value active = g.mul(zc_e, g.log(y_event));
  Value inactive = g.mul(g.affine(zc_e, -1.0, 1.0), g.log(g.affine(y_event, -1.0, 1.0)));
  Value event_part = g.affine(g.reduce_sum(g.mul(lam_e, g.add(active, inactive))), -1.0, 0.0);

  DwaLossResult result;
  result.total = g.add(scene_part, event_part);

  // Unweighted per-class losses straight from the tensor values.
  result.per_task.assign(state.n_tasks, 0.0);
  {
    std::size_t rows = ys.size() / n_scenes;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t n = 0; n < n_scenes; ++n) {
        double z = z_scene.data[r * n_scenes + n];
        if (z != 0.0)
          result.per_task[n] -= z * detail::clamped_log(ys.data[r * n_scenes + n]);
      }
    std::size_t cells = ye.size() / n_events;
    for (std::size_t c = 0; c < cells; ++c)
      for (std::size_t m = 0; m < n_events; ++m) {
        double z = z_event.data[c * n_events + m];
        double y = ye.data[c * n_events + m];
        result.per_task[n_scenes + m] -=
            z * detail::clamped_log(y) + (1.0 - z) * detail::clamped_log(1.0 - y);
      }
  }
  return result;
}

// The focal-weight averages tracked while training with MFL.
struct MflDiagnostics {
  double scene_avg = 0.0;
  double event_active_avg = 0.0;
  double event_inactive_avg = 0.0;
  std::vector<double> per_event_avg;
};

// The averages exactly as printed: (1/N) sum_n (1-y_n)^eta,
// (1/(LM)) sum_{l,m} (1-y)^gamma, (1/(LM)) sum_{l,m} y^zeta and the
// per-event (1/L) sum_l (1-y_{l,m})^gamma. Sums run over every cell,
// irrespective of the targets; batched inputs pool over the batch too.
inline MflDiagnostics mfl_weight_diagnostics(const Tensor& y_scene, const Tensor& y_event,
                                             const MflParams& p) {
  p.validate();
  MflDiagnostics d;
  // unlike the losses, the diagnostics take the powers unclamped: for
  // y in (0,1) they are finite, and saturated posteriors should be visible
  // in the trajectory rather than floored
  for (double v : y_scene.data) d.scene_avg += std::pow(1.0 - v, p.eta);
  d.scene_avg /= static_cast<double>(y_scene.size());

  std::size_t n_events = y_event.shape.back();
  d.per_event_avg.assign(n_events, 0.0);
  std::size_t cells = y_event.size() / n_events;
  for (std::size_t c = 0; c < cells; ++c)
    for (std::size_t m = 0; m < n_events; ++m) {
      double v = y_event.data[c * n_events + m];
      double wa = std::pow(1.0 - v, p.gamma);
      d.event_active_avg += wa;
      d.event_inactive_avg += std::pow(v, p.zeta);
      d.per_event_avg[m] += wa;
    }
  d.event_active_avg /= static_cast<double>(y_event.size());
  d.event_inactive_avg /= static_cast<double>(y_event.size());
  for (double& v : d.per_event_avg) v /= static_cast<double>(cells);
  return d;
}

// Masked variant: the same focal factors averaged only over the cells the
// labels point at — the true scene class, active event cells for the
// (1-y)^gamma average, inactive cells for the y^zeta average. An empty mask
// yields 0 for that entry. This is the variant the trainer logs.
inline MflDiagnostics mfl_weight_diagnostics_masked(const Tensor& y_scene,
                                                    const Tensor& z_scene,
                                                    const Tensor& y_event,
                                                    const Tensor& z_event,
                                                    const MflParams& p) {
  p.validate();
  detail::check_scene_shapes(y_scene, z_scene);
  detail::check_event_shapes(y_event, z_event);
  MflDiagnostics d;
  double scene_count = 0.0;
  for (std::size_t i = 0; i < y_scene.size(); ++i)
    if (z_scene.data[i] != 0.0) {
      d.scene_avg += std::pow(1.0 - y_scene.data[i], p.eta);
      scene_count += 1.0;
    }
  if (scene_count > 0.0) d.scene_avg /= scene_count;

  std::size_t n_events = y_event.shape.back();
  d.per_event_avg.assign(n_events, 0.0);
  std::vector<double> per_event_count(n_events, 0.0);
  double active_count = 0.0, inactive_count = 0.0;
  std::size_t cells = y_event.size() / n_events;
  for (std::size_t c = 0; c < cells; ++c)
    for (std::size_t m = 0; m < n_events; ++m) {
      double y = y_event.data[c * n_events + m];
      if (z_event.data[c * n_events + m] != 0.0) {
        double wa = std::pow(1.0 - y, p.gamma);
        d.event_active_avg += wa;
        d.per_event_avg[m] += wa;
        per_event_count[m] += 1.0;
        active_count += 1.0;
      } else {
        d.event_inactive_avg += std::pow(y, p.zeta);
        inactive_count += 1.0;
      }
    }
  if (active_count > 0.0) d.event_active_avg /= active_count;
  if (inactive_count > 0.0) d.event_inactive_avg /= inactive_count;
  for (std::size_t m = 0; m < n_events; ++m)
    if (per_event_count[m] > 0.0) d.per_event_avg[m] /= per_event_count[m];
  return d;
}

}  // namespace taskweight
