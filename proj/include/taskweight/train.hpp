// Optimization loop: RAdam updates, per-epoch weight adaptation, feature
// standardization, and trajectory logging.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "taskweight/common.hpp"
#include "taskweight/features.hpp"
#include "taskweight/losses.hpp"
#include "taskweight/model.hpp"

namespace taskweight {

enum class Strategy { Constant, Dwa, Mfl };

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Constant: return "constant";
    case Strategy::Dwa: return "dwa";
    case Strategy::Mfl: return "mfl";
  }
  return "constant";
}

inline Strategy parse_strategy(const std::string& name) {
  if (name == "constant") return Strategy::Constant;
  if (name == "dwa") return Strategy::Dwa;
  if (name == "mfl") return Strategy::Mfl;
  throw ValidationError("strategy: expected constant|dwa|mfl, got '" + name + "'");
}

struct TrainConfig {
  Strategy strategy = Strategy::Constant;
  ConstantWeights constant_weights;  // constant strategy
  MflParams mfl;                     // mfl strategy
  double dwa_temperature = 1.0;      // dwa strategy
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool standardize = false;
  double clip_grad_norm = 0.0;  // 0 disables clipping

  void validate() const {
    if (epochs < 1) throw ValidationError("TrainConfig.epochs: must be >= 1");
    if (batch_size < 1) throw ValidationError("TrainConfig.batch_size: must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("TrainConfig.learning_rate: must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ValidationError("TrainConfig: betas must lie in [0,1)");
    if (!(dwa_temperature > 0.0))
      throw ValidationError("TrainConfig.dwa_temperature: must be > 0");
    if (clip_grad_norm < 0.0)
      throw ValidationError("TrainConfig.clip_grad_norm: must be >= 0");
    constant_weights.validate();
    mfl.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double total_loss = 0.0;
  double scene_loss = 0.0;  // raw (unweighted) scene cross-entropy, batch mean
  double event_loss = 0.0;  // raw event binary cross-entropy, batch mean
  std::vector<double> dwa_lambdas;  // weights in effect this epoch (dwa only)
  MflDiagnostics mfl;               // masked focal averages, last batch (mfl only)
  double wall_seconds = 0.0;
};

struct TrajectoryLog {
  Strategy strategy = Strategy::Constant;
  std::vector<std::string> scene_labels;
  std::vector<std::string> event_labels;
  std::vector<EpochRecord> records;
};

// ---- RAdam ------------------------------------------------------------------

struct RAdamState {
  std::vector<Tensor> m;  // first moments, one per parameter tensor
  std::vector<Tensor> v;  // second moments
  std::size_t step = 0;
};

// Variance-rectified Adam. While the rectification term's degrees of
// freedom stay <= 4 the update falls back to plain bias-corrected momentum
// SGD; afterwards the rectified adaptive step applies.
inline void radam_step(std::vector<NamedParam>& params, const std::vector<Tensor>& grads,
                       RAdamState& state, double lr, double beta1, double beta2,
                       double epsilon) {
  if (grads.size() != params.size())
    throw ValidationError("radam_step: gradient count mismatch");
  if (state.m.empty()) {
    for (const NamedParam& p : params) {
      state.m.push_back(Tensor(p.value.shape));
      state.v.push_back(Tensor(p.value.shape));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!grads[i].all_finite())
      throw NumericError("radam_step: non-finite gradient for " + params[i].name);

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double beta1_t = std::pow(beta1, t);
  const double beta2_t = std::pow(beta2, t);
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t);
  const double bias1 = 1.0 - beta1_t;

  const bool rectified = rho_t > 4.0;
  double step_size;
  if (rectified) {
    double r = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                         ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    step_size = lr * r * std::sqrt(1.0 - beta2_t) / bias1;
  } else {
    step_size = lr / bias1;
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].value.data.data();
    double* m = state.m[i].data.data();
    double* v = state.v[i].data.data();
    const double* gr = grads[i].data.data();
    std::size_t n = params[i].value.size();
    for (std::size_t j = 0; j < n; ++j) {
      double gj = gr[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
      v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
      if (rectified)
        p[j] -= step_size * m[j] / (std::sqrt(v[j]) + epsilon);
      else
        p[j] -= step_size * m[j];
    }
  }
}

// ---- feature standardization --------------------------------------------------

// Per-mel-bin zero mean / unit variance. Without supplied stats they are
// computed from the given clips (the development set); variance is floored
// at 1e-8 so constant bins map to zero.
inline FeatureStats standardize_features(std::vector<ClipFeatures>& clips,
                                         const std::optional<FeatureStats>& given = {}) {
  if (clips.empty()) throw ValidationError("standardize_features: no clips");
  std::size_t d = clips.front().features.shape[0];
  FeatureStats stats;
  if (given) {
    if (given->mean.size() != d || given->stdev.size() != d)
      throw ValidationError("standardize_features: stats dimension mismatch");
    stats = *given;
  } else {
    Tensor mean({d}), var({d});
    double count = 0.0;
    for (const ClipFeatures& c : clips) {
      if (c.features.shape[0] != d)
        throw ValidationError("standardize_features: inconsistent mel dimension");
      count += static_cast<double>(c.features.shape[1]);
    }
    for (const ClipFeatures& c : clips) {
      std::size_t l = c.features.shape[1];
      for (std::size_t i = 0; i < d; ++i) {
        const double* row = c.features.data.data() + i * l;
        for (std::size_t j = 0; j < l; ++j) mean.data[i] += row[j];
      }
    }
    for (std::size_t i = 0; i < d; ++i) mean.data[i] /= count;
    for (const ClipFeatures& c : clips) {
      std::size_t l = c.features.shape[1];
      for (std::size_t i = 0; i < d; ++i) {
        const double* row = c.features.data.data() + i * l;
        for (std::size_t j = 0; j < l; ++j) {
          double dlt = row[j] - mean.data[i];
          var.data[i] += dlt * dlt;
        }
      }
    }
    stats.mean = mean;
    stats.stdev = Tensor({d});
    for (std::size_t i = 0; i < d; ++i)
      stats.stdev.data[i] = std::sqrt(std::max(var.data[i] / count, 1e-8));
  }
  for (ClipFeatures& c : clips) {
    std::size_t l = c.features.shape[1];
    for (std::size_t i = 0; i < d; ++i) {
      double* row = c.features.data.data() + i * l;
      for (std::size_t j = 0; j < l; ++j) row[j] = (row[j] - stats.mean.data[i]) / stats.stdev.data[i];
    }
  }
  return stats;
}

// ---- fit ----------------------------------------------------------------------

namespace detail {

struct Batch {
  Tensor input;    // (B, 1, L, D)
  Tensor z_scene;  // (B, N) one-hot
  Tensor z_event;  // (B, L, M)
};

// Clips in a batch must agree on L; mixed-length batches are truncated to
// the shortest clip (synthetic corpora are equal-length, ingested data may
// not be).
inline Batch assemble_batch(const std::vector<ClipFeatures>& data,
                            const std::vector<std::size_t>& idx, std::size_t n_scenes,
                            std::size_t n_events) {
  std::size_t b = idx.size();
  std::size_t l = data[idx[0]].features.shape[1];
  for (std::size_t i : idx) l = std::min(l, data[i].features.shape[1]);
  std::size_t d = data[idx[0]].features.shape[0];
  Batch out;
  out.input = Tensor({b, 1, l, d});
  out.z_scene = Tensor({b, n_scenes});
  out.z_event = Tensor({b, l, n_events});
  for (std::size_t k = 0; k < b; ++k) {
    const ClipFeatures& c = data[idx[k]];
    if (c.features.shape[0] != d)
      throw ValidationError("fit: inconsistent feature dimension across clips");
    if (c.scene >= n_scenes) throw ValidationError("fit: scene index out of range");
    // features are (D, L); the network wants time-major (L, D) planes
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t f = 0; f < d; ++f)
        out.input.at(k, 0, t, f) = c.features.at(f, t);
    out.z_scene.at(k, c.scene) = 1.0;
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t m = 0; m < n_events; ++m)
        out.z_event.at(k, t, m) = c.roll.at(t, m);
  }
  return out;
}

inline double global_grad_norm(const std::vector<Tensor>& grads) {
  double sum = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data) sum += v * v;
  return std::sqrt(sum);
}

}  // namespace detail

// Trains the model in place and returns the per-epoch trajectory.
// Deterministic for a fixed config and seed: shuffles, batching, graph
// construction and updates are all single-stream.
inline TrajectoryLog fit(MtlModel& model, const std::vector<ClipFeatures>& data,
                         const std::vector<std::string>& scene_labels,
                         const std::vector<std::string>& event_labels,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ValidationError("fit: empty training set");
  const std::size_t n_scenes = model.arch.n_scenes;
  const std::size_t n_events = model.arch.n_events;
  if (scene_labels.size() != n_scenes || event_labels.size() != n_events)
    throw ValidationError("fit: vocabulary sizes do not match the model");
  for (const ClipFeatures& c : data) {
    if (c.features.shape[0] != model.arch.n_mels)
      throw ValidationError("fit: feature dimension does not match the model");
    if (c.roll.shape[1] != n_events)
      throw ValidationError("fit: event roll width does not match the model");
  }

  TrajectoryLog log;
  log.strategy = cfg.strategy;
  log.scene_labels = scene_labels;
  log.event_labels = event_labels;

  RAdamState opt;
  DwaState dwa = make_dwa_state(n_scenes + n_events, cfg.dwa_temperature);

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    SplitMix64 shuffle_rng(mix_seed(cfg.seed, 0xe90c + epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

    EpochRecord rec;
    rec.epoch = epoch;
    if (cfg.strategy == Strategy::Dwa) rec.dwa_lambdas = dwa.weights;

    std::vector<double> task_acc(n_scenes + n_events, 0.0);
    std::size_t n_batches = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      detail::Batch batch = detail::assemble_batch(data, idx, n_scenes, n_events);
      const double b = static_cast<double>(idx.size());

      ForwardResult fwd = mtl_forward(model, batch.input, /*train=*/true);
      Graph& g = *fwd.graph;

      Value raw_scene = scene_ce(g, fwd.scene_posterior, batch.z_scene);
      Value raw_event = event_bce(g, fwd.event_posterior, batch.z_event);

      Value total{};
      switch (cfg.strategy) {
        case Strategy::Constant:
          total = mtl_constant_loss(g, raw_scene, raw_event, cfg.constant_weights);
          break;
        case Strategy::Mfl:
          total = mfl_loss(g, fwd.scene_posterior, batch.z_scene, fwd.event_posterior,
                           batch.z_event, cfg.mfl);
          break;
        case Strategy::Dwa: {
          DwaLossResult dl = dwa_loss(g, fwd.scene_posterior, batch.z_scene,
                                      fwd.event_posterior, batch.z_event, dwa);
          total = dl.total;
          for (std::size_t k = 0; k < task_acc.size(); ++k)
            task_acc[k] += dl.per_task[k] / b;
          break;
        }
      }
      total = g.affine(total, 1.0 / b, 0.0);  // batch mean

      double total_v = g.value(total).data[0];
      if (!std::isfinite(total_v))
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(n_batches + 1));

      g.backward(total);
      std::vector<Tensor> grads;
      grads.reserve(fwd.param_leaves.size());
      for (Value v : fwd.param_leaves) grads.push_back(g.grad(v));
      if (cfg.clip_grad_norm > 0.0) {
        double norm = detail::global_grad_norm(grads);
        if (norm > cfg.clip_grad_norm) {
          double scale = cfg.clip_grad_norm / norm;
          for (Tensor& gt : grads)
            for (double& v : gt.data) v *= scale;
        }
      }
      radam_step(model.params, grads, opt, cfg.learning_rate, cfg.beta1, cfg.beta2,
                 cfg.adam_epsilon);

      rec.total_loss += total_v;
      rec.scene_loss += g.value(raw_scene).data[0] / b;
      rec.event_loss += g.value(raw_event).data[0] / b;
      ++n_batches;

      if (cfg.strategy == Strategy::Mfl && end == order.size())
        rec.mfl = mfl_weight_diagnostics_masked(g.value(fwd.scene_posterior), batch.z_scene,
                                                g.value(fwd.event_posterior), batch.z_event,
                                                cfg.mfl);
    }

    rec.total_loss /= static_cast<double>(n_batches);
    rec.scene_loss /= static_cast<double>(n_batches);
    rec.event_loss /= static_cast<double>(n_batches);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.records.push_back(std::move(rec));

    if (cfg.strategy == Strategy::Dwa) {
      for (double& v : task_acc) v /= static_cast<double>(n_batches);
      dwa = dwa_update(std::move(dwa), task_acc);
    }
  }
  return log;
}

// ---- trajectory export ---------------------------------------------------------

// CSV rows `epoch,series,value` with 12 significant digits. Series:
// loss.total, loss.scene, loss.event, dwa.lambda.<task> and the mfl.*
// focal-average series.
inline void export_trajectory(const TrajectoryLog& log, const std::string& path) {
  if (log.records.empty()) throw ValidationError("export_trajectory: empty log");
  std::ostringstream out;
  out << "epoch,series,value\n";
  char buf[64];
  auto emit = [&](std::size_t epoch, const std::string& series, double value) {
    std::snprintf(buf, sizeof(buf), "%.12g", value);
    out << epoch << ',' << series << ',' << buf << '\n';
  };
  for (const EpochRecord& r : log.records) {
    emit(r.epoch, "loss.total", r.total_loss);
    emit(r.epoch, "loss.scene", r.scene_loss);
    emit(r.epoch, "loss.event", r.event_loss);
    if (log.strategy == Strategy::Dwa) {
      for (std::size_t n = 0; n < log.scene_labels.size(); ++n)
        emit(r.epoch, "dwa.lambda.scene." + log.scene_labels[n], r.dwa_lambdas[n]);
      for (std::size_t m = 0; m < log.event_labels.size(); ++m)
        emit(r.epoch, "dwa.lambda.event." + log.event_labels[m],
             r.dwa_lambdas[log.scene_labels.size() + m]);
    }
    if (log.strategy == Strategy::Mfl) {
      emit(r.epoch, "mfl.scene_avg", r.mfl.scene_avg);
      emit(r.epoch, "mfl.event_active_avg", r.mfl.event_active_avg);
      emit(r.epoch, "mfl.event_inactive_avg", r.mfl.event_inactive_avg);
      for (std::size_t m = 0; m < log.event_labels.size(); ++m)
        emit(r.epoch, "mfl.event." + log.event_labels[m], r.mfl.per_event_avg[m]);
    }
  }
  std::ofstream f(path);
  if (!f) throw IoError("export_trajectory: cannot open " + path);
  f << out.str();
  if (!f) throw IoError("export_trajectory: write failed for " + path);
}

}  // namespace taskweight
