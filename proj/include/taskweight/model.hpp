// Differentiable layers and the shared-trunk / two-head MTL network:
// a CNN trunk feeding a convolutional scene-classification head and a
// BiGRU sound-event-detection head.
//
// Checkpoint file (.twck), little-endian:
//   "TWCK" | u32 version=1
//   arch   : u64 n_mels, n_scenes, n_events
//            u64 n_shared, per stage {u64 channels, pool_t, pool_f}
//            u64 n_scene_stages, per stage u64 channels
//            u64 scene_time_pool, scene_hidden, event_gru_units, event_hidden
//            f64 leaky_slope, bn_epsilon, bn_momentum
//   vocab  : scene labels, event labels (u64 count, then u64 len + bytes each)
//   featcfg: f64 frame_length, hop, floor_epsilon; u64 n_mels, fft_size
//   stats  : u8 present; if 1: u64 D, f64[D] mean, f64[D] stdev
//   params : u64 count, per param {name, u64 rank, u64[rank] shape, f64[] data}
//   bn     : u64 count, per layer {u8 initialized, u64 C, f64[C] mean, f64[C] var}
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "taskweight/autodiff.hpp"
#include "taskweight/common.hpp"
#include "taskweight/features.hpp"
#include "taskweight/tensor.hpp"

namespace taskweight {

struct PoolStage {
  std::size_t channels = 0;
  std::size_t pool_t = 1;
  std::size_t pool_f = 1;
};

struct ArchConfig {
  std::size_t n_mels = 64;
  std::size_t n_scenes = 4;
  std::size_t n_events = 25;
  std::vector<PoolStage> shared = {{128, 1, 8}, {128, 1, 2}, {128, 1, 2}};
  std::vector<std::size_t> scene_channels = {256, 256};
  std::size_t scene_time_pool = 25;  // applied after the first scene stage
  std::size_t scene_hidden = 32;
  std::size_t event_gru_units = 32;  // per direction
  std::size_t event_hidden = 32;
  double leaky_slope = 0.01;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  void validate() const {
    if (n_mels < 1) throw ValidationError("ArchConfig.n_mels: must be >= 1");
    if (n_scenes < 2) throw ValidationError("ArchConfig.n_scenes: must be >= 2");
    if (n_events < 1) throw ValidationError("ArchConfig.n_events: must be >= 1");
    if (shared.empty()) throw ValidationError("ArchConfig.shared: need at least one stage");
    for (const PoolStage& s : shared)
      if (s.channels < 1 || s.pool_t < 1 || s.pool_f < 1)
        throw ValidationError("ArchConfig.shared: channels and pool factors must be >= 1");
    if (scene_channels.empty())
      throw ValidationError("ArchConfig.scene_channels: need at least one stage");
    for (std::size_t c : scene_channels)
      if (c < 1) throw ValidationError("ArchConfig.scene_channels: must be >= 1");
    if (scene_time_pool < 1) throw ValidationError("ArchConfig.scene_time_pool: must be >= 1");
    if (scene_hidden < 1 || event_gru_units < 1 || event_hidden < 1)
      throw ValidationError("ArchConfig: hidden widths must be >= 1");
    if (!(leaky_slope >= 0.0) || !std::isfinite(leaky_slope))
      throw ValidationError("ArchConfig.leaky_slope: must be finite and >= 0");
    if (freq_after_shared() < 1)
      throw ValidationError(
          "ArchConfig: frequency extent vanishes under the shared pooling factors");
  }

  std::size_t freq_after_shared() const {
    std::size_t f = n_mels;
    for (const PoolStage& s : shared) f /= s.pool_f;
    return f;
  }
  std::size_t event_input_width() const {
    return shared.back().channels * freq_after_shared();
  }
};

// Table-2 scale: 3x3/128 trunk with 1x8,1x2,1x2 frequency pooling, 256-ch
// scene head with 25x1 time pooling, 32-unit BiGRU event head.
inline ArchConfig paper_arch(std::size_t n_mels = 64, std::size_t n_scenes = 4,
                             std::size_t n_events = 25) {
  ArchConfig a;
  a.n_mels = n_mels;
  a.n_scenes = n_scenes;
  a.n_events = n_events;
  return a;
}

// Small configuration for overfit experiments and gradient checks.
inline ArchConfig tiny_arch(std::size_t n_mels, std::size_t n_scenes, std::size_t n_events) {
  ArchConfig a;
  a.n_mels = n_mels;
  a.n_scenes = n_scenes;
  a.n_events = n_events;
  a.shared = {{4, 1, 4}};
  a.scene_channels = {6};
  a.scene_time_pool = 5;
  a.scene_hidden = 8;
  a.event_gru_units = 4;
  a.event_hidden = 8;
  return a;
}

// Mid-size configuration used by the synthetic benchmark runs.
inline ArchConfig bench_arch(std::size_t n_mels, std::size_t n_scenes, std::size_t n_events) {
  ArchConfig a;
  a.n_mels = n_mels;
  a.n_scenes = n_scenes;
  a.n_events = n_events;
  a.shared = {{8, 1, 8}, {8, 1, 2}};
  a.scene_channels = {12};
  a.scene_time_pool = 25;
  a.scene_hidden = 16;
  a.event_gru_units = 16;
  a.event_hidden = 16;
  return a;
}

// Per-channel batch-normalization running statistics.
struct BnState {
  Tensor running_mean;  // (C)
  Tensor running_var;   // (C), biased
  bool initialized = false;
};

// Batch normalization over (B, C, T, F) with per-channel statistics pooled
// across batch, time and frequency. Training mode normalizes with batch
// statistics and updates the running ones (first update copies, later ones
// blend with `momentum`); inference mode uses the running statistics.
inline Value batch_norm(Graph& g, Value x, Value gamma, Value beta, bool train,
                        BnState& state, double momentum, double epsilon) {
  const Tensor& tx = g.value(x);
  if (tx.rank() != 4) throw ValidationError("batch_norm: expected (B,C,T,F) input");
  std::size_t C = tx.shape[1];
  if (g.value(gamma).size() != C || g.value(beta).size() != C)
    throw ValidationError("batch_norm: gamma/beta must have one entry per channel");
  std::vector<std::size_t> per_channel = {1, C, 1, 1};
  Value gb = g.broadcast(g.reshape(gamma, per_channel), tx.shape);
  Value bb = g.broadcast(g.reshape(beta, per_channel), tx.shape);

  if (train) {
    double count = static_cast<double>(tx.shape[0] * tx.shape[2] * tx.shape[3]);
    std::vector<bool> mask = {true, false, true, true};
    Value mu = g.affine(g.reduce_sum_axes(x, mask), 1.0 / count, 0.0);
    Value xc = g.sub(x, g.broadcast(mu, tx.shape));
    Value var = g.affine(g.reduce_sum_axes(g.mul(xc, xc), mask), 1.0 / count, 0.0);
    Value inv = g.pow(g.affine(var, 1.0, epsilon), -0.5);
    Value out = g.add(g.mul(g.mul(xc, g.broadcast(inv, tx.shape)), gb), bb);

    const Tensor& mu_v = g.value(mu);
    const Tensor& var_v = g.value(var);
    if (!state.initialized) {
      state.running_mean = Tensor({C});
      state.running_var = Tensor({C});
      for (std::size_t c = 0; c < C; ++c) {
        state.running_mean.data[c] = mu_v.data[c];
        state.running_var.data[c] = var_v.data[c];
      }
      state.initialized = true;
    } else {
      for (std::size_t c = 0; c < C; ++c) {
        state.running_mean.data[c] =
            (1.0 - momentum) * state.running_mean.data[c] + momentum * mu_v.data[c];
        state.running_var.data[c] =
            (1.0 - momentum) * state.running_var.data[c] + momentum * var_v.data[c];
      }
    }
    return out;
  }

  if (!state.initialized)
    throw ValidationError("batch_norm: inference mode before any training step");
  Tensor mean_t(per_channel), scale_t(per_channel);
  for (std::size_t c = 0; c < C; ++c) {
    mean_t.data[c] = state.running_mean.data[c];
    scale_t.data[c] = 1.0 / std::sqrt(state.running_var.data[c] + epsilon);
  }
  Value xc = g.sub(x, g.broadcast(g.constant(mean_t), tx.shape));
  Value xn = g.mul(xc, g.broadcast(g.constant(scale_t), tx.shape));
  return g.add(g.mul(xn, gb), bb);
}

inline Value activation(Graph& g, Value x, const std::string& kind, double slope = 0.01) {
  if (kind == "leaky_relu") return g.leaky_relu(x, slope);
  if (kind == "softmax") return g.softmax(x);
  if (kind == "sigmoid") return g.sigmoid(x);
  throw ValidationError("activation: unknown kind '" + kind + "'");
}

// y = x W^T + b for x (B, in), W (out, in), b (out).
inline Value linear(Graph& g, Value x, Value w, Value b) {
  const Tensor& tw = g.value(w);
  const Tensor& tx = g.value(x);
  if (tx.rank() != 2 || tw.rank() != 2 || tx.shape[1] != tw.shape[1])
    throw ValidationError("linear: incompatible shapes " + tx.shape_string() + " and " +
                          tw.shape_string());
  std::size_t out = tw.shape[0];
  if (g.value(b).size() != out) throw ValidationError("linear: bias size mismatch");
  Value y = g.matmul(x, g.permute(w, {1, 0}));
  return g.add(y, g.broadcast(g.reshape(b, {1, out}), {tx.shape[0], out}));
}

namespace detail {

// One GRU direction over x (B,L,F) -> (B,L,H). Gate order in the fused
// weights is update (z), reset (r), candidate (n):
//   z = sigmoid(Wz x + Uz h), r = sigmoid(Wr x + Ur h),
//   n = tanh(Wn x + r (Un h) + bn), h = (1-z) n + z h_prev.
inline Value gru_direction(Graph& g, Value x_seq, Value w_x, Value w_h, Value bias,
                           std::size_t units, bool reverse) {
  const Tensor& tx = g.value(x_seq);
  std::size_t B = tx.shape[0], L = tx.shape[1], F = tx.shape[2];
  std::size_t H = units;
  if (g.value(w_x).shape != std::vector<std::size_t>{3 * H, F} ||
      g.value(w_h).shape != std::vector<std::size_t>{3 * H, H} ||
      g.value(bias).size() != 3 * H)
    throw ValidationError("gru: parameter shapes do not match input width " +
                          std::to_string(F) + " and " + std::to_string(H) + " units");

  Value xw = g.matmul(g.reshape(x_seq, {B * L, F}), g.permute(w_x, {1, 0}));
  xw = g.add(g.reshape(xw, {B, L, 3 * H}),
             g.broadcast(g.reshape(bias, {1, 1, 3 * H}), {B, L, 3 * H}));
  Value wh_t = g.permute(w_h, {1, 0});

  Value h = g.constant(Tensor({B, H}));
  std::vector<Value> outputs(L, h);
  for (std::size_t step = 0; step < L; ++step) {
    std::size_t t = reverse ? L - 1 - step : step;
    Value xt = g.select(xw, 1, t);
    Value uh = g.matmul(h, wh_t);
    Value z = g.sigmoid(g.add(g.slice(xt, 1, 0, H), g.slice(uh, 1, 0, H)));
    Value r = g.sigmoid(g.add(g.slice(xt, 1, H, H), g.slice(uh, 1, H, H)));
    Value n = g.tanh(g.add(g.slice(xt, 1, 2 * H, H), g.mul(r, g.slice(uh, 1, 2 * H, H))));
    h = g.add(g.mul(g.affine(z, -1.0, 1.0), n), g.mul(z, h));
    outputs[t] = h;
  }
  return g.stack(outputs, 1);
}

}  // namespace detail

// Bidirectional GRU: forward and reversed passes concatenated per frame,
// (B,L,F) -> (B,L,2*units).
inline Value bigru(Graph& g, Value x_seq, Value fw_w_x, Value fw_w_h, Value fw_bias,
                   Value bw_w_x, Value bw_w_h, Value bw_bias, std::size_t units) {
  Value fw = detail::gru_direction(g, x_seq, fw_w_x, fw_w_h, fw_bias, units, false);
  Value bw = detail::gru_direction(g, x_seq, bw_w_x, bw_w_h, bw_bias, units, true);
  return g.concat(fw, bw, 2);
}

struct NamedParam {
  std::string name;
  Tensor value;
};

struct MtlModel {
  ArchConfig arch;
  std::vector<NamedParam> params;
  std::vector<BnState> bn;  // shared stages then scene stages, in order

  std::size_t param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw ValidationError("model: no parameter named " + name);
  }
};

struct ModelOutput {
  Tensor scene_posterior;  // (B, N), rows on the simplex
  Tensor event_posterior;  // (B, L, M), entries in (0,1)
};

struct ForwardResult {
  std::unique_ptr<Graph> graph;
  std::vector<Value> param_leaves;  // aligned with model.params
  Value scene_posterior;            // (B, N)
  Value event_posterior;            // (B, L, M)

  ModelOutput output() const {
    return ModelOutput{graph->value(scene_posterior), graph->value(event_posterior)};
  }
};

namespace detail {

inline Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                             std::size_t fan_out, SplitMix64& rng) {
  Tensor t(std::move(shape));
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data) v = rng.next_range(-bound, bound);
  return t;
}

}  // namespace detail

// Deterministic Glorot-uniform initialization of every weight tensor from
// the seed; biases start at zero, batch-norm at gamma=1, beta=0.
inline MtlModel build_mtl_model(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  MtlModel model;
  model.arch = arch;
  SplitMix64 rng(mix_seed(seed, 0x9d1f));

  auto add_param = [&](const std::string& name, Tensor t) {
    model.params.push_back(NamedParam{name, std::move(t)});
  };
  // conv stages carry no bias: batch norm subtracts the mean right after,
  // so a bias would be a parameter with identically zero gradient
  auto add_conv_bn = [&](const std::string& prefix, std::size_t c_in, std::size_t c_out) {
    add_param(prefix + ".conv.weight",
              detail::glorot_uniform({c_out, c_in, 3, 3}, c_in * 9, c_out * 9, rng));
    add_param(prefix + ".bn.gamma", Tensor::full({c_out}, 1.0));
    add_param(prefix + ".bn.beta", Tensor({c_out}));
    model.bn.emplace_back();
  };

  std::size_t c_in = 1;
  for (std::size_t i = 0; i < arch.shared.size(); ++i) {
    add_conv_bn("shared." + std::to_string(i), c_in, arch.shared[i].channels);
    c_in = arch.shared[i].channels;
  }
  std::size_t scene_in = c_in;
  for (std::size_t i = 0; i < arch.scene_channels.size(); ++i) {
    add_conv_bn("scene." + std::to_string(i), scene_in, arch.scene_channels[i]);
    scene_in = arch.scene_channels[i];
  }
  add_param("scene.fc1.weight", detail::glorot_uniform({arch.scene_hidden, scene_in},
                                                       scene_in, arch.scene_hidden, rng));
  add_param("scene.fc1.bias", Tensor({arch.scene_hidden}));
  add_param("scene.out.weight",
            detail::glorot_uniform({arch.n_scenes, arch.scene_hidden}, arch.scene_hidden,
                                   arch.n_scenes, rng));
  add_param("scene.out.bias", Tensor({arch.n_scenes}));

  std::size_t e_in = arch.event_input_width();
  std::size_t h = arch.event_gru_units;
  for (const char* dir : {"fw", "bw"}) {
    std::string p = std::string("event.gru.") + dir;
    add_param(p + ".w_x", detail::glorot_uniform({3 * h, e_in}, e_in, 3 * h, rng));
    add_param(p + ".w_h", detail::glorot_uniform({3 * h, h}, h, 3 * h, rng));
    add_param(p + ".bias", Tensor({3 * h}));
  }
  add_param("event.fc1.weight",
            detail::glorot_uniform({arch.event_hidden, 2 * h}, 2 * h, arch.event_hidden, rng));
  add_param("event.fc1.bias", Tensor({arch.event_hidden}));
  add_param("event.out.weight",
            detail::glorot_uniform({arch.n_events, arch.event_hidden}, arch.event_hidden,
                                   arch.n_events, rng));
  add_param("event.out.bias", Tensor({arch.n_events}));
  return model;
}

// Builds the forward graph for a batch (B, 1, L, D). The shared trunk feeds
// both heads; the event head consumes the trunk output flattened to
// per-frame vectors (channels x remaining mel bins) so it keeps all L frames.
inline ForwardResult mtl_forward(MtlModel& model, const Tensor& batch, bool train) {
  if (batch.rank() != 4 || batch.shape[1] != 1)
    throw ValidationError("mtl_forward: expected input (B,1,L,D), got " +
                          batch.shape_string());
  if (batch.shape[3] != model.arch.n_mels)
    throw ValidationError("mtl_forward: input has " + std::to_string(batch.shape[3]) +
                          " mel bins, model expects " + std::to_string(model.arch.n_mels));

  ForwardResult r;
  r.graph = std::make_unique<Graph>();
  Graph& g = *r.graph;
  r.param_leaves.reserve(model.params.size());
  for (NamedParam& p : model.params) r.param_leaves.push_back(g.leaf(p.value));
  auto pv = [&](const std::string& name) { return r.param_leaves[model.param_index(name)]; };

  auto check_finite = [&](Value v, const std::string& layer) {
    if (!g.value(v).all_finite())
      throw NumericError("mtl_forward: non-finite activation at " + layer);
  };

  const ArchConfig& arch = model.arch;
  Value x = g.constant(batch);
  std::size_t bn_idx = 0;
  for (std::size_t i = 0; i < arch.shared.size(); ++i) {
    std::string prefix = "shared." + std::to_string(i);
    x = g.conv2d(x, pv(prefix + ".conv.weight"),
                 g.constant(Tensor({arch.shared[i].channels})));
    x = batch_norm(g, x, pv(prefix + ".bn.gamma"), pv(prefix + ".bn.beta"), train,
                   model.bn[bn_idx++], arch.bn_momentum, arch.bn_epsilon);
    x = g.leaky_relu(x, arch.leaky_slope);
    const PoolStage& st = arch.shared[i];
    if (st.pool_t > 1 || st.pool_f > 1) x = g.max_pool2d(x, st.pool_t, st.pool_f);
    check_finite(x, prefix);
  }
  Value shared_out = x;

  // Scene head: conv stages, time pooling after the first, global max pool
  // after the last, then the two fully connected layers.
  Value s = shared_out;
  for (std::size_t i = 0; i < arch.scene_channels.size(); ++i) {
    std::string prefix = "scene." + std::to_string(i);
    s = g.conv2d(s, pv(prefix + ".conv.weight"),
                 g.constant(Tensor({arch.scene_channels[i]})));
    s = batch_norm(g, s, pv(prefix + ".bn.gamma"), pv(prefix + ".bn.beta"), train,
                   model.bn[bn_idx++], arch.bn_momentum, arch.bn_epsilon);
    s = g.leaky_relu(s, arch.leaky_slope);
    if (i == 0 && arch.scene_time_pool > 1) {
      std::size_t pt = std::min(arch.scene_time_pool, g.value(s).shape[2]);
      s = g.max_pool2d(s, pt, 1);
    }
    if (i + 1 == arch.scene_channels.size()) {
      const Tensor& ts = g.value(s);
      s = g.max_pool2d(s, ts.shape[2], ts.shape[3]);  // global max pool
    }
    check_finite(s, prefix);
  }
  {
    const Tensor& ts = g.value(s);
    s = g.reshape(s, {ts.shape[0], ts.shape[1]});
  }
  s = g.leaky_relu(linear(g, s, pv("scene.fc1.weight"), pv("scene.fc1.bias")),
                   arch.leaky_slope);
  r.scene_posterior = g.softmax(linear(g, s, pv("scene.out.weight"), pv("scene.out.bias")));
  check_finite(r.scene_posterior, "scene.out");

  // Event head: flatten the trunk output per frame, BiGRU, per-frame FCs.
  const Tensor& tso = g.value(shared_out);
  std::size_t B = tso.shape[0], C = tso.shape[1], L = tso.shape[2], F = tso.shape[3];
  Value e = g.reshape(g.permute(shared_out, {0, 2, 1, 3}), {B, L, C * F});
  e = bigru(g, e, pv("event.gru.fw.w_x"), pv("event.gru.fw.w_h"), pv("event.gru.fw.bias"),
            pv("event.gru.bw.w_x"), pv("event.gru.bw.w_h"), pv("event.gru.bw.bias"),
            arch.event_gru_units);
  check_finite(e, "event.gru");
  std::size_t h2 = 2 * arch.event_gru_units;
  e = g.reshape(e, {B * L, h2});
  e = g.leaky_relu(linear(g, e, pv("event.fc1.weight"), pv("event.fc1.bias")),
                   arch.leaky_slope);
  e = g.sigmoid(linear(g, e, pv("event.out.weight"), pv("event.out.bias")));
  r.event_posterior = g.reshape(e, {B, L, arch.n_events});
  check_finite(r.event_posterior, "event.out");
  return r;
}

// ---- checkpoint I/O --------------------------------------------------------

struct Checkpoint {
  MtlModel model;
  FeatureConfig feature_config;
  std::optional<FeatureStats> feature_stats;
  std::vector<std::string> scene_labels;
  std::vector<std::string> event_labels;
};

namespace detail {

inline void write_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_f64(std::ofstream& f, double v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_str(std::ofstream& f, const std::string& s) {
  write_u64(f, s.size());
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint64_t read_u64(std::ifstream& f, const std::string& path) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw ParseError("checkpoint: truncated file " + path);
  return v;
}
inline double read_f64(std::ifstream& f, const std::string& path) {
  double v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw ParseError("checkpoint: truncated file " + path);
  return v;
}
inline std::string read_str(std::ifstream& f, const std::string& path) {
  auto n = read_u64(f, path);
  std::string s(n, '\0');
  f.read(s.data(), static_cast<std::streamsize>(n));
  if (!f) throw ParseError("checkpoint: truncated file " + path);
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  using detail::write_f64;
  using detail::write_str;
  using detail::write_u64;
  f.write("TWCK", 4);
  std::uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);

  const ArchConfig& a = ck.model.arch;
  write_u64(f, a.n_mels);
  write_u64(f, a.n_scenes);
  write_u64(f, a.n_events);
  write_u64(f, a.shared.size());
  for (const PoolStage& s : a.shared) {
    write_u64(f, s.channels);
    write_u64(f, s.pool_t);
    write_u64(f, s.pool_f);
  }
  write_u64(f, a.scene_channels.size());
  for (std::size_t c : a.scene_channels) write_u64(f, c);
  write_u64(f, a.scene_time_pool);
  write_u64(f, a.scene_hidden);
  write_u64(f, a.event_gru_units);
  write_u64(f, a.event_hidden);
  write_f64(f, a.leaky_slope);
  write_f64(f, a.bn_epsilon);
  write_f64(f, a.bn_momentum);

  write_u64(f, ck.scene_labels.size());
  for (const auto& s : ck.scene_labels) write_str(f, s);
  write_u64(f, ck.event_labels.size());
  for (const auto& s : ck.event_labels) write_str(f, s);

  write_f64(f, ck.feature_config.frame_length);
  write_f64(f, ck.feature_config.hop);
  write_f64(f, ck.feature_config.floor_epsilon);
  write_u64(f, ck.feature_config.n_mels);
  write_u64(f, ck.feature_config.fft_size);

  char present = ck.feature_stats.has_value() ? 1 : 0;
  f.write(&present, 1);
  if (ck.feature_stats) {
    write_u64(f, ck.feature_stats->mean.size());
    for (double v : ck.feature_stats->mean.data) write_f64(f, v);
    for (double v : ck.feature_stats->stdev.data) write_f64(f, v);
  }

  write_u64(f, ck.model.params.size());
  for (const NamedParam& p : ck.model.params) {
    write_str(f, p.name);
    write_u64(f, p.value.rank());
    for (std::size_t e : p.value.shape) write_u64(f, e);
    f.write(reinterpret_cast<const char*>(p.value.data.data()),
            static_cast<std::streamsize>(sizeof(double) * p.value.size()));
  }
  write_u64(f, ck.model.bn.size());
  for (const BnState& b : ck.model.bn) {
    char init = b.initialized ? 1 : 0;
    f.write(&init, 1);
    write_u64(f, b.initialized ? b.running_mean.size() : 0);
    if (b.initialized) {
      for (double v : b.running_mean.data) write_f64(f, v);
      for (double v : b.running_var.data) write_f64(f, v);
    }
  }
  if (!f) throw IoError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  using detail::read_f64;
  using detail::read_str;
  using detail::read_u64;
  char magic[4];
  f.read(magic, 4);
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || std::string(magic, 4) != "TWCK" || version != 1)
    throw ParseError("checkpoint: bad header in " + path);

  Checkpoint ck;
  ArchConfig& a = ck.model.arch;
  a.n_mels = read_u64(f, path);
  a.n_scenes = read_u64(f, path);
  a.n_events = read_u64(f, path);
  a.shared.resize(read_u64(f, path));
  for (PoolStage& s : a.shared) {
    s.channels = read_u64(f, path);
    s.pool_t = read_u64(f, path);
    s.pool_f = read_u64(f, path);
  }
  a.scene_channels.resize(read_u64(f, path));
  for (std::size_t& c : a.scene_channels) c = read_u64(f, path);
  a.scene_time_pool = read_u64(f, path);
  a.scene_hidden = read_u64(f, path);
  a.event_gru_units = read_u64(f, path);
  a.event_hidden = read_u64(f, path);
  a.leaky_slope = read_f64(f, path);
  a.bn_epsilon = read_f64(f, path);
  a.bn_momentum = read_f64(f, path);

  ck.scene_labels.resize(read_u64(f, path));
  for (auto& s : ck.scene_labels) s = read_str(f, path);
  ck.event_labels.resize(read_u64(f, path));
  for (auto& s : ck.event_labels) s = read_str(f, path);

  ck.feature_config.frame_length = read_f64(f, path);
  ck.feature_config.hop = read_f64(f, path);
  ck.feature_config.floor_epsilon = read_f64(f, path);
  ck.feature_config.n_mels = read_u64(f, path);
  ck.feature_config.fft_size = read_u64(f, path);

  char present = 0;
  f.read(&present, 1);
  if (present) {
    auto d = read_u64(f, path);
    FeatureStats stats;
    stats.mean = Tensor({d});
    stats.stdev = Tensor({d});
    for (double& v : stats.mean.data) v = read_f64(f, path);
    for (double& v : stats.stdev.data) v = read_f64(f, path);
    ck.feature_stats = std::move(stats);
  }

  ck.model.params.resize(read_u64(f, path));
  for (NamedParam& p : ck.model.params) {
    p.name = read_str(f, path);
    std::vector<std::size_t> shape(read_u64(f, path));
    for (std::size_t& e : shape) e = read_u64(f, path);
    p.value = Tensor(shape);
    f.read(reinterpret_cast<char*>(p.value.data.data()),
           static_cast<std::streamsize>(sizeof(double) * p.value.size()));
    if (!f) throw ParseError("checkpoint: truncated file " + path);
  }
  ck.model.bn.resize(read_u64(f, path));
  for (BnState& b : ck.model.bn) {
    char init = 0;
    f.read(&init, 1);
    auto c = read_u64(f, path);
    b.initialized = init != 0;
    if (b.initialized) {
      b.running_mean = Tensor({c});
      b.running_var = Tensor({c});
      for (double& v : b.running_mean.data) v = read_f64(f, path);
      for (double& v : b.running_var.data) v = read_f64(f, path);
    }
  }
  return ck;
}

}  // namespace taskweight
