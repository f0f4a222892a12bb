// Glue between the on-disk corpus layout and the training/evaluation
// modules: content fingerprinting, feature caching, run manifests, and the
// strategy-comparison grid.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "taskweight/common.hpp"
#include "taskweight/dataset.hpp"
#include "taskweight/eval.hpp"
#include "taskweight/features.hpp"
#include "taskweight/model.hpp"
#include "taskweight/train.hpp"

namespace taskweight {

namespace fs = std::filesystem;

// FNV-1a over the sorted relative paths and raw contents of every corpus
// file; hex-encoded. Keyed caching and manifests use this.
inline std::string corpus_fingerprint(const fs::path& dir) {
  std::vector<std::string> rel_paths;
  for (const char* name : {"meta.txt", "scenes.txt", "events.txt"})
    if (fs::exists(dir / name)) rel_paths.push_back(name);
  for (const char* sub : {"audio", "annotations"}) {
    fs::path p = dir / sub;
    if (!fs::exists(p)) continue;
    for (const auto& entry : fs::directory_iterator(p))
      if (entry.is_regular_file())
        rel_paths.push_back(std::string(sub) + "/" + entry.path().filename().string());
  }
  std::sort(rel_paths.begin(), rel_paths.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string& rel : rel_paths) {
    h = fnv1a64(rel, h);
    std::ifstream f(dir / rel, std::ios::binary);
    if (!f) throw IoError("corpus_fingerprint: cannot read " + (dir / rel).string());
    char buf[65536];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
      h = fnv1a64(buf, static_cast<std::size_t>(f.gcount()), h);
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

inline std::uint64_t feature_config_hash(const FeatureConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << cfg.frame_length << '|' << cfg.hop << '|' << cfg.n_mels << '|' << cfg.fft_size << '|'
     << cfg.floor_epsilon;
  return fnv1a64(os.str());
}

struct PreparedData {
  std::vector<std::string> scene_labels;
  std::vector<std::string> event_labels;
  std::vector<ClipFeatures> features;  // unstandardized
  std::string fingerprint;
};

// Loads a corpus directory and featurizes it, reusing the on-disk cache
// when the corpus fingerprint and feature configuration both match.
inline PreparedData prepare_data(const fs::path& data_dir, const FeatureConfig& cfg,
                                 bool use_cache = true) {
  cfg.validate();
  Corpus corpus = load_corpus(data_dir);
  if (corpus.clips.empty()) throw ValidationError("prepare_data: corpus is empty");
  PreparedData out;
  out.scene_labels = corpus.scene_labels;
  out.event_labels = corpus.event_labels;
  out.fingerprint = corpus_fingerprint(data_dir);

  char cfg_hex[17];
  std::snprintf(cfg_hex, sizeof(cfg_hex), "%016llx",
                static_cast<unsigned long long>(feature_config_hash(cfg)));
  fs::path cache_file =
      data_dir / "cache" / ("features_" + out.fingerprint + "_" + cfg_hex + ".twfc");
  if (use_cache && fs::exists(cache_file)) {
    out.features = read_feature_cache(cache_file.string());
    return out;
  }
  out.features = compute_features(corpus, cfg);
  if (use_cache) {
    std::error_code ec;
    fs::create_directories(data_dir / "cache", ec);
    // write via a unique temp name, then rename: concurrent producers race
    // benignly
    fs::path tmp = cache_file;
    tmp += "." + std::to_string(
                     std::hash<std::thread::id>{}(std::this_thread::get_id())) +
           ".tmp";
    write_feature_cache(tmp.string(), out.features);
    fs::rename(tmp, cache_file, ec);
    if (ec) fs::remove(tmp, ec);
  }
  return out;
}

struct RunOptions {
  TrainConfig train;
  FeatureConfig features;
  std::string arch_preset = "paper";  // paper | tiny | bench
  double eval_threshold = 0.5;
};

inline ArchConfig make_arch(const std::string& preset, std::size_t n_mels,
                            std::size_t n_scenes, std::size_t n_events) {
  if (preset == "paper") return paper_arch(n_mels, n_scenes, n_events);
  if (preset == "tiny") return tiny_arch(n_mels, n_scenes, n_events);
  if (preset == "bench") return bench_arch(n_mels, n_scenes, n_events);
  throw ValidationError("arch: expected paper|tiny|bench, got '" + preset + "'");
}

inline nlohmann::json train_config_json(const TrainConfig& t) {
  nlohmann::json j;
  j["strategy"] = strategy_name(t.strategy);
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["learning_rate"] = t.learning_rate;
  j["betas"] = {t.beta1, t.beta2};
  j["adam_epsilon"] = t.adam_epsilon;
  j["seed"] = t.seed;
  j["standardize"] = t.standardize;
  j["clip_grad_norm"] = t.clip_grad_norm;
  j["lambda_scene"] =
      t.strategy == Strategy::Mfl ? t.mfl.weights.lambda_scene : t.constant_weights.lambda_scene;
  j["lambda_event"] =
      t.strategy == Strategy::Mfl ? t.mfl.weights.lambda_event : t.constant_weights.lambda_event;
  j["eta"] = t.mfl.eta;
  j["gamma"] = t.mfl.gamma;
  j["zeta"] = t.mfl.zeta;
  j["temperature"] = t.dwa_temperature;
  return j;
}

inline nlohmann::json feature_config_json(const FeatureConfig& f) {
  return nlohmann::json{{"frame_length", f.frame_length},
                        {"hop", f.hop},
                        {"n_mels", f.n_mels},
                        {"fft_size", f.fft_size},
                        {"floor_epsilon", f.floor_epsilon}};
}

struct TrainArtifacts {
  fs::path checkpoint;
  fs::path trajectory;
  fs::path manifest;
};

// One full training run over prepared data: manifest first, then fit,
// trajectory CSV, checkpoint.
inline TrainArtifacts run_training(const PreparedData& data, const fs::path& out_dir,
                                   const RunOptions& opts, const std::string& data_dir_note) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::exists(out_dir))
    throw IoError("run_training: cannot create output directory " + out_dir.string());

  TrainArtifacts art;
  art.checkpoint = out_dir / "checkpoint.twck";
  art.trajectory = out_dir / "trajectory.csv";
  art.manifest = out_dir / "manifest.json";

  ArchConfig arch = make_arch(opts.arch_preset, opts.features.n_mels,
                              data.scene_labels.size(), data.event_labels.size());

  {
    nlohmann::json manifest;
    manifest["command"] = "train";
    auto now = std::chrono::system_clock::now().time_since_epoch();
    manifest["created_at_unix_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    manifest["data_dir"] = data_dir_note;
    manifest["corpus_fingerprint"] = data.fingerprint;
    manifest["seed"] = opts.train.seed;
    manifest["arch"] = opts.arch_preset;
    manifest["config"] = train_config_json(opts.train);
    manifest["features"] = feature_config_json(opts.features);
    manifest["outputs"] = {{"checkpoint", art.checkpoint.string()},
                           {"trajectory", art.trajectory.string()}};
    std::ofstream mf(art.manifest);
    if (!mf) throw IoError("run_training: cannot write " + art.manifest.string());
    mf << manifest.dump(2) << '\n';
  }

  std::vector<ClipFeatures> feats = data.features;
  std::optional<FeatureStats> stats;
  if (opts.train.standardize) stats = standardize_features(feats);

  MtlModel model = build_mtl_model(arch, opts.train.seed);
  TrajectoryLog log = fit(model, feats, data.scene_labels, data.event_labels, opts.train);
  export_trajectory(log, art.trajectory.string());

  Checkpoint ck;
  ck.model = std::move(model);
  ck.feature_config = opts.features;
  ck.feature_stats = stats;
  ck.scene_labels = data.scene_labels;
  ck.event_labels = data.event_labels;
  save_checkpoint(art.checkpoint.string(), ck);
  return art;
}

// Evaluates a checkpoint against a corpus directory. Returns the report and
// writes the CSV rendering to csv_path when given.
inline MetricsReport run_evaluation(Checkpoint& ck, const fs::path& data_dir,
                                    double threshold,
                                    const std::optional<fs::path>& csv_path) {
  PreparedData data = prepare_data(data_dir, ck.feature_config);
  if (data.scene_labels != ck.scene_labels || data.event_labels != ck.event_labels)
    throw ValidationError("evaluate: vocabulary mismatch between checkpoint and data");
  std::vector<ClipFeatures> feats = data.features;
  if (ck.feature_stats) standardize_features(feats, ck.feature_stats);
  MetricsReport report = evaluate(ck.model, feats, threshold);
  if (csv_path) {
    std::ofstream f(*csv_path);
    if (!f) throw IoError("evaluate: cannot write " + csv_path->string());
    f << report_to_csv(report, ck.scene_labels, ck.event_labels);
  }
  return report;
}

struct CompareCell {
  std::string strategy;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int exit_code = 0;
  MetricsReport report;
};

struct CompareResult {
  std::vector<CompareCell> cells;
  fs::path summary_csv;
};

inline std::size_t worker_count_from_env(std::size_t n_jobs) {
  const char* env = std::getenv("TASKWEIGHT_THREADS");
  std::size_t workers = std::thread::hardware_concurrency();
  if (workers == 0) workers = 1;
  if (env && *env) {
    char* end = nullptr;
    unsigned long v = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || v == 0)
      throw ValidationError("TASKWEIGHT_THREADS: expected a positive integer");
    workers = v;
  }
  return std::max<std::size_t>(1, std::min(workers, n_jobs));
}

// Runs the strategy x seed grid. Each run trains on a stratified dev split
// and is scored on the held-out remainder; the split is fixed across the
// whole grid so strategies see identical data. Per-run failures are
// recorded and the remaining runs continue.
inline CompareResult run_compare(const PreparedData& data, const fs::path& out_dir,
                                 const std::vector<std::string>& strategies,
                                 const std::vector<std::uint64_t>& seeds,
                                 const RunOptions& base_opts, double dev_fraction,
                                 std::uint64_t split_seed) {
  if (strategies.empty() || seeds.empty())
    throw ValidationError("compare: need at least one strategy and one seed");
  std::error_code ec;
  fs::create_directories(out_dir, ec);

  std::vector<std::size_t> scene_of_clip;
  scene_of_clip.reserve(data.features.size());
  for (const ClipFeatures& c : data.features) scene_of_clip.push_back(c.scene);
  auto [dev_idx, eval_idx] =
      split_indices(scene_of_clip, data.scene_labels.size(), dev_fraction, split_seed);
  if (eval_idx.empty()) throw ValidationError("compare: evaluation split is empty");

  PreparedData dev = data;
  dev.features.clear();
  for (std::size_t i : dev_idx) dev.features.push_back(data.features[i]);
  std::vector<ClipFeatures> eval_feats;
  for (std::size_t i : eval_idx) eval_feats.push_back(data.features[i]);

  std::vector<CompareCell> cells;
  for (const std::string& s : strategies)
    for (std::uint64_t seed : seeds) cells.push_back(CompareCell{s, seed});

  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      CompareCell& cell = cells[i];
      try {
        RunOptions opts = base_opts;
        opts.train.strategy = parse_strategy(cell.strategy);
        opts.train.seed = cell.seed;
        fs::path run_dir = out_dir / cell.strategy / ("seed" + std::to_string(cell.seed));
        run_training(dev, run_dir, opts, "(compare dev split)");
        Checkpoint ck = load_checkpoint((run_dir / "checkpoint.twck").string());
        std::vector<ClipFeatures> feats = eval_feats;
        if (ck.feature_stats) standardize_features(feats, ck.feature_stats);
        cell.report = evaluate(ck.model, feats, base_opts.eval_threshold);
        {
          std::ofstream f(run_dir / "metrics.csv");
          f << report_to_csv(cell.report, data.scene_labels, data.event_labels);
        }
        cell.ok = true;
      } catch (const ValidationError& e) {
        cell.error = e.what();
        cell.exit_code = 2;
      } catch (const ParseError& e) {
        cell.error = e.what();
        cell.exit_code = 2;
      } catch (const NumericError& e) {
        cell.error = e.what();
        cell.exit_code = 3;
      } catch (const IoError& e) {
        cell.error = e.what();
        cell.exit_code = 4;
      } catch (const std::exception& e) {
        cell.error = e.what();
        cell.exit_code = 1;
      }
    }
  };
  std::size_t workers = worker_count_from_env(cells.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }

  CompareResult result;
  result.summary_csv = out_dir / "summary.csv";
  std::ostringstream csv;
  csv << "strategy,metric,value\n";
  char buf[64];
  for (const std::string& s : strategies) {
    double scene_micro = 0, scene_macro = 0, event_micro = 0, event_macro = 0;
    std::size_t n = 0;
    for (const CompareCell& c : cells)
      if (c.ok && c.strategy == s) {
        scene_micro += c.report.scene.micro_f;
        scene_macro += c.report.scene.macro_f;
        event_micro += c.report.event.micro_f;
        event_macro += c.report.event.macro_f;
        ++n;
      }
    if (n == 0) continue;
    auto emit = [&](const char* metric, double total) {
      std::snprintf(buf, sizeof(buf), "%.12g", total / static_cast<double>(n));
      csv << s << ',' << metric << ',' << buf << '\n';
    };
    emit("scene.micro_f", scene_micro);
    emit("scene.macro_f", scene_macro);
    emit("event.micro_f", event_micro);
    emit("event.macro_f", event_macro);
  }
  std::ofstream f(result.summary_csv);
  if (!f) throw IoError("compare: cannot write " + result.summary_csv.string());
  f << csv.str();
  result.cells = std::move(cells);
  return result;
}

// ---- corpus spec files (JSON) -----------------------------------------------

// Schema: {"n_scenes": N, "n_events": M, "clips_per_scene": K,
//          "clip_duration": seconds, "sample_rate": hz, "seed": integer,
//          "co_occurrence": p | [[p,...],...]}
// A scalar co_occurrence fills the whole N x M matrix.
inline CorpusSpec parse_corpus_spec(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("corpus spec: cannot open " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corpus spec " + path.string() + ": " + e.what());
  }
  CorpusSpec spec;
  try {
    spec.n_scenes = j.at("n_scenes").get<std::size_t>();
    spec.n_events = j.at("n_events").get<std::size_t>();
    spec.clips_per_scene = j.at("clips_per_scene").get<std::size_t>();
    spec.clip_duration = j.at("clip_duration").get<double>();
    spec.sample_rate = j.value("sample_rate", std::size_t{16000});
    spec.seed = j.value("seed", std::uint64_t{0});
    const auto& co = j.at("co_occurrence");
    if (co.is_number()) {
      spec.co_occurrence.assign(spec.n_scenes,
                                std::vector<double>(spec.n_events, co.get<double>()));
    } else {
      spec.co_occurrence = co.get<std::vector<std::vector<double>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corpus spec " + path.string() + ": " + e.what());
  }
  spec.validate();
  return spec;
}

}  // namespace taskweight
