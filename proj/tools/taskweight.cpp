// taskweight command-line interface: synthesize corpora, train with a
// chosen loss-weighting strategy, evaluate checkpoints, and compare
// strategies across seeds.
//
// Exit codes: 0 success, 2 configuration/validation failure, 3 numerical
// failure (divergence), 4 I/O failure.
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "taskweight/pipeline.hpp"

namespace {

using namespace taskweight;

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct StrategyFlags {
  double lambda_scene = 1.0;
  double lambda_event = 1.0;
  double eta = 1.0;
  double gamma = 1.0;
  double zeta = 1.0;
  double temperature = 1.0;
};

void apply_strategy_flags(TrainConfig& cfg, const StrategyFlags& f) {
  cfg.constant_weights.lambda_scene = f.lambda_scene;
  cfg.constant_weights.lambda_event = f.lambda_event;
  cfg.mfl.weights.lambda_scene = f.lambda_scene;
  cfg.mfl.weights.lambda_event = f.lambda_event;
  cfg.mfl.eta = f.eta;
  cfg.mfl.gamma = f.gamma;
  cfg.mfl.zeta = f.zeta;
  cfg.dwa_temperature = f.temperature;
}

void add_strategy_options(CLI::App* cmd, StrategyFlags& f) {
  cmd->add_option("--lambda-scene", f.lambda_scene, "Constant scene-loss weight lambda1");
  cmd->add_option("--lambda-event", f.lambda_event, "Constant event-loss weight lambda2");
  cmd->add_option("--eta", f.eta, "Scene focal exponent (mfl)");
  cmd->add_option("--gamma", f.gamma, "Active-cell focal exponent (mfl)");
  cmd->add_option("--zeta", f.zeta, "Inactive-cell focal exponent (mfl)");
  cmd->add_option("--temperature", f.temperature, "DWA softmax temperature");
}

void add_feature_options(CLI::App* cmd, FeatureConfig& f) {
  cmd->add_option("--mels", f.n_mels, "Mel bins (default 64)");
  cmd->add_option("--frame-length", f.frame_length, "Frame length in seconds (default 0.040)");
  cmd->add_option("--hop-length", f.hop, "Hop in seconds (default 0.020)");
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Multitask ASC+SED training with constant, DWA, and multi-focal loss weighting"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Synthesize a labeled corpus from a spec file");
  std::string synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "Corpus spec JSON")->required();
  synth->add_option("--out", synth_out, "Output corpus directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a model on a corpus directory");
  std::string train_data, train_out, train_strategy = "constant", train_arch = "paper";
  StrategyFlags train_flags;
  TrainConfig train_cfg;
  FeatureConfig train_feat;
  bool train_no_cache = false;
  train->add_option("--data", train_data, "Corpus directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--strategy", train_strategy, "constant|dwa|mfl")->required();
  train->add_option("--epochs", train_cfg.epochs, "Training epochs")->required();
  train->add_option("--seed", train_cfg.seed, "Seed for init and shuffling");
  train->add_option("--batch-size", train_cfg.batch_size, "Batch size (default 8)");
  train->add_option("--learning-rate", train_cfg.learning_rate, "RAdam learning rate");
  train->add_option("--clip-grad-norm", train_cfg.clip_grad_norm,
                    "Global gradient-norm clip (0 = off)");
  train->add_flag("--standardize", train_cfg.standardize,
                  "Per-mel standardization from the training data");
  train->add_option("--arch", train_arch, "paper|tiny|bench (default paper)");
  train->add_flag("--no-cache", train_no_cache, "Skip the on-disk feature cache");
  add_strategy_options(train, train_flags);
  add_feature_options(train, train_feat);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus directory");
  std::string eval_ck, eval_data, eval_csv;
  double eval_threshold = 0.5;
  eval_cmd->add_option("--checkpoint", eval_ck, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Corpus directory")->required();
  eval_cmd->add_option("--threshold", eval_threshold, "Event decision threshold (default 0.5)");
  eval_cmd->add_option("--csv", eval_csv,
                       "Metrics CSV path (default: metrics.csv beside the checkpoint)");

  // compare
  auto* compare = app.add_subcommand("compare", "Run a strategy x seed grid and summarize");
  std::string cmp_data, cmp_out, cmp_strategies, cmp_seeds, cmp_arch = "paper";
  StrategyFlags cmp_flags;
  TrainConfig cmp_cfg;
  FeatureConfig cmp_feat;
  double cmp_dev_fraction = 0.8;
  std::uint64_t cmp_split_seed = 1234;
  double cmp_threshold = 0.5;
  compare->add_option("--data", cmp_data, "Corpus directory")->required();
  compare->add_option("--out", cmp_out, "Output directory")->required();
  compare->add_option("--strategies", cmp_strategies, "Comma list: constant,dwa,mfl")
      ->required();
  compare->add_option("--seeds", cmp_seeds, "Comma list of integer seeds")->required();
  compare->add_option("--epochs", cmp_cfg.epochs, "Training epochs per run")->required();
  compare->add_option("--batch-size", cmp_cfg.batch_size, "Batch size (default 8)");
  compare->add_option("--learning-rate", cmp_cfg.learning_rate, "RAdam learning rate");
  compare->add_option("--clip-grad-norm", cmp_cfg.clip_grad_norm,
                      "Global gradient-norm clip (0 = off)");
  compare->add_flag("--standardize", cmp_cfg.standardize, "Per-mel standardization");
  compare->add_option("--arch", cmp_arch, "paper|tiny|bench (default paper)");
  compare->add_option("--dev-fraction", cmp_dev_fraction,
                      "Training fraction of the stratified split (default 0.8)");
  compare->add_option("--split-seed", cmp_split_seed,
                      "Seed of the shared dev/eval split (default 1234)");
  compare->add_option("--threshold", cmp_threshold, "Event decision threshold");
  add_strategy_options(compare, cmp_flags);
  add_feature_options(compare, cmp_feat);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (synth->parsed()) {
    CorpusSpec spec = parse_corpus_spec(synth_spec);
    Corpus corpus = make_corpus(spec);
    save_corpus(corpus, synth_out);
    std::cout << "wrote " << corpus.clips.size() << " clips to " << synth_out << "\n";
    return 0;
  }

  if (train->parsed()) {
    train_cfg.strategy = parse_strategy(train_strategy);
    apply_strategy_flags(train_cfg, train_flags);
    train_cfg.validate();
    RunOptions opts;
    opts.train = train_cfg;
    opts.features = train_feat;
    opts.arch_preset = train_arch;
    PreparedData data = prepare_data(train_data, train_feat, !train_no_cache);
    TrainArtifacts art = run_training(data, train_out, opts, train_data);
    std::cout << "checkpoint: " << art.checkpoint.string() << "\n"
              << "trajectory: " << art.trajectory.string() << "\n"
              << "manifest:   " << art.manifest.string() << "\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    Checkpoint ck = load_checkpoint(eval_ck);
    std::filesystem::path csv = eval_csv.empty()
                                    ? std::filesystem::path(eval_ck).parent_path() /
                                          "metrics.csv"
                                    : std::filesystem::path(eval_csv);
    MetricsReport report = run_evaluation(ck, eval_data, eval_threshold, csv);
    std::cout << report_to_table(report, ck.scene_labels, ck.event_labels);
    std::cout << "csv: " << csv.string() << "\n";
    return 0;
  }

  if (compare->parsed()) {
    cmp_cfg.strategy = Strategy::Constant;  // overridden per grid cell
    apply_strategy_flags(cmp_cfg, cmp_flags);
    cmp_cfg.validate();
    std::vector<std::string> strategies = split_list(cmp_strategies);
    std::vector<std::uint64_t> seeds;
    for (const std::string& s : split_list(cmp_seeds)) {
      try {
        seeds.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw ValidationError("compare: bad seed '" + s + "'");
      }
    }
    for (const std::string& s : strategies) parse_strategy(s);  // validate early
    RunOptions opts;
    opts.train = cmp_cfg;
    opts.features = cmp_feat;
    opts.arch_preset = cmp_arch;
    opts.eval_threshold = cmp_threshold;
    PreparedData data = prepare_data(cmp_data, cmp_feat);
    CompareResult res =
        run_compare(data, cmp_out, strategies, seeds, opts, cmp_dev_fraction, cmp_split_seed);
    int exit_code = 0;
    for (const CompareCell& c : res.cells) {
      if (c.ok) {
        std::cout << c.strategy << " seed " << c.seed
                  << ": scene micro-F " << c.report.scene.micro_f << ", event micro-F "
                  << c.report.event.micro_f << "\n";
      } else {
        std::cerr << "run failed: " << c.strategy << " seed " << c.seed << ": " << c.error
                  << "\n";
        if (exit_code == 0) exit_code = c.exit_code;
      }
    }
    std::cout << "summary: " << res.summary_csv.string() << "\n";
    return exit_code;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const taskweight::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const taskweight::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const taskweight::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const taskweight::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
