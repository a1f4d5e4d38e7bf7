#pragma once

#include <array>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rsaforge/dataset.hpp"
#include "rsaforge/errors.hpp"
#include "rsaforge/model.hpp"
#include "rsaforge/pipeline.hpp"
#include "rsaforge/train.hpp"

// Command-line surface: train, extract, rdm, score, evaluate, report.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

namespace rsaforge::cli {

namespace detail {

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::array<float, 3> parse_triple(const std::string& s, const char* what) {
  const auto parts = split_csv(s);
  if (parts.size() != 3) throw UsageError(std::string(what) + " expects three comma-separated values");
  std::array<float, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) out[i] = std::stof(parts[i]);
  return out;
}

struct SyntheticSpec {
  int classes = 4;
  int per_class = 50;
  std::size_t size = 64;
};

inline SyntheticSpec parse_synthetic(const std::string& s) {
  SyntheticSpec spec;
  for (const auto& kv : split_csv(s)) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw UsageError("--synthetic expects key=value pairs, got \"" + kv + '"');
    const std::string key = kv.substr(0, eq);
    const int value = std::stoi(kv.substr(eq + 1));
    if (key == "classes") spec.classes = value;
    else if (key == "per_class") spec.per_class = value;
    else if (key == "size") spec.size = static_cast<std::size_t>(value);
    else throw UsageError("--synthetic: unknown key \"" + key + '"');
  }
  return spec;
}

inline void validate_taps(const std::vector<std::string>& taps) {
  if (taps.empty()) throw UsageError("no taps requested");
  for (const auto& t : taps)
    if (!Model::is_valid_tap(t)) {
      std::string valid;
      for (const auto& k : Model::tap_order()) valid += " " + k;
      throw UsageError("unknown tap \"" + t + "\"; valid taps:" + valid);
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string synthetic;
  std::string data;
  std::string out_dir = "runs/train";
  std::string arch = "resnet20";
  TrainConfig cfg;
  std::string mean_csv, std_csv;
  std::uint64_t build_seed = 0;  // 0 -> derive from cfg.seed
};

inline int cmd_train(const TrainArgs& args, std::ostream& out) {
  if (args.synthetic.empty() == args.data.empty())
    throw UsageError("train: give exactly one of --synthetic or --data");
  if (args.arch != "resnet20" && args.arch != "resnet18")
    throw UsageError("train: --arch must be resnet20 or resnet18");

  TrainConfig cfg = args.cfg;
  cfg.resize_w = cfg.resize_h;  // --input-size is square
  if (!args.mean_csv.empty()) cfg.mean = detail::parse_triple(args.mean_csv, "--mean");
  if (!args.std_csv.empty()) cfg.std_dev = detail::parse_triple(args.std_csv, "--std");
  if (!(cfg.learning_rate > 0.0f)) throw UsageError("train: --lr must be > 0");
  if (!(cfg.momentum >= 0.0f && cfg.momentum < 1.0f))
    throw UsageError("train: --momentum must be in [0,1)");
  if (cfg.weight_decay < 0.0f) throw UsageError("train: --weight-decay must be >= 0");
  if (cfg.epochs < 0) throw UsageError("train: --epochs must be >= 0");
  if (cfg.epochs > cfg.max_epochs)
    throw UsageError("train: --epochs exceeds --max-epochs (" +
                     std::to_string(cfg.max_epochs) + ")");
  cfg.out_dir = args.out_dir;

  LabeledDataset dataset;
  if (!args.synthetic.empty()) {
    const auto spec = detail::parse_synthetic(args.synthetic);
    dataset = gen_synthetic(spec.classes, spec.per_class, spec.size, spec.size, cfg.seed);
  } else {
    const auto records = read_archive_file(args.data);
    const Tensor* images = nullptr;
    const Tensor* labels = nullptr;
    for (const auto& r : records) {
      if (r.name == "images") images = &r.tensor;
      if (r.name == "labels") labels = &r.tensor;
    }
    if (!images || !labels)
      throw FormatError("train: data archive needs tensors named \"images\" and \"labels\"");
    dataset.images = *images;
    int max_label = 0;
    for (std::size_t i = 0; i < labels->size(); ++i) {
      dataset.labels.push_back(static_cast<int>((*labels)[i]));
      max_label = std::max(max_label, dataset.labels.back());
    }
    dataset.class_count = max_label + 1;
  }
  if (dataset.class_count < 2) throw ValueError("train: dataset needs at least 2 classes");

  const std::uint64_t build_seed = args.build_seed ? args.build_seed : cfg.seed;
  ArchConfig arch_cfg = args.arch == "resnet20"
                            ? resnet20_config(dataset.class_count, static_cast<int>(cfg.resize_h))
                            : resnet18_config(dataset.class_count, static_cast<int>(cfg.resize_h));
  Model model = build_model(arch_cfg, build_seed);

  const auto result = train_model(model, dataset, cfg);
  for (const auto& e : result.log) out << log_entry_json(e).dump() << '\n';
  out << "trained " << result.log.size() << " epochs, " << result.checkpoints.size()
      << " checkpoints in " << cfg.out_dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

struct ExtractArgs {
  std::string checkpoint;
  std::string images;
  std::string taps_csv;
  std::string out = "activations.rdma";
  PreprocessOptions preprocess;
  std::string mean_csv, std_csv;
  std::size_t batch = 32;
};

inline int cmd_extract(const ExtractArgs& args, std::ostream& out) {
  auto taps = args.taps_csv.empty() ? Model::tap_order() : detail::split_csv(args.taps_csv);
  detail::validate_taps(taps);
  PreprocessOptions pp = args.preprocess;
  pp.resize_w = pp.resize_h;  // --input-size is square
  if (!args.mean_csv.empty()) pp.mean = detail::parse_triple(args.mean_csv, "--mean");
  if (!args.std_csv.empty()) pp.std_dev = detail::parse_triple(args.std_csv, "--std");

  auto [model, epoch] = load_model_file(args.checkpoint);
  const Tensor images = load_stimulus_images(args.images, pp);
  const auto acts = extract_activations(model, images, taps, args.batch);
  write_archive_file(args.out, acts);
  out << "wrote " << acts.size() << " tap tensors for " << images.dim(0) << " stimuli (epoch "
      << epoch << " checkpoint) to " << args.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// rdm
// ---------------------------------------------------------------------------

struct RdmArgs {
  std::string activations;
  std::string out_dir = "rdms";
};

inline int cmd_rdm(const RdmArgs& args, std::ostream& out) {
  const auto acts = read_archive_file(args.activations);
  if (acts.empty()) throw FormatError("rdm: activation archive is empty");
  const auto paths = write_rdms(acts, args.out_dir);
  out << "wrote " << paths.size() << " RDM files to " << args.out_dir << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::vector<std::string> rdms;  // directory or explicit .rdmt files
  std::string brain;
  std::string out = "score.json";
};

inline int cmd_score(const ScoreArgs& args, std::ostream& out) {
  std::vector<fs::path> files;
  for (const auto& r : args.rdms) {
    if (fs::is_directory(r)) {
      for (const auto& e : fs::directory_iterator(r))
        if (e.is_regular_file() && e.path().extension() == ".rdmt") files.push_back(e.path());
    } else {
      files.push_back(r);
    }
  }
  if (files.empty()) throw UsageError("score: no .rdmt files found");
  std::sort(files.begin(), files.end());

  const auto model_rdms = read_rdm_files(files);
  const auto brain = read_brain_archive(args.brain);
  const ScoreReport report = score_rdms(model_rdms, brain);
  write_json_file(args.out, score_report_json(report));
  out << "scored " << report.layer_order.size() << " layers against " << report.regions.size()
      << " regions; best layer: " << report.best_layer << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string manifest;
};

inline int cmd_evaluate(const EvaluateArgs& args, std::ostream& out, std::ostream& err) {
  const EvalManifest manifest = parse_manifest(args.manifest);
  const EvalOutcome outcome = run_evaluate(manifest, err);
  out << leaderboard_row_json(outcome.row).dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string ledger;
  std::string format = "csv";
  std::string out;  // empty -> stdout
};

inline int cmd_report(const ReportArgs& args, std::ostream& out) {
  ordered_json rows = ordered_json::array();
  if (fs::exists(args.ledger)) rows = read_ledger(args.ledger);
  const std::string rendered = render_report(rows, args.format);
  if (args.out.empty()) {
    out << rendered;
  } else {
    std::ofstream os(args.out);
    if (!os) throw Error("cannot open for writing: " + args.out);
    os << rendered;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// App wiring
// ---------------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"rsaforge: train a small residual network and score its layers "
               "against brain RDMs"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train the network and write checkpoints");
  train_cmd->add_option("--synthetic", train_args.synthetic,
                        "Synthetic dataset spec, e.g. classes=4,per_class=50");
  train_cmd->add_option("--data", train_args.data, "RDMA archive with images+labels tensors");
  train_cmd->add_option("--out", train_args.out_dir, "Output directory");
  train_cmd->add_option("--arch", train_args.arch, "resnet20 or resnet18");
  train_cmd->add_option("--epochs", train_args.cfg.epochs, "Epochs to train");
  train_cmd->add_option("--max-epochs", train_args.cfg.max_epochs, "Upper bound on epochs");
  train_cmd->add_option("--batch-size", train_args.cfg.batch_size, "Mini-batch size");
  train_cmd->add_option("--lr", train_args.cfg.learning_rate, "Learning rate");
  train_cmd->add_option("--momentum", train_args.cfg.momentum, "SGD momentum");
  train_cmd->add_option("--weight-decay", train_args.cfg.weight_decay, "L2 weight decay");
  train_cmd->add_option("--seed", train_args.cfg.seed, "Run seed");
  train_cmd->add_option("--input-size", train_args.cfg.resize_h, "Resize target (square)");
  train_cmd->add_option("--mean", train_args.mean_csv, "Normalization mean r,g,b");
  train_cmd->add_option("--std", train_args.std_csv, "Normalization std r,g,b");

  ExtractArgs extract_args;
  auto* extract_cmd = app.add_subcommand("extract", "Dump per-tap activations for a stimulus set");
  extract_cmd->add_option("--checkpoint", extract_args.checkpoint, "Checkpoint archive")->required();
  extract_cmd->add_option("--images", extract_args.images, "PPM directory or RDMA image archive")
      ->required();
  extract_cmd->add_option("--taps", extract_args.taps_csv, "Comma-separated tap names");
  extract_cmd->add_option("--out", extract_args.out, "Output activation archive");
  extract_cmd->add_option("--input-size", extract_args.preprocess.resize_h, "Resize target");
  extract_cmd->add_option("--mean", extract_args.mean_csv, "Normalization mean r,g,b");
  extract_cmd->add_option("--std", extract_args.std_csv, "Normalization std r,g,b");
  extract_cmd->add_option("--batch", extract_args.batch, "Forward batch size");

  RdmArgs rdm_args;
  auto* rdm_cmd = app.add_subcommand("rdm", "Build one RDM per tap from an activation archive");
  rdm_cmd->add_option("--activations", rdm_args.activations, "Activation archive")->required();
  rdm_cmd->add_option("--out", rdm_args.out_dir, "Output directory");

  ScoreArgs score_args;
  auto* score_cmd = app.add_subcommand("score", "Score model RDMs against a brain archive");
  score_cmd->add_option("--rdms", score_args.rdms, "RDM directory or .rdmt files")->required();
  score_cmd->add_option("--brain", score_args.brain, "Brain RDM archive")->required();
  score_cmd->add_option("--out", score_args.out, "Output report JSON");

  EvaluateArgs eval_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "Run extract/rdm/score over a manifest");
  eval_cmd->add_option("--manifest", eval_args.manifest, "Evaluation manifest JSON")->required();

  ReportArgs report_args;
  auto* report_cmd = app.add_subcommand("report", "Render the results ledger");
  report_cmd->add_option("--ledger", report_args.ledger, "Ledger JSON file")->required();
  report_cmd->add_option("--format", report_args.format, "csv or json");
  report_cmd->add_option("--out", report_args.out, "Output file (default stdout)");

  std::vector<std::string> reversed(argv.rbegin(), argv.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args, out);
    if (extract_cmd->parsed()) return cmd_extract(extract_args, out);
    if (rdm_cmd->parsed()) return cmd_rdm(rdm_args, out);
    if (score_cmd->parsed()) return cmd_score(score_args, out);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_args, out, err);
    if (report_cmd->parsed()) return cmd_report(report_args, out);
    err << "error: no command given\n";
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

inline int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

} // namespace rsaforge::cli
