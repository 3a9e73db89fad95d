#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dtm/harness.hpp"

namespace dtm {

namespace detail {

template <typename T>
int cli_train(const TrainConfig& cfg, const std::string& data_dir, const std::string& out_dir, int threads,
              const std::string& resume) {
  Dataset ds = load_dataset(data_dir);
  TrainResult<T> tr = train<T>(cfg, ds, out_dir, threads, resume);
  for (const auto& st : tr.epochs) std::cout << epoch_line(st, cfg.epochs) << "\n";
  if (tr.aborted) {
    std::cerr << "training aborted: " << tr.abort_reason << "\n";
    return 2;
  }
  std::cout << "best val_mA " << std::setprecision(12) << tr.best_val_mA << " at epoch " << (tr.best_epoch + 1)
            << "\n";
  return 0;
}

template <typename T>
int cli_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split, double threshold,
             int batch_size, int threads, const std::string& out_dir) {
  Dataset ds = load_dataset(data_dir);
  Model<T> model = model_from_checkpoint<T>(load_checkpoint(ckpt_path));
  const std::vector<Sample>& samples = split == "train" ? ds.train : split == "val" ? ds.val : ds.test;
  if (samples.empty()) throw ConfigError("split '" + split + "' is empty");
  EvalResult ev = evaluate(model, ds.schema, samples, threshold, batch_size, threads);
  write_report(ev.metrics, std::cout);
  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream rep((fs::path(out_dir) / "metrics.txt").string());
    write_report(ev.metrics, rep);
    std::ofstream table((fs::path(out_dir) / "attributes.csv").string());
    write_attribute_table(ev.metrics, ds.schema, table);
  }
  return 0;
}

template <typename T>
int cli_export(const std::string& ckpt_path, const std::string& data_dir, const std::vector<std::string>& ids,
               const std::string& out_dir) {
  Dataset ds = load_dataset(data_dir);
  Model<T> model = model_from_checkpoint<T>(load_checkpoint(ckpt_path));
  ExportReport report = export_heatmaps(model, ds, ids, out_dir);
  std::cout << "wrote " << report.files_written << " files\n";
  if (!report.unknown_ids.empty()) {
    std::cerr << "unknown ids:";
    for (const auto& id : report.unknown_ids) std::cerr << " " << id;
    std::cerr << "\n";
    return 2;
  }
  return 0;
}

template <typename T>
int cli_ablate(const TrainConfig& cfg, const std::string& data_dir, const std::string& mode, int threads,
               const std::string& out_path) {
  Dataset ds = load_dataset(data_dir);
  std::vector<AblateRow> rows =
      mode == "batch" ? ablate_batch_size<T>(cfg, ds, {16, 32, 64, 128}, threads) : ablate_heads<T>(cfg, ds, threads);
  write_ablation_table(rows, std::cout);
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (!os) throw IoError("cannot write '" + out_path + "'");
    write_ablation_table(rows, os);
  }
  return 0;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"pedestrian attribute recognition with template heads and keypoint supervision"};
  app.require_subcommand(1);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "generate the synthetic dataset");
  SynthConfig synth;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--seed", synth.seed, "generator seed");
  gen->add_option("--n-train", synth.n_train, "training samples");
  gen->add_option("--n-val", synth.n_val, "validation samples");
  gen->add_option("--n-test", synth.n_test, "test samples");
  gen->add_option("--height", synth.height, "image height");
  gen->add_option("--width", synth.width, "image width");
  gen->add_option("--noise", synth.noise_stddev, "pixel noise stddev");
  gen->add_option("--occlusion", synth.occlusion_prob, "per-joint occlusion probability");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_data, tr_out, tr_resume;
  int tr_threads = 1;
  std::uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  tr->add_option("--config", tr_config, "JSON config file")->required();
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--threads", tr_threads, "evaluation worker threads");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--seed", tr_seed, "override the config seed")->each([&](const std::string&) { tr_seed_set = true; });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_out, ev_precision = "f32";
  double ev_threshold = 0.5;
  int ev_batch = 64, ev_threads = 1;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--threshold", ev_threshold, "decision threshold");
  ev->add_option("--batch-size", ev_batch, "evaluation batch size");
  ev->add_option("--threads", ev_threads, "worker threads");
  ev->add_option("--precision", ev_precision, "f32|f64")->check(CLI::IsMember({"f32", "f64"}));
  ev->add_option("--out", ev_out, "directory for metrics.txt and attributes.csv");

  // export-heatmaps
  auto* ex = app.add_subcommand("export-heatmaps", "write per-attribute heatmap images");
  std::string ex_ckpt, ex_data, ex_out, ex_precision = "f32";
  std::vector<std::string> ex_ids;
  ex->add_option("--ckpt", ex_ckpt, "checkpoint file")->required();
  ex->add_option("--data", ex_data, "dataset directory")->required();
  ex->add_option("--out", ex_out, "output directory")->required();
  ex->add_option("--ids", ex_ids, "sample ids")->required()->delimiter(',');
  ex->add_option("--precision", ex_precision, "f32|f64")->check(CLI::IsMember({"f32", "f64"}));

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and score a grid of variants");
  std::string ab_config, ab_data, ab_mode = "heads", ab_out;
  int ab_threads = 1;
  ab->add_option("--config", ab_config, "JSON config file")->required();
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--mode", ab_mode, "heads|batch")->check(CLI::IsMember({"heads", "batch"}));
  ab->add_option("--threads", ab_threads, "evaluation worker threads");
  ab->add_option("--out", ab_out, "table output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);  // --help and friends
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) {
      Dataset ds = gen_synthetic(synth);
      save_dataset(ds, gen_out);
      std::cout << "wrote " << (ds.train.size() + ds.val.size() + ds.test.size()) << " samples to " << gen_out
                << "\n";
      return 0;
    }
    if (tr->parsed()) {
      TrainConfig cfg = load_train_config(tr_config);
      if (tr_seed_set) cfg.seed = tr_seed;
      return cfg.precision == "f64" ? detail::cli_train<double>(cfg, tr_data, tr_out, tr_threads, tr_resume)
                                    : detail::cli_train<float>(cfg, tr_data, tr_out, tr_threads, tr_resume);
    }
    if (ev->parsed())
      return ev_precision == "f64"
                 ? detail::cli_eval<double>(ev_ckpt, ev_data, ev_split, ev_threshold, ev_batch, ev_threads, ev_out)
                 : detail::cli_eval<float>(ev_ckpt, ev_data, ev_split, ev_threshold, ev_batch, ev_threads, ev_out);
    if (ex->parsed())
      return ex_precision == "f64" ? detail::cli_export<double>(ex_ckpt, ex_data, ex_ids, ex_out)
                                   : detail::cli_export<float>(ex_ckpt, ex_data, ex_ids, ex_out);
    if (ab->parsed()) {
      TrainConfig cfg = load_train_config(ab_config);
      return cfg.precision == "f64" ? detail::cli_ablate<double>(cfg, ab_data, ab_mode, ab_threads, ab_out)
                                    : detail::cli_ablate<float>(cfg, ab_data, ab_mode, ab_threads, ab_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace dtm
