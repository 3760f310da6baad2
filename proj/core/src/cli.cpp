#include "cmtboost/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cmtboost/checkpoint.hpp"
#include "cmtboost/config.hpp"
#include "cmtboost/data.hpp"
#include "cmtboost/gradcheck.hpp"
#include "cmtboost/metrics.hpp"
#include "cmtboost/model.hpp"
#include "cmtboost/pca.hpp"
#include "cmtboost/train.hpp"

namespace fs = std::filesystem;

namespace cmtboost {

namespace {

struct CliArgs {
  std::string command;
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool f64 = false;
  bool synthetic = false;
  std::size_t epochs = 0;
  bool epochs_given = false;
  std::string checkpoint;
  std::string format = "text";
  std::string inject_fault;
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << content;
    if (!out) throw DataError("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

ResolvedConfig resolve(const CliArgs& a) {
  std::vector<std::string> overrides = a.sets;
  if (a.synthetic) overrides.push_back("data.synthetic = true");
  if (a.epochs_given) overrides.push_back("train.epochs = " + std::to_string(a.epochs));
  if (!a.checkpoint.empty()) overrides.push_back("eval.checkpoint = " + a.checkpoint);
  ResolvedConfig cfg = parse_config(a.config_path, overrides);
  if (a.seed_given) {
    if (!cfg.model_seed_set) cfg.model.seed = a.seed;
    if (!cfg.train_seed_set) cfg.train.seed = a.seed;
    if (!cfg.data_seed_set) cfg.data.seed = a.seed;
  }
  return cfg;
}

void write_echo(const CliArgs& a, const ResolvedConfig& cfg) {
  fs::create_directories(a.out_dir);
  write_text_atomic(fs::path(a.out_dir) / "resolved.cfg", render_config(cfg));
}

DatasetSplit prepare_data(const ResolvedConfig& cfg) {
  std::vector<ImageRecord> records;
  if (cfg.data.synthetic) {
    SyntheticSpec spec;
    spec.count_per_class = cfg.data.synthetic_count;
    spec.size = std::max(cfg.model.input_height, cfg.model.input_width);
    spec.noise_level = cfg.data.noise_level;
    spec.seed = cfg.data.seed;
    records = generate_synthetic(spec);
  } else {
    if (cfg.data.dir.empty()) {
      throw DataError("no data.dir configured and --synthetic not given");
    }
    records = load_dataset(cfg.data.dir, cfg.data.permissive);
  }
  records = preprocess_records(std::move(records), cfg.model.input_height,
                               cfg.model.input_width);
  return split_dataset(records, cfg.data.split, cfg.data.seed);
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,loss,val_acc,val_f1,val_sen,val_pre,lr\n";
  for (const auto& row : history) {
    out += std::to_string(row.epoch) + "," + fmt("%.9g", row.train_loss) + "," +
           fmt("%.6f", row.val_acc) + "," + fmt("%.6f", row.val_f1) + "," +
           fmt("%.6f", row.val_sen) + "," + fmt("%.6f", row.val_pre) + "," +
           fmt("%.9g", row.lr) + "\n";
  }
  return out;
}

std::string report_csv(const EvalReport& rep) {
  std::string out =
      "tp,tn,fp,fn,acc,sen,pre,f1,sen_ci,auc_roc,auc_pr,precision_degenerate,"
      "curves_degenerate\n";
  out += std::to_string(rep.counts.tp) + "," + std::to_string(rep.counts.tn) + "," +
         std::to_string(rep.counts.fp) + "," + std::to_string(rep.counts.fn) + "," +
         fmt("%.6f", rep.acc) + "," + fmt("%.6f", rep.sen) + "," + fmt("%.6f", rep.pre) + "," +
         fmt("%.6f", rep.f1) + "," + fmt("%.9g", rep.sen_ci_half_width) + "," +
         fmt("%.9g", rep.curves.auc_roc) + "," + fmt("%.9g", rep.curves.auc_pr) + "," +
         (rep.precision_degenerate ? "1" : "0") + "," + (rep.curves_degenerate ? "1" : "0") +
         "\n";
  return out;
}

std::string curve_csv(const std::vector<CurvePoint>& points) {
  std::string out = "threshold,x,y\n";
  for (const auto& p : points) {
    out += fmt("%.9g", p.threshold) + "," + fmt("%.9g", p.x) + "," + fmt("%.9g", p.y) + "\n";
  }
  return out;
}

std::string scores_csv(const std::vector<ImageRecord>& records, const EvalReport& rep) {
  std::string out = "id,label,score\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    out += records[i].id + "," + std::to_string(rep.labels[i]) + "," +
           fmt("%.9g", rep.scores[i]) + "\n";
  }
  return out;
}

void write_report_files(const CliArgs& a, const std::vector<ImageRecord>& records,
                        const EvalReport& rep) {
  write_text_atomic(fs::path(a.out_dir) / "report.csv", report_csv(rep));
  write_text_atomic(fs::path(a.out_dir) / "scores.csv", scores_csv(records, rep));
  if (!rep.curves_degenerate) {
    write_text_atomic(fs::path(a.out_dir) / "roc.csv", curve_csv(rep.curves.roc));
    write_text_atomic(fs::path(a.out_dir) / "pr.csv", curve_csv(rep.curves.pr));
  }
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s;
}

template <typename T>
int cmd_train(const CliArgs& a) {
  ResolvedConfig cfg = resolve(a);
  write_echo(a, cfg);
  DatasetSplit split = prepare_data(cfg);
  write_text_atomic(fs::path(a.out_dir) / "split.csv", "");
  write_split_manifest((fs::path(a.out_dir) / "split.csv").string(), split);

  BoostedHybridModel<T> model(cfg.model);
  if (!cfg.train.init_checkpoint.empty()) {
    load_checkpoint(model, cfg.train.init_checkpoint, cfg.train.init_prefix);
    std::cout << "loaded initial weights from " << cfg.train.init_checkpoint
              << (cfg.train.init_prefix.empty() ? "" : " (prefix " + cfg.train.init_prefix + ")")
              << "\n";
  }

  TrainConfig tcfg = cfg.train;
  tcfg.checkpoint_dir = a.out_dir;
  TrainResult<T> result = train(model, split, tcfg);
  write_text_atomic(fs::path(a.out_dir) / "history.csv", history_csv(result.history));

  const std::string echo = render_config(cfg);
  auto final_params = snapshot_params(model);
  restore_params(model, result.best_params);
  save_checkpoint(model, (fs::path(a.out_dir) / "best.ckpt").string(), echo);

  if (!split.test.empty()) {
    EvalReport rep = evaluate(model, split.test, cfg.train.batch_size);
    write_report_files(a, split.test, rep);
    std::cout << "test: acc " << fmt("%.2f", rep.acc) << "  sen " << fmt("%.2f", rep.sen)
              << "  pre " << fmt("%.2f", rep.pre) << "  f1 " << fmt("%.2f", rep.f1)
              << "  auc_roc " << fmt("%.4f", rep.curves.auc_roc) << "\n";
  }

  restore_params(model, final_params);
  save_checkpoint(model, (fs::path(a.out_dir) / "final.ckpt").string(), echo);

  if (result.diverged) {
    std::cerr << "training diverged: " << result.divergence_reason
              << " (best checkpoint retained)\n";
    return kExitDivergence;
  }
  std::cout << "trained " << result.history.size() << " epochs; best epoch "
            << result.best_epoch << " (val F1 " << fmt("%.2f", result.best_val_f1) << ")\n";
  return kExitOk;
}

template <typename T>
int cmd_eval(const CliArgs& a) {
  ResolvedConfig cfg = resolve(a);
  if (cfg.eval_checkpoint.empty()) {
    throw ConfigError("eval.checkpoint (or --checkpoint) is required");
  }
  write_echo(a, cfg);
  DatasetSplit split = prepare_data(cfg);
  if (split.test.empty()) throw DataError("eval: empty test split");

  BoostedHybridModel<T> model(cfg.model);
  load_checkpoint(model, cfg.eval_checkpoint);

  std::vector<std::vector<double>> features;
  EvalReport rep = evaluate(model, split.test, cfg.train.batch_size, &features);
  write_report_files(a, split.test, rep);
  try {
    PcaResult pca = pca_project(features, 2);
    std::string out = "id,label,pc1,pc2\n";
    for (std::size_t i = 0; i < split.test.size(); ++i) {
      out += split.test[i].id + "," + std::to_string(split.test[i].label) + "," +
             fmt("%.9g", pca.projections[i][0]) + "," + fmt("%.9g", pca.projections[i][1]) + "\n";
    }
    write_text_atomic(fs::path(a.out_dir) / "pca.csv", out);
  } catch (const DegeneracyError& e) {
    std::cerr << "pca skipped: " << e.what() << "\n";
  }
  std::cout << "eval: acc " << fmt("%.2f", rep.acc) << "  sen " << fmt("%.2f", rep.sen)
            << "  pre " << fmt("%.2f", rep.pre) << "  f1 " << fmt("%.2f", rep.f1) << "  auc_roc "
            << fmt("%.4f", rep.curves.auc_roc) << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CliArgs& a) {
  ResolvedConfig cfg = resolve(a);
  write_echo(a, cfg);
  // The battery always runs at 64-bit; central differences need it.
  auto items = gradcheck_battery(a.inject_fault);
  std::vector<std::string> offenders;
  std::string csv = "name,max_rel_err,threshold,status\n";
  for (const auto& item : items) {
    const bool ok = item.passed();
    std::printf("%-24s max rel err %10.3e   threshold %7.0e   %s\n", item.name.c_str(),
                item.max_rel_err, item.threshold, ok ? "PASS" : "FAIL");
    csv += item.name + "," + fmt("%.9g", item.max_rel_err) + "," +
           fmt("%.0e", item.threshold) + "," + (ok ? "PASS" : "FAIL") + "\n";
    if (!ok) offenders.push_back(item.name);
  }
  write_text_atomic(fs::path(a.out_dir) / "gradcheck.csv", csv);
  if (!offenders.empty()) {
    std::string joined;
    for (const auto& name : offenders) joined += (joined.empty() ? "" : ", ") + name;
    std::cerr << "gradcheck failed for: " << joined << "\n";
    return kExitGradcheck;
  }
  std::cout << items.size() << " checks passed\n";
  return kExitOk;
}

template <typename T>
int cmd_inspect(const CliArgs& a) {
  ResolvedConfig cfg = resolve(a);
  write_echo(a, cfg);
  BoostedHybridModel<T> model(cfg.model);
  const auto rows = model.shape_trace();
  std::size_t total = 0;
  std::string csv = "layer,shape,params\n";
  std::printf("%-20s %-16s %12s\n", "layer", "output", "params");
  for (const auto& row : rows) {
    const std::string shape = shape_string(row.out_shape);
    std::printf("%-20s %-16s %12zu\n", row.name.c_str(), shape.c_str(), row.param_count);
    csv += row.name + "," + shape + "," + std::to_string(row.param_count) + "\n";
    total += row.param_count;
  }
  std::printf("total parameters: %zu\n", total);
  csv += "total,," + std::to_string(total) + "\n";
  if (a.format == "csv") {
    write_text_atomic(fs::path(a.out_dir) / "trace.csv", csv);
  }
  return kExitOk;
}

int cmd_synth(const CliArgs& a) {
  ResolvedConfig cfg = resolve(a);
  write_echo(a, cfg);
  SyntheticSpec spec;
  spec.count_per_class = cfg.data.synthetic_count;
  spec.size = std::max(cfg.model.input_height, cfg.model.input_width);
  spec.noise_level = cfg.data.noise_level;
  spec.seed = cfg.data.seed;
  auto records = generate_synthetic(spec);
  write_dataset_png(a.out_dir, records);
  std::cout << "wrote " << records.size() << " images under " << a.out_dir << "\n";
  return kExitOk;
}

int dispatch(const CliArgs& a) {
  try {
    if (a.command == "train") return a.f64 ? cmd_train<double>(a) : cmd_train<float>(a);
    if (a.command == "eval") return a.f64 ? cmd_eval<double>(a) : cmd_eval<float>(a);
    if (a.command == "gradcheck") return cmd_gradcheck(a);
    if (a.command == "inspect") return a.f64 ? cmd_inspect<double>(a) : cmd_inspect<float>(a);
    if (a.command == "synth") return cmd_synth(a);
    throw ConfigError("unknown command: " + a.command);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("cmtboost");
  for (const auto& s : args) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Hybrid CNN-transformer for binary ultrasound image classification"};
  app.require_subcommand(1);
  CliArgs args;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config_path, "config file (section.key = value lines)");
    sub->add_option("--set", args.sets, "override, e.g. --set model.base_width=8")
        ->take_all()
        ->allow_extra_args(false);
    sub->add_option("--out", args.out_dir, "output directory");
    sub->add_option("--seed", args.seed, "seed for model/train/data unless set explicitly")
        ->each([&](const std::string&) { args.seed_given = true; });
    sub->add_flag("--f64", args.f64, "run with 64-bit floats");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model and evaluate the test split");
  add_common(train_cmd);
  train_cmd->add_flag("--synthetic", args.synthetic, "use the synthetic dataset generator");
  train_cmd->add_option("--epochs", args.epochs, "shortcut for --set train.epochs=N")
      ->each([&](const std::string&) { args.epochs_given = true; });

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval_cmd);
  eval_cmd->add_flag("--synthetic", args.synthetic, "use the synthetic dataset generator");
  eval_cmd->add_option("--checkpoint", args.checkpoint, "checkpoint to load");

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "run the gradient verification battery");
  add_common(grad_cmd);
  grad_cmd->add_option("--inject-fault", args.inject_fault,
                       "negate one op's analytic gradient (test hook)");

  CLI::App* inspect_cmd = app.add_subcommand("inspect", "print the shape trace");
  add_common(inspect_cmd);
  inspect_cmd->add_option("--format", args.format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}));

  CLI::App* synth_cmd = app.add_subcommand("synth", "emit a synthetic dataset to disk");
  add_common(synth_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  for (CLI::App* sub : {train_cmd, eval_cmd, grad_cmd, inspect_cmd, synth_cmd}) {
    if (sub->parsed()) args.command = sub->get_name();
  }
  return dispatch(args);
}

}  // namespace cmtboost
