// physio-recon: batch entry point.
//
//   physio-recon synth      [--config F] [--set k=v] --out DIR [--seed N] [--raw-mode]
//   physio-recon preprocess [--config F] [--manifest M] --out DIR [--keep-going]
//   physio-recon train      [--config F] [--target M] [--source M] [--strategy S] --out DIR [--seed N]
//   physio-recon evaluate   [--config F] --checkpoint C [--target M] --out DIR
//   physio-recon predict    [--config F] --checkpoint C [--target M] --out DIR
//
// Config file sections: data {target, source}, preprocess, model, train,
// synth, strategy. Relative paths inside the config resolve against the
// config file's directory. Exit codes: 0 ok, 64 usage, 1 data, 2 hash
// mismatch, 3 numeric failure.

#include "physio/config_io.hpp"
#include "physio/error.hpp"
#include "physio/evaluation.hpp"
#include "physio/runtime.hpp"
#include "physio/strategy.hpp"
#include "physio/synth_data.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

namespace fs = std::filesystem;
using namespace physio;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool keep_going = false;
  bool raw_mode = false;
  std::string strategy;
  std::string source;
  std::string target;
  std::string checkpoint;
  int verbosity = 1;
};

int g_verbosity = 1;

void info(const std::string& msg) {
  if (g_verbosity >= 1) std::cerr << msg << '\n';
}

void debug(const std::string& msg) {
  if (g_verbosity >= 2) std::cerr << msg << '\n';
}

const std::vector<std::string> kSections{"data", "preprocess", "model", "train", "synth", "strategy"};

struct Config {
  json doc = json::object();
  fs::path base_dir = fs::current_path();

  json section(const std::string& name) const { return doc.contains(name) ? doc[name] : json::object(); }

  fs::path data_path(const std::string& key) const {
    const json d = section("data");
    if (!d.contains(key)) return {};
    const fs::path p = d[key].get<std::string>();
    return p.is_absolute() ? p : base_dir / p;
  }
};

Config load_config(const Options& opt) {
  Config c;
  if (!opt.config.empty()) {
    const fs::path path = fs::absolute(opt.config);
    std::ifstream in(path);
    if (!in) fail(ErrorKind::usage, "config file " + path.string() + " does not exist");
    try {
      c.doc = json::parse(in);
    } catch (const json::parse_error& e) {
      fail(ErrorKind::usage, "config file " + path.string() + ": " + e.what());
    }
    if (!c.doc.is_object()) fail(ErrorKind::usage, "config file " + path.string() + " must hold a JSON object");
    c.base_dir = path.parent_path();
  }
  for (const auto& s : opt.overrides) apply_override(c.doc, s);
  for (const auto& [key, value] : c.doc.items()) {
    if (std::find(kSections.begin(), kSections.end(), key) == kSections.end()) {
      fail(ErrorKind::usage, "config: unknown section '" + key + "'");
    }
    if (!value.is_object()) fail(ErrorKind::usage, "config: section '" + key + "' must be an object");
  }
  return c;
}

ModelConfig model_config(const Config& c) {
  const json j = c.section("model");
  ModelConfig base = ModelConfig::seq2one_default();
  if (j.contains("architecture") && j["architecture"] == "seq2seq") base = ModelConfig::seq2seq_default();
  return model_config_from_json(j, base);
}

PrepSettings prep_settings(const Config& c) { return prep_settings_from_json(c.section("preprocess")); }

fs::path require_out(const Options& opt) {
  if (opt.out.empty()) fail(ErrorKind::usage, "--out is required");
  fs::create_directories(opt.out);
  return opt.out;
}

fs::path manifest_arg(const std::string& flag, const Config& c, const std::string& key) {
  if (!flag.empty()) return fs::absolute(flag);
  return c.data_path(key);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot write " + path.string());
  out << text;
}

struct LoadedData {
  std::unique_ptr<Dataset> dataset;
  std::string hash;
};

LoadedData load_dataset(const fs::path& manifest_path, const PrepSettings& prep) {
  const Manifest m = load_manifest(manifest_path);
  info("loading " + m.dataset_name + " (" + std::to_string(m.scans.size()) + " scans)");
  auto scans = load_all_scans(m, prep);
  // Raw data is conditioned on load, so either way the scans carry the
  // current settings' hash.
  const std::string hash = prep.hash();
  return {std::make_unique<Dataset>(m.dataset_name, std::move(scans), hash, file_hash(manifest_path)), hash};
}

int cmd_synth(const Options& opt) {
  const Config c = load_config(opt);
  SynthConfig cfg = synth_config_from_json(c.section("synth"));
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.raw_mode) cfg.raw_mode = true;
  cfg.validate();
  const fs::path out = require_out(opt);
  const Manifest m = generate_dataset(cfg, out);
  info("wrote " + std::to_string(m.scans.size()) + " scans to " + (out / "manifest.json").string());
  return 0;
}

int cmd_preprocess(const Options& opt) {
  const Config c = load_config(opt);
  const fs::path manifest_path = manifest_arg(opt.target, c, "target");
  if (manifest_path.empty()) fail(ErrorKind::usage, "preprocess needs --manifest or data.target");
  const PrepSettings prep = prep_settings(c);
  const fs::path out = require_out(opt);
  const Manifest m = load_manifest(manifest_path);
  const auto outcomes = preprocess_dataset(m, prep, out, opt.keep_going);
  int failed = 0;
  for (const auto& o : outcomes) {
    if (!o.error.empty()) {
      ++failed;
      std::cout << o.scan_id << ": failed: " << o.error << '\n';
    } else {
      std::cout << o.scan_id << (o.skipped ? ": skipped (hash match)" : ": preprocessed") << '\n';
    }
  }
  if (failed) {
    std::cerr << "physio-recon: error: " << failed << " of " << outcomes.size() << " scans failed\n";
    return exit_code(ErrorKind::data);
  }
  return 0;
}

int cmd_train(const Options& opt) {
  const Config c = load_config(opt);
  const json sj = c.section("strategy");
  for (const auto& [k, v] : sj.items()) {
    if (k != "kind") fail(ErrorKind::usage, "config: unknown key strategy." + k);
  }
  StrategySpec spec;
  spec.kind = strategy_from_string(!opt.strategy.empty() ? opt.strategy : sj.value("kind", std::string("scratch")));
  const fs::path target_path = manifest_arg(opt.target, c, "target");
  const fs::path source_path = manifest_arg(opt.source, c, "source");
  if (target_path.empty()) fail(ErrorKind::usage, "train needs --target (or data.target)");
  if (spec.kind != StrategyKind::scratch && source_path.empty()) {
    fail(ErrorKind::usage, "strategy " + to_string(spec.kind) + " needs a source dataset (--source)");
  }

  StrategyOptions so;
  so.model = model_config(c);
  so.train = train_config_from_json(c.section("train"));
  if (opt.seed) {
    so.train.seed = *opt.seed;
    so.model.init_seed = *opt.seed;
  }
  so.train.validate();
  so.threads = thread_cap_from_env(int(std::max(1u, std::thread::hardware_concurrency())));
  so.log = [](const std::string& s) { info(s); };
  const PrepSettings prep = prep_settings(c);
  const fs::path out = require_out(opt);

  LoadedData target = load_dataset(target_path, prep);
  LoadedData source;
  std::map<std::string, const Dataset*> data;
  spec.target = "target:" + target.dataset->name();
  data[spec.target] = target.dataset.get();
  if (spec.kind != StrategyKind::scratch) {
    source = load_dataset(source_path, prep);
    spec.source = "source:" + source.dataset->name();
    data[spec.source] = source.dataset.get();
  }

  json resolved{{"model", to_json(so.model)},
                {"train", to_json(so.train)},
                {"preprocess", to_json(prep)},
                {"strategy", {{"kind", to_string(spec.kind)}}},
                {"data", {{"target", target_path.string()}}}};
  if (!source_path.empty() && spec.kind != StrategyKind::scratch) resolved["data"]["source"] = source_path.string();
  write_text(out / "config.json", resolved.dump(2) + "\n");

  const StrategyResult res = run_strategy(spec, data, so);
  if (res.pretrain) {
    save_checkpoint(res.pretrain->checkpoint, out / "pretrain" / "model.ckpt");
    write_epoch_log(res.pretrain->log, out / "pretrain" / "log.csv");
  }
  for (const auto& f : res.folds) {
    const fs::path dir = out / ("fold-" + std::to_string(f.fold));
    if (spec.kind != StrategyKind::pretrain_only) {
      save_checkpoint(f.outcome.checkpoint, dir / "model.ckpt");
      write_epoch_log(f.outcome.log, dir / "log.csv");
    }
    fs::create_directories(dir);
    json ids = json::array();
    for (auto i : f.test_indices) ids.push_back(target.dataset->meta(i).scan_id);
    write_text(dir / "test_scans.json", ids.dump(2) + "\n");
    debug("fold " + std::to_string(f.fold) + ": " + std::to_string(f.outcome.checkpoint.provenance.epochs_run) +
          " epochs, best validation loss " + std::to_string(f.outcome.checkpoint.provenance.final_val_loss));
  }
  write_report_json(res.report, out / "report.json");
  write_results_csv(res.report.results, out / "results.csv");
  for (const auto& [task, s] : res.report.summary) {
    std::printf("%s pooled median r = %.4f (median of fold medians %.4f, %d scans)\n", task.c_str(), s.pooled,
                s.median_of_fold_medians, s.n_scans);
  }
  return 0;
}

struct EvalInputs {
  Checkpoint ck;
  LoadedData data;
};

EvalInputs eval_inputs(const Options& opt, const Config& c) {
  if (opt.checkpoint.empty()) fail(ErrorKind::usage, "--checkpoint is required");
  EvalInputs in;
  in.ck = load_checkpoint(opt.checkpoint);
  const fs::path target_path = manifest_arg(opt.target, c, "target");
  if (target_path.empty()) fail(ErrorKind::usage, "--target (or data.target) is required");
  in.data = load_dataset(target_path, prep_settings(c));
  return in;
}

std::vector<const Scan*> all_scans(const Dataset& ds) {
  std::vector<const Scan*> v;
  for (std::size_t i = 0; i < ds.size(); ++i) v.push_back(&ds.read(i, Purpose::test));
  return v;
}

int cmd_evaluate(const Options& opt) {
  const Config c = load_config(opt);
  const EvalInputs in = eval_inputs(opt, c);
  const fs::path out = require_out(opt);
  auto results = evaluate_scans(in.ck, all_scans(*in.data.dataset), 0, in.data.hash);
  const EvalReport rep =
      build_report(in.ck.provenance.strategy, to_string(in.ck.model.architecture), in.data.hash, std::move(results));
  write_report_json(rep, out / "report.json");
  write_results_csv(rep.results, out / "results.csv");
  for (const auto& [task, s] : rep.summary) std::printf("%s pooled median r = %.4f\n", task.c_str(), s.pooled);
  return 0;
}

int cmd_predict(const Options& opt) {
  const Config c = load_config(opt);
  const EvalInputs in = eval_inputs(opt, c);
  const fs::path out = require_out(opt);
  std::vector<PredictionTrace> traces;
  evaluate_scans(in.ck, all_scans(*in.data.dataset), 0, in.data.hash, &traces);
  for (const auto& t : traces) write_prediction_csv(t, out / (t.scan_id + "_" + t.task + ".csv"));
  info("wrote " + std::to_string(traces.size()) + " prediction files to " + out.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Reconstruct respiratory volume and heart rate from fMRI ROI time series"};
  app.require_subcommand(1);
  Options opt;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON config file");
    sub->add_option("--set", opt.overrides, "Override a config entry, e.g. train.lr_init=1e-3")->take_all();
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_flag("-v,--verbose", [&](std::int64_t n) { opt.verbosity = 1 + int(n); }, "More logging");
    sub->add_flag("-q,--quiet", [&](std::int64_t) { opt.verbosity = 0; }, "Errors only");
  };
  auto seed_opt = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { opt.seed = s; },
                                            "Random seed");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  common(synth);
  seed_opt(synth);
  synth->add_flag("--raw-mode", opt.raw_mode, "Emit raw-rate ROI, respiration and beat files");

  auto* prep = app.add_subcommand("preprocess", "Condition a raw dataset into a cached one");
  common(prep);
  prep->add_option("--manifest", opt.target, "Dataset manifest");
  prep->add_flag("--keep-going", opt.keep_going, "Report every failing scan instead of stopping at the first");

  auto* train = app.add_subcommand("train", "Run a training strategy with cross-validation");
  common(train);
  seed_opt(train);
  train->add_option("--strategy", opt.strategy, "pretrain_only, scratch, joint_scratch or finetune");
  train->add_option("--target,--manifest", opt.target, "Target dataset manifest");
  train->add_option("--source", opt.source, "Source dataset manifest");

  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "Checkpoint file");
  eval->add_option("--target,--manifest", opt.target, "Dataset manifest");

  auto* predict = app.add_subcommand("predict", "Write measured and predicted series per scan");
  common(predict);
  predict->add_option("--checkpoint", opt.checkpoint, "Checkpoint file");
  predict->add_option("--target,--manifest", opt.target, "Dataset manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(ErrorKind::usage);
  }
  g_verbosity = opt.verbosity;

  try {
    if (synth->parsed()) return cmd_synth(opt);
    if (prep->parsed()) return cmd_preprocess(opt);
    if (train->parsed()) return cmd_train(opt);
    if (eval->parsed()) return cmd_evaluate(opt);
    if (predict->parsed()) return cmd_predict(opt);
  } catch (const Error& e) {
    std::cerr << "physio-recon: error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "physio-recon: error: " << e.what() << '\n';
    return exit_code(ErrorKind::usage);
  } catch (const std::exception& e) {
    std::cerr << "physio-recon: error: " << e.what() << '\n';
    return exit_code(ErrorKind::data);
  }
  return exit_code(ErrorKind::usage);
}
