#include "disdyn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "disdyn/errors.hpp"
#include "disdyn/trainer.hpp"

namespace disdyn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void prepare_out_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw ConfigError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir, ec) && !force) {
      throw ConfigError(dir.string() + " is not empty; pass --force to write into it");
    }
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

datagen::Dataset load_split(const fs::path& data_dir, datagen::Split split, dynsys::SystemKind system) {
  const fs::path dir = data_dir / std::string(datagen::to_string(split));
  if (!fs::exists(dir / "meta.json")) {
    throw ConfigError("dataset split '" + std::string(datagen::to_string(split)) + "' not found under " +
                      data_dir.string());
  }
  auto ds = datagen::read_dataset(dir);
  if (ds.system != system) {
    throw ConfigError(dir.string() + " holds " + std::string(dynsys::to_string(ds.system)) +
                      " data, expected " + std::string(dynsys::to_string(system)));
  }
  return ds;
}

json split_files(const fs::path& dir) { return read_json(dir / "meta.json").at("files"); }

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

trainer::GridAxes grid_axes(const config::ProjectConfig& cfg, neural::Family family) {
  trainer::GridAxes axes;
  if (cfg.grid.paper_preset) axes = trainer::paper_grid(cfg.system, family);
  for (const auto& [axis, values] : cfg.grid.axes) axes[axis] = values;
  return axes;
}

struct LoadedRun {
  std::string run_id;
  std::unique_ptr<neural::Model> model;
};

LoadedRun load_run(const fs::path& p) {
  LoadedRun run;
  if (fs::exists(p / "meta.json")) {
    run.run_id = p.filename().string();
    run.model = std::make_unique<neural::Model>(neural::Model::load(p));
  } else if (fs::exists(p / "record.json")) {
    const auto rec = trainer::read_record(p / "record.json");
    if (rec.checkpoint.empty()) throw ConfigError(p.string() + " has no checkpoint (" + rec.error + ")");
    run.run_id = rec.run_id.empty() ? p.filename().string() : rec.run_id;
    run.model = std::make_unique<neural::Model>(neural::Model::load(p / rec.checkpoint));
  } else {
    throw ConfigError(p.string() + " is neither a checkpoint nor a run directory");
  }
  return run;
}

evalkit::EvalReport evaluate_runs(dynsys::SystemKind system, const std::vector<LoadedRun>& runs,
                                  const fs::path& data_dir, const config::EvalConfig& eval) {
  std::map<datagen::Split, datagen::Dataset> data;
  std::map<datagen::Split, const datagen::Dataset*> ptrs;
  for (auto split : evalkit::kReportSplits) {
    data.emplace(split, load_split(data_dir, split, system));
    ptrs[split] = &data.at(split);
  }
  std::map<std::string, std::vector<evalkit::ReportModel>> by_family;
  for (const auto& r : runs) {
    by_family[std::string(neural::to_string(r.model->spec().family))].push_back({r.run_id, r.model.get()});
  }
  return evalkit::build_report(system, by_family, ptrs, {eval.horizon, eval.n_eval, 0});
}

}  // namespace

void cmd_generate(const config::ProjectConfig& cfg, const fs::path& out_dir, const RunOptions& opts,
                  std::ostream& out) {
  if (opts.dry_run) {
    out << "system " << dynsys::to_string(cfg.system) << ", seed " << cfg.seed << "\n";
    for (auto split : datagen::kAllSplits) {
      const auto& s = cfg.splits.at(split);
      out << "would write " << (out_dir / std::string(datagen::to_string(split))).string() << ": " << s.n_sequences
          << " sequences x " << s.seq_len << " steps, noise_var " << fmt(s.noise_var) << "\n";
    }
    return;
  }
  prepare_out_dir(out_dir, opts.force);
  datagen::BuildOptions build{cfg.tolerance, cfg.coupling, std::max<std::size_t>(1, opts.workers)};
  json splits = json::object();
  for (auto split : datagen::kAllSplits) {
    const std::string name(datagen::to_string(split));
    const auto seed = config::split_seed(cfg.seed, split);
    const auto ds = datagen::build_dataset(cfg.system, cfg.splits.at(split), seed, build);
    datagen::write_dataset(ds, out_dir / name);
    splits[name] = {{"path", name}, {"seed", seed}, {"n_sequences", ds.size()}, {"files", split_files(out_dir / name)}};
    out << "wrote " << (out_dir / name).string() << " (" << ds.size() << " sequences)\n";
  }
  write_json(out_dir / "manifest.json", {{"command", "generate"},
                                         {"system", dynsys::to_string(cfg.system)},
                                         {"seed", cfg.seed},
                                         {"three_body_coupling", dynsys::to_string(cfg.coupling)},
                                         {"tolerance", cfg.tolerance},
                                         {"splits", splits}});
}

trainer::RunRecord cmd_train(const config::ProjectConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                             const RunOptions& opts, std::ostream& out) {
  const auto train = load_split(data_dir, datagen::Split::Train, cfg.system);
  const auto val = load_split(data_dir, datagen::Split::Val, cfg.system);
  const neural::ModelSpec spec = config::model_spec(cfg, &train);
  cfg.train.validate();
  if (opts.dry_run) {
    out << json{{"model_spec", spec}, {"train_config", cfg.train}}.dump(2) << "\n";
    return {};
  }
  prepare_out_dir(out_dir, opts.force);
  neural::Model model(spec);
  out << "epoch,train_loss,val_loss,lr\n";
  auto record = trainer::fit(model, train, val, cfg.train, [&](const trainer::EpochLog& e) {
    out << e.epoch << "," << fmt(e.train_loss) << "," << fmt(e.val_loss) << "," << fmt(e.lr) << "\n";
  });
  record.run_id = out_dir.filename().string();
  record.checkpoint = "checkpoint";
  trainer::write_run(out_dir, record, &model);
  write_json(out_dir / "manifest.json",
             {{"command", "train"},
              {"data", fs::absolute(data_dir).lexically_normal().string()},
              {"datasets", {{"train", split_files(data_dir / "train")}, {"val", split_files(data_dir / "val")}}},
              {"record", "record.json"},
              {"checkpoint", record.checkpoint},
              {"stop_reason", std::string(trainer::to_string(record.stop))},
              {"wall_time_s", record.wall_time_s}});
  return record;
}

std::vector<trainer::RunRecord> cmd_grid(const config::ProjectConfig& cfg, const fs::path& data_dir,
                                         const fs::path& out_dir, const RunOptions& opts, std::ostream& out) {
  const auto train = load_split(data_dir, datagen::Split::Train, cfg.system);
  const auto val = load_split(data_dir, datagen::Split::Val, cfg.system);
  trainer::GridOptions g;
  g.base_spec = config::model_spec(cfg, &train);
  g.base_config = cfg.train;
  g.axes = grid_axes(cfg, g.base_spec.family);
  g.budget = cfg.grid.budget;
  g.workers = opts.workers > 0 ? opts.workers : cfg.grid.workers;
  g.base_seed = cfg.seed;
  const std::size_t n = trainer::grid_size(g.axes);
  out << "runs: " << n << "\n";
  if (n > g.budget) throw ConfigError("grid of " + std::to_string(n) + " runs exceeds the budget of " + std::to_string(g.budget));
  if (opts.dry_run) {
    for (std::size_t i = 0; i < n; ++i) out << trainer::grid_point(g.axes, i).dump() << "\n";
    return {};
  }
  prepare_out_dir(out_dir, opts.force);
  g.out_dir = out_dir;
  auto records = trainer::grid_search(train, val, g);
  for (const auto& r : records) {
    out << r.run_id << "," << trainer::to_string(r.stop) << "," << (r.val_mae ? fmt(*r.val_mae) : "") << "\n";
  }
  json axes = json::object();
  for (const auto& [axis, values] : g.axes) axes[axis] = values;
  write_json(out_dir / "manifest.json", {{"command", "grid"},
                                         {"data", fs::absolute(data_dir).lexically_normal().string()},
                                         {"family", neural::to_string(g.base_spec.family)},
                                         {"axes", axes},
                                         {"runs", n},
                                         {"seed", cfg.seed}});
  return records;
}

evalkit::EvalReport cmd_eval(const std::vector<fs::path>& checkpoints, const fs::path& data_dir,
                             const fs::path& out_dir, const config::EvalConfig& eval, const RunOptions& opts,
                             std::ostream& out) {
  if (checkpoints.empty()) throw ConfigError("eval needs at least one checkpoint");
  std::vector<LoadedRun> runs;
  for (const auto& p : checkpoints) runs.push_back(load_run(p));
  const auto system = runs.front().model->spec().system;
  for (const auto& r : runs) {
    if (r.model->spec().system != system) throw ConfigError("checkpoints mix systems");
  }
  if (opts.dry_run) {
    out << "would evaluate " << runs.size() << " models at horizon " << eval.horizon << "\n";
    return {};
  }
  const auto report = evaluate_runs(system, runs, data_dir, eval);
  prepare_out_dir(out_dir, true);
  const std::string csv = evalkit::report_csv(report);
  write_text(out_dir / "eval.csv", csv);
  write_json(out_dir / "eval.json", evalkit::report_json(report));
  out << csv;
  return report;
}

evalkit::EvalReport cmd_report(const fs::path& records_dir, const fs::path& data_dir, const fs::path& out_dir,
                               const config::EvalConfig& eval, const RunOptions& opts, std::ostream& out,
                               std::ostream& err) {
  std::vector<fs::path> files;
  std::error_code ec;
  if (fs::is_directory(records_dir, ec)) {
    for (const auto& entry : fs::recursive_directory_iterator(records_dir)) {
      if (entry.is_regular_file() && entry.path().filename() == "record.json") files.push_back(entry.path());
    }
  }
  if (files.empty()) throw ConfigError("no records found in " + records_dir.string());
  std::sort(files.begin(), files.end());

  std::map<std::string, std::vector<std::pair<trainer::RunRecord, fs::path>>> by_family;
  std::optional<dynsys::SystemKind> system;
  for (const auto& f : files) {
    auto rec = trainer::read_record(f);
    if (system && rec.spec.system != *system) throw ConfigError("records mix systems");
    system = rec.spec.system;
    by_family[std::string(neural::to_string(rec.spec.family))].emplace_back(std::move(rec), f.parent_path());
  }

  std::vector<LoadedRun> runs;
  json selected = json::object();
  for (auto& [family, entries] : by_family) {
    std::vector<trainer::RunRecord> recs;
    for (const auto& e : entries) recs.push_back(e.first);
    const auto top = evalkit::select_top_k(recs, eval.top_k);
    json ids = json::array();
    for (const auto& r : top) {
      const auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) {
        return e.first.run_id == r.run_id && evalkit::config_hash(e.first) == evalkit::config_hash(r);
      });
      ids.push_back(r.run_id);
      if (r.checkpoint.empty()) {
        err << "skipping " << r.run_id << ": no checkpoint\n";
        continue;
      }
      LoadedRun run;
      run.run_id = r.run_id;
      run.model = std::make_unique<neural::Model>(neural::Model::load(it->second / r.checkpoint));
      runs.push_back(std::move(run));
    }
    selected[family] = ids;
  }
  if (opts.dry_run) {
    out << selected.dump(2) << "\n";
    return {};
  }
  if (runs.empty()) throw ConfigError("no selected run has a checkpoint");
  const auto report = evaluate_runs(*system, runs, data_dir, eval);
  prepare_out_dir(out_dir, true);
  const std::string csv = evalkit::report_csv(report);
  write_text(out_dir / "report.csv", csv);
  json j = evalkit::report_json(report);
  j["selected"] = selected;
  j["horizon"] = eval.horizon;
  write_json(out_dir / "report.json", j);
  out << csv;
  for (const auto& t : report.trends) {
    if (!t.ordered) err << "trend: " << t.family << " " << t.run_id << " does not satisfy test <= ood_easy <= ood_hard\n";
  }
  for (const auto& [family, ok] : report.family_ordered) {
    err << "trend: " << family << " means " << (ok ? "ordered" : "NOT ordered") << "\n";
  }
  return report;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"disdyn: disentangled dynamics benchmark"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_path, records_path, system_name;
  std::uint64_t seed = 0;
  std::size_t workers = 0, horizon = 0;
  bool force = false, dry_run = false;
  std::vector<std::string> checkpoints;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "project config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed");
    sub->add_option("--workers", workers, "parallel workers");
    sub->add_flag("--force", force, "write into a non-empty output directory");
    sub->add_flag("--dry-run", dry_run, "print the plan and write nothing");
    sub->add_option("--out", out_path, "output directory");
  };
  auto* gen = app.add_subcommand("generate", "simulate the five dataset splits");
  add_common(gen);
  gen->add_option("--system", system_name, "pendulum | lotka_volterra | three_body");
  auto* train = app.add_subcommand("train", "train one model");
  add_common(train);
  train->add_option("--data", data_path, "dataset directory")->required();
  auto* grid = app.add_subcommand("grid", "grid search");
  add_common(grid);
  grid->add_option("--data", data_path, "dataset directory")->required();
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints");
  add_common(eval);
  eval->add_option("--data", data_path, "dataset directory")->required();
  eval->add_option("--horizon", horizon, "rollout horizon");
  eval->add_option("checkpoints", checkpoints, "checkpoint or run directories")->required();
  auto* report = app.add_subcommand("report", "top-k report over a records directory");
  add_common(report);
  report->add_option("--records", records_path, "records directory")->required();
  report->add_option("--data", data_path, "dataset directory")->required();
  report->add_option("--horizon", horizon, "rollout horizon");

  std::vector<std::string> argv_store{"disdyn"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    config::ProjectConfig cfg;
    if (!config_path.empty()) {
      cfg = config::load_config(config_path);
      if (!system_name.empty() && dynsys::parse_system(system_name) != cfg.system) {
        throw ConfigError("--system disagrees with the config");
      }
    } else {
      cfg = config::default_config(system_name.empty() ? dynsys::SystemKind::Pendulum : dynsys::parse_system(system_name));
      cfg.train.seed = cfg.seed;
    }
    auto* active = app.get_subcommands().front();
    if (active->count("--seed") > 0) config::set_seed(cfg, seed);
    if (horizon > 0) cfg.eval.horizon = horizon;
    if (out_path.empty()) {
      if (!cfg.out) throw ConfigError("no output directory: pass --out or set \"out\" in the config");
      out_path = *cfg.out;
    }
    RunOptions opts{force, dry_run, workers};

    if (gen->parsed()) {
      if (opts.workers == 0) opts.workers = 1;
      cmd_generate(cfg, out_path, opts, out);
    } else if (train->parsed()) {
      const auto rec = cmd_train(cfg, data_path, out_path, opts, out);
      if (!dry_run) err << "stop reason: " << trainer::to_string(rec.stop) << "\n";
    } else if (grid->parsed()) {
      cmd_grid(cfg, data_path, out_path, opts, out);
    } else if (eval->parsed()) {
      std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
      cmd_eval(paths, data_path, out_path, cfg.eval, opts, out);
    } else if (report->parsed()) {
      cmd_report(records_path, data_path, out_path, cfg.eval, opts, out, err);
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace disdyn::cli
