#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "mole/errors.hpp"
#include "mole/log.hpp"
#include "mole/run.hpp"

namespace fs = std::filesystem;
using namespace mole;

namespace {

struct Common {
  std::string config;
  std::string out = "out";
  std::string seeds;
  std::size_t jobs = 1;
  std::string granularity;
};

// --dropout-granularity overrides the config file.
run::ExperimentConfig with_overrides(run::ExperimentConfig c, const Common& opt) {
  if (!opt.granularity.empty()) {
    c.dropout_granularity = gate::parse_dropout_granularity(opt.granularity);
  }
  return c;
}

run::ExperimentConfig config_with_seed(const run::ExperimentConfig& base,
                                       const std::string& seeds) {
  run::ExperimentConfig c = base;
  if (!seeds.empty()) {
    const auto list = run::parse_seeds(seeds);
    if (list.size() != 1) throw ConfigError("this command takes a single --seed");
    c.seed = list.front();
  }
  return c;
}

std::vector<std::uint64_t> seed_list(const run::ExperimentConfig& base, const std::string& seeds) {
  return seeds.empty() ? std::vector<std::uint64_t>{base.seed} : run::parse_seeds(seeds);
}

// A grid/ablation file is either a plain config or {"base": {...}, ...}.
struct SweepDoc {
  run::ExperimentConfig base;
  nlohmann::json extra = nlohmann::json::object();
  bool has_extra = false;
};

SweepDoc read_sweep(const std::string& path) {
  const nlohmann::json doc = run::read_json(path);
  SweepDoc s;
  if (doc.is_object() && doc.contains("base")) {
    s.base = run::ExperimentConfig::from_json(doc.at("base"));
    for (const auto& [key, value] : doc.items()) {
      if (key != "base") s.extra[key] = value;
    }
    s.has_extra = true;
  } else {
    s.base = run::ExperimentConfig::from_json(doc);
  }
  return s;
}

void print_fit(const train::FitReport& r) {
  fmt::print("best_epoch {}  val_mse {}  test_mse {}  test_mae {}\n", r.best_epoch,
             r.best_val_mse, r.test_mse, r.test_mae);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-linear-experts forecasting toolkit"};
  app.require_subcommand(1);
  Common opt;
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

  auto needs_config = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Experiment config (JSON)")->required();
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_option("--seed", opt.seeds, "Seed or comma-separated seeds");
    sub->add_option("--dropout-granularity", opt.granularity, "entry | head");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "Fit one model and save report + weights");
  needs_config(train_cmd);

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate saved weights on val and test");
  needs_config(eval_cmd);
  std::string model_path;
  eval_cmd->add_option("--model", model_path, "Weights file (default <out>/model.bin)");

  CLI::App* grid_cmd = app.add_subcommand("grid", "Grid search with min-validation selection");
  needs_config(grid_cmd);
  grid_cmd->add_option("--jobs", opt.jobs, "Parallel workers")->check(CLI::PositiveNumber);

  CLI::App* ablate_cmd = app.add_subcommand("ablate-length", "Input-length x gating-mode sweep");
  needs_config(ablate_cmd);
  ablate_cmd->add_option("--jobs", opt.jobs, "Parallel workers")->check(CLI::PositiveNumber);

  CLI::App* toy_cmd = app.add_subcommand("toy", "Regime-switching toy experiment");
  run::ToySettings toy;
  std::string toy_schedule;
  toy_cmd->add_option("--out", opt.out, "Output directory");
  toy_cmd->add_option("--seed", toy.seed, "Seed");
  toy_cmd->add_option("--dropout", toy.head_dropout, "Head dropout rate for the MoLE model");
  toy_cmd->add_option("--dropout-granularity", opt.granularity, "entry | head");
  toy_cmd->add_option("--epochs", toy.epochs_max, "Epoch budget")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--patience", toy.patience, "Early-stopping patience (0 disables)");
  toy_cmd->add_option("--lr-schedule", toy_schedule, "halving | constant");
  toy_cmd->add_option("--sigma", toy.sigma, "Noise standard deviation")->check(CLI::NonNegativeNumber);

  CLI::App* params_cmd = app.add_subcommand("params", "Closed-form parameter counts");
  run::ParamsQuery pq;
  std::string kind = "dlinear";
  bool check = false;
  params_cmd->add_option("--model", kind, "dlinear | rlinear | rmlp");
  params_cmd->add_option("--channels", pq.channels, "Channels c");
  params_cmd->add_option("--seq-len", pq.seq_len, "Input length s");
  params_cmd->add_option("--pred-len", pq.pred_len, "Horizon p");
  params_cmd->add_option("--heads-min", pq.heads_min, "Smallest n");
  params_cmd->add_option("--heads-max", pq.heads_max, "Largest n");
  params_cmd->add_option("--mark-len", pq.mark_len, "Mark features t");
  params_cmd->add_option("--hidden", pq.mlp_hidden, "RMLP hidden width");
  params_cmd->add_flag("--check", check, "Compare against the published reference table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  log::set_level(verbose ? log::Level::info : log::Level::warn);

  try {
    if (*train_cmd) {
      const auto config = config_with_seed(with_overrides(run::load_config(opt.config), opt), opt.seeds);
      print_fit(run::cmd_train(config, opt.out));
      fmt::print("wrote {}\n", (fs::path(opt.out) / "report.json").string());
    } else if (*eval_cmd) {
      const auto config =
          config_with_seed(with_overrides(run::load_config(opt.config), opt), opt.seeds);
      const fs::path weights = model_path.empty() ? fs::path(opt.out) / "model.bin" : fs::path(model_path);
      const run::EvalReport r = run::cmd_eval(config, weights);
      fmt::print("{}\n", r.to_json().dump(2));
    } else if (*grid_cmd) {
      SweepDoc doc = read_sweep(opt.config);
      doc.base = with_overrides(doc.base, opt);
      run::GridAxes axes = run::GridAxes::paper_defaults();
      if (doc.has_extra) {
        for (const auto& [key, value] : doc.extra.items()) {
          if (key != "axes") throw ConfigError(fmt::format("unknown grid field '{}'", key));
          axes = run::GridAxes::from_json(value);
        }
      }
      const auto results =
          run::cmd_grid(doc.base, axes, seed_list(doc.base, opt.seeds), opt.jobs, opt.out);
      fmt::print("{}", run::summary_csv(results));
    } else if (*ablate_cmd) {
      SweepDoc doc = read_sweep(opt.config);
      doc.base = with_overrides(doc.base, opt);
      const run::AblationPlan plan =
          doc.has_extra ? run::AblationPlan::from_json(doc.extra) : run::AblationPlan::defaults();
      const auto rows = run::cmd_ablate_length(doc.base, plan, seed_list(doc.base, opt.seeds),
                                               opt.jobs, opt.out);
      fmt::print("{}", run::ablation_csv(rows, plan.pred_len));
    } else if (*toy_cmd) {
      if (!toy_schedule.empty()) toy.lr_schedule = train::parse_lr_schedule(toy_schedule);
      if (!opt.granularity.empty()) {
        toy.dropout_granularity = gate::parse_dropout_granularity(opt.granularity);
      }
      const run::ToyResult r = run::cmd_toy(toy, fs::path(opt.out));
      fmt::print("single-head RLinear test_mse {} (raw {})\n", r.single.test_mse,
                 r.single_test_mse_raw);
      fmt::print("MoLE-RLinear x{} test_mse {} (raw {})\n", toy.heads, r.mole.test_mse,
                 r.mole_test_mse_raw);
      fmt::print("wrote {}\n", opt.out);
    } else if (*params_cmd) {
      if (check) {
        bool all = true;
        for (const run::CheckLine& line : run::check_reference_counts()) {
          fmt::print("{:<8} n={}  expected {:>9}  got {:>9}  {}\n",
                     experts::to_string(line.ref.model), line.ref.heads, line.ref.expected,
                     line.actual, line.ok() ? "ok" : "MISMATCH");
          all = all && line.ok();
        }
        fmt::print("{}\n", all ? "all 18 reference counts match" : "reference check FAILED");
        return all ? 0 : 3;
      }
      pq.model = experts::parse_expert_kind(kind);
      fmt::print("model,n_heads,params\n");
      for (const run::ParamsRow& row : run::cmd_params(pq)) {
        fmt::print("{},{},{}\n", experts::to_string(row.model), row.heads, row.count);
      }
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return run::exit_code_for(e);
  }
  return 0;
}
