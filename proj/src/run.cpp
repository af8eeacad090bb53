#include "mole/run.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <fmt/core.h>

#include "mole/errors.hpp"
#include "mole/log.hpp"

namespace mole::run {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
T field(const json& value, std::string_view name) {
  try {
    return value.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("config field '{}' has the wrong type ({})", name,
                                  value.type_name()));
  }
}

std::size_t count_field(const json& value, std::string_view name) {
  if (!value.is_number_integer() || value.get<long long>() < 0) {
    throw ConfigError(fmt::format("config field '{}' must be a nonnegative integer", name));
  }
  return value.get<std::size_t>();
}

std::uint64_t seed_field(const json& value, std::string_view name) {
  if (!value.is_number_integer() || (value.is_number_integer() && !value.is_number_unsigned() &&
                                     value.get<long long>() < 0)) {
    throw ConfigError(fmt::format("config field '{}' must be a nonnegative integer", name));
  }
  return value.get<std::uint64_t>();
}

double real_field(const json& value, std::string_view name) {
  if (!value.is_number()) throw ConfigError(fmt::format("config field '{}' must be a number", name));
  return value.get<double>();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError(fmt::format("cannot write '{}'", path.string()));
  out << text;
  if (!out) throw ConfigError(fmt::format("failed writing '{}'", path.string()));
}

std::string display_kind(experts::ExpertKind kind) {
  switch (kind) {
    case experts::ExpertKind::dlinear: return "DLinear";
    case experts::ExpertKind::rlinear: return "RLinear";
    case experts::ExpertKind::rmlp: return "RMLP";
  }
  return "DLinear";
}

std::string num(double v) { return fmt::format("{}", v); }

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) out += (i ? ";" : "") + std::to_string(seeds[i]);
  return out;
}

// Config key for sharing prepared data between runs.
std::string data_key(const ExperimentConfig& c) {
  return fmt::format("{}|{}|{}|{}|{}|{}|{}", c.dataset, c.family, c.seq_len, c.pred_len,
                     c.toy_hours, c.toy_sigma, c.toy_seed);
}

}  // namespace

// --- config -----------------------------------------------------------------

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, value] : doc.items()) {
    if (key == "dataset") {
      c.dataset = field<std::string>(value, key);
    } else if (key == "family") {
      c.family = field<std::string>(value, key);
    } else if (key == "model") {
      c.model = experts::parse_expert_kind(field<std::string>(value, key));
    } else if (key == "seq_len") {
      c.seq_len = count_field(value, key);
    } else if (key == "pred_len") {
      c.pred_len = count_field(value, key);
    } else if (key == "n_heads") {
      c.n_heads = count_field(value, key);
    } else if (key == "lr0") {
      c.lr0 = real_field(value, key);
    } else if (key == "head_dropout") {
      c.head_dropout = real_field(value, key);
    } else if (key == "gating_mode") {
      c.gating_mode = gate::parse_gating_mode(field<std::string>(value, key));
    } else if (key == "dropout_granularity") {
      c.dropout_granularity = gate::parse_dropout_granularity(field<std::string>(value, key));
    } else if (key == "seed") {
      c.seed = seed_field(value, key);
    } else if (key == "batch_size") {
      c.batch_size = count_field(value, key);
    } else if (key == "epochs_max") {
      c.epochs_max = count_field(value, key);
    } else if (key == "patience") {
      c.patience = count_field(value, key);
    } else if (key == "lr_schedule") {
      c.lr_schedule = train::parse_lr_schedule(field<std::string>(value, key));
    } else if (key == "mlp_hidden") {
      c.mlp_hidden = count_field(value, key);
    } else if (key == "ma_kernel") {
      c.ma_kernel = count_field(value, key);
    } else if (key == "toy_hours") {
      c.toy_hours = count_field(value, key);
    } else if (key == "toy_sigma") {
      c.toy_sigma = real_field(value, key);
    } else if (key == "toy_seed") {
      c.toy_seed = seed_field(value, key);
    } else {
      throw ConfigError(fmt::format("unknown config field '{}'", key));
    }
  }
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  json j = {{"dataset", dataset},       {"family", family},
            {"model", experts::to_string(model)},
            {"seq_len", seq_len},       {"pred_len", pred_len},
            {"n_heads", n_heads},       {"lr0", lr0},
            {"seed", seed},             {"batch_size", batch_size},
            {"epochs_max", epochs_max}, {"patience", patience},
            {"lr_schedule", train::to_string(lr_schedule)}};
  if (model == experts::ExpertKind::rmlp) j["mlp_hidden"] = mlp_hidden;
  if (model == experts::ExpertKind::dlinear) j["ma_kernel"] = ma_kernel;
  if (dataset == "toy") {
    j["toy_hours"] = toy_hours;
    j["toy_sigma"] = toy_sigma;
    j["toy_seed"] = toy_seed;
  }
  if (n_heads > 1) {
    j["head_dropout"] = head_dropout;
    j["gating_mode"] = gate::to_string(gating_mode);
    j["dropout_granularity"] = gate::to_string(dropout_granularity);
  }
  return j;
}

void ExperimentConfig::validate() const {
  if (dataset.empty()) throw ConfigError("dataset must be a CSV path or \"toy\"");
  if (family != "auto" && family != "ett" && family != "other") {
    throw ConfigError(fmt::format("family must be auto, ett or other, got '{}'", family));
  }
  if (n_heads == 0) throw ConfigError("n_heads must be >= 1");
  if (dataset == "toy" && toy_hours == 0) throw ConfigError("toy_hours must be >= 1");
  if (!(toy_sigma >= 0.0)) throw ConfigError("toy_sigma must be >= 0");
  train_config().validate();
  gate::MoleSpec spec;
  spec.expert = {model, 1, seq_len, pred_len, n_heads, mlp_hidden, ma_kernel};
  spec.gating = {gating_mode, head_dropout, dropout_granularity};
  spec.validate();
}

std::string ExperimentConfig::dataset_name() const {
  if (dataset == "toy") return "toy";
  return fs::path(dataset).stem().string();
}

data::SplitFamily ExperimentConfig::split_family() const {
  if (family == "ett") return data::SplitFamily::ett;
  if (family == "other") return data::SplitFamily::other;
  return dataset_name().starts_with("ETT") ? data::SplitFamily::ett : data::SplitFamily::other;
}

train::TrainConfig ExperimentConfig::train_config() const {
  return {batch_size, lr0, epochs_max, patience, seed, lr_schedule};
}

std::string ExperimentConfig::model_name() const {
  return n_heads > 1 ? "MoLE-" + display_kind(model) : display_kind(model);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

ExperimentConfig load_config(const fs::path& path) {
  return ExperimentConfig::from_json(read_json(path));
}

// --- data and models --------------------------------------------------------

PreparedData prepare_data(const ExperimentConfig& config) {
  config.validate();
  data::RawDataset raw = config.dataset == "toy"
                             ? data::toy_generate(config.toy_hours, config.toy_sigma, config.toy_seed)
                             : data::load_csv(config.dataset);
  const data::Splits splits =
      data::split(raw.length(), config.split_family(), config.seq_len, config.pred_len);
  data::ChannelScaler scaler = data::fit_scaler(raw, splits.train);
  raw.values = scaler.apply(raw.values);
  return {train::DataBundle::make(std::move(raw), splits, config.seq_len, config.pred_len),
          std::move(scaler)};
}

gate::MoleSpec model_spec(const ExperimentConfig& config, const data::RawDataset& data) {
  gate::MoleSpec spec;
  spec.expert = {config.model,    data.channels(),   config.seq_len, config.pred_len,
                 config.n_heads, config.mlp_hidden, config.ma_kernel};
  spec.mark_len = data::mark_length(data.granularity);
  spec.gating = {config.gating_mode, config.head_dropout, config.dropout_granularity};
  spec.validate();
  return spec;
}

TrainedModel run_experiment(const ExperimentConfig& config, const train::DataBundle& bundle) {
  TrainedModel m;
  m.spec = model_spec(config, bundle.data);
  gate::init_model_params(m.spec, m.store, config.seed);
  m.report = train::fit(config.train_config(), m.spec, m.store, bundle);
  return m;
}

// --- train / eval -----------------------------------------------------------

train::FitReport cmd_train(const ExperimentConfig& config, const fs::path& out_dir) {
  const PreparedData prepared = prepare_data(config);
  TrainedModel m = run_experiment(config, prepared.bundle);
  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", m.report.to_json(config.to_json()).dump(2) + "\n");
  experts::save_params(m.store, out_dir / "model.bin");
  return m.report;
}

json EvalReport::to_json() const {
  return {{"val_mse", val.mse},
          {"val_mae", val.mae},
          {"val_samples", val.samples},
          {"test_mse", test.mse},
          {"test_mae", test.mae},
          {"test_samples", test.samples}};
}

EvalReport cmd_eval(const ExperimentConfig& config, const fs::path& model_path) {
  const PreparedData prepared = prepare_data(config);
  const gate::MoleSpec spec = model_spec(config, prepared.bundle.data);
  ParamStore store;
  gate::init_model_params(spec, store, config.seed);
  try {
    store.assign_values(experts::load_params(model_path));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("model '{}' does not match the config: {}",
                                  model_path.string(), e.what()));
  }
  const train::DataBundle& b = prepared.bundle;
  EvalReport r;
  Rng64 val_rng = Rng64::derive(config.seed, "eval/gate");
  Rng64 test_rng = Rng64::derive(config.seed, "eval/gate");
  Rng64* vr = spec.gated() ? &val_rng : nullptr;
  Rng64* tr = spec.gated() ? &test_rng : nullptr;
  r.val = train::evaluate(spec, store, b.data, b.marks, b.val, config.batch_size, vr);
  r.test = train::evaluate(spec, store, b.data, b.marks, b.test, config.batch_size, tr);
  return r;
}

// --- grid -------------------------------------------------------------------

GridAxes GridAxes::paper_defaults() {
  GridAxes a;
  a.lr0 = {0.005, 0.01, 0.05};
  a.n_heads = {2, 3, 4, 5, 6};
  a.head_dropout = {0.0, 0.2};
  return a;
}

GridAxes GridAxes::from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("grid axes must be a JSON object");
  GridAxes a;
  for (const auto& [key, value] : doc.items()) {
    if (!value.is_array() || value.empty()) {
      throw ConfigError(fmt::format("grid axis '{}' must be a nonempty array", key));
    }
    for (const json& v : value) {
      if (key == "lr0") {
        a.lr0.push_back(real_field(v, key));
      } else if (key == "n_heads") {
        a.n_heads.push_back(count_field(v, key));
      } else if (key == "head_dropout") {
        a.head_dropout.push_back(real_field(v, key));
      } else if (key == "batch_size") {
        a.batch_size.push_back(count_field(v, key));
      } else if (key == "gating_mode") {
        a.gating_mode.push_back(gate::parse_gating_mode(field<std::string>(v, key)));
      } else {
        throw ConfigError(fmt::format("unknown grid axis '{}'", key));
      }
    }
  }
  return a;
}

std::vector<ExperimentConfig> GridAxes::expand(const ExperimentConfig& base) const {
  std::vector<ExperimentConfig> out{base};
  auto axis = [&out](const auto& values, auto apply) {
    if (values.empty()) return;
    std::vector<ExperimentConfig> next;
    next.reserve(out.size() * values.size());
    for (const ExperimentConfig& c : out) {
      for (const auto& v : values) {
        ExperimentConfig d = c;
        apply(d, v);
        next.push_back(std::move(d));
      }
    }
    out = std::move(next);
  };
  axis(lr0, [](ExperimentConfig& c, double v) { c.lr0 = v; });
  axis(n_heads, [](ExperimentConfig& c, std::size_t v) { c.n_heads = v; });
  axis(head_dropout, [](ExperimentConfig& c, double v) { c.head_dropout = v; });
  axis(batch_size, [](ExperimentConfig& c, std::size_t v) { c.batch_size = v; });
  axis(gating_mode, [](ExperimentConfig& c, gate::GatingMode v) { c.gating_mode = v; });
  for (const ExperimentConfig& c : out) c.validate();
  return out;
}

json GridResult::to_json() const {
  json cells_json = json::array();
  for (const GridCell& cell : cells) cells_json.push_back(cell.report.to_json(cell.config.to_json()));
  return {{"seed", seed},
          {"selected", selected},
          {"selected_config", best().config.to_json()},
          {"val_mse", best().report.best_val_mse},
          {"test_mse", best().report.test_mse},
          {"cells", cells_json}};
}

std::size_t select_min_val(const std::vector<GridCell>& cells) {
  if (cells.empty()) throw ConfigError("grid is empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    if (cells[i].report.best_val_mse < cells[best].report.best_val_mse) best = i;
  }
  return best;
}

std::vector<GridResult> run_grid(const std::vector<ExperimentConfig>& configs,
                                 const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  if (configs.empty()) throw ConfigError("grid is empty");
  if (seeds.empty()) throw ConfigError("no seeds given");

  // Prepared data is shared read-only between cells.
  std::map<std::string, std::shared_ptr<const PreparedData>> prepared;
  for (const ExperimentConfig& c : configs) {
    const std::string key = data_key(c);
    if (!prepared.contains(key)) {
      prepared.emplace(key, std::make_shared<const PreparedData>(prepare_data(c)));
    }
  }

  struct Task {
    ExperimentConfig config;
    const train::DataBundle* bundle;
  };
  std::vector<Task> tasks;
  for (std::uint64_t seed : seeds) {
    for (const ExperimentConfig& c : configs) {
      ExperimentConfig seeded = c;
      seeded.seed = seed;
      tasks.push_back({seeded, &prepared.at(data_key(c))->bundle});
    }
  }

  std::vector<std::optional<train::FitReport>> reports(tasks.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex error_mutex;
  std::exception_ptr error;
  std::size_t error_index = tasks.size();

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size() || failed.load()) return;
      try {
        reports[i] = run_experiment(tasks[i].config, *tasks[i].bundle).report;
      } catch (...) {
        std::lock_guard lock(error_mutex);
        // Report the earliest failing cell in config order.
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
        failed.store(true);
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  if (error) {
    const std::string echo = tasks[error_index].config.to_json().dump();
    try {
      std::rethrow_exception(error);
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("grid cell {} failed: {}", echo, e.what()));
    } catch (const DataError& e) {
      throw DataError(fmt::format("grid cell {} failed: {}", echo, e.what()));
    } catch (const NumericalError& e) {
      throw NumericalError(fmt::format("grid cell {} failed: {}", echo, e.what()));
    } catch (const std::exception& e) {
      throw std::runtime_error(fmt::format("grid cell {} failed: {}", echo, e.what()));
    }
  }

  std::vector<GridResult> results;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    GridResult r;
    r.seed = seeds[s];
    for (std::size_t c = 0; c < configs.size(); ++c) {
      const std::size_t i = s * configs.size() + c;
      r.cells.push_back({tasks[i].config, std::move(*reports[i])});
    }
    r.selected = select_min_val(r.cells);
    results.push_back(std::move(r));
  }
  return results;
}

std::string summary_csv(const std::vector<GridResult>& results) {
  std::string out = std::string(kSummaryHeader) + "\n";
  double val_total = 0.0;
  double test_total = 0.0;
  for (const GridResult& r : results) {
    const GridCell& b = r.best();
    const ExperimentConfig& c = b.config;
    const bool gated = c.n_heads > 1;
    out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", r.seed, c.model_name(), c.dataset_name(),
                       c.pred_len, c.n_heads, num(c.lr0), gated ? num(c.head_dropout) : "",
                       gated ? std::string(gate::to_string(c.gating_mode)) : "",
                       num(b.report.best_val_mse), num(b.report.test_mse));
    val_total += b.report.best_val_mse;
    test_total += b.report.test_mse;
  }
  if (!results.empty()) {
    const ExperimentConfig& c = results.front().best().config;
    const auto n = static_cast<double>(results.size());
    out += fmt::format("mean,{},{},{},,,,,{},{}\n", c.model_name(), c.dataset_name(), c.pred_len,
                       num(val_total / n), num(test_total / n));
  }
  return out;
}

std::vector<GridResult> cmd_grid(const ExperimentConfig& base, const GridAxes& axes,
                                 const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                                 const fs::path& out_dir) {
  std::vector<GridResult> results = run_grid(axes.expand(base), seeds, jobs);
  fs::create_directories(out_dir);
  for (const GridResult& r : results) {
    write_text(out_dir / fmt::format("grid_seed{}.json", r.seed), r.to_json().dump(2) + "\n");
  }
  write_text(out_dir / "summary.csv", summary_csv(results));
  return results;
}

// --- ablation ---------------------------------------------------------------

AblationPlan AblationPlan::defaults() {
  AblationPlan p;
  for (gate::GatingMode m :
       {gate::GatingMode::time_in, gate::GatingMode::random_in, gate::GatingMode::random_out}) {
    p.modes.push_back({m, 0.0});
    p.modes.push_back({m, 0.2});
  }
  return p;
}

AblationPlan AblationPlan::from_json(const json& doc) {
  AblationPlan p = defaults();
  if (!doc.is_object()) throw ConfigError("ablation plan must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key == "lengths") {
      if (!value.is_array() || value.empty()) throw ConfigError("lengths must be a nonempty array");
      p.lengths.clear();
      for (const json& v : value) p.lengths.push_back(count_field(v, key));
    } else if (key == "pred_len") {
      p.pred_len = count_field(value, key);
    } else if (key == "modes") {
      if (!value.is_array() || value.empty()) throw ConfigError("modes must be a nonempty array");
      p.modes.clear();
      for (const json& v : value) {
        AblationMode m;
        if (v.is_string()) {
          m.gating = gate::parse_gating_mode(v.get<std::string>());
        } else if (v.is_object()) {
          for (const auto& [mk, mv] : v.items()) {
            if (mk == "gating_mode") {
              m.gating = gate::parse_gating_mode(field<std::string>(mv, mk));
            } else if (mk == "head_dropout") {
              m.head_dropout = real_field(mv, mk);
            } else {
              throw ConfigError(fmt::format("unknown ablation mode field '{}'", mk));
            }
          }
        } else {
          throw ConfigError("ablation mode must be a gating name or an object");
        }
        p.modes.push_back(m);
      }
    } else if (key == "axes") {
      p.axes = GridAxes::from_json(value);
    } else {
      throw ConfigError(fmt::format("unknown ablation field '{}'", key));
    }
  }
  if (!p.axes.head_dropout.empty() || !p.axes.gating_mode.empty()) {
    throw ConfigError("ablation axes may not vary head_dropout or gating_mode");
  }
  return p;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, std::size_t pred_len) {
  std::string out = std::string(kAblationHeader) + "\n";
  for (const AblationRow& row : rows) {
    std::vector<std::uint64_t> seeds;
    std::string heads;
    std::string lrs;
    for (std::size_t i = 0; i < row.per_seed.size(); ++i) {
      const ExperimentConfig& c = row.per_seed[i].best().config;
      seeds.push_back(row.per_seed[i].seed);
      heads += (i ? ";" : "") + std::to_string(c.n_heads);
      lrs += (i ? ";" : "") + num(c.lr0);
    }
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", row.seq_len, pred_len,
                       gate::to_string(row.mode.gating), num(row.mode.head_dropout),
                       join_seeds(seeds), heads, lrs, num(row.val_mse), num(row.test_mse));
  }
  return out;
}

std::vector<AblationRow> cmd_ablate_length(const ExperimentConfig& base, const AblationPlan& plan,
                                           const std::vector<std::uint64_t>& seeds,
                                           std::size_t jobs, const fs::path& out_dir) {
  if (plan.lengths.empty() || plan.modes.empty()) throw ConfigError("ablation plan is empty");
  const std::size_t max_len = *std::max_element(plan.lengths.begin(), plan.lengths.end());
  {
    // Fail before any training if the longest input does not fit.
    ExperimentConfig probe = base;
    probe.seq_len = max_len;
    probe.pred_len = plan.pred_len;
    (void)prepare_data(probe);
  }
  std::vector<AblationRow> rows;
  for (std::size_t len : plan.lengths) {
    for (const AblationMode& mode : plan.modes) {
      ExperimentConfig c = base;
      c.seq_len = len;
      c.pred_len = plan.pred_len;
      c.gating_mode = mode.gating;
      c.head_dropout = mode.head_dropout;
      const std::vector<ExperimentConfig> cells = plan.axes.expand(c);
      for (const ExperimentConfig& cell : cells) {
        if (cell.n_heads < 2) throw ConfigError("gating ablation needs n_heads >= 2");
      }
      AblationRow row{len, mode, run_grid(cells, seeds, jobs), 0.0, 0.0};
      for (const GridResult& r : row.per_seed) {
        row.val_mse += r.best().report.best_val_mse;
        row.test_mse += r.best().report.test_mse;
      }
      row.val_mse /= static_cast<double>(row.per_seed.size());
      row.test_mse /= static_cast<double>(row.per_seed.size());
      log::info(fmt::format("ablation s={} {} r={} test {:.6f}", len,
                            gate::to_string(mode.gating), mode.head_dropout, row.test_mse));
      rows.push_back(std::move(row));
    }
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "ablation.csv", ablation_csv(rows, plan.pred_len));
  return rows;
}

// --- parameter counts -------------------------------------------------------

std::vector<ParamsRow> cmd_params(const ParamsQuery& q) {
  if (q.heads_min == 0 || q.heads_min > q.heads_max) {
    throw ConfigError(fmt::format("invalid head range {}..{}", q.heads_min, q.heads_max));
  }
  std::vector<ParamsRow> rows;
  for (std::size_t n = q.heads_min; n <= q.heads_max; ++n) {
    experts::ExpertSpec spec{q.model, q.channels, q.seq_len, q.pred_len, n, q.mlp_hidden, 25};
    spec.validate();
    rows.push_back({q.model, n, train::param_count(spec, q.mark_len)});
  }
  return rows;
}

const std::vector<ReferenceCount>& reference_counts() {
  using experts::ExpertKind;
  static const std::vector<ReferenceCount> table = {
      {ExpertKind::dlinear, 1, 226464}, {ExpertKind::dlinear, 2, 453208},
      {ExpertKind::dlinear, 3, 679959}, {ExpertKind::dlinear, 4, 906808},
      {ExpertKind::dlinear, 5, 1133755}, {ExpertKind::dlinear, 6, 1360800},
      {ExpertKind::rlinear, 1, 113246}, {ExpertKind::rlinear, 2, 226758},
      {ExpertKind::rlinear, 3, 340277}, {ExpertKind::rlinear, 4, 453894},
      {ExpertKind::rlinear, 5, 567609}, {ExpertKind::rlinear, 6, 681422},
      {ExpertKind::rmlp, 1, 458158},    {ExpertKind::rmlp, 2, 571670},
      {ExpertKind::rmlp, 3, 685189},    {ExpertKind::rmlp, 4, 798806},
      {ExpertKind::rmlp, 5, 912521},    {ExpertKind::rmlp, 6, 1026334},
  };
  return table;
}

std::vector<CheckLine> check_reference_counts() {
  std::vector<CheckLine> lines;
  for (const ReferenceCount& ref : reference_counts()) {
    experts::ExpertSpec spec{ref.model, 7, 336, 336, ref.heads, 512, 25};
    lines.push_back({ref, train::param_count(spec, 4)});
  }
  return lines;
}

// --- toy --------------------------------------------------------------------

json ToyResult::to_json() const {
  return {{"single", {{"model", "RLinear"},
                      {"test_mse", single.test_mse},
                      {"test_mse_raw", single_test_mse_raw},
                      {"best_epoch", single.best_epoch},
                      {"param_count", single.param_count}}},
          {"mole", {{"model", "MoLE-RLinear"},
                    {"test_mse", mole.test_mse},
                    {"test_mse_raw", mole_test_mse_raw},
                    {"best_epoch", mole.best_epoch},
                    {"param_count", mole.param_count}}},
          {"gate_trace_rows", gate_trace.size()},
          {"boundary_rows", boundary.size()}};
}

ToyResult cmd_toy(const ToySettings& s, const std::optional<fs::path>& out_dir) {
  ExperimentConfig base;
  base.dataset = "toy";
  base.family = "other";
  base.model = experts::ExpertKind::rlinear;
  base.seq_len = s.seq_len;
  base.pred_len = s.pred_len;
  base.batch_size = s.batch_size;
  base.lr0 = s.lr0;
  base.seed = s.seed;
  base.epochs_max = s.epochs_max;
  base.patience = s.patience;
  base.lr_schedule = s.lr_schedule;
  base.toy_hours = s.hours;
  base.toy_sigma = s.sigma;
  base.toy_seed = s.seed;
  ExperimentConfig mole_cfg = base;
  mole_cfg.n_heads = s.heads;
  mole_cfg.head_dropout = s.head_dropout;
  mole_cfg.dropout_granularity = s.dropout_granularity;

  const PreparedData prepared = prepare_data(base);
  const train::DataBundle& b = prepared.bundle;
  TrainedModel single = run_experiment(base, b);
  TrainedModel mole = run_experiment(mole_cfg, b);

  ToyResult result;
  const double scale = prepared.scaler.std.at(0) * prepared.scaler.std.at(0);
  result.single = single.report;
  result.mole = mole.report;
  result.single_test_mse_raw = single.report.test_mse * scale;
  result.mole_test_mse_raw = mole.report.test_mse * scale;

  const auto& ts = b.data.timestamps;
  const data::SplitView& test = b.splits.test;

  // Gate weights for two weeks of hourly marks from the first test Monday.
  constexpr std::size_t kTraceHours = 14 * 24;
  std::size_t start = test.begin;
  while (start < test.end && !(ts[start].weekday() == 0 && ts[start].hour == 0)) ++start;
  if (start + kTraceHours > b.data.length()) throw DataError("toy test split shorter than two weeks");
  const gate::MixingSpec mix = mole.spec.mixing();
  for (std::size_t h = 0; h < kTraceHours; ++h) {
    const data::DateTime& when = ts[start + h];
    const gate::GateWeights w =
        gate::mixing_weights(data::mark_features(when, b.data.granularity), mole.store, mix);
    result.gate_trace.push_back({when.to_string(), static_cast<std::size_t>(when.weekday()),
                                 std::vector<double>(w.w.data().begin(), w.w.data().end())});
  }

  // Window whose input starts Thursday 04:00, so its last four hours and the
  // whole forecast fall on Friday/Saturday.
  std::optional<std::size_t> sample;
  for (std::size_t i = 0; i < b.test.size(); ++i) {
    const data::DateTime& when = ts[b.test.input_start(i)];
    if (when.weekday() == 3 && when.hour == 4) {
      sample = i;
      break;
    }
  }
  if (!sample) throw DataError("toy test split has no Thursday 04:00 window");
  const std::size_t idx[] = {*sample};
  const data::Batch batch = data::assemble_batch(b.data, b.marks, b.test, idx);
  auto predict = [&](TrainedModel& m) {
    ad::Tape tape;
    return gate::mole_forward(tape, tape.constant(batch.x), tape.constant(batch.marks), m.store,
                              m.spec, nullptr, false)
        .value();
  };
  const Tensor2 z_single = prepared.scaler.invert(predict(single));
  const Tensor2 z_mole = prepared.scaler.invert(predict(mole));
  const Tensor2 x_raw = prepared.scaler.invert(batch.x);
  const Tensor2 y_raw = prepared.scaler.invert(batch.y);
  const std::size_t in0 = b.test.input_start(*sample);
  for (std::size_t k = 0; k < s.seq_len; ++k) {
    result.boundary.push_back({k, ts[in0 + k].to_string(), x_raw(0, k), std::nullopt, std::nullopt});
  }
  for (std::size_t k = 0; k < s.pred_len; ++k) {
    result.boundary.push_back({s.seq_len + k, ts[in0 + s.seq_len + k].to_string(), y_raw(0, k),
                               z_single(0, k), z_mole(0, k)});
  }

  if (out_dir) {
    fs::create_directories(*out_dir);
    write_text(*out_dir / "toy_report.json", result.to_json().dump(2) + "\n");
    std::string trace = "hour,timestamp,weekday";
    for (std::size_t i = 0; i < mix.heads; ++i) trace += fmt::format(",w{}", i);
    trace += "\n";
    for (std::size_t h = 0; h < result.gate_trace.size(); ++h) {
      const GateTraceRow& row = result.gate_trace[h];
      trace += fmt::format("{},{},{}", h, row.timestamp, row.weekday);
      for (double w : row.weights) trace += "," + num(w);
      trace += "\n";
    }
    write_text(*out_dir / "gate_trace.csv", trace);
    std::string boundary = "step,timestamp,truth,single,mole\n";
    for (const BoundaryRow& row : result.boundary) {
      boundary += fmt::format("{},{},{},{},{}\n", row.step, row.timestamp, num(row.truth),
                              row.single ? num(*row.single) : "", row.mole ? num(*row.mole) : "");
    }
    write_text(*out_dir / "boundary.csv", boundary);
  }
  return result;
}

// --- CLI helpers ------------------------------------------------------------

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part.empty() || !std::all_of(part.begin(), part.end(), [](unsigned char ch) {
          return std::isdigit(ch) != 0;
        })) {
      throw ConfigError(fmt::format("malformed seed list '{}'", text));
    }
    try {
      seeds.push_back(std::stoull(part));
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("seed '{}' out of range", part));
    }
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DataError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const NumericalError*>(&e) != nullptr) return 3;
  return 1;
}

}  // namespace mole::run
