#include "mole/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/core.h>

#include "mole/errors.hpp"
#include "mole/log.hpp"

namespace mole::train {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

// Linear interpolation between closest ranks.
double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

nlohmann::json timing_json(const TimingSummary& t) {
  return {{"mean", t.mean_ms},  {"q1", t.q1_ms},          {"median", t.median_ms},
          {"q3", t.q3_ms},      {"samples", t.samples}};
}

Rng64* gate_rng(const gate::MoleSpec& spec, Rng64& rng) {
  if (!spec.gated()) return nullptr;
  return &rng;
}

}  // namespace

std::string_view to_string(LrSchedule schedule) {
  return schedule == LrSchedule::halving ? "halving" : "constant";
}

LrSchedule parse_lr_schedule(std::string_view text) {
  if (text == "halving") return LrSchedule::halving;
  if (text == "constant") return LrSchedule::constant;
  throw ConfigError(fmt::format("unknown lr_schedule '{}' (expected halving or constant)", text));
}

double TrainConfig::lr(std::size_t epoch) const {
  if (epoch == 0) throw ConfigError("epochs are counted from 1");
  return schedule == LrSchedule::halving ? lr_at(epoch, lr0) : lr0;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError(fmt::format("lr0 must be > 0, got {}", lr0));
  if (epochs_max == 0) throw ConfigError("epochs_max must be >= 1");
}

double mse(const Tensor2& prediction, const Tensor2& truth) {
  require_same_shape(prediction, truth, "mse");
  if (prediction.data().empty()) throw ShapeError("mse: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < prediction.data().size(); ++i) {
    const double d = prediction.data()[i] - truth.data()[i];
    total += d * d;
  }
  return total / static_cast<double>(prediction.data().size());
}

double mae(const Tensor2& prediction, const Tensor2& truth) {
  require_same_shape(prediction, truth, "mae");
  if (prediction.data().empty()) throw ShapeError("mae: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < prediction.data().size(); ++i) {
    total += std::abs(prediction.data()[i] - truth.data()[i]);
  }
  return total / static_cast<double>(prediction.data().size());
}

double lr_at(std::size_t epoch, double lr0) {
  if (epoch == 0) throw ConfigError("epochs are counted from 1");
  return lr0 * std::pow(0.5, static_cast<double>(epoch - 1));
}

Adam::Adam(const ParamStore& store, AdamOptions options) : options_(options) {
  for (const auto& [name, p] : store) {
    moments_.emplace(name, Moments{Tensor2(p.value.rows(), p.value.cols()),
                                   Tensor2(p.value.rows(), p.value.cols())});
  }
}

void Adam::step(ParamStore& store, double lr) {
  for (const auto& [name, p] : store) {
    if (!p.grad.all_finite()) {
      throw NumericalError(fmt::format("non-finite gradient in parameter '{}'", name));
    }
    if (!moments_.contains(name)) {
      throw ConfigError(fmt::format("optimizer has no state for parameter '{}'", name));
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (auto& [name, p] : store) {
    Moments& mo = moments_.find(name)->second;
    auto theta = p.value.data();
    const auto& g = p.grad.data();
    auto m = mo.m.data();
    auto v = mo.v.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
  store.zero_grad();
}

DataBundle DataBundle::make(data::RawDataset raw, const data::Splits& splits, std::size_t seq_len,
                            std::size_t pred_len) {
  Tensor2 marks = data::mark_table(raw);
  data::WindowSet train(splits.train, seq_len, pred_len);
  data::WindowSet val(splits.val, seq_len, pred_len);
  data::WindowSet test(splits.test, seq_len, pred_len);
  return DataBundle{std::move(raw), std::move(marks), splits, train, val, test};
}

EvalResult evaluate(const gate::MoleSpec& spec, ParamStore& store, const data::RawDataset& data,
                    const Tensor2& marks, const data::WindowSet& windows, std::size_t batch_size,
                    Rng64* rng) {
  if (windows.size() == 0) throw DataError("evaluate: split has no windows");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  EvalResult result;
  double sq = 0.0;
  double ab = 0.0;
  std::size_t elements = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const std::size_t stop = std::min(windows.size(), start + batch_size);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const data::Batch batch = data::assemble_batch(data, marks, windows, idx);
    const auto t0 = Clock::now();
    ad::Tape tape;
    ad::Var pred = gate::mole_forward(tape, tape.constant(batch.x), tape.constant(batch.marks),
                                      store, spec, rng, false);
    result.batch_ms.push_back(elapsed_ms(t0));
    const Tensor2& z = pred.value();
    require_same_shape(z, batch.y, "evaluate");
    for (std::size_t i = 0; i < z.data().size(); ++i) {
      const double d = z.data()[i] - batch.y.data()[i];
      sq += d * d;
      ab += std::abs(d);
    }
    elements += z.data().size();
    result.samples += batch.size;
  }
  result.mse = sq / static_cast<double>(elements);
  result.mae = ab / static_cast<double>(elements);
  if (!std::isfinite(result.mse)) throw NumericalError("evaluate: non-finite forecast error");
  return result;
}

TimingSummary TimingSummary::of(std::vector<double> ms) {
  TimingSummary t;
  t.samples = ms.size();
  if (ms.empty()) return t;
  std::sort(ms.begin(), ms.end());
  t.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  t.q1_ms = quantile(ms, 0.25);
  t.median_ms = quantile(ms, 0.5);
  t.q3_ms = quantile(ms, 0.75);
  return t;
}

nlohmann::json FitReport::to_json(const nlohmann::json& config) const {
  nlohmann::json ep = nlohmann::json::array();
  for (const EpochRecord& e : epochs) {
    ep.push_back({{"train_mse", e.train_mse}, {"val_mse", e.val_mse}, {"lr", e.lr}});
  }
  return {{"config", config},
          {"epochs", ep},
          {"best_epoch", best_epoch},
          {"best_val_mse", best_val_mse},
          {"test_mse", test_mse},
          {"test_mae", test_mae},
          {"train_ms_per_iter", timing_json(train_timing)},
          {"infer_ms_per_iter", timing_json(infer_timing)},
          {"param_count", param_count}};
}

FitReport fit(const TrainConfig& config, const gate::MoleSpec& spec, ParamStore& store,
              const DataBundle& bundle, const EpochHook& on_epoch) {
  config.validate();
  spec.validate();
  const data::WindowSet& train = bundle.train;
  if (train.size() < config.batch_size) {
    throw DataError(fmt::format("train split has {} windows, fewer than one batch of {}",
                                train.size(), config.batch_size));
  }
  Rng64 shuffle_rng = Rng64::derive(config.seed, "train/shuffle");
  Rng64 train_gate = Rng64::derive(config.seed, "train/gate");
  Adam adam(store);
  FitReport report;
  report.param_count = store.scalar_count();
  ParamStore best = store;
  std::size_t since_best = 0;
  std::vector<double> iter_ms;
  std::vector<double> infer_ms;
  const std::size_t iters = train.size() / config.batch_size;

  for (std::size_t epoch = 1; epoch <= config.epochs_max; ++epoch) {
    const double lr = config.lr(epoch);
    const std::vector<std::size_t> order = shuffled_indices(train.size(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      const std::span<const std::size_t> idx(order.data() + it * config.batch_size,
                                             config.batch_size);
      const data::Batch batch = data::assemble_batch(bundle.data, bundle.marks, train, idx);
      const auto t0 = Clock::now();
      ad::Tape tape;
      ad::Var pred = gate::mole_forward(tape, tape.constant(batch.x), tape.constant(batch.marks),
                                        store, spec, gate_rng(spec, train_gate), true);
      ad::Var loss = ad::mse(pred, tape.constant(batch.y));
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        throw NumericalError(
            fmt::format("non-finite training loss at epoch {} iteration {}", epoch, it + 1));
      }
      tape.backward(loss);
      adam.step(store, lr);
      iter_ms.push_back(elapsed_ms(t0));
      loss_sum += value;
    }
    Rng64 val_gate = Rng64::derive(config.seed, "eval/gate");
    const EvalResult val = evaluate(spec, store, bundle.data, bundle.marks, bundle.val,
                                    config.batch_size, gate_rng(spec, val_gate));
    infer_ms.insert(infer_ms.end(), val.batch_ms.begin(), val.batch_ms.end());
    const EpochRecord record{loss_sum / static_cast<double>(iters), val.mse, lr};
    report.epochs.push_back(record);
    log::info(fmt::format("epoch {}: train {:.6f} val {:.6f} lr {:.3g}", epoch, record.train_mse,
                          record.val_mse, lr));
    if (on_epoch) on_epoch(epoch, record);
    if (val.mse < report.best_val_mse) {
      report.best_val_mse = val.mse;
      report.best_epoch = epoch;
      best.assign_values(store);
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      break;
    }
  }

  store.assign_values(best);
  Rng64 test_gate = Rng64::derive(config.seed, "eval/gate");
  const EvalResult test = evaluate(spec, store, bundle.data, bundle.marks, bundle.test,
                                   config.batch_size, gate_rng(spec, test_gate));
  infer_ms.insert(infer_ms.end(), test.batch_ms.begin(), test.batch_ms.end());
  report.test_mse = test.mse;
  report.test_mae = test.mae;
  report.train_timing = TimingSummary::of(std::move(iter_ms));
  report.infer_timing = TimingSummary::of(std::move(infer_ms));
  return report;
}

std::size_t param_count(const experts::ExpertSpec& spec, std::size_t mark_len) {
  gate::MoleSpec m;
  m.expert = spec;
  m.mark_len = mark_len;
  return gate::model_param_count(m);
}

}  // namespace mole::train
