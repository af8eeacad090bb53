#include <doctest.h>

#include <cmath>
#include <limits>

#include "mole/dataset.hpp"
#include "mole/errors.hpp"
#include "mole/mixture.hpp"
#include "mole/train.hpp"
#include "support.hpp"

using namespace mole;
using namespace mole::train;
using mole::testing::bitwise_equal;

namespace {

DataBundle toy_bundle(std::size_t weeks = 8, std::size_t s = 24, std::size_t p = 24) {
  data::RawDataset raw = data::toy_generate(weeks * 168, 0.1, 2021);
  const data::Splits splits = data::split(raw.length(), data::SplitFamily::other, s, p);
  const data::ChannelScaler scaler = data::fit_scaler(raw, splits.train);
  raw.values = scaler.apply(raw.values);
  return DataBundle::make(std::move(raw), splits, s, p);
}

gate::MoleSpec toy_spec(experts::ExpertKind kind, std::size_t heads, double rate = 0.0) {
  gate::MoleSpec spec;
  spec.expert.kind = kind;
  spec.expert.channels = 1;
  spec.expert.seq_len = 24;
  spec.expert.pred_len = 24;
  spec.expert.heads = heads;
  spec.expert.mlp_hidden = 16;
  spec.expert.ma_kernel = 5;
  spec.gating.head_dropout = rate;
  return spec;
}

TrainConfig quick(std::size_t epochs, std::size_t patience = 0) {
  TrainConfig c;
  c.batch_size = 32;
  c.lr0 = 0.01;
  c.epochs_max = epochs;
  c.patience = patience;
  c.seed = 7;
  return c;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("mse and mae examples") {
    const Tensor2 a(1, 2, {0, 0});
    const Tensor2 b(1, 2, {1, 1});
    const Tensor2 c(1, 2, {0, 2});
    CHECK(mse(b, b) == 0.0);
    CHECK(mse(a, b) == 1.0);
    CHECK(mae(a, b) == 1.0);
    CHECK(mse(c, b) == 1.0);
    CHECK(mae(c, b) == 1.0);
    // Mean over every element.
    CHECK(mse(Tensor2(2, 2, {0, 0, 0, 2}), Tensor2(2, 2, 0.0)) == 1.0);
    CHECK_THROWS_AS(mse(a, Tensor2(2, 1)), ShapeError);
    CHECK_THROWS_AS(mae(Tensor2(), Tensor2()), ShapeError);
  }

  TEST_CASE("learning-rate schedule") {
    CHECK(lr_at(1, 0.005) == 0.005);
    CHECK(lr_at(3, 0.05) == doctest::Approx(0.0125).epsilon(1e-15));
    CHECK(lr_at(2, 0.005) == doctest::Approx(0.0025).epsilon(1e-15));
    CHECK_THROWS_AS(lr_at(0, 0.005), ConfigError);
    TrainConfig c;
    c.schedule = LrSchedule::constant;
    CHECK(c.lr(5) == c.lr0);
    c.schedule = LrSchedule::halving;
    CHECK(c.lr(5) == c.lr0 / 16.0);
    CHECK(parse_lr_schedule("constant") == LrSchedule::constant);
    CHECK_THROWS_AS(parse_lr_schedule("cosine"), ConfigError);
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lr0 = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.epochs_max = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("timing quartiles") {
    const TimingSummary t = TimingSummary::of({4, 1, 3, 2, 5});
    CHECK(t.samples == 5);
    CHECK(t.mean_ms == 3.0);
    CHECK(t.median_ms == 3.0);
    CHECK(t.q1_ms == 2.0);
    CHECK(t.q3_ms == 4.0);
    CHECK(TimingSummary::of({}).samples == 0);
  }
}

TEST_SUITE("adam") {
  TEST_CASE("zero gradient leaves parameters unchanged") {
    ParamStore store;
    store.add("w", Tensor2(2, 2, {1, 2, 3, 4}));
    const Tensor2 before = store.value("w");
    Adam adam(store);
    adam.step(store, 0.1);
    CHECK(adam.steps() == 1);
    CHECK(bitwise_equal(store.value("w"), before));
  }

  TEST_CASE("first step from theta = 0, g = 1, lr = 0.1") {
    ParamStore store;
    store.add("theta", Tensor2(1, 1, 0.0));
    Adam adam(store);
    store.at("theta").grad(0, 0) = 1.0;
    adam.step(store, 0.1);
    CHECK(std::abs(store.value("theta")(0, 0) + 0.1) < 1e-6);
    CHECK(store.at("theta").grad(0, 0) == 0.0);
  }

  TEST_CASE("independent bias-corrected oracle over several steps") {
    ParamStore store;
    store.add("theta", Tensor2(1, 1, 0.5));
    Adam adam(store);
    double theta = 0.5;
    double m = 0.0;
    double v = 0.0;
    for (int t = 1; t <= 10; ++t) {
      const double g = 2.0 * theta - 0.3 * t;
      store.at("theta").grad(0, 0) = g;
      adam.step(store, 0.05);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, t));
      const double vh = v / (1.0 - std::pow(0.999, t));
      theta -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(store.value("theta")(0, 0) == doctest::Approx(theta).epsilon(1e-12));
    }
  }

  TEST_CASE("one step on a quadratic lowers the loss at lr = 1e-3") {
    Rng64 rng(3);
    ParamStore store;
    store.add("theta", mole::testing::random_tensor(3, 4, rng, -2.0, 2.0));
    const auto loss = [&] {
      double total = 0.0;
      for (double x : store.value("theta").data()) total += 0.5 * (x - 0.25) * (x - 0.25);
      return total;
    };
    Adam adam(store);
    for (int step = 0; step < 5; ++step) {
      const double before = loss();
      Param& p = store.at("theta");
      for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] = p.value[i] - 0.25;
      adam.step(store, 1e-3);
      CHECK(loss() < before);
    }
  }

  TEST_CASE("non-finite gradient aborts naming the parameter") {
    ParamStore store;
    store.add("a", Tensor2(1, 1, 1.0));
    store.add("b", Tensor2(1, 2, 1.0));
    Adam adam(store);
    store.at("a").grad(0, 0) = 0.5;
    store.at("b").grad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    try {
      adam.step(store, 0.1);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
    CHECK(store.value("a")(0, 0) == 1.0);
  }
}

TEST_SUITE("fit") {
  TEST_CASE("one epoch without early stopping") {
    const DataBundle bundle = toy_bundle();
    const gate::MoleSpec spec = toy_spec(experts::ExpertKind::rlinear, 1);
    ParamStore store;
    gate::init_model_params(spec, store, 1);
    const FitReport r = fit(quick(1), spec, store, bundle);
    CHECK(r.epochs.size() == 1);
    CHECK(r.best_epoch == 1);
    CHECK(r.param_count == store.scalar_count());
    CHECK(r.train_timing.samples == bundle.train.size() / 32);
    CHECK(r.infer_timing.samples > 0);
  }

  TEST_CASE("identical runs give bit-identical reports and parameters") {
    const DataBundle bundle = toy_bundle();
    const gate::MoleSpec spec = toy_spec(experts::ExpertKind::dlinear, 3, 0.2);
    ParamStore a;
    ParamStore b;
    gate::init_model_params(spec, a, 5);
    gate::init_model_params(spec, b, 5);
    const FitReport ra = fit(quick(3), spec, a, bundle);
    const FitReport rb = fit(quick(3), spec, b, bundle);
    CHECK(ra.test_mse == rb.test_mse);
    CHECK(ra.test_mae == rb.test_mae);
    for (std::size_t e = 0; e < ra.epochs.size(); ++e) {
      CHECK(ra.epochs[e].train_mse == rb.epochs[e].train_mse);
      CHECK(ra.epochs[e].val_mse == rb.epochs[e].val_mse);
    }
    for (const auto& [name, p] : a) CHECK(bitwise_equal(p.value, b.value(name)));
  }

  TEST_CASE("best epoch minimises validation and test comes from it") {
    const DataBundle bundle = toy_bundle();
    const gate::MoleSpec spec = toy_spec(experts::ExpertKind::rlinear, 2);
    TrainConfig cfg = quick(6);
    cfg.lr0 = 0.05;
    cfg.schedule = LrSchedule::constant;
    ParamStore store;
    gate::init_model_params(spec, store, 9);
    const FitReport r = fit(cfg, spec, store, bundle);
    REQUIRE(r.epochs.size() == 6);
    std::size_t argmin = 0;
    for (std::size_t e = 1; e < 6; ++e) {
      if (r.epochs[e].val_mse < r.epochs[argmin].val_mse) argmin = e;
    }
    CHECK(r.best_epoch == argmin + 1);
    CHECK(r.best_val_mse == r.epochs[argmin].val_mse);

    // The store holds the best-epoch parameters: re-evaluating reproduces
    // both the best validation score and the reported test metrics.
    const EvalResult val = evaluate(spec, store, bundle.data, bundle.marks, bundle.val, 32, nullptr);
    const EvalResult test = evaluate(spec, store, bundle.data, bundle.marks, bundle.test, 32, nullptr);
    CHECK(val.mse == r.best_val_mse);
    CHECK(test.mse == r.test_mse);
    CHECK(test.mae == r.test_mae);

    // Truncating the same run at the best epoch lands on the same test score.
    ParamStore again;
    gate::init_model_params(spec, again, 9);
    cfg.epochs_max = r.best_epoch;
    CHECK(fit(cfg, spec, again, bundle).test_mse == r.test_mse);
  }

  TEST_CASE("patience stops after that many epochs without improvement") {
    const DataBundle bundle = toy_bundle();
    const gate::MoleSpec spec = toy_spec(experts::ExpertKind::rlinear, 1);
    TrainConfig cfg = quick(20, 2);
    cfg.lr0 = 0.2;  // overshoots, so validation stalls quickly
    cfg.schedule = LrSchedule::constant;
    ParamStore store;
    gate::init_model_params(spec, store, 2);
    const FitReport r = fit(cfg, spec, store, bundle);
    REQUIRE(r.epochs.size() < 20);
    CHECK(r.epochs.size() == r.best_epoch + 2);
    for (std::size_t e = r.best_epoch; e < r.epochs.size(); ++e) {
      CHECK(r.epochs[e].val_mse >= r.best_val_mse);
    }
  }

  TEST_CASE("training loss drops below its value at initialisation") {
    const DataBundle bundle = toy_bundle();
    for (auto kind : {experts::ExpertKind::dlinear, experts::ExpertKind::rlinear, experts::ExpertKind::rmlp}) {
      const gate::MoleSpec spec = toy_spec(kind, 2);
      ParamStore store;
      gate::init_model_params(spec, store, 3);
      const double initial = evaluate(spec, store, bundle.data, bundle.marks, bundle.train, 64, nullptr).mse;
      fit(quick(3), spec, store, bundle);
      const double after = evaluate(spec, store, bundle.data, bundle.marks, bundle.train, 64, nullptr).mse;
      CHECK(after < initial);
    }
  }

  TEST_CASE("divergence aborts with epoch and iteration") {
    const DataBundle bundle = toy_bundle();
    const gate::MoleSpec spec = toy_spec(experts::ExpertKind::dlinear, 1);
    ParamStore store;
    gate::init_model_params(spec, store, 1);
    store.value(experts::names::kTrendBias)(0, 0) = std::numeric_limits<double>::infinity();
    try {
      fit(quick(2), spec, store, bundle);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("epoch 1 iteration 1") != std::string::npos);
    }
  }

  TEST_CASE("too few train windows for one batch") {
    const DataBundle bundle = toy_bundle(2);
    const gate::MoleSpec spec = toy_spec(experts::ExpertKind::rlinear, 1);
    ParamStore store;
    gate::init_model_params(spec, store, 1);
    TrainConfig cfg = quick(1);
    cfg.batch_size = bundle.train.size() + 1;
    CHECK_THROWS_AS(fit(cfg, spec, store, bundle), DataError);
  }

  TEST_CASE("report JSON has the fixed field names") {
    const DataBundle bundle = toy_bundle();
    const gate::MoleSpec spec = toy_spec(experts::ExpertKind::rlinear, 1);
    ParamStore store;
    gate::init_model_params(spec, store, 1);
    const nlohmann::json j = fit(quick(2), spec, store, bundle).to_json({{"k", 1}});
    for (const char* key : {"config", "epochs", "best_epoch", "test_mse", "test_mae",
                            "train_ms_per_iter", "infer_ms_per_iter", "param_count"}) {
      CHECK(j.contains(key));
    }
    CHECK(j["epochs"].size() == 2);
    CHECK(j["epochs"][0].contains("train_mse"));
    CHECK(j["epochs"][0].contains("val_mse"));
    CHECK(j["epochs"][0].contains("lr"));
    CHECK(j["config"]["k"] == 1);
  }
}

TEST_SUITE("param count") {
  TEST_CASE("closed form matches the store tally") {
    for (auto kind : {experts::ExpertKind::dlinear, experts::ExpertKind::rlinear, experts::ExpertKind::rmlp}) {
      for (std::size_t n = 1; n <= 6; ++n) {
        experts::ExpertSpec e;
        e.kind = kind;
        e.channels = 7;
        e.seq_len = 48;
        e.pred_len = 24;
        e.heads = n;
        e.mlp_hidden = 64;
        gate::MoleSpec spec;
        spec.expert = e;
        ParamStore store;
        gate::init_model_params(spec, store, 1);
        CHECK(param_count(e, 4) == store.scalar_count());
      }
    }
  }

  TEST_CASE("published totals") {
    experts::ExpertSpec e;
    e.channels = 7;
    e.seq_len = 336;
    e.pred_len = 336;
    e.kind = experts::ExpertKind::dlinear;
    CHECK(param_count(e, 4) == 226464);
    e.kind = experts::ExpertKind::rlinear;
    e.heads = 3;
    CHECK(param_count(e, 4) == 340277);
    e.kind = experts::ExpertKind::rmlp;
    e.heads = 6;
    CHECK(param_count(e, 4) == 1026334);
  }
}
