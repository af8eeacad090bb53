#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "mole/autodiff.hpp"
#include "mole/errors.hpp"
#include "mole/grad_check.hpp"
#include "mole/params.hpp"
#include "mole/rng.hpp"
#include "support.hpp"

using namespace mole;
using mole::testing::away_from_zero;
using mole::testing::random_tensor;

namespace {

// Reference xoshiro256** written from the published algorithm, seeded the
// same way (four splitmix64 outputs).
struct ReferenceXoshiro {
  std::array<std::uint64_t, 4> s{};

  explicit ReferenceXoshiro(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : s) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }
};

Tensor2 naive_matmul(const Tensor2& a, const Tensor2& b) {
  Tensor2 out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

Tensor2 transpose(const Tensor2& a) {
  Tensor2 t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Weighted sum with fixed random weights so every output entry matters.
ad::Var weighted_sum(ad::Var v, std::uint64_t seed) {
  Rng64 rng(seed);
  Tensor2 w = random_tensor(v.rows(), v.cols(), rng);
  return ad::sum_all(ad::mul(v, v.tape()->constant(std::move(w))));
}

double check(const LossFn& fn, ParamStore& store) { return grad_check(fn, store).max_rel_error; }

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul variants agree with a triple-loop oracle") {
    Rng64 rng(11);
    const Tensor2 a = random_tensor(5, 4, rng);
    const Tensor2 b = random_tensor(4, 3, rng);
    CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-14);

    Tensor2 acc(5, 3, 1.0);
    matmul_acc(a, b, acc);
    Tensor2 expect = naive_matmul(a, b);
    for (double& v : expect.data()) v += 1.0;
    CHECK(max_abs_diff(acc, expect) < 1e-14);

    const Tensor2 c = random_tensor(5, 3, rng);
    Tensor2 atb(4, 3);
    matmul_at_b_acc(a, c, atb);
    CHECK(max_abs_diff(atb, naive_matmul(transpose(a), c)) < 1e-14);

    Tensor2 abt(5, 4);
    matmul_a_bt_acc(c, b, abt);
    CHECK(max_abs_diff(abt, naive_matmul(c, transpose(b))) < 1e-14);
  }

  TEST_CASE("shape checks") {
    CHECK_THROWS_AS(matmul(Tensor2(2, 3), Tensor2(2, 3)), ShapeError);
    CHECK_THROWS_AS(Tensor2(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor2 a(2, 2);
    CHECK_THROWS_AS(a += Tensor2(1, 2), ShapeError);
    const Tensor2 r = Tensor2::from_rows({{1, 2}, {3, 4}});
    CHECK(r.size() == 4);
    CHECK(r(1, 0) == 3.0);
  }

  TEST_CASE("finite check") {
    Tensor2 t(1, 2);
    CHECK(t.all_finite());
    t(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
  }
}

TEST_SUITE("rng") {
  TEST_CASE("splitmix64 published first output for state 0") {
    std::uint64_t state = 0;
    CHECK(splitmix64(state) == 0xe220a8397b1dcdafULL);
  }

  TEST_CASE("first 1000 draws match a reference xoshiro256** and repeat per seed") {
    for (std::uint64_t seed : {0ULL, 1ULL, 2021ULL, 0xdeadbeefULL}) {
      Rng64 a(seed);
      Rng64 b(seed);
      ReferenceXoshiro ref(seed);
      for (int i = 0; i < 1000; ++i) {
        const std::uint64_t x = a.next_u64();
        REQUIRE(x == b.next_u64());
        REQUIRE(x == ref.next());
      }
    }
  }

  TEST_CASE("different seeds and component names give different streams") {
    CHECK(Rng64(1).next_u64() != Rng64(2).next_u64());
    CHECK(Rng64::derive(2021, "shuffle").next_u64() != Rng64::derive(2021, "init").next_u64());
    CHECK(Rng64::derive(2021, "init").next_u64() != Rng64::derive(2022, "init").next_u64());
    CHECK(Rng64::derive(7, "x").next_u64() == Rng64::derive(7, "x").next_u64());
  }

  TEST_CASE("uniform and below stay in range") {
    Rng64 rng(5);
    for (int i = 0; i < 10000; ++i) {
      const double u = rng.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
      REQUIRE(rng.below(7) < 7);
    }
  }

  TEST_CASE("uniform_init ranges, determinism and draw count") {
    Rng64 r1(3);
    const Tensor2 one = uniform_init(1, 1, 1, r1);
    CHECK(std::abs(one(0, 0)) <= 1.0);

    Rng64 r4(3);
    const Tensor2 four = uniform_init(4, 2, 2, r4);
    for (double v : four.data()) CHECK(std::abs(v) <= 0.5);

    Rng64 again(3);
    CHECK(uniform_init(4, 2, 2, again) == four);

    // Exactly rows×cols draws: the next draw matches a stream advanced by 4.
    Rng64 manual(3);
    for (int i = 0; i < 4; ++i) manual.next_u64();
    CHECK(r4.next_u64() == manual.next_u64());

    Rng64 r0(1);
    CHECK_THROWS_AS(uniform_init(0, 1, 1, r0), ConfigError);
  }

  TEST_CASE("gaussian") {
    Rng64 rng(2021);
    CHECK(gaussian(rng, 20.0, 0.0) == 20.0);
    CHECK_THROWS_AS(gaussian(rng, 0.0, -1.0), ConfigError);

    // Monte Carlo: sample moments of 1e5 draws.
    constexpr int kDraws = 100000;
    double sum = 0.0;
    double sq = 0.0;
    for (int i = 0; i < kDraws; ++i) {
      const double g = gaussian(rng, 0.0, 0.1);
      sum += g;
      sq += g * g;
    }
    const double mean = sum / kDraws;
    const double stdev = std::sqrt(sq / kDraws - mean * mean);
    CHECK(std::abs(mean) < 0.002);
    CHECK(std::abs(stdev - 0.1) < 0.005);
  }

  TEST_CASE("gaussian consumes two uniforms even at sigma 0") {
    Rng64 a(9);
    Rng64 b(9);
    (void)gaussian(a, 1.0, 0.0);
    b.next_u64();
    b.next_u64();
    CHECK(a.next_u64() == b.next_u64());
  }

  TEST_CASE("shuffled_indices is a permutation") {
    Rng64 rng(4);
    auto idx = shuffled_indices(100, rng);
    std::vector<std::size_t> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> iota(100);
    std::iota(iota.begin(), iota.end(), 0);
    CHECK(sorted == iota);
    CHECK(idx != iota);
  }
}

TEST_SUITE("params") {
  TEST_CASE("store basics") {
    ParamStore store;
    store.add("b", Tensor2(2, 3, 1.0));
    store.add("a", Tensor2(1, 1, 2.0));
    CHECK_THROWS(store.add("a", Tensor2(1, 1)));
    CHECK(store.scalar_count() == 7);
    std::vector<std::string> order;
    for (const auto& [name, p] : store) {
      order.push_back(name);
      CHECK(p.grad.same_shape(p.value));
    }
    CHECK(order == std::vector<std::string>{"a", "b"});
    CHECK_FALSE(store.contains("c"));
    CHECK_THROWS(store.at("c"));
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("sum of params has gradient one everywhere") {
    ParamStore store;
    Rng64 rng(1);
    store.add("theta", random_tensor(3, 4, rng));
    LossFn fn = [](ad::Tape& tape, ParamStore& s) {
      return ad::sum_all(tape.param(s, "theta"));
    };
    {
      ad::Tape tape;
      tape.backward(fn(tape, store));
      for (double g : store.at("theta").grad.data()) CHECK(g == 1.0);
      store.zero_grad();
    }
    CHECK(check(fn, store) < 1e-10);
  }

  TEST_CASE("half squared norm at theta = 3") {
    ParamStore store;
    store.add("theta", Tensor2(1, 1, 3.0));
    LossFn fn = [](ad::Tape& tape, ParamStore& s) {
      ad::Var t = tape.param(s, "theta");
      return ad::scale(ad::sum_all(ad::mul(t, t)), 0.5);
    };
    const GradCheckReport r = grad_check(fn, store);
    CHECK(r.worst_analytic == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(r.worst_numeric == doctest::Approx(3.0).epsilon(1e-8));
    CHECK(r.max_rel_error < 1e-9);
    CHECK(store.value("theta")(0, 0) == 3.0);
  }

  TEST_CASE("every primitive passes grad_check") {
    Rng64 rng(77);
    ParamStore store;
    store.add("a", away_from_zero(3, 4, rng));
    store.add("b", away_from_zero(3, 4, rng));
    store.add("m", random_tensor(4, 5, rng));
    store.add("col", away_from_zero(3, 1, rng));
    store.add("bias4", random_tensor(1, 4, rng));
    store.add("bias5", random_tensor(1, 5, rng));
    store.add("pos", random_tensor(3, 4, rng, 0.5, 2.0));

    using Op = std::function<ad::Var(ad::Tape&, ParamStore&)>;
    auto p = [](ad::Tape& t, ParamStore& s, const char* name) { return t.param(s, name); };
    const std::vector<std::pair<const char*, Op>> ops = {
        {"matmul", [&](ad::Tape& t, ParamStore& s) { return ad::matmul(p(t, s, "a"), p(t, s, "m")); }},
        {"add", [&](ad::Tape& t, ParamStore& s) { return ad::add(p(t, s, "a"), p(t, s, "b")); }},
        {"sub", [&](ad::Tape& t, ParamStore& s) { return ad::sub(p(t, s, "a"), p(t, s, "b")); }},
        {"mul", [&](ad::Tape& t, ParamStore& s) { return ad::mul(p(t, s, "a"), p(t, s, "b")); }},
        {"mul_self", [&](ad::Tape& t, ParamStore& s) { return ad::mul(p(t, s, "a"), p(t, s, "a")); }},
        {"div", [&](ad::Tape& t, ParamStore& s) { return ad::div(p(t, s, "a"), p(t, s, "pos")); }},
        {"scale", [&](ad::Tape& t, ParamStore& s) { return ad::scale(p(t, s, "a"), -2.5); }},
        {"add_scalar", [&](ad::Tape& t, ParamStore& s) { return ad::add_scalar(p(t, s, "a"), 0.7); }},
        {"relu", [&](ad::Tape& t, ParamStore& s) { return ad::relu(p(t, s, "a")); }},
        {"sqrt", [&](ad::Tape& t, ParamStore& s) { return ad::sqrt(p(t, s, "pos")); }},
        {"guard_magnitude", [&](ad::Tape& t, ParamStore& s) { return ad::guard_magnitude(p(t, s, "col"), 1e-8); }},
        {"softmax_rows", [&](ad::Tape& t, ParamStore& s) { return ad::softmax_rows(p(t, s, "a")); }},
        {"row_sum", [&](ad::Tape& t, ParamStore& s) { return ad::row_sum(p(t, s, "a")); }},
        {"row_mean", [&](ad::Tape& t, ParamStore& s) { return ad::row_mean(p(t, s, "a")); }},
        {"row_var", [&](ad::Tape& t, ParamStore& s) { return ad::row_var(p(t, s, "a")); }},
        {"broadcast_cols", [&](ad::Tape& t, ParamStore& s) { return ad::broadcast_cols(p(t, s, "col"), 6); }},
        {"add_row_bias", [&](ad::Tape& t, ParamStore& s) { return ad::add_row_bias(p(t, s, "a"), p(t, s, "bias4")); }},
        {"tile_rows", [&](ad::Tape& t, ParamStore& s) { return ad::tile_rows(p(t, s, "col"), 3); }},
        {"concat_rows", [&](ad::Tape& t, ParamStore& s) {
           const ad::Var parts[] = {p(t, s, "a"), p(t, s, "b"), p(t, s, "a")};
           return ad::concat_rows(parts);
         }},
        {"slice_cols", [&](ad::Tape& t, ParamStore& s) { return ad::slice_cols(p(t, s, "a"), 1, 2); }},
        {"reshape", [&](ad::Tape& t, ParamStore& s) { return ad::reshape(p(t, s, "a"), 6, 2); }},
        {"mse", [&](ad::Tape& t, ParamStore& s) { return ad::mse(p(t, s, "a"), p(t, s, "b")); }},
        {"linear", [&](ad::Tape& t, ParamStore& s) { return ad::linear(p(t, s, "b"), p(t, s, "m"), p(t, s, "bias5")); }},
    };
    std::uint64_t salt = 1;
    for (const auto& [name, op] : ops) {
      CAPTURE(name);
      const std::uint64_t seed = salt++;
      LossFn fn = [&, seed](ad::Tape& t, ParamStore& s) { return weighted_sum(op(t, s), seed); };
      CHECK(check(fn, store) < 1e-4);
    }
  }

  TEST_CASE("gradient of a sum of losses is the sum of gradients") {
    Rng64 rng(8);
    ParamStore store;
    store.add("w", random_tensor(4, 3, rng));
    store.add("v", away_from_zero(2, 4, rng));
    LossFn f1 = [](ad::Tape& t, ParamStore& s) {
      return weighted_sum(ad::relu(ad::matmul(t.param(s, "v"), t.param(s, "w"))), 1);
    };
    LossFn f2 = [](ad::Tape& t, ParamStore& s) {
      return weighted_sum(ad::softmax_rows(ad::matmul(t.param(s, "v"), t.param(s, "w"))), 2);
    };
    auto grads = [&](const LossFn& fn) {
      ad::Tape tape;
      tape.backward(fn(tape, store));
      ParamStore copy = store;
      store.zero_grad();
      return copy;
    };
    const ParamStore g1 = grads(f1);
    const ParamStore g2 = grads(f2);
    const ParamStore g12 = grads([&](ad::Tape& t, ParamStore& s) { return ad::add(f1(t, s), f2(t, s)); });
    for (const char* name : {"w", "v"}) {
      Tensor2 sum = g1.at(name).grad;
      sum += g2.at(name).grad;
      CHECK(max_abs_diff(sum, g12.at(name).grad) < 1e-12);
    }
  }

  TEST_CASE("backward preconditions") {
    ParamStore store;
    store.add("x", Tensor2(2, 2, 1.0));
    ad::Tape tape;
    ad::Var x = tape.param(store, "x");
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
    ad::Var loss = ad::sum_all(x);
    tape.backward(loss);
    CHECK_THROWS(tape.backward(loss));
    CHECK(tape.param(store, "x").id() == x.id());
  }

  TEST_CASE("non-finite loss names the parameter") {
    ParamStore store;
    store.add("theta", Tensor2(1, 1, 0.0));
    LossFn fn = [](ad::Tape& t, ParamStore& s) {
      ad::Var th = t.param(s, "theta");
      return ad::sum_all(ad::div(th, th));  // 0/0 at the evaluation point
    };
    try {
      grad_check(fn, store);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("theta") != std::string::npos);
    }
  }
}

TEST_CASE("non-finite perturbed loss names the entry and restores values") {
  ParamStore store;
  store.add("theta", Tensor2(1, 1, 0.0));
  LossFn fn = [](ad::Tape& t, ParamStore& s) { return ad::sum_all(ad::sqrt(t.param(s, "theta"))); };
  try {
    grad_check(fn, store);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("theta[0]") != std::string::npos);
  }
  CHECK(store.value("theta")(0, 0) == 0.0);
}

namespace {

// k·θ summed, with a backward that reports `claimed` instead of k.
ad::Var miscalibrated_scale(ad::Tape& t, ParamStore& s, double k, double claimed) {
  const ad::Var theta = t.param(s, "theta");
  const ad::Var parents[] = {theta};
  Tensor2 out = theta.value();
  for (double& v : out.data()) v *= k;
  const ad::Var y = t.record(std::move(out), parents,
                             [theta, claimed](ad::Tape& tp, const Tensor2& g, const Tensor2&) {
                               Tensor2& gt = tp.grad_buffer(theta);
                               for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i] * claimed;
                             });
  return ad::sum_all(y);
}

}  // namespace

TEST_CASE("wrong gradients are caught at ordinary and tiny magnitudes") {
  ParamStore store;
  store.add("theta", Tensor2(1, 3, {0.3, -0.7, 1.1}));
  for (const auto& [k, claimed] : std::vector<std::pair<double, double>>{
           {2.0, 2.01}, {1e-3, 1.1e-3}, {1e-7, 2e-7}, {0.0, 5e-7}}) {
    CAPTURE(k);
    const LossFn fn = [k = k, claimed = claimed](ad::Tape& t, ParamStore& s) {
      return miscalibrated_scale(t, s, k, claimed);
    };
    CHECK(grad_check(fn, store).max_rel_error > 1e-3);
  }
  const LossFn honest = [](ad::Tape& t, ParamStore& s) { return miscalibrated_scale(t, s, 1e-7, 1e-7); };
  const GradCheckReport r = grad_check(honest, store);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.entries_below_floor == 3);
}
