#include "mole/experts.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstring>
#include <fstream>
#include <string>

#include <fmt/core.h>

#include "mole/errors.hpp"
#include "mole/log.hpp"
#include "mole/rng.hpp"

namespace mole::experts {

std::string_view to_string(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::dlinear: return "dlinear";
    case ExpertKind::rlinear: return "rlinear";
    case ExpertKind::rmlp: return "rmlp";
  }
  return "dlinear";
}

ExpertKind parse_expert_kind(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (lower == "dlinear") return ExpertKind::dlinear;
  if (lower == "rlinear") return ExpertKind::rlinear;
  if (lower == "rmlp") return ExpertKind::rmlp;
  throw ConfigError(fmt::format("unknown model kind '{}' (expected dlinear, rlinear or rmlp)", text));
}

void ExpertSpec::validate() const {
  if (channels == 0 || seq_len == 0 || pred_len == 0 || heads == 0) {
    throw ConfigError("expert spec: channels, seq_len, pred_len and heads must be >= 1");
  }
  if (kind == ExpertKind::dlinear && ma_kernel % 2 == 0) {
    throw ConfigError(fmt::format("expert spec: moving-average kernel {} must be odd", ma_kernel));
  }
  if (kind == ExpertKind::rmlp && mlp_hidden == 0) {
    throw ConfigError("expert spec: mlp_hidden must be >= 1");
  }
}

std::size_t expert_param_count(const ExpertSpec& spec) {
  const std::size_t s = spec.seq_len;
  const std::size_t out = spec.heads * spec.pred_len;
  const std::size_t head_linear = s * out + out;
  switch (spec.kind) {
    case ExpertKind::dlinear: return 2 * head_linear;
    case ExpertKind::rlinear: return head_linear + 2 * spec.channels;
    case ExpertKind::rmlp: {
      const std::size_t h = spec.mlp_hidden;
      return head_linear + 2 * spec.channels + (s * h + h) + (h * s + s);
    }
  }
  return 0;
}

namespace {

void add_linear(ParamStore& store, const char* weight, const char* bias, std::size_t in,
                std::size_t out, std::uint64_t seed) {
  Rng64 wr = Rng64::derive(seed, std::string("init/") + weight);
  store.add(weight, uniform_init(in, in, out, wr));
  Rng64 br = Rng64::derive(seed, std::string("init/") + bias);
  store.add(bias, uniform_init(in, 1, out, br));
}

void add_revin(ParamStore& store, std::size_t channels) {
  store.add(names::kRevinGamma, Tensor2(channels, 1, 1.0));
  store.add(names::kRevinBeta, Tensor2(channels, 1, 0.0));
}

void check_input(ad::Var x, const ExpertSpec& spec) {
  if (x.cols() != spec.seq_len || x.rows() == 0 || x.rows() % spec.channels != 0) {
    throw ShapeError(fmt::format("expert input {} incompatible with channels={} seq_len={}",
                                 x.value().shape_string(), spec.channels, spec.seq_len));
  }
}

HeadOutputs make_heads(ad::Var stacked, const ExpertSpec& spec) {
  return HeadOutputs{stacked, spec.heads, spec.pred_len};
}

void moving_average_row(std::span<const double> in, std::span<double> out, std::size_t kernel) {
  const auto n = static_cast<std::ptrdiff_t>(in.size());
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const double inv = 1.0 / static_cast<double>(kernel);
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::ptrdiff_t o = -half; o <= half; ++o) acc += in[std::clamp<std::ptrdiff_t>(j + o, 0, n - 1)];
    out[j] = acc * inv;
  }
}

void check_kernel(std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0) {
    throw ConfigError(fmt::format("moving average kernel must be odd and >= 1, got {}", kernel));
  }
}

}  // namespace

void init_expert_params(const ExpertSpec& spec, ParamStore& store, std::uint64_t seed) {
  spec.validate();
  const std::size_t s = spec.seq_len;
  const std::size_t out = spec.heads * spec.pred_len;
  switch (spec.kind) {
    case ExpertKind::dlinear:
      add_linear(store, names::kTrendWeight, names::kTrendBias, s, out, seed);
      add_linear(store, names::kSeasonalWeight, names::kSeasonalBias, s, out, seed);
      break;
    case ExpertKind::rlinear:
      add_revin(store, spec.channels);
      add_linear(store, names::kLinearWeight, names::kLinearBias, s, out, seed);
      break;
    case ExpertKind::rmlp:
      add_revin(store, spec.channels);
      add_linear(store, names::kMlpFc1Weight, names::kMlpFc1Bias, s, spec.mlp_hidden, seed);
      add_linear(store, names::kMlpFc2Weight, names::kMlpFc2Bias, spec.mlp_hidden, s, seed);
      add_linear(store, names::kLinearWeight, names::kLinearBias, s, out, seed);
      break;
  }
}

Tensor2 moving_average(const Tensor2& x, std::size_t kernel) {
  check_kernel(kernel);
  Tensor2 out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) moving_average_row(x.row(r), out.row(r), kernel);
  return out;
}

Decomposition decompose(const Tensor2& x, std::size_t kernel) {
  Decomposition d{Tensor2(x.rows(), x.cols()), moving_average(x, kernel)};
  for (std::size_t i = 0; i < x.size(); ++i) d.seasonal[i] = x[i] - d.trend[i];
  return d;
}

ad::Var moving_average(ad::Var x, std::size_t kernel) {
  check_kernel(kernel);
  ad::Tape& tape = *x.tape();
  const ad::Var parents[] = {x};
  return tape.record(moving_average(x.value(), kernel), parents,
                     [x, kernel](ad::Tape& tp, const Tensor2& g, const Tensor2&) {
                       // Adjoint: each output spreads g/kernel back onto the
                       // (clamped) inputs it averaged.
                       Tensor2& gx = tp.grad_buffer(x);
                       const auto n = static_cast<std::ptrdiff_t>(g.cols());
                       const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
                       const double inv = 1.0 / static_cast<double>(kernel);
                       for (std::size_t r = 0; r < g.rows(); ++r) {
                         const auto gr = g.row(r);
                         auto out = gx.row(r);
                         for (std::ptrdiff_t j = 0; j < n; ++j) {
                           const double share = gr[j] * inv;
                           for (std::ptrdiff_t o = -half; o <= half; ++o) {
                             out[std::clamp<std::ptrdiff_t>(j + o, 0, n - 1)] += share;
                           }
                         }
                       }
                     });
}

Normalized revin_normalize(ad::Var x, ad::Var gamma, ad::Var beta) {
  const std::size_t channels = gamma.rows();
  if (gamma.cols() != 1 || beta.rows() != channels || beta.cols() != 1 ||
      x.rows() % channels != 0) {
    throw ShapeError(fmt::format("revin: input {} with affine terms {}", x.value().shape_string(),
                                 gamma.value().shape_string()));
  }
  const std::size_t batch = x.rows() / channels;
  const std::size_t cols = x.cols();
  RevinState st;
  st.mean = ad::row_mean(x);
  st.stdev = ad::sqrt(ad::add_scalar(ad::row_var(x), kRevinEps));
  st.gamma = batch == 1 ? gamma : ad::tile_rows(gamma, batch);
  st.beta = batch == 1 ? beta : ad::tile_rows(beta, batch);
  ad::Var centered = ad::sub(x, ad::broadcast_cols(st.mean, cols));
  ad::Var scaled = ad::div(centered, ad::broadcast_cols(st.stdev, cols));
  ad::Var affine = ad::add(ad::mul(scaled, ad::broadcast_cols(st.gamma, cols)),
                           ad::broadcast_cols(st.beta, cols));
  return Normalized{affine, st};
}

ad::Var revin_denormalize(ad::Var z, const RevinState& st) {
  const std::size_t cols = z.cols();
  if (z.rows() != st.mean.rows()) {
    throw ShapeError(fmt::format("revin_denormalize: {} rows, state has {}", z.rows(),
                                 st.mean.rows()));
  }
  for (double g : st.gamma.value().data()) {
    if (std::abs(g) < kRevinGammaFloor) {
      log::warn(fmt::format("RevIN gamma {} below floor {}; denormalising with the floor", g,
                            kRevinGammaFloor));
      break;
    }
  }
  ad::Var gamma = ad::guard_magnitude(st.gamma, kRevinGammaFloor);
  ad::Var shifted = ad::sub(z, ad::broadcast_cols(st.beta, cols));
  ad::Var unscaled = ad::div(shifted, ad::broadcast_cols(gamma, cols));
  return ad::add(ad::mul(unscaled, ad::broadcast_cols(st.stdev, cols)),
                 ad::broadcast_cols(st.mean, cols));
}

ad::Var HeadOutputs::head(std::size_t i) const {
  if (i >= heads) throw ShapeError(fmt::format("head {} of {}", i, heads));
  if (heads == 1) return stacked;
  return ad::slice_cols(stacked, i * pred_len, pred_len);
}

ExpertOutput dlinear_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec) {
  check_input(x, spec);
  ad::Var trend = moving_average(x, spec.ma_kernel);
  ad::Var seasonal = ad::sub(x, trend);
  ad::Var trend_out = ad::linear(trend, tape.param(store, names::kTrendWeight),
                                 tape.param(store, names::kTrendBias));
  ad::Var seasonal_out = ad::linear(seasonal, tape.param(store, names::kSeasonalWeight),
                                    tape.param(store, names::kSeasonalBias));
  return ExpertOutput{make_heads(ad::add(seasonal_out, trend_out), spec), std::nullopt};
}

ExpertOutput rlinear_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec) {
  check_input(x, spec);
  Normalized n = revin_normalize(x, tape.param(store, names::kRevinGamma),
                                 tape.param(store, names::kRevinBeta));
  ad::Var out = ad::linear(n.x, tape.param(store, names::kLinearWeight),
                           tape.param(store, names::kLinearBias));
  return ExpertOutput{make_heads(out, spec), n.state};
}

ExpertOutput rmlp_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec) {
  check_input(x, spec);
  Normalized n = revin_normalize(x, tape.param(store, names::kRevinGamma),
                                 tape.param(store, names::kRevinBeta));
  ad::Var hidden = ad::relu(ad::linear(n.x, tape.param(store, names::kMlpFc1Weight),
                                       tape.param(store, names::kMlpFc1Bias)));
  ad::Var residual = ad::add(n.x, ad::linear(hidden, tape.param(store, names::kMlpFc2Weight),
                                             tape.param(store, names::kMlpFc2Bias)));
  ad::Var out = ad::linear(residual, tape.param(store, names::kLinearWeight),
                           tape.param(store, names::kLinearBias));
  return ExpertOutput{make_heads(out, spec), n.state};
}

ExpertOutput expert_forward(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec) {
  switch (spec.kind) {
    case ExpertKind::dlinear: return dlinear_forward(tape, x, store, spec);
    case ExpertKind::rlinear: return rlinear_forward(tape, x, store, spec);
    case ExpertKind::rmlp: return rmlp_forward(tape, x, store, spec);
  }
  throw ConfigError("unknown expert kind");
}

ad::Var postprocess(ad::Var mixed, const ExpertOutput& out) {
  if (!out.revin) return mixed;
  return revin_denormalize(mixed, *out.revin);
}

ad::Var expert_predict(ad::Tape& tape, ad::Var x, ParamStore& store, const ExpertSpec& spec) {
  if (spec.heads != 1) throw ConfigError("expert_predict needs a single-head spec");
  const ExpertOutput out = expert_forward(tape, x, store, spec);
  return postprocess(out.heads.head(0), out);
}

// --- parameter files ------------------------------------------------------

namespace {

constexpr std::array<char, 5> kMagic = {'M', 'O', 'L', 'E', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof bits);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw DataError("truncated parameter file");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

double get_f64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw DataError("truncated parameter file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  double v = 0.0;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

void save_params(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out.write(kMagic.data(), kMagic.size());
  for (const auto& [name, p] : store) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(p.value.rows()));
    put_u32(out, static_cast<std::uint32_t>(p.value.cols()));
    for (double v : p.value.data()) put_f64(out, v);
  }
  if (!out) throw DataError(fmt::format("failed writing '{}'", path.string()));
}

ParamStore load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  std::array<char, 5> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw DataError(fmt::format("'{}' is not a MOLE1 parameter file", path.string()));
  }
  ParamStore store;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = get_u32(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError("truncated parameter file");
    const std::uint32_t rows = get_u32(in);
    const std::uint32_t cols = get_u32(in);
    Tensor2 value(rows, cols);
    for (double& v : value.data()) v = get_f64(in);
    store.add(name, std::move(value));
  }
  return store;
}

}  // namespace mole::experts
