#include "mole/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "mole/errors.hpp"

namespace mole::ad {

const Tensor2& Var::value() const {
  if (tape_ == nullptr) throw ShapeError("use of an unbound Var");
  return tape_->value(*this);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ShapeError("Var does not belong to tape");
  return nodes_[v.id_];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ShapeError("Var does not belong to tape");
  return nodes_[v.id_];
}

Var Tape::constant(Tensor2 value) {
  Node& n = nodes_.emplace_back();
  n.own = std::move(value);
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(ParamStore& store, const std::string& name) {
  const auto key = std::make_pair(static_cast<const ParamStore*>(&store), name);
  if (auto it = param_ids_.find(key); it != param_ids_.end()) return Var(this, it->second);
  Param& p = store.at(name);
  Node& n = nodes_.emplace_back();
  n.external = &p.value;
  n.sink = &p.grad;
  n.requires_grad = true;
  const std::size_t id = nodes_.size() - 1;
  param_ids_.emplace(key, id);
  return Var(this, id);
}

Var Tape::record(Tensor2 value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || node(p).requires_grad;
  Node& n = nodes_.emplace_back();
  n.own = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  return Var(this, nodes_.size() - 1);
}

const Tensor2& Tape::value(Var v) const { return node(v).value(); }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

void Tape::accumulate(Var v, const Tensor2& contribution) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    require_same_shape(n.value(), contribution, "gradient");
    n.grad = contribution;
  } else {
    n.grad += contribution;
  }
}

Tensor2& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor2(n.value().rows(), n.value().cols());
  return n.grad;
}

const Tensor2& Tape::grad(Var v) const { return node(v).grad; }

void Tape::backward(Var out) {
  if (backward_done_) throw ShapeError("Tape::backward called twice");
  Node& root = node(out);
  if (root.value().size() != 1) {
    throw ShapeError(fmt::format("backward needs a scalar output, got {}",
                                 root.value().shape_string()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  root.grad = Tensor2(1, 1, 1.0);
  for (std::size_t i = out.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad, n.value());
  }
  for (Node& n : nodes_) {
    if (n.sink != nullptr && !n.grad.empty()) *n.sink += n.grad;
  }
}

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ShapeError(fmt::format("{}: operands on different tapes", op));
  }
  return *a.tape();
}

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw ShapeError("unbound Var");
  return *a.tape();
}

void require_shape(Var a, Var b, const char* op) { require_same_shape(a.value(), b.value(), op); }

template <typename F>
Tensor2 map_values(const Tensor2& x, F f) {
  Tensor2 out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  Tensor2 out = mole::matmul(a.value(), b.value());
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& tp, const Tensor2& g, const Tensor2&) {
    if (tp.requires_grad(a)) matmul_a_bt_acc(g, tp.value(b), tp.grad_buffer(a));
    if (tp.requires_grad(b)) matmul_at_b_acc(tp.value(a), g, tp.grad_buffer(b));
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_shape(a, b, "add");
  Tensor2 out = a.value();
  out += b.value();
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& tp, const Tensor2& g, const Tensor2&) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_shape(a, b, "sub");
  const Tensor2& av = a.value();
  const Tensor2& bv = b.value();
  Tensor2 out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& tp, const Tensor2& g, const Tensor2&) {
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) {
      Tensor2& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_shape(a, b, "mul");
  const Tensor2& av = a.value();
  const Tensor2& bv = b.value();
  Tensor2 out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& tp, const Tensor2& g, const Tensor2&) {
    const Tensor2& av = tp.value(a);
    const Tensor2& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor2& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      Tensor2& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var div(Var a, Var b) {
  Tape& t = same_tape(a, b, "div");
  require_shape(a, b, "div");
  const Tensor2& av = a.value();
  const Tensor2& bv = b.value();
  Tensor2 out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& tp, const Tensor2& g, const Tensor2& y) {
    const Tensor2& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor2& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (tp.requires_grad(b)) {
      Tensor2& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

Var scale(Var a, double k) {
  Tape& t = tape_of(a);
  Tensor2 out = map_values(a.value(), [k](double v) { return v * k; });
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a, k](Tape& tp, const Tensor2& g, const Tensor2&) {
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * k;
  });
}

Var add_scalar(Var a, double k) {
  Tape& t = tape_of(a);
  Tensor2 out = map_values(a.value(), [k](double v) { return v + k; });
  const Var parents[] = {a};
  return t.record(std::move(out), parents,
                  [a](Tape& tp, const Tensor2& g, const Tensor2&) { tp.accumulate(a, g); });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  Tensor2 out = map_values(a.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& tp, const Tensor2& g, const Tensor2&) {
    const Tensor2& x = tp.value(a);
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var sqrt(Var a) {
  Tape& t = tape_of(a);
  Tensor2 out = map_values(a.value(), [](double v) { return std::sqrt(v); });
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& tp, const Tensor2& g, const Tensor2& y) {
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / y[i];
  });
}

Var guard_magnitude(Var a, double floor) {
  Tape& t = tape_of(a);
  Tensor2 out = map_values(a.value(), [floor](double v) {
    if (std::abs(v) >= floor) return v;
    return v < 0.0 ? -floor : floor;
  });
  const Var parents[] = {a};
  return t.record(std::move(out), parents,
                  [a, floor](Tape& tp, const Tensor2& g, const Tensor2&) {
                    const Tensor2& x = tp.value(a);
                    Tensor2& ga = tp.grad_buffer(a);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      if (std::abs(x[i]) >= floor) ga[i] += g[i];
                    }
                  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const Tensor2& x = a.value();
  Tensor2 out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (double& v : o) v /= total;
  }
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& tp, const Tensor2& g, const Tensor2& y) {
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const auto yr = y.row(r);
      const auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
      auto out_row = ga.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out_row[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var row_sum(Var a) {
  Tape& t = tape_of(a);
  const Tensor2& x = a.value();
  Tensor2 out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v;
    out(r, 0) = s;
  }
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& tp, const Tensor2& g, const Tensor2&) {
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (double& v : ga.row(r)) v += g(r, 0);
    }
  });
}

Var row_mean(Var a) {
  Tape& t = tape_of(a);
  const Tensor2& x = a.value();
  const double inv = 1.0 / static_cast<double>(x.cols());
  Tensor2 out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v;
    out(r, 0) = s * inv;
  }
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a, inv](Tape& tp, const Tensor2& g, const Tensor2&) {
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (double& v : ga.row(r)) v += g(r, 0) * inv;
    }
  });
}

Var row_var(Var a) {
  Tape& t = tape_of(a);
  const Tensor2& x = a.value();
  const double inv = 1.0 / static_cast<double>(x.cols());
  Tensor2 means(x.rows(), 1);
  Tensor2 out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v;
    const double m = s * inv;
    double ss = 0.0;
    for (double v : x.row(r)) ss += (v - m) * (v - m);
    means(r, 0) = m;
    out(r, 0) = ss * inv;
  }
  const Var parents[] = {a};
  return t.record(std::move(out), parents,
                  [a, inv, means = std::move(means)](Tape& tp, const Tensor2& g, const Tensor2&) {
                    const Tensor2& x = tp.value(a);
                    Tensor2& ga = tp.grad_buffer(a);
                    for (std::size_t r = 0; r < x.rows(); ++r) {
                      const double k = 2.0 * inv * g(r, 0);
                      const auto xr = x.row(r);
                      auto gr = ga.row(r);
                      for (std::size_t c = 0; c < xr.size(); ++c) gr[c] += k * (xr[c] - means(r, 0));
                    }
                  });
}

Var sum_all(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const Var parents[] = {a};
  return t.record(Tensor2(1, 1, s), parents, [a](Tape& tp, const Tensor2& g, const Tensor2&) {
    Tensor2& ga = tp.grad_buffer(a);
    for (double& v : ga.data()) v += g[0];
  });
}

Var broadcast_cols(Var column, std::size_t cols) {
  Tape& t = tape_of(column);
  const Tensor2& v = column.value();
  if (v.cols() != 1) {
    throw ShapeError(fmt::format("broadcast_cols needs a column vector, got {}", v.shape_string()));
  }
  Tensor2 out(v.rows(), cols);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    for (double& x : out.row(r)) x = v(r, 0);
  }
  const Var parents[] = {column};
  return t.record(std::move(out), parents, [column](Tape& tp, const Tensor2& g, const Tensor2&) {
    Tensor2& gc = tp.grad_buffer(column);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double s = 0.0;
      for (double x : g.row(r)) s += x;
      gc(r, 0) += s;
    }
  });
}

Var add_row_bias(Var x, Var bias) {
  Tape& t = same_tape(x, bias, "add_row_bias");
  const Tensor2& xv = x.value();
  const Tensor2& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError(fmt::format("add_row_bias: bias {} for input {}", bv.shape_string(),
                                 xv.shape_string()));
  }
  Tensor2 out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  const Var parents[] = {x, bias};
  return t.record(std::move(out), parents, [x, bias](Tape& tp, const Tensor2& g, const Tensor2&) {
    tp.accumulate(x, g);
    if (tp.requires_grad(bias)) {
      Tensor2& gb = tp.grad_buffer(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

Var tile_rows(Var a, std::size_t times) {
  Tape& t = tape_of(a);
  const Tensor2& v = a.value();
  Tensor2 out(v.rows() * times, v.cols());
  for (std::size_t k = 0; k < times; ++k) {
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + k * v.size());
  }
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& tp, const Tensor2& g, const Tensor2&) {
    Tensor2& ga = tp.grad_buffer(a);
    const std::size_t block = ga.size();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i % block] += g[i];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = tape_of(parts.front());
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ShapeError("concat_rows: operands on different tapes");
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Tensor2 out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + offset);
    offset += src.size();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.record(std::move(out), parts,
                  [owned = std::move(owned)](Tape& tp, const Tensor2& g, const Tensor2&) {
                    std::size_t off = 0;
                    for (const Var& p : owned) {
                      const std::size_t n = tp.value(p).size();
                      if (tp.requires_grad(p)) {
                        Tensor2& gp = tp.grad_buffer(p);
                        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                      }
                      off += n;
                    }
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(a);
  const Tensor2& v = a.value();
  if (begin + count > v.cols()) {
    throw ShapeError(fmt::format("slice_cols [{}, {}) out of range for {}", begin, begin + count,
                                 v.shape_string()));
  }
  Tensor2 out(v.rows(), count);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const auto src = v.row(r).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const Var parents[] = {a};
  return t.record(std::move(out), parents,
                  [a, begin, count](Tape& tp, const Tensor2& g, const Tensor2&) {
                    Tensor2& ga = tp.grad_buffer(a);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      auto dst = ga.row(r).subspan(begin, count);
                      const auto src = g.row(r);
                      for (std::size_t c = 0; c < count; ++c) dst[c] += src[c];
                    }
                  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& t = tape_of(a);
  const Tensor2& v = a.value();
  if (rows * cols != v.size()) {
    throw ShapeError(fmt::format("reshape {} -> {}x{}", v.shape_string(), rows, cols));
  }
  Tensor2 out(rows, cols, std::vector<double>(v.data().begin(), v.data().end()));
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& tp, const Tensor2& g, const Tensor2&) {
    Tensor2& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var mse(Var prediction, Var target) {
  Tape& t = same_tape(prediction, target, "mse");
  require_shape(prediction, target, "mse");
  const Tensor2& p = prediction.value();
  const Tensor2& y = target.value();
  const double inv = 1.0 / static_cast<double>(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  const Var parents[] = {prediction, target};
  return t.record(Tensor2(1, 1, s * inv), parents,
                  [prediction, target, inv](Tape& tp, const Tensor2& g, const Tensor2&) {
                    const Tensor2& p = tp.value(prediction);
                    const Tensor2& y = tp.value(target);
                    const double k = 2.0 * inv * g[0];
                    if (tp.requires_grad(prediction)) {
                      Tensor2& gp = tp.grad_buffer(prediction);
                      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += k * (p[i] - y[i]);
                    }
                    if (tp.requires_grad(target)) {
                      Tensor2& gy = tp.grad_buffer(target);
                      for (std::size_t i = 0; i < p.size(); ++i) gy[i] -= k * (p[i] - y[i]);
                    }
                  });
}

Var linear(Var x, Var weight, Var bias) { return add_row_bias(matmul(x, weight), bias); }

}  // namespace mole::ad
