#include "mole/params.hpp"

#include <fmt/core.h>

#include "mole/errors.hpp"

namespace mole {

Param& ParamStore::add(const std::string& name, Tensor2 value) {
  Tensor2 grad(value.rows(), value.cols());
  auto [it, inserted] = entries_.emplace(name, Param{std::move(value), std::move(grad)});
  if (!inserted) throw ConfigError(fmt::format("duplicate parameter '{}'", name));
  return it->second;
}

bool ParamStore::contains(std::string_view name) const {
  return entries_.find(name) != entries_.end();
}

Param& ParamStore::at(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError(fmt::format("unknown parameter '{}'", name));
  return it->second;
}

const Param& ParamStore::at(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError(fmt::format("unknown parameter '{}'", name));
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : entries_) p.grad.fill(0.0);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& [name, p] : entries_) total += p.value.size();
  return total;
}

void ParamStore::assign_values(const ParamStore& other) {
  if (other.size() != size()) throw ConfigError("assign_values: parameter sets differ");
  for (auto& [name, p] : entries_) {
    const Param& src = other.at(name);
    require_same_shape(p.value, src.value, name.c_str());
    p.value = src.value;
  }
}

}  // namespace mole
