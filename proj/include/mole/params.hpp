#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "mole/tensor.hpp"

namespace mole {

struct Param {
  Tensor2 value;
  Tensor2 grad;
};

/// Named trainable arrays with gradient accumulators. Iteration is sorted
/// by name, which fixes the order of serialization and optimizer updates.
class ParamStore {
 public:
  using Map = std::map<std::string, Param, std::less<>>;

  /// Inserts a new entry; throws if the name already exists.
  Param& add(const std::string& name, Tensor2 value);

  bool contains(std::string_view name) const;
  Param& at(std::string_view name);
  const Param& at(std::string_view name) const;
  const Tensor2& value(std::string_view name) const { return at(name).value; }
  Tensor2& value(std::string_view name) { return at(name).value; }

  void zero_grad();
  /// Total number of scalar parameters.
  std::size_t scalar_count() const;
  std::size_t size() const noexcept { return entries_.size(); }

  Map::iterator begin() noexcept { return entries_.begin(); }
  Map::iterator end() noexcept { return entries_.end(); }
  Map::const_iterator begin() const noexcept { return entries_.begin(); }
  Map::const_iterator end() const noexcept { return entries_.end(); }

  /// Copies values (not gradients) from `other`; names and shapes must agree.
  void assign_values(const ParamStore& other);

 private:
  Map entries_;
};

}  // namespace mole
