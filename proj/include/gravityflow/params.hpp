#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gravityflow/array.hpp"
#include "gravityflow/errors.hpp"
#include "gravityflow/tape.hpp"

namespace gravityflow {

// Uniform double in [0, 1) from the top 53 bits; identical on every platform
// for a given engine state (std distributions are implementation-defined).
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Named trainable arrays in insertion order.
template <class T>
class ParameterSet {
 public:
  void add(const std::string& name, Array<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Array<T>& at(const std::string& name) { return entries_[lookup(name)].value; }
  const Array<T>& at(const std::string& name) const { return entries_[lookup(name)].value; }

  Var<T> bind(Tape<T>& tape, const std::string& name) const { return tape.parameter(name, at(name)); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  struct Entry {
    std::string name;
    Array<T> value;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  bool operator==(const ParameterSet& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name != o.entries_[i].name || !(entries_[i].value == o.entries_[i].value)) return false;
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Xavier-uniform fill with fan-in/fan-out taken the usual way for rank >= 2
// tensors (dims 0 and 1, trailing dims as receptive field). Rank < 2 arrays
// are zero-filled.
template <class T>
Array<T> xavier_uniform(const Shape& shape, std::mt19937_64& rng) {
  Array<T> a(shape);
  if (shape.size() < 2) return a;
  std::size_t receptive = 1;
  for (std::size_t k = 2; k < shape.size(); ++k) receptive *= shape[k];
  const double fan_in = static_cast<double>(shape[1] * receptive);
  const double fan_out = static_cast<double>(shape[0] * receptive);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : a.storage()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  return a;
}

}  // namespace gravityflow
