#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cbln/errors.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct Parameter {
  std::string name;
  Matrix value;
  // Adam moments, same shape as value.
  Matrix first_moment;
  Matrix second_moment;
};

// Named learnable matrices in insertion order, plus shared Adam step count.
class ParameterStore {
 public:
  Matrix& add(std::string name, Matrix init) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
    const std::size_t r = init.rows, c = init.cols;
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), std::move(init), Matrix(r, c), Matrix(r, c)});
    return params_.back().value;
  }

  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = rows (x * W convention).
  Matrix& add_weight(std::string name, std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(rows, 1)));
    return add_uniform(std::move(name), rows, cols, bound, rng);
  }

  Matrix& add_uniform(std::string name, std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return add(std::move(name), std::move(m));
  }

  Matrix& add_constant(std::string name, std::size_t rows, std::size_t cols, double value) {
    return add(std::move(name), Matrix(rows, cols, value));
  }

  [[nodiscard]] bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  [[nodiscard]] std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  Parameter& at(std::string_view name) { return params_[index_of(name)]; }
  [[nodiscard]] const Parameter& at(std::string_view name) const { return params_[index_of(name)]; }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  [[nodiscard]] const Parameter& operator[](std::size_t i) const { return params_[i]; }

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  [[nodiscard]] auto begin() const { return params_.begin(); }
  [[nodiscard]] auto end() const { return params_.end(); }

  [[nodiscard]] long step() const { return step_; }
  void set_step(long s) { step_ = s; }

  // Zero gradients, one per parameter, in store order.
  [[nodiscard]] std::vector<Matrix> zero_grads() const {
    std::vector<Matrix> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.value.rows, p.value.cols);
    return g;
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  long step_ = 0;
};

// Binds store parameters onto one tape on first use. After Tape::backward the
// per-parameter gradients can be added into store-aligned accumulators.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParameterStore& store, bool trainable = true)
      : tape_(tape), store_(store), trainable_(trainable) {}

  Tensor operator()(std::string_view name) {
    const std::size_t i = store_.index_of(name);
    auto it = bound_.find(i);
    if (it != bound_.end()) return it->second;
    const Matrix& v = store_[i].value;
    Tensor t = trainable_ ? tape_.variable(v) : tape_.constant(v);
    bound_.emplace(i, t);
    return t;
  }

  [[nodiscard]] Tape& tape() const { return tape_; }

  void accumulate_grads(std::vector<Matrix>& grads) const {
    for (const auto& [i, t] : bound_) {
      if (!t.requires_grad()) continue;
      const Matrix& g = t.grad();
      if (g.size() != grads[i].size()) continue;
      detail::add_into(grads[i], g);
    }
  }

 private:
  Tape& tape_;
  const ParameterStore& store_;
  bool trainable_;
  std::unordered_map<std::size_t, Tensor> bound_;
};

}  // namespace cbln
