#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cosynorm {

/// Raised when layer dimensions, head counts or tensor shapes do not fit together.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor. Rank 2 is the common case (frames x channels).
template <typename S>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, S fill = S(0))
      : shape(std::move(dims)), data(count(shape), fill) {}
  Tensor(std::size_t rows, std::size_t cols, S fill = S(0))
      : Tensor(std::vector<std::size_t>{rows, cols}, fill) {}

  static std::size_t count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  // Rank-1 tensors read as a single row.
  std::size_t rows() const { return shape.size() >= 2 ? shape.front() : 1; }
  std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

  S& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  S operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<S> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const S> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

using FeatureSeq = Tensor<float>;

/// Named trainable tensor with its accumulated gradient.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  std::vector<S> grad;

  void zero_grad() { grad.assign(value.size(), S(0)); }
};

/// Owns every parameter of a model in registration order. Names are unique.
template <typename S>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<S>& add(const std::string& name, std::vector<std::size_t> shape) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->value = Tensor<S>(std::move(shape));
    p->zero_grad();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cosynorm
