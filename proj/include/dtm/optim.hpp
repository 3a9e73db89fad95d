#pragma once

#include <string>
#include <vector>

#include "dtm/tensor.hpp"

namespace dtm {

/// SGD with classical momentum. Update rule:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
/// Weight decay enters the velocity together with the gradient.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(T lr, T momentum, T weight_decay) : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void add_param(const std::string& name, const TensorPtr<T>& param) {
    param->ensure_grad();
    entries_.push_back({name, param, std::vector<T>(param->numel(), T(0))});
  }

  /// Rejects the entire step if any registered gradient is non-finite;
  /// parameters and velocities are left untouched in that case.
  void step() {
    for (const auto& e : entries_)
      if (!all_finite(e.param->grad))
        throw NumericError("sgd_step: non-finite gradient in parameter '" + e.name + "', step rejected");
    for (auto& e : entries_) {
      auto& p = e.param->data;
      const auto& g = e.param->grad;
      for (std::size_t i = 0; i < p.size(); ++i) {
        e.velocity[i] = momentum_ * e.velocity[i] + g[i] + weight_decay_ * p[i];
        p[i] -= lr_ * e.velocity[i];
      }
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.param->zero_grad();
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

  struct Entry {
    std::string name;
    TensorPtr<T> param;
    std::vector<T> velocity;
  };

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  T lr_, momentum_, weight_decay_;
  std::vector<Entry> entries_;
};

}  // namespace dtm
