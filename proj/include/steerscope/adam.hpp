#pragma once

#include <vector>

#include "steerscope/tensor.hpp"

namespace steerscope {

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamConfig config);

  /// One update from gradients aligned with the parameter list. Returns the
  /// pre-clip global gradient norm.
  double step(const std::vector<const Tensor*>& grads);
  long steps() const noexcept { return t_; }

 private:
  std::vector<Tensor*> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace steerscope
