#pragma once

#include <vector>

#include <torch/torch.h>

namespace pother::train {

struct RAdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
};

/// Rectified Adam. While the variance estimate is untrustworthy (rho_t <= 5) the update falls back to
/// bias-corrected momentum without adaptive scaling.
class RAdam {
 public:
  RAdam(std::vector<torch::Tensor> params, RAdamOptions options);

  void step();
  void zero_grad();
  std::int64_t step_count() const { return step_; }
  const RAdamOptions& options() const { return options_; }

 private:
  struct State {
    torch::Tensor exp_avg;
    torch::Tensor exp_avg_sq;
  };
  std::vector<torch::Tensor> params_;
  std::vector<State> state_;
  RAdamOptions options_;
  std::int64_t step_ = 0;
};

}  // namespace pother::train
