#include "pother/train/radam.hpp"

#include <cmath>

namespace pother::train {

RAdam::RAdam(std::vector<torch::Tensor> params, RAdamOptions options)
    : params_(std::move(params)), options_(options) {
  state_.reserve(params_.size());
  for (const auto& p : params_) {
    state_.push_back({torch::zeros_like(p), torch::zeros_like(p)});
  }
}

void RAdam::zero_grad() {
  for (auto& p : params_) {
    if (p.grad().defined()) {
      p.mutable_grad().detach_();
      p.mutable_grad().zero_();
    }
  }
}

void RAdam::step() {
  torch::NoGradGuard guard;
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double t = static_cast<double>(step_);
  const double bias1 = 1.0 - std::pow(b1, t);
  const double bias2 = 1.0 - std::pow(b2, t);
  const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  const double rho_t = rho_inf - 2.0 * t * std::pow(b2, t) / bias2;

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.grad().defined()) continue;
    auto grad = p.grad();
    if (options_.weight_decay != 0.0) grad = grad + options_.weight_decay * p;
    auto& s = state_[i];
    s.exp_avg.mul_(b1).add_(grad, 1.0 - b1);
    s.exp_avg_sq.mul_(b2).addcmul_(grad, grad, 1.0 - b2);
    auto m_hat = s.exp_avg / bias1;
    if (rho_t > 5.0) {
      const double rect = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
      auto adaptive = std::sqrt(bias2) / (s.exp_avg_sq.sqrt() + options_.eps);
      p.sub_(m_hat * adaptive * (options_.lr * rect));
    } else {
      p.sub_(m_hat * options_.lr);
    }
  }
}

}  // namespace pother::train
