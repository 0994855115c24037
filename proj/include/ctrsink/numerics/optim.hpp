#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ctrsink/errors.hpp"
#include "ctrsink/numerics/tensor.hpp"

namespace ctrsink {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Learning rates used with the pretrained backbones; kept as named presets.
inline constexpr double kEncoderPresetLr = 1e-4;
inline constexpr double kDecoderPresetLr = 1e-5;

template <class T>
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<Buffer<T>> first_moment;
  std::vector<Buffer<T>> second_moment;
};

template <class T>
OptimizerState<T> make_optimizer_state(const std::vector<Tensor<T>>& params, AdamWConfig config = {}) {
  OptimizerState<T> state;
  state.config = config;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.size(), T(0));
    state.second_moment.emplace_back(p.size(), T(0));
  }
  return state;
}

// One AdamW update at learning rate `lr`. Weight decay multiplies the
// parameter directly and never enters the moment estimates.
template <class T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state, double lr) {
  if (params.size() != state.first_moment.size()) throw ShapeError("adamw_step: parameter count differs from state");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].size() != state.first_moment[i].size()) throw ShapeError("adamw_step: parameter shape differs from state");

  const auto& cfg = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_data();
    auto grads = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grads[j];
      double p = values[j];
      p -= lr * cfg.weight_decay * p;
      m[j] = T(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g);
      v[j] = T(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      values[j] = T(p);
    }
  }
}

// Linear warmup from 0 to peak over the first warm_ratio * total steps,
// then linear decay to 0 at total_steps.
inline double lr_at_step(std::uint64_t step, std::uint64_t total_steps, double peak_lr, double warm_ratio) {
  if (total_steps == 0 || step > total_steps) throw InvalidArgument("lr_at_step: step outside [0, total_steps]");
  if (!(warm_ratio > 0.0 && warm_ratio < 1.0)) throw InvalidArgument("lr_at_step: warm_ratio must lie in (0, 1)");
  const double warm = warm_ratio * double(total_steps);
  const double s = double(step);
  if (s < warm) return peak_lr * s / warm;
  return peak_lr * (double(total_steps) - s) / (double(total_steps) - warm);
}

}  // namespace ctrsink
