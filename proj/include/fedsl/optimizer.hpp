#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

#include "fedsl/param_vector.hpp"

namespace fedsl {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer_kind(std::string_view name);
std::string_view to_string(OptimizerKind kind);

/// Optimizer bookkeeping owned by exactly one training loop.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  // Adam moments; allocated on first adam_step.
  std::optional<Gradient> first_moment;
  std::optional<Gradient> second_moment;

  static OptimizerState sgd(double learning_rate);
  static OptimizerState adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                             double epsilon = 1e-8);
};

/// params - lr * grad.
ParamVector sgd_step(OptimizerState& state, const ParamVector& params, const Gradient& grad);

/// Bias-corrected Adam.
ParamVector adam_step(OptimizerState& state, const ParamVector& params, const Gradient& grad);

/// Dispatches on state.kind.
ParamVector optimizer_step(OptimizerState& state, const ParamVector& params, const Gradient& grad);

}  // namespace fedsl
