#include "fedsl/optimizer.hpp"

#include <cmath>
#include <string>

namespace fedsl {

namespace {

void require_finite(const ParamVector& p, const char* op) {
  if (!p.all_finite()) throw NumericError(op, "update produced a non-finite parameter");
}

}  // namespace

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "'");
}

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

OptimizerState OptimizerState::sgd(double learning_rate) {
  OptimizerState s;
  s.kind = OptimizerKind::kSgd;
  s.learning_rate = learning_rate;
  return s;
}

OptimizerState OptimizerState::adam(double learning_rate, double beta1, double beta2,
                                    double epsilon) {
  OptimizerState s;
  s.kind = OptimizerKind::kAdam;
  s.learning_rate = learning_rate;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  return s;
}

ParamVector sgd_step(OptimizerState& state, const ParamVector& params, const Gradient& grad) {
  require_aligned(params, grad, "sgd_step");
  ParamVector out(params.layout_ptr(), params.values() - state.learning_rate * grad.values());
  require_finite(out, "sgd_step");
  ++state.step;
  return out;
}

ParamVector adam_step(OptimizerState& state, const ParamVector& params, const Gradient& grad) {
  if (state.kind != OptimizerKind::kAdam) throw std::invalid_argument("adam_step on a non-adam state");
  require_aligned(params, grad, "adam_step");
  if (!state.first_moment) {
    state.first_moment.emplace(params.layout_ptr());
    state.second_moment.emplace(params.layout_ptr());
  }
  require_aligned(params, *state.first_moment, "adam_step moments");

  Eigen::VectorXd& m = state.first_moment->values();
  Eigen::VectorXd& v = state.second_moment->values();
  const Eigen::VectorXd& g = grad.values();
  m = state.beta1 * m + (1.0 - state.beta1) * g;
  v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseAbs2();

  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  Eigen::VectorXd update =
      (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.epsilon);
  ParamVector out(params.layout_ptr(), params.values() - state.learning_rate * update);
  require_finite(out, "adam_step");
  state.step = t;
  return out;
}

ParamVector optimizer_step(OptimizerState& state, const ParamVector& params, const Gradient& grad) {
  return state.kind == OptimizerKind::kSgd ? sgd_step(state, params, grad)
                                           : adam_step(state, params, grad);
}

}  // namespace fedsl
