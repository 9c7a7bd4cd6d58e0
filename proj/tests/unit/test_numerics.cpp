#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "fedsl/checkpoint.hpp"
#include "fedsl/optimizer.hpp"
#include "fedsl/tape.hpp"
#include "oracles.hpp"

using namespace fedsl;
using fedsl::testing::numeric_gradient;
using fedsl::testing::relative_error;

namespace {

LayoutPtr toy_layout() {
  return std::make_shared<const ParamLayout>(std::vector<ParamLayout::Shape>{
      {"a", 3, 4}, {"b", 2, 4}, {"bias", 2, 1}, {"table", 5, 3}, {"rec_in", 6, 3}, {"rec", 6, 3},
      {"c", 3, 2}});
}

ParamVector toy_params(std::uint64_t seed) {
  ParamVector p(toy_layout());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.values()[i] = n(rng);
  return p;
}

// Touches every differentiable op at least once.
Var toy_loss(Tape& tape, const ParamVector& p) {
  Var a = tape.parameter(p, 0);
  Var b = tape.parameter(p, 1);
  Var bias = tape.parameter(p, 2);
  Var table = tape.parameter(p, 3);
  Var rec_in = tape.parameter(p, 4);
  Var rec = tape.parameter(p, 5);
  Var c = tape.parameter(p, 6);

  Var h = add_bias_rows(matmul_nt(a, b), bias);
  Var t = tanh(cwise_product(sigmoid(h), h) - 0.5 * h);
  const int rows[] = {4, 0, 2, 0};
  Var emb = gather_rows(table, rows);
  Var seq = reverse_rows(gated_recurrence(matmul_nt(emb, rec_in), rec));
  Var ps = pair_sum(t, tanh(matmul(seq, c)));
  Var lsm = log_softmax_rows(ps);
  const Var picks[] = {element(lsm, 0, 1), element(t, 2, 0), sum(seq)};
  Var col = log_softmax(stack(picks));
  return sum(lsm) + logsumexp(seq) + dot(col, Eigen::MatrixXd::Constant(3, 1, 0.7)) +
         sum(log(sigmoid(h)));
}

double toy_value(const ParamVector& p) {
  Tape tape;
  return toy_loss(tape, p).scalar();
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fedsl_test_" + name);
}

}  // namespace

TEST_CASE("tape gradients match central differences for every op") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ParamVector p = toy_params(seed);
    Tape tape;
    Gradient g = tape.backward(toy_loss(tape, p), p);
    Eigen::VectorXd fd = numeric_gradient(toy_value, p);
    CHECK(relative_error(g.values(), fd) < 1e-6);
  }
}

TEST_CASE("stop_gradient blocks the gradient path") {
  ParamVector p = toy_params(2);
  Tape tape;
  Var a = tape.parameter(p, 0);
  Var loss = sum(cwise_product(stop_gradient(a), a));
  Gradient g = tape.backward(loss, p);
  CHECK((g.segment(0) - p.segment(0)).norm() == 0.0);
  CHECK(g.segment(1).norm() == 0.0);
}

TEST_CASE("gated cell step agrees with the taped recurrence") {
  ParamVector p = toy_params(9);
  Tape tape;
  Var in = tape.constant(Eigen::MatrixXd::Random(4, 6));
  Var rec = tape.parameter(p, 5);
  Eigen::MatrixXd seq = gated_recurrence(in, rec).value();
  Eigen::VectorXd h = Eigen::VectorXd::Zero(3);
  for (int t = 0; t < 4; ++t) {
    h = gated_cell_step(in.value().row(t).transpose(), rec.value(), h);
    CHECK((h.transpose() - seq.row(t)).norm() < 1e-14);
  }
}

TEST_CASE("non-finite values raise NumericError naming the op") {
  Tape tape;
  Var z = tape.constant(Eigen::MatrixXd::Zero(2, 2));
  try {
    (void)log(z);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.op() == "log");
  }
}

TEST_CASE("shape mismatches are rejected") {
  Tape tape;
  Var a = tape.constant(Eigen::MatrixXd::Zero(2, 3));
  Var b = tape.constant(Eigen::MatrixXd::Zero(3, 2));
  CHECK_THROWS_AS(a + b, std::invalid_argument);
  CHECK_THROWS_AS(matmul_nt(a, b), std::invalid_argument);
}

TEST_CASE("logsumexp helpers") {
  Eigen::VectorXd x(3);
  x << 1.0, -2.0, 0.5;
  CHECK(logsumexp_of(x) == doctest::Approx(std::log(std::exp(1.0) + std::exp(-2.0) + std::exp(0.5))).epsilon(1e-14));
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(log_add_exp(-inf, 0.3) == 0.3);
  CHECK(log_add_exp(0.2, 0.2) == doctest::Approx(0.2 + std::log(2.0)));
}

TEST_CASE("layout rejects duplicates and misaligned vectors") {
  using Shapes = std::vector<ParamLayout::Shape>;
  CHECK_THROWS_AS(ParamLayout(Shapes{{"w", 2, 2}, {"w", 1, 1}}), LayoutError);
  CHECK_THROWS_AS(ParamLayout(Shapes{{"w", 0, 2}}), LayoutError);
  ParamVector p = toy_params(1);
  auto other = std::make_shared<const ParamLayout>(Shapes{{"w", 2, 2}});
  CHECK_THROWS_AS(delta_between(p, ParamVector(other)), LayoutError);
  CHECK_THROWS_AS(ParamVector(other, Eigen::VectorXd::Zero(3)), LayoutError);
  CHECK(p.segment("bias").rows() == 2);
}

TEST_CASE("delta and pseudo-gradient") {
  ParamVector a = toy_params(1), b = toy_params(2);
  ParamDelta d = delta_between(a, b);
  CHECK((d.values() - (a.values() - b.values())).norm() == 0.0);
  CHECK((pseudo_gradient(d).values() + d.values()).norm() == 0.0);
}

TEST_CASE("sgd with unit rate subtracts the gradient") {
  ParamVector p = toy_params(3);
  Gradient g(p.layout_ptr(), toy_params(4).values());
  OptimizerState s = OptimizerState::sgd(1.0);
  ParamVector q = sgd_step(s, p, g);
  CHECK((q.values() - (p.values() - g.values())).norm() < 1e-15);
  CHECK(s.step == 1);
}

TEST_CASE("adam matches a scalar reference implementation") {
  ParamVector p = toy_params(5);
  OptimizerState s = OptimizerState::adam(0.01);
  const double x0 = p.values()[7];
  double m = 0, v = 0, x = x0;
  for (int k = 1; k <= 5; ++k) {
    Gradient g(p.layout_ptr(), Eigen::VectorXd::Constant(p.size(), 0.3 * k - 0.7));
    p = adam_step(s, p, g);
    const double gk = 0.3 * k - 0.7;
    m = 0.9 * m + 0.1 * gk;
    v = 0.999 * v + 0.001 * gk * gk;
    const double mh = m / (1 - std::pow(0.9, k));
    const double vh = v / (1 - std::pow(0.999, k));
    x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(p.values()[7] == doctest::Approx(x).epsilon(1e-12));
}

TEST_CASE("optimizers refuse to produce non-finite parameters") {
  ParamVector p = toy_params(3);
  Gradient g(p.layout_ptr(), Eigen::VectorXd::Constant(p.size(), std::numeric_limits<double>::infinity()));
  OptimizerState s = OptimizerState::sgd(0.1);
  CHECK_THROWS_AS(sgd_step(s, p, g), NumericError);
  CHECK_THROWS_AS(parse_optimizer_kind("rmsprop"), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Checkpoint c{toy_params(11), 42, ModelRole::kTeacher};
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, c);
  Checkpoint r = load_checkpoint(path);
  CHECK(r.round == 42);
  CHECK(r.role == ModelRole::kTeacher);
  CHECK(r.params.layout() == c.params.layout());
  CHECK(r.params.values() == c.params.values());
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints raise IoError") {
  const auto path = temp_path("bad.ckpt");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  save_checkpoint(path, Checkpoint{toy_params(1), 0, ModelRole::kStudent});
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "x";
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}
