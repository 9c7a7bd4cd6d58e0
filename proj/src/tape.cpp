#include "fedsl/tape.hpp"

#include <stdexcept>
#include <string>

namespace fedsl {

namespace {

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
}

void require_same_shape(Var a, Var b, const char* op) {
  require_same_tape(a, b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

Eigen::MatrixXd scalar_matrix(double v) {
  Eigen::MatrixXd m(1, 1);
  m(0, 0) = v;
  return m;
}

// Candidate/gate nonlinearity of the recurrent cell given the full pre-activation.
void cell_activate(const Eigen::Ref<const Eigen::VectorXd>& pre,
                   const Eigen::Ref<const Eigen::VectorXd>& h_prev, Eigen::Ref<Eigen::VectorXd> c,
                   Eigen::Ref<Eigen::VectorXd> z, Eigen::Ref<Eigen::VectorXd> h) {
  const Eigen::Index hidden = h_prev.size();
  c = pre.head(hidden).array().tanh();
  z = (1.0 + (-pre.tail(hidden).array()).exp()).inverse();
  h = ((1.0 - z.array()) * h_prev.array() + z.array() * c.array()).matrix();
}

}  // namespace

const Eigen::MatrixXd& Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) {
    throw std::invalid_argument("scalar() on a " + std::to_string(v.rows()) + "x" +
                                std::to_string(v.cols()) + " node");
  }
  return v(0, 0);
}

Var Tape::push(Node node) {
  if (!node.value.allFinite()) {
    throw NumericError(node.op, "node " + std::to_string(nodes_.size()) + " of shape " +
                                    std::to_string(node.value.rows()) + "x" +
                                    std::to_string(node.value.cols()));
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Eigen::MatrixXd value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  return push(std::move(n));
}

Var Tape::scalar_constant(double value) { return constant(scalar_matrix(value)); }

Var Tape::parameter(const ParamVector& params, std::size_t segment) {
  Node n;
  n.value = params.segment(segment);
  n.op = "parameter";
  n.segment = static_cast<int>(segment);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(const char* op, Eigen::MatrixXd value, std::initializer_list<Var> parents,
                 Backward backward) {
  return record(op, std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(const char* op, Eigen::MatrixXd value, std::span<const Var> parents,
                 Backward backward) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (Var p : parents) {
    if (p.tape() != this) throw std::invalid_argument(std::string(op) + ": foreign operand");
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::accumulate_at(Var v, Eigen::Index row, Eigen::Index col, double g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
  n.grad(row, col) += g;
}

Gradient Tape::backward(Var loss, const ParamVector& params) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (nodes_[loss.id()].value.size() != 1) {
    throw std::invalid_argument("backward: loss must be 1x1");
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  accumulate_at(loss, 0, 0, 1.0);

  Gradient out(params.layout_ptr());
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      n.backward(*this, n.grad, n.value);
    } else if (n.segment >= 0) {
      if (!n.grad.allFinite()) throw NumericError("parameter", "gradient of leaf " + std::to_string(i));
      out.segment(static_cast<std::size_t>(n.segment)) += n.grad;
    }
  }
  return out;
}

Var operator+(Var a, Var b) {
  require_same_shape(a, b, "add");
  return a.tape()->record("add", a.value() + b.value(), {a, b},
                          [a, b](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, g);
                            t.accumulate(b, g);
                          });
}

Var operator-(Var a, Var b) {
  require_same_shape(a, b, "sub");
  return a.tape()->record("sub", a.value() - b.value(), {a, b},
                          [a, b](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, g);
                            t.accumulate(b, -g);
                          });
}

Var operator*(double s, Var a) {
  return a.tape()->record("scale", s * a.value(), {a},
                          [a, s](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, s * g);
                          });
}

Var cwise_product(Var a, Var b) {
  require_same_shape(a, b, "cwise_product");
  return a.tape()->record("cwise_product", a.value().cwiseProduct(b.value()), {a, b},
                          [a, b](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, g.cwiseProduct(b.value()));
                            t.accumulate(b, g.cwiseProduct(a.value()));
                          });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  return a.tape()->record("matmul", a.value() * b.value(), {a, b},
                          [a, b](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
                            if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
                          });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  return a.tape()->record("matmul_nt", a.value() * b.value().transpose(), {a, b},
                          [a, b](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            if (t.requires_grad(a)) t.accumulate(a, g * b.value());
                            if (t.requires_grad(b)) t.accumulate(b, g.transpose() * a.value());
                          });
}

Var add_bias_rows(Var a, Var bias) {
  require_same_tape(a, bias, "add_bias_rows");
  if (bias.cols() != 1 || bias.rows() != a.cols()) {
    throw std::invalid_argument("add_bias_rows: bias must be a.cols() x 1");
  }
  Eigen::MatrixXd v = a.value().rowwise() + bias.value().col(0).transpose();
  return a.tape()->record(
      "add_bias_rows", std::move(v), {a, bias},
      [a, bias](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
        t.accumulate(a, g);
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum().transpose());
      });
}

Var tanh(Var a) {
  return a.tape()->record(
      "tanh", a.value().array().tanh().matrix(), {a},
      [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd& y) {
        t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
      });
}

Var sigmoid(Var a) {
  Eigen::MatrixXd v = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return a.tape()->record(
      "sigmoid", std::move(v), {a},
      [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd& y) {
        t.accumulate(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
      });
}

Var log(Var a) {
  if ((a.value().array() <= 0.0).any()) throw NumericError("log", "non-positive argument");
  return a.tape()->record("log", a.value().array().log().matrix(), {a},
                          [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, g.cwiseQuotient(a.value()));
                          });
}

Var sum(Var a) {
  return a.tape()->record("sum", scalar_matrix(a.value().sum()), {a},
                          [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, Eigen::MatrixXd::Constant(a.rows(), a.cols(), g(0, 0)));
                          });
}

Var logsumexp(Var a) {
  const double lse = logsumexp_of(a.value());
  return a.tape()->record(
      "logsumexp", scalar_matrix(lse), {a},
      [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd& y) {
        t.accumulate(a, (g(0, 0) * (a.value().array() - y(0, 0)).exp()).matrix());
      });
}

Var log_softmax_rows(Var a) {
  const Eigen::MatrixXd& x = a.value();
  Eigen::VectorXd row_max = x.rowwise().maxCoeff();
  Eigen::MatrixXd shifted = x.colwise() - row_max;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  Eigen::MatrixXd v = shifted.colwise() - lse;
  return a.tape()->record(
      "log_softmax_rows", std::move(v), {a},
      [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd& y) {
        Eigen::VectorXd gsum = g.rowwise().sum();
        Eigen::MatrixXd soft = y.array().exp().matrix();
        t.accumulate(a, g - (soft.array().colwise() * gsum.array()).matrix());
      });
}

Var log_softmax(Var a) {
  if (a.cols() != 1) throw std::invalid_argument("log_softmax: expects a column vector");
  const double lse = logsumexp_of(a.value());
  Eigen::MatrixXd v = a.value().array() - lse;
  return a.tape()->record("log_softmax", std::move(v), {a},
                          [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd& y) {
                            t.accumulate(a, g - y.array().exp().matrix() * g.sum());
                          });
}

Var dot(Var a, const Eigen::MatrixXd& weights) {
  if (weights.rows() != a.rows() || weights.cols() != a.cols()) {
    throw std::invalid_argument("dot: shape mismatch");
  }
  return a.tape()->record("dot", scalar_matrix(a.value().cwiseProduct(weights).sum()), {a},
                          [a, weights](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, g(0, 0) * weights);
                          });
}

Var element(Var a, Eigen::Index row, Eigen::Index col) {
  if (row < 0 || col < 0 || row >= a.rows() || col >= a.cols()) {
    throw std::invalid_argument("element: index out of range");
  }
  return a.tape()->record("element", scalar_matrix(a.value()(row, col)), {a},
                          [a, row, col](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate_at(a, row, col, g(0, 0));
                          });
}

Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw std::invalid_argument("stack: no operands");
  Eigen::MatrixXd v(static_cast<Eigen::Index>(scalars.size()), 1);
  for (std::size_t i = 0; i < scalars.size(); ++i) v(static_cast<Eigen::Index>(i), 0) = scalars[i].scalar();
  std::vector<Var> parents(scalars.begin(), scalars.end());
  Tape* tape = scalars.front().tape();
  return tape->record("stack", std::move(v), std::span<const Var>(parents),
                      [parents](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                        for (std::size_t i = 0; i < parents.size(); ++i) {
                          t.accumulate_at(parents[i], 0, 0, g(static_cast<Eigen::Index>(i), 0));
                        }
                      });
}

Var gather_rows(Var table, std::span<const int> rows) {
  Eigen::MatrixXd v(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= table.rows()) {
      throw std::invalid_argument("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    }
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return table.tape()->record(
      "gather_rows", std::move(v), {table},
      [table, idx](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
        Eigen::MatrixXd dt = Eigen::MatrixXd::Zero(table.rows(), table.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        t.accumulate(table, dt);
      });
}

Var pair_sum(Var a, Var b) {
  require_same_tape(a, b, "pair_sum");
  if (a.cols() != b.cols()) throw std::invalid_argument("pair_sum: column count differs");
  const Eigen::Index na = a.rows();
  const Eigen::Index nb = b.rows();
  Eigen::MatrixXd v(na * nb, a.cols());
  for (Eigen::Index i = 0; i < na; ++i) {
    v.middleRows(i * nb, nb) = b.value().rowwise() + a.value().row(i);
  }
  return a.tape()->record(
      "pair_sum", std::move(v), {a, b},
      [a, b, na, nb](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
        Eigen::MatrixXd da(na, a.cols());
        Eigen::MatrixXd db = Eigen::MatrixXd::Zero(nb, b.cols());
        for (Eigen::Index i = 0; i < na; ++i) {
          da.row(i) = g.middleRows(i * nb, nb).colwise().sum();
          db += g.middleRows(i * nb, nb);
        }
        t.accumulate(a, da);
        t.accumulate(b, db);
      });
}

Var reverse_rows(Var a) {
  return a.tape()->record("reverse_rows", a.value().colwise().reverse(), {a},
                          [a](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd&) {
                            t.accumulate(a, g.colwise().reverse());
                          });
}

Var stop_gradient(Var a) { return a.tape()->constant(a.value()); }

Var gated_recurrence(Var input_proj, Var recurrent) {
  require_same_tape(input_proj, recurrent, "gated_recurrence");
  const Eigen::Index hidden = recurrent.cols();
  if (recurrent.rows() != 2 * hidden || input_proj.cols() != 2 * hidden) {
    throw std::invalid_argument("gated_recurrence: expected input T x 2H and recurrent 2H x H");
  }
  const Eigen::Index steps = input_proj.rows();
  const Eigen::MatrixXd& xp = input_proj.value();
  const Eigen::MatrixXd& w = recurrent.value();

  // Column t of each cache holds the per-step quantity.
  Eigen::MatrixXd cand(hidden, steps), gate(hidden, steps), hs(hidden, steps);
  Eigen::VectorXd h_prev = Eigen::VectorXd::Zero(hidden);
  Eigen::VectorXd pre(2 * hidden);
  for (Eigen::Index t = 0; t < steps; ++t) {
    pre.noalias() = w * h_prev;
    pre += xp.row(t).transpose();
    cell_activate(pre, h_prev, cand.col(t), gate.col(t), hs.col(t));
    h_prev = hs.col(t);
  }
  Eigen::MatrixXd out = hs.transpose();
  return input_proj.tape()->record(
      "gated_recurrence", std::move(out), {input_proj, recurrent},
      [input_proj, recurrent, cand, gate, hs](Tape& t, const Eigen::MatrixXd& g,
                                              const Eigen::MatrixXd&) {
        const Eigen::Index hid = hs.rows();
        const Eigen::Index n = hs.cols();
        const Eigen::MatrixXd& w = recurrent.value();
        Eigen::MatrixXd d_input(n, 2 * hid);
        Eigen::MatrixXd d_rec = Eigen::MatrixXd::Zero(2 * hid, hid);
        Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(hid);
        Eigen::VectorXd da(2 * hid);
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(hid);
        for (Eigen::Index s = n - 1; s >= 0; --s) {
          const auto h_prev = s > 0 ? Eigen::VectorXd(hs.col(s - 1)) : zero;
          Eigen::VectorXd dh = g.row(s).transpose() + dh_next;
          const auto c = cand.col(s).array();
          const auto z = gate.col(s).array();
          da.head(hid) = (dh.array() * z * (1.0 - c.square())).matrix();
          da.tail(hid) = (dh.array() * (c - h_prev.array()) * z * (1.0 - z)).matrix();
          d_input.row(s) = da.transpose();
          d_rec.noalias() += da * h_prev.transpose();
          dh_next = (dh.array() * (1.0 - z)).matrix();
          dh_next.noalias() += w.transpose() * da;
        }
        t.accumulate(input_proj, d_input);
        t.accumulate(recurrent, d_rec);
      });
}

Eigen::VectorXd gated_cell_step(const Eigen::Ref<const Eigen::VectorXd>& input_proj,
                                const Eigen::MatrixXd& recurrent,
                                const Eigen::Ref<const Eigen::VectorXd>& h_prev) {
  const Eigen::Index hidden = recurrent.cols();
  Eigen::VectorXd pre(2 * hidden);
  pre.noalias() = recurrent * h_prev;
  pre += input_proj;
  Eigen::VectorXd c(hidden), z(hidden), h(hidden);
  cell_activate(pre, h_prev, c, z, h);
  return h;
}

}  // namespace fedsl
