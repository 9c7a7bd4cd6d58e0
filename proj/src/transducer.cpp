#include "fedsl/transducer.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace fedsl {

namespace {

enum SegmentIndex : std::size_t {
  kEncoderInput,
  kEncoderRecurrent,
  kEncoderBias,
  kEmbedding,
  kPredictionInput,
  kPredictionRecurrent,
  kPredictionBias,
  kJointEncoder,
  kJointPrediction,
  kJointBias,
  kOutputWeight,
  kOutputBias,
  kEncoderBackInput,
  kEncoderBackRecurrent,
  kEncoderBackBias,
  kJointEncoderBack,
};

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void log_softmax_inplace(Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  v.array() -= m;
  v.array() -= std::log(v.array().exp().sum());
}

}  // namespace

LayoutPtr make_layout(const ModelDims& d) {
  const Eigen::Index k = d.output_size();
  return std::make_shared<const ParamLayout>(std::vector<ParamLayout::Shape>{
      {"encoder.input", 2 * d.encoder_hidden, d.feature_dim},
      {"encoder.recurrent", 2 * d.encoder_hidden, d.encoder_hidden},
      {"encoder.bias", 2 * d.encoder_hidden, 1},
      {"prediction.embedding", k, d.embedding_dim},
      {"prediction.input", 2 * d.prediction_hidden, d.embedding_dim},
      {"prediction.recurrent", 2 * d.prediction_hidden, d.prediction_hidden},
      {"prediction.bias", 2 * d.prediction_hidden, 1},
      {"joint.encoder", d.joint_hidden, d.encoder_hidden},
      {"joint.prediction", d.joint_hidden, d.prediction_hidden},
      {"joint.bias", d.joint_hidden, 1},
      {"joint.output", k, d.joint_hidden},
      {"joint.output_bias", k, 1},
      {"encoder.backward_input", 2 * d.encoder_hidden, d.feature_dim},
      {"encoder.backward_recurrent", 2 * d.encoder_hidden, d.encoder_hidden},
      {"encoder.backward_bias", 2 * d.encoder_hidden, 1},
      {"joint.encoder_backward", d.joint_hidden, d.encoder_hidden},
  });
}

ParamVector init_params(const ModelDims& dims, std::uint64_t seed) {
  ParamVector params(make_layout(dims));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t i = 0; i < params.layout().segments().size(); ++i) {
    const Segment& s = params.layout().segment(i);
    if (s.cols == 1) continue;  // biases start at zero
    const double scale = i == kEmbedding ? 1.0 : 1.0 / std::sqrt(static_cast<double>(s.cols));
    auto m = params.segment(i);
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = scale * unit(rng);
    }
  }
  return params;
}

TransducerModel::TransducerModel(ModelDims dims, ParamVector params)
    : dims_(dims), params_(std::move(params)) {
  if (dims_.vocab_size < 1 || dims_.feature_dim < 1) {
    throw std::invalid_argument("model dims must be positive");
  }
  if (!(params_.layout() == *make_layout(dims_))) {
    throw LayoutError("parameter layout does not match model dimensions");
  }
}

void validate_input(const ModelDims& dims, const FeatureSequence& features,
                    const TokenSequence& labels) {
  if (features.rows() < 1) throw std::invalid_argument("empty feature sequence");
  if (features.cols() != dims.feature_dim) {
    throw std::invalid_argument("feature dimension " + std::to_string(features.cols()) +
                                " does not match model dimension " +
                                std::to_string(dims.feature_dim));
  }
  if (!features.allFinite()) throw std::invalid_argument("features contain non-finite values");
  for (int token : labels) {
    if (token < 0 || token >= dims.vocab_size) {
      throw std::invalid_argument("token " + std::to_string(token) + " outside vocabulary of size " +
                                  std::to_string(dims.vocab_size));
    }
  }
}

ModelGraph::ModelGraph(Tape& t, const TransducerModel& m)
    : tape(t),
      model(m),
      encoder_input(t.parameter(m.params(), kEncoderInput)),
      encoder_recurrent(t.parameter(m.params(), kEncoderRecurrent)),
      encoder_bias(t.parameter(m.params(), kEncoderBias)),
      embedding(t.parameter(m.params(), kEmbedding)),
      prediction_input(t.parameter(m.params(), kPredictionInput)),
      prediction_recurrent(t.parameter(m.params(), kPredictionRecurrent)),
      prediction_bias(t.parameter(m.params(), kPredictionBias)),
      joint_encoder(t.parameter(m.params(), kJointEncoder)),
      joint_prediction(t.parameter(m.params(), kJointPrediction)),
      joint_bias(t.parameter(m.params(), kJointBias)),
      output_weight(t.parameter(m.params(), kOutputWeight)),
      output_bias(t.parameter(m.params(), kOutputBias)),
      encoder_back_input(t.parameter(m.params(), kEncoderBackInput)),
      encoder_back_recurrent(t.parameter(m.params(), kEncoderBackRecurrent)),
      encoder_back_bias(t.parameter(m.params(), kEncoderBackBias)),
      joint_encoder_back(t.parameter(m.params(), kJointEncoderBack)) {}

EncodedInput encode(ModelGraph& g, const FeatureSequence& features) {
  validate_input(g.model.dims(), features, {});
  Var x = g.tape.constant(features);
  Var fwd = gated_recurrence(add_bias_rows(matmul_nt(x, g.encoder_input), g.encoder_bias), g.encoder_recurrent);
  Var xr = g.tape.constant(features.colwise().reverse());
  Var bwd = gated_recurrence(add_bias_rows(matmul_nt(xr, g.encoder_back_input), g.encoder_back_bias),
                             g.encoder_back_recurrent);
  Var joint = matmul_nt(fwd, g.joint_encoder) + reverse_rows(matmul_nt(bwd, g.joint_encoder_back));
  return {joint, static_cast<int>(features.rows())};
}

Var lattice_logprobs(ModelGraph& g, const EncodedInput& encoded, const TokenSequence& labels) {
  validate_input(g.model.dims(), Eigen::MatrixXd::Zero(1, g.model.dims().feature_dim), labels);
  std::vector<int> inputs;
  inputs.reserve(labels.size() + 1);
  inputs.push_back(kBlank);
  for (int token : labels) inputs.push_back(output_symbol(token));

  Var emb = gather_rows(g.embedding, inputs);
  Var proj = add_bias_rows(matmul_nt(emb, g.prediction_input), g.prediction_bias);
  Var pred = gated_recurrence(proj, g.prediction_recurrent);
  Var pred_joint = matmul_nt(pred, g.joint_prediction);
  Var hidden = tanh(add_bias_rows(pair_sum(encoded.joint_proj, pred_joint), g.joint_bias));
  Var logits = add_bias_rows(matmul_nt(hidden, g.output_weight), g.output_bias);
  return log_softmax_rows(logits);
}

Var transducer_nll(Var lattice, int frames, const TokenSequence& labels) {
  const int n_labels = static_cast<int>(labels.size());
  const int width = n_labels + 1;
  const Eigen::MatrixXd& lp = lattice.value();
  if (frames < 1 || lp.rows() != static_cast<Eigen::Index>(frames) * width) {
    throw std::invalid_argument("transducer_nll: lattice has " + std::to_string(lp.rows()) +
                                " rows, expected " + std::to_string(frames * width));
  }
  for (int token : labels) {
    if (output_symbol(token) >= lp.cols() || token < 0) {
      throw std::invalid_argument("transducer_nll: token out of vocabulary");
    }
  }
  auto row = [width](int t, int u) { return static_cast<Eigen::Index>(t) * width + u; };

  Eigen::MatrixXd alpha(frames, width);
  for (int t = 0; t < frames; ++t) {
    for (int u = 0; u < width; ++u) {
      if (t == 0 && u == 0) {
        alpha(0, 0) = 0.0;
        continue;
      }
      double a = kNegInf;
      if (t > 0) a = alpha(t - 1, u) + lp(row(t - 1, u), kBlank);
      if (u > 0) a = log_add_exp(a, alpha(t, u - 1) + lp(row(t, u - 1), output_symbol(labels[u - 1])));
      alpha(t, u) = a;
    }
  }
  const double loglik = alpha(frames - 1, n_labels) + lp(row(frames - 1, n_labels), kBlank);

  Eigen::MatrixXd value(1, 1);
  value(0, 0) = -loglik;
  return lattice.tape()->record(
      "transducer_nll", std::move(value), {lattice},
      [lattice, frames, labels, alpha, width](Tape& tape, const Eigen::MatrixXd& g,
                                              const Eigen::MatrixXd&) {
        const Eigen::MatrixXd& lp = lattice.value();
        const int n_labels = width - 1;
        auto row = [width](int t, int u) { return static_cast<Eigen::Index>(t) * width + u; };
        Eigen::MatrixXd d_lp = Eigen::MatrixXd::Zero(lp.rows(), lp.cols());
        Eigen::MatrixXd d_alpha = Eigen::MatrixXd::Zero(frames, width);
        d_alpha(frames - 1, n_labels) = -g(0, 0);
        d_lp(row(frames - 1, n_labels), kBlank) += -g(0, 0);
        for (int t = frames - 1; t >= 0; --t) {
          for (int u = n_labels; u >= 0; --u) {
            if (t == 0 && u == 0) continue;
            const double adj = d_alpha(t, u);
            if (adj == 0.0) continue;
            if (t > 0) {
              const Eigen::Index r = row(t - 1, u);
              const double w = std::exp(alpha(t - 1, u) + lp(r, kBlank) - alpha(t, u));
              d_alpha(t - 1, u) += adj * w;
              d_lp(r, kBlank) += adj * w;
            }
            if (u > 0) {
              const Eigen::Index r = row(t, u - 1);
              const int sym = output_symbol(labels[u - 1]);
              const double w = std::exp(alpha(t, u - 1) + lp(r, sym) - alpha(t, u));
              d_alpha(t, u - 1) += adj * w;
              d_lp(r, sym) += adj * w;
            }
          }
        }
        tape.accumulate(lattice, d_lp);
      });
}

Var sequence_logprob(ModelGraph& g, const EncodedInput& encoded, const TokenSequence& labels) {
  Var lattice = lattice_logprobs(g, encoded, labels);
  return -1.0 * transducer_nll(lattice, encoded.frames, labels);
}

Lattice forward_lattice(const TransducerModel& model, const FeatureSequence& features,
                        const TokenSequence& labels) {
  validate_input(model.dims(), features, labels);
  Tape tape;
  ModelGraph g(tape, model);
  EncodedInput enc = encode(g, features);
  Var lattice = lattice_logprobs(g, enc, labels);
  return {enc.frames, static_cast<int>(labels.size()), lattice.value()};
}

double transducer_loss(const TransducerModel& model, const FeatureSequence& features,
                       const TokenSequence& labels) {
  validate_input(model.dims(), features, labels);
  Tape tape;
  ModelGraph g(tape, model);
  EncodedInput enc = encode(g, features);
  return transducer_nll(lattice_logprobs(g, enc, labels), enc.frames, labels).scalar();
}

double posterior_logprob(const TransducerModel& model, const FeatureSequence& features,
                         const TokenSequence& labels) {
  return -transducer_loss(model, features, labels);
}

LossAndGradient transducer_loss_and_gradient(const TransducerModel& model,
                                             const FeatureSequence& features,
                                             const TokenSequence& labels) {
  validate_input(model.dims(), features, labels);
  Tape tape;
  ModelGraph g(tape, model);
  EncodedInput enc = encode(g, features);
  Var loss = transducer_nll(lattice_logprobs(g, enc, labels), enc.frames, labels);
  return {loss.scalar(), tape.backward(loss, model.params())};
}

IncrementalScorer::IncrementalScorer(const TransducerModel& model, const FeatureSequence& features)
    : model_(model) {
  validate_input(model.dims(), features, {});
  const ParamVector& p = model.params();
  const Eigen::Index frames = features.rows();
  // Hidden states of one direction, one column per step in processing order.
  auto run = [&](std::size_t in, std::size_t rec, std::size_t bias, const Eigen::MatrixXd& x) {
    const Eigen::MatrixXd w_rec = p.segment(rec);
    Eigen::MatrixXd proj = (x * p.segment(in).transpose()).transpose();
    proj.colwise() += p.segment(bias).col(0);
    Eigen::MatrixXd states(w_rec.cols(), frames);
    Eigen::VectorXd h = Eigen::VectorXd::Zero(w_rec.cols());
    for (Eigen::Index t = 0; t < frames; ++t) {
      h = gated_cell_step(proj.col(t), w_rec, h);
      states.col(t) = h;
    }
    return states;
  };
  const Eigen::MatrixXd fwd = run(kEncoderInput, kEncoderRecurrent, kEncoderBias, features);
  const Eigen::MatrixXd bwd =
      run(kEncoderBackInput, kEncoderBackRecurrent, kEncoderBackBias, features.colwise().reverse());
  encoder_proj_ = p.segment(kJointEncoder) * fwd + (p.segment(kJointEncoderBack) * bwd).rowwise().reverse();

  embedding_ = p.segment(kEmbedding);
  prediction_input_ = p.segment(kPredictionInput);
  prediction_recurrent_ = p.segment(kPredictionRecurrent);
  prediction_bias_ = p.segment(kPredictionBias).col(0);
  // Input projection of every output symbol, one column each.
  prediction_input_ = (prediction_input_ * embedding_.transpose()).colwise() + prediction_bias_;
  joint_prediction_ = p.segment(kJointPrediction);
  joint_bias_ = p.segment(kJointBias).col(0);
  output_weight_ = p.segment(kOutputWeight);
  output_bias_ = p.segment(kOutputBias).col(0);
}

IncrementalScorer::State IncrementalScorer::initial() const {
  State s;
  s.hidden = gated_cell_step(prediction_input_.col(kBlank), prediction_recurrent_,
                             Eigen::VectorXd::Zero(prediction_recurrent_.cols()));
  s.joint_proj = joint_prediction_ * s.hidden;
  return s;
}

IncrementalScorer::State IncrementalScorer::advance(const State& state, int token) const {
  State s;
  s.hidden = gated_cell_step(prediction_input_.col(output_symbol(token)), prediction_recurrent_,
                             state.hidden);
  s.joint_proj = joint_prediction_ * s.hidden;
  return s;
}

Eigen::VectorXd IncrementalScorer::log_probs(int frame, const State& state) const {
  Eigen::VectorXd hidden = (encoder_proj_.col(frame) + state.joint_proj + joint_bias_).array().tanh();
  Eigen::VectorXd logits = output_bias_;
  logits.noalias() += output_weight_ * hidden;
  log_softmax_inplace(logits);
  return logits;
}

}  // namespace fedsl
