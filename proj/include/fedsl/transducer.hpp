#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "fedsl/param_vector.hpp"
#include "fedsl/tape.hpp"

namespace fedsl {

/// Label ids in [0, vocab_size). Output symbol of label k is k + 1; symbol 0 is blank.
using TokenSequence = std::vector<int>;

/// Frames x feature_dim, one row per frame.
using FeatureSequence = Eigen::MatrixXd;

inline constexpr int kBlank = 0;
inline constexpr int output_symbol(int token) { return token + 1; }

struct ModelDims {
  int feature_dim = 16;
  int encoder_hidden = 32;
  int embedding_dim = 16;
  int prediction_hidden = 32;
  int joint_hidden = 32;
  int vocab_size = 40;  // labels, blank excluded

  int output_size() const { return vocab_size + 1; }
  bool operator==(const ModelDims&) const = default;
};

/// Segment names and shapes of the flat parameter vector, in storage order.
LayoutPtr make_layout(const ModelDims& dims);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
ParamVector init_params(const ModelDims& dims, std::uint64_t seed);

/// Encoder (gated recurrences over frames in both directions), prediction network (embedding +
/// gated recurrence over previous labels), tanh joint with softmax output.
class TransducerModel {
 public:
  TransducerModel(ModelDims dims, ParamVector params);

  const ModelDims& dims() const { return dims_; }
  const ParamVector& params() const { return params_; }

 private:
  ModelDims dims_;
  ParamVector params_;
};

/// Parameters of one model bound as leaves of a tape.
struct ModelGraph {
  ModelGraph(Tape& tape, const TransducerModel& model);

  Tape& tape;
  const TransducerModel& model;
  Var encoder_input, encoder_recurrent, encoder_bias;
  Var embedding, prediction_input, prediction_recurrent, prediction_bias;
  Var joint_encoder, joint_prediction, joint_bias, output_weight, output_bias;
  Var encoder_back_input, encoder_back_recurrent, encoder_back_bias, joint_encoder_back;
};

/// Encoder output projected into the joint space (T x joint_hidden).
struct EncodedInput {
  Var joint_proj;
  int frames = 0;
};

EncodedInput encode(ModelGraph& graph, const FeatureSequence& features);

/// Log posteriors over output symbols for every lattice node; row t*(U+1)+u
/// holds node (t, u).
Var lattice_logprobs(ModelGraph& graph, const EncodedInput& encoded, const TokenSequence& labels);

/// -log P(y|x) by the log-space forward recursion over the (t, u) grid; the
/// backward pass is the reverse sweep of that same recursion.
Var transducer_nll(Var lattice, int frames, const TokenSequence& labels);

/// log P(y|x) on the tape, reusing an already encoded input.
Var sequence_logprob(ModelGraph& graph, const EncodedInput& encoded, const TokenSequence& labels);

struct Lattice {
  int frames = 0;
  int labels = 0;
  Eigen::MatrixXd logprobs;  // (frames*(labels+1)) x output_size

  double at(int t, int u, int symbol) const { return logprobs(t * (labels + 1) + u, symbol); }
};

Lattice forward_lattice(const TransducerModel& model, const FeatureSequence& features,
                        const TokenSequence& labels);
double transducer_loss(const TransducerModel& model, const FeatureSequence& features,
                       const TokenSequence& labels);
double posterior_logprob(const TransducerModel& model, const FeatureSequence& features,
                         const TokenSequence& labels);

struct LossAndGradient {
  double loss = 0.0;
  Gradient gradient;
};
LossAndGradient transducer_loss_and_gradient(const TransducerModel& model,
                                             const FeatureSequence& features,
                                             const TokenSequence& labels);

/// Tape-free incremental evaluation used by search. Encodes once, then
/// advances prediction states label by label.
class IncrementalScorer {
 public:
  struct State {
    Eigen::VectorXd hidden;
    Eigen::VectorXd joint_proj;
  };

  IncrementalScorer(const TransducerModel& model, const FeatureSequence& features);

  int frames() const { return static_cast<int>(encoder_proj_.cols()); }
  State initial() const;
  State advance(const State& state, int token) const;
  /// Log posteriors over output symbols at frame t given a prediction state.
  Eigen::VectorXd log_probs(int frame, const State& state) const;

 private:
  const TransducerModel& model_;
  Eigen::MatrixXd encoder_proj_;  // joint_hidden x T
  Eigen::MatrixXd prediction_input_;
  Eigen::MatrixXd prediction_recurrent_;
  Eigen::VectorXd prediction_bias_;
  Eigen::MatrixXd embedding_;
  Eigen::MatrixXd joint_prediction_;
  Eigen::VectorXd joint_bias_;
  Eigen::MatrixXd output_weight_;
  Eigen::VectorXd output_bias_;
};

void validate_input(const ModelDims& dims, const FeatureSequence& features,
                    const TokenSequence& labels);

}  // namespace fedsl
