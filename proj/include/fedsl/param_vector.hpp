#pragma once

#include <Eigen/Dense>

#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedsl/errors.hpp"

namespace fedsl {

/// One named matrix inside a flat parameter vector, stored column-major.
struct Segment {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const Segment&) const = default;
};

/// Immutable description of how a flat vector is carved into matrices.
class ParamLayout {
 public:
  struct Shape {
    std::string name;
    Eigen::Index rows;
    Eigen::Index cols;
  };

  explicit ParamLayout(const std::vector<Shape>& shapes);

  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(std::size_t index) const { return segments_.at(index); }
  std::size_t index_of(std::string_view name) const;
  Eigen::Index size() const { return size_; }

  bool operator==(const ParamLayout& other) const { return segments_ == other.segments_; }

 private:
  std::vector<Segment> segments_;
  Eigen::Index size_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

/// A flat real vector tagged with a layout. The tag keeps parameters,
/// gradients and deltas from being mixed up by accident.
template <class Tag>
class LayoutVector {
 public:
  LayoutVector() = default;

  explicit LayoutVector(LayoutPtr layout)
      : layout_(std::move(layout)), values_(Eigen::VectorXd::Zero(layout_->size())) {}

  LayoutVector(LayoutPtr layout, Eigen::VectorXd values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->size()) {
      throw LayoutError("vector of size " + std::to_string(values_.size()) +
                        " does not fit layout of size " + std::to_string(layout_->size()));
    }
  }

  const ParamLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }
  Eigen::Index size() const { return values_.size(); }

  Eigen::Map<const Eigen::MatrixXd> segment(std::size_t index) const {
    const Segment& s = layout_->segment(index);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<Eigen::MatrixXd> segment(std::size_t index) {
    const Segment& s = layout_->segment(index);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Eigen::MatrixXd> segment(std::string_view name) const {
    return segment(layout_->index_of(name));
  }
  Eigen::Map<Eigen::MatrixXd> segment(std::string_view name) {
    return segment(layout_->index_of(name));
  }

  template <class OtherTag>
  bool aligned_with(const LayoutVector<OtherTag>& other) const {
    return layout_ && other.layout_ptr() &&
           (layout_ == other.layout_ptr() || *layout_ == other.layout());
  }

  bool all_finite() const { return values_.allFinite(); }

 private:
  LayoutPtr layout_;
  Eigen::VectorXd values_;
};

struct ParamTag {};
struct GradientTag {};
struct DeltaTag {};

using ParamVector = LayoutVector<ParamTag>;
using Gradient = LayoutVector<GradientTag>;
using ParamDelta = LayoutVector<DeltaTag>;

template <class A, class B>
void require_aligned(const LayoutVector<A>& a, const LayoutVector<B>& b, std::string_view what) {
  if (!a.aligned_with(b)) {
    throw LayoutError("layout mismatch in " + std::string(what));
  }
}

/// w_after - w_before, the quantity a device transmits.
ParamDelta delta_between(const ParamVector& after, const ParamVector& before);

/// Server pseudo-gradient: the negated mean delta.
Gradient pseudo_gradient(const ParamDelta& mean_delta);

}  // namespace fedsl
