#include "fedsl/param_vector.hpp"

#include <stdexcept>
#include <unordered_set>

namespace fedsl {

ParamLayout::ParamLayout(const std::vector<Shape>& shapes) {
  std::unordered_set<std::string> seen;
  for (const Shape& s : shapes) {
    if (s.rows <= 0 || s.cols <= 0) {
      throw LayoutError("segment '" + s.name + "' has an empty shape");
    }
    if (!seen.insert(s.name).second) {
      throw LayoutError("duplicate segment '" + s.name + "'");
    }
    segments_.push_back({s.name, s.rows, s.cols, size_});
    size_ += s.rows * s.cols;
  }
}

std::size_t ParamLayout::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].name == name) return i;
  }
  throw std::out_of_range("no segment named '" + std::string(name) + "'");
}

ParamDelta delta_between(const ParamVector& after, const ParamVector& before) {
  require_aligned(after, before, "delta_between");
  return ParamDelta(after.layout_ptr(), after.values() - before.values());
}

Gradient pseudo_gradient(const ParamDelta& mean_delta) {
  return Gradient(mean_delta.layout_ptr(), -mean_delta.values());
}

}  // namespace fedsl
