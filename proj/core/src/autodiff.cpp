#include "nllpo/autodiff.hpp"

#include <algorithm>

namespace nllpo {

Segment& ParamVector::add_segment(std::string name, std::size_t size, double fill) {
  if (has_segment(name)) throw Error(ErrorCode::kConfigError, "duplicate segment " + name);
  segments_.push_back(Segment{std::move(name), values_.size(), size});
  values_.resize(values_.size() + size, fill);
  return segments_.back();
}

bool ParamVector::has_segment(std::string_view name) const {
  return std::any_of(segments_.begin(), segments_.end(),
                     [&](const Segment& s) { return s.name == name; });
}

const Segment& ParamVector::find(std::string_view name) const {
  for (const Segment& s : segments_) {
    if (s.name == name) return s;
  }
  throw Error(ErrorCode::kConfigError, "no segment named " + std::string(name));
}

std::span<double> ParamVector::segment(std::string_view name) {
  const Segment& s = find(name);
  return {values_.data() + s.offset, s.size};
}

std::span<const double> ParamVector::segment(std::string_view name) const {
  const Segment& s = find(name);
  return {values_.data() + s.offset, s.size};
}

bool ParamVector::all_finite() const { return nllpo::all_finite(values_); }

}  // namespace nllpo
