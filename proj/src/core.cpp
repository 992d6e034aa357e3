#include "trackletmr/core.hpp"

#include <algorithm>
#include <cmath>

namespace tmr {

bool Moment::valid() const {
  return std::isfinite(start) && std::isfinite(end) && end > start;
}

double temporal_iou(const Moment& a, const Moment& b) {
  const double inter =
      std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter <= 0.0) return 0.0;
  const double uni = a.length() + b.length() - inter;
  return inter / uni;
}

Moment enclosing_span(const Moment& a, const Moment& b) {
  return Moment{std::min(a.start, b.start), std::max(a.end, b.end)};
}

}  // namespace tmr
