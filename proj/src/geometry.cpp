#include "nlte/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nlte {

void validate_box(const Box& b) {
  if (!(std::isfinite(b.x1) && std::isfinite(b.y1) && std::isfinite(b.x2) && std::isfinite(b.y2)))
    throw std::invalid_argument("box: non-finite coordinate");
  if (!(b.x1 < b.x2) || !(b.y1 < b.y2))
    throw std::invalid_argument("box: requires x1 < x2 and y1 < y2");
}

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  return inter / (area_a + area_b - inter);
}

}  // namespace nlte
