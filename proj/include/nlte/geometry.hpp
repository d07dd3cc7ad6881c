#pragma once

namespace nlte {

struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  bool operator==(const Box&) const = default;
};

// Throws std::invalid_argument unless x1 < x2 and y1 < y2.
void validate_box(const Box& b);

// Intersection over union; 1 for identical boxes, 0 for disjoint ones.
double iou(const Box& a, const Box& b);

}  // namespace nlte
