#pragma once

#include <algorithm>
#include <cmath>

namespace semgan {

/// Normalized axis-aligned box: center (cx, cy) and extent (w, h) as
/// fractions of the image side.
struct BoundingBox {
  int class_id = 0;
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  [[nodiscard]] double x0() const { return cx - 0.5 * w; }
  [[nodiscard]] double y0() const { return cy - 0.5 * h; }
  [[nodiscard]] double x1() const { return cx + 0.5 * w; }
  [[nodiscard]] double y1() const { return cy + 0.5 * h; }
  [[nodiscard]] double area() const { return w * h; }

  static BoundingBox from_corners(double x0, double y0, double x1, double y1, int class_id = 0) {
    return BoundingBox{class_id, 0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  /// Range checks of the label format: centers in [0,1], extents in (0,1],
  /// interior intersecting the unit square.
  [[nodiscard]] bool valid() const {
    const auto finite = std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) &&
                        std::isfinite(h);
    return finite && class_id >= 0 && cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0 &&
           w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0 && x1() > 0.0 && x0() < 1.0 &&
           y1() > 0.0 && y0() < 1.0;
  }

  bool operator==(const BoundingBox&) const = default;
};

/// Clips to the unit square, keeping class id.
inline BoundingBox clip_unit(const BoundingBox& b) {
  const double x0 = std::clamp(b.x0(), 0.0, 1.0);
  const double y0 = std::clamp(b.y0(), 0.0, 1.0);
  const double x1 = std::clamp(b.x1(), 0.0, 1.0);
  const double y1 = std::clamp(b.y1(), 0.0, 1.0);
  return BoundingBox::from_corners(x0, y0, x1, y1, b.class_id);
}

/// Intersection over union in normalized coordinates; 0 for disjoint boxes.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

/// IoU of two extents sharing a center (anchor matching).
inline double shape_iou(double w0, double h0, double w1, double h1) {
  const double inter = std::min(w0, w1) * std::min(h0, h1);
  return inter / (w0 * h0 + w1 * h1 - inter);
}

}  // namespace semgan
