#pragma once

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "semgan/box.hpp"
#include "semgan/data.hpp"
#include "semgan/io/png.hpp"
#include "semgan/nets.hpp"

namespace semgan::eval {

using nets::Detection;

struct PRPoint {
  double recall = 0.0;
  double precision = 0.0;
  double confidence = 0.0;
};

struct Counts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

/// Everything computed for one IoU threshold.
struct APResult {
  double ap = 0.0;
  std::vector<PRPoint> curve;
  Counts counts;
  bool undefined = false;
};

using ImageDetection = std::pair<int, Detection>;
using ImageBox = std::pair<int, BoundingBox>;

/// Precision-envelope area under the PR curve, all-points interpolation.
inline double envelope_area(const std::vector<PRPoint>& curve) {
  std::vector<double> rec{0.0};
  std::vector<double> prec{0.0};
  for (const auto& p : curve) {
    rec.push_back(p.recall);
    prec.push_back(p.precision);
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < rec.size(); ++i) {
    if (rec[i] != rec[i - 1]) ap += (rec[i] - rec[i - 1]) * prec[i];
  }
  return ap;
}

/// Greedy VOC-style matching in descending confidence (stable). A detection
/// is a true positive when its best-IoU unmatched ground truth of the same
/// class and image reaches `iou_threshold`.
inline APResult average_precision_detail(const std::vector<ImageDetection>& dets,
                                         const std::vector<ImageBox>& gts, double iou_threshold) {
  APResult r;
  const int total = static_cast<int>(gts.size());
  if (dets.empty() && gts.empty()) {
    r.undefined = true;
    return r;
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].second.confidence > dets[b].second.confidence;
  });
  std::vector<bool> matched(gts.size(), false);
  int tp = 0;
  int fp = 0;
  for (std::size_t idx : order) {
    const auto& [img, det] = dets[idx];
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (matched[g] || gts[g].first != img || gts[g].second.class_id != det.box.class_id) continue;
      const double ov = iou(det.box, gts[g].second);
      if (ov > best) {
        best = ov;
        best_g = g;
      }
    }
    if (best >= iou_threshold && best > 0.0) {
      matched[best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    const double recall = total > 0 ? static_cast<double>(tp) / total : 0.0;
    r.curve.push_back({recall, static_cast<double>(tp) / (tp + fp), det.confidence});
  }
  r.counts = {tp, fp, total - tp};
  r.ap = total > 0 ? envelope_area(r.curve) : 0.0;
  return r;
}

/// AP in [0,1]. 0 when there is no ground truth; both lists empty is
/// undefined and also reported as 0, with a warning.
inline double average_precision(const std::vector<ImageDetection>& dets,
                                 const std::vector<ImageBox>& gts, double iou_threshold) {
  const auto r = average_precision_detail(dets, gts, iou_threshold);
  if (r.undefined) std::fputs("warning: average precision undefined without boxes or detections\n", stderr);
  return r.ap;
}

/// Percent with one decimal, as printed in result tables.
inline double to_percent(double ap) { return std::round(ap * 1000.0) / 10.0; }

struct EvalReport {
  double ap30 = 0.0;
  double ap50 = 0.0;
  std::map<double, APResult> per_threshold;
  double conf_threshold = 0.1;
  double nms_threshold = 0.45;
  int images = 0;
  std::string interpolation = "all_points";

  [[nodiscard]] nlohmann::json to_json(bool with_curves = false) const {
    nlohmann::json j{{"ap30", ap30},
                     {"ap50", ap50},
                     {"conf_threshold", conf_threshold},
                     {"nms_threshold", nms_threshold},
                     {"images", images},
                     {"interpolation", interpolation}};
    for (const auto& [thr, res] : per_threshold) {
      const std::string key = fmt::format("iou_{:.2f}", thr);
      j["counts"][key] = {{"tp", res.counts.tp}, {"fp", res.counts.fp}, {"fn", res.counts.fn}};
      if (with_curves) {
        auto& arr = j["pr_curves"][key];
        arr = nlohmann::json::array();
        for (const auto& p : res.curve) arr.push_back({p.confidence, p.precision, p.recall});
      }
    }
    return j;
  }
};

/// AP@0.3 and AP@0.5 from per-image detections (already filtered and NMSed).
inline EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& per_image,
                                      const std::vector<std::vector<BoundingBox>>& truth) {
  if (per_image.size() != truth.size()) throw std::invalid_argument("evaluate: image count mismatch");
  std::vector<ImageDetection> dets;
  std::vector<ImageBox> gts;
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    for (const auto& d : per_image[i]) dets.emplace_back(static_cast<int>(i), d);
    for (const auto& b : truth[i]) gts.emplace_back(static_cast<int>(i), b);
  }
  EvalReport rep;
  rep.images = static_cast<int>(per_image.size());
  for (double thr : {0.3, 0.5}) rep.per_threshold[thr] = average_precision_detail(dets, gts, thr);
  rep.ap30 = to_percent(rep.per_threshold[0.3].ap);
  rep.ap50 = to_percent(rep.per_threshold[0.5].ap);
  return rep;
}

/// Detector predictions for a dataset: forward in batches, decode, NMS.
inline std::vector<std::vector<Detection>> predict(const nets::NetworkHandle<float>& detector,
                                                   const data::Dataset& images,
                                                   double conf_threshold, double nms_threshold,
                                                   int batch = 16) {
  std::vector<std::vector<Detection>> out;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    std::vector<Tensor<float>> xs;
    for (std::size_t i = start; i < end; ++i) xs.push_back(images[i].pixels);
    const auto grid = nets::detector_forward(detector, stack<float>(xs));
    for (std::size_t i = start; i < end; ++i) {
      out.push_back(nets::nms(
          nets::decode_detections(grid, conf_threshold, static_cast<int>(i - start)), nms_threshold));
    }
  }
  return out;
}

inline EvalReport evaluate_model(const nets::NetworkHandle<float>& detector, const data::Dataset& test,
                                 double conf_threshold = 0.1, double nms_threshold = 0.45) {
  if (test.empty()) throw std::invalid_argument("evaluate_model: empty test set");
  std::vector<std::vector<BoundingBox>> truth;
  for (const auto& li : test) truth.push_back(li.labels());
  auto rep = evaluate_detections(predict(detector, test, conf_threshold, nms_threshold), truth);
  rep.conf_threshold = conf_threshold;
  rep.nms_threshold = nms_threshold;
  return rep;
}

// ---- semantic consistency oracle -------------------------------------------

/// Pixels whose HSV hue (degrees), saturation and value fall in these ranges
/// count as fruit.
struct HueBand {
  double hue_lo = 255.0;
  double hue_hi = 320.0;
  double sat_min = 0.3;
  double val_min = 0.15;
};

inline bool in_band(const std::uint8_t* p, const HueBand& band) {
  const double r = p[0] / 255.0;
  const double g = p[1] / 255.0;
  const double b = p[2] / 255.0;
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  if (mx < band.val_min || mx <= 0.0 || d / mx < band.sat_min || d <= 0.0) return false;
  double h;
  if (mx == r) {
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / d + 2.0);
  } else {
    h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0.0) h += 360.0;
  return h >= band.hue_lo && h <= band.hue_hi;
}

/// Tight boxes of 4-connected in-band components with at least `min_area` pixels.
inline std::vector<BoundingBox> hue_components(const io::Image8& img, const HueBand& band,
                                               int min_area = 4) {
  const int W = img.width;
  const int H = img.height;
  std::vector<int> label(static_cast<std::size_t>(W) * H, -1);
  std::vector<char> mask(label.size(), 0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) mask[static_cast<std::size_t>(y) * W + x] = in_band(img.px(x, y), band);
  }
  std::vector<BoundingBox> out;
  std::vector<int> stack;
  int next = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t i0 = static_cast<std::size_t>(y) * W + x;
      if (!mask[i0] || label[i0] >= 0) continue;
      int area = 0;
      int x0 = x, x1 = x, y0 = y, y1 = y;
      stack.assign(1, static_cast<int>(i0));
      label[i0] = next;
      while (!stack.empty()) {
        const int i = stack.back();
        stack.pop_back();
        const int cx = i % W;
        const int cy = i / W;
        ++area;
        x0 = std::min(x0, cx);
        x1 = std::max(x1, cx);
        y0 = std::min(y0, cy);
        y1 = std::max(y1, cy);
        static constexpr int dxs[4] = {1, -1, 0, 0};
        static constexpr int dys[4] = {0, 0, 1, -1};
        for (int d = 0; d < 4; ++d) {
          const int nx = cx + dxs[d];
          const int ny = cy + dys[d];
          if (nx < 0 || ny < 0 || nx >= W || ny >= H) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * W + nx;
          if (mask[j] && label[j] < 0) {
            label[j] = next;
            stack.push_back(static_cast<int>(j));
          }
        }
      }
      ++next;
      if (area >= min_area) {
        out.push_back(BoundingBox::from_corners(static_cast<double>(x0) / W, static_cast<double>(y0) / H,
                                                static_cast<double>(x1 + 1) / W,
                                                static_cast<double>(y1 + 1) / H));
      }
    }
  }
  return out;
}

/// Mean IoU of greedy (highest IoU first) one-to-one matches between found
/// and reference boxes, unmatched references counting 0.
inline double matched_iou(const std::vector<BoundingBox>& found, const std::vector<BoundingBox>& ref) {
  if (ref.empty()) return 0.0;
  struct Pair {
    double iou;
    std::size_t f, r;
  };
  std::vector<Pair> pairs;
  for (std::size_t f = 0; f < found.size(); ++f) {
    for (std::size_t r = 0; r < ref.size(); ++r) {
      const double v = iou(found[f], ref[r]);
      if (v > 0.0) pairs.push_back({v, f, r});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<bool> used_f(found.size(), false);
  std::vector<bool> used_r(ref.size(), false);
  double sum = 0.0;
  for (const auto& p : pairs) {
    if (used_f[p.f] || used_r[p.r]) continue;
    used_f[p.f] = used_r[p.r] = true;
    sum += p.iou;
  }
  return sum / static_cast<double>(ref.size());
}

/// Localizes fruit in translated images by colour alone and scores agreement
/// with the source labels. Images without source boxes are skipped.
inline double semantic_consistency_score(const std::vector<io::Image8>& translated,
                                         const std::vector<std::vector<BoundingBox>>& source_labels,
                                         const HueBand& band = {}) {
  if (translated.empty()) throw std::invalid_argument("semantic_consistency_score: no images");
  if (translated.size() != source_labels.size()) {
    throw std::invalid_argument("semantic_consistency_score: label count mismatch");
  }
  double sum = 0.0;
  int used = 0;
  for (std::size_t i = 0; i < translated.size(); ++i) {
    if (source_labels[i].empty()) continue;
    sum += matched_iou(hue_components(translated[i], band), source_labels[i]);
    ++used;
  }
  return used > 0 ? sum / used : 0.0;
}

}  // namespace semgan::eval
