#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "semgan/box.hpp"
#include "semgan/core/autograd.hpp"
#include "semgan/core/ops.hpp"
#include "semgan/core/random.hpp"
#include "semgan/core/tensor.hpp"

namespace semgan::nets {

enum class NetKind { generator, discriminator, detector };

inline const char* to_string(NetKind k) {
  switch (k) {
    case NetKind::generator: return "generator";
    case NetKind::discriminator: return "discriminator";
    case NetKind::detector: return "detector";
  }
  return "?";
}

inline NetKind kind_from_string(const std::string& s) {
  if (s == "generator") return NetKind::generator;
  if (s == "discriminator") return NetKind::discriminator;
  if (s == "detector") return NetKind::detector;
  throw std::invalid_argument("unknown network kind '" + s + "'");
}

struct Anchor {
  double w = 0.0;
  double h = 0.0;
  bool operator==(const Anchor&) const = default;
};

/// Default anchors (fractions of the image side), sorted by area. The first
/// half belongs to the fine scale, the second half to the coarse scale.
inline std::vector<Anchor> default_anchors() {
  return {{0.10, 0.10}, {0.14, 0.18}, {0.18, 0.14},
          {0.24, 0.24}, {0.30, 0.36}, {0.40, 0.40}};
}

/// Architecture knobs. Only the fields relevant to `kind` are meaningful,
/// but equality compares all of them.
struct ArchConfig {
  NetKind kind = NetKind::generator;
  int image_size = 64;
  int channels = 3;
  int base_width = 32;
  int res_blocks = 4;         // generator
  int down_layers = 3;        // discriminator
  int downsamples = 4;        // detector: coarse stride = 2^downsamples
  int num_classes = 1;        // detector
  int anchors_per_scale = 3;  // detector
  std::vector<Anchor> anchors;

  bool operator==(const ArchConfig&) const = default;

  static ArchConfig generator(int image_size = 64, int base_width = 32, int res_blocks = 4) {
    ArchConfig a;
    a.kind = NetKind::generator;
    a.image_size = image_size;
    a.base_width = base_width;
    a.res_blocks = res_blocks;
    return a;
  }
  static ArchConfig discriminator(int image_size = 64, int base_width = 32, int down_layers = 3) {
    ArchConfig a;
    a.kind = NetKind::discriminator;
    a.image_size = image_size;
    a.base_width = base_width;
    a.down_layers = down_layers;
    return a;
  }
  static ArchConfig detector(int image_size = 64, int base_width = 16, int downsamples = 4,
                             std::vector<Anchor> anchors = default_anchors()) {
    ArchConfig a;
    a.kind = NetKind::detector;
    a.image_size = image_size;
    a.base_width = base_width;
    a.downsamples = downsamples;
    a.anchors = std::move(anchors);
    return a;
  }

  [[nodiscard]] int coarse_grid() const { return image_size >> downsamples; }
  [[nodiscard]] int slot_width() const { return 5 + num_classes; }
};

inline void to_json(nlohmann::json& j, const ArchConfig& a) {
  nlohmann::json anchors = nlohmann::json::array();
  for (const auto& an : a.anchors) anchors.push_back({an.w, an.h});
  j = nlohmann::json{{"kind", to_string(a.kind)},
                     {"image_size", a.image_size},
                     {"channels", a.channels},
                     {"base_width", a.base_width},
                     {"res_blocks", a.res_blocks},
                     {"down_layers", a.down_layers},
                     {"downsamples", a.downsamples},
                     {"num_classes", a.num_classes},
                     {"anchors_per_scale", a.anchors_per_scale},
                     {"anchors", anchors}};
}

inline void from_json(const nlohmann::json& j, ArchConfig& a) {
  a.kind = kind_from_string(j.at("kind").get<std::string>());
  a.image_size = j.at("image_size").get<int>();
  a.channels = j.at("channels").get<int>();
  a.base_width = j.at("base_width").get<int>();
  a.res_blocks = j.at("res_blocks").get<int>();
  a.down_layers = j.at("down_layers").get<int>();
  a.downsamples = j.at("downsamples").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.anchors_per_scale = j.at("anchors_per_scale").get<int>();
  a.anchors.clear();
  for (const auto& an : j.at("anchors")) a.anchors.push_back({an.at(0), an.at(1)});
}

/// Which training stages produced a network, outermost last.
struct Provenance {
  std::vector<std::string> lineage;
  std::string parent_hash;
  std::string config_hash;

  [[nodiscard]] bool has_stage(const std::string& s) const {
    return std::find(lineage.begin(), lineage.end(), s) != lineage.end();
  }
  [[nodiscard]] std::string stage() const { return lineage.empty() ? "" : lineage.back(); }
  bool operator==(const Provenance&) const = default;
};

inline void to_json(nlohmann::json& j, const Provenance& p) {
  j = nlohmann::json{
      {"lineage", p.lineage}, {"parent_hash", p.parent_hash}, {"config_hash", p.config_hash}};
}
inline void from_json(const nlohmann::json& j, Provenance& p) {
  p.lineage = j.at("lineage").get<std::vector<std::string>>();
  p.parent_hash = j.at("parent_hash").get<std::string>();
  p.config_hash = j.at("config_hash").get<std::string>();
}

enum class Init { gan_normal, he_normal, small_normal, zero, constant };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::zero;
  double value = 0.0;  // constant init
};

namespace detail {

inline void conv_param(std::vector<ParamSpec>& out, const std::string& name, int cout, int cin,
                       int k, Init init, bool bias, double bias_value = 0.0) {
  out.push_back({name + ".weight", Shape{cout, cin, k, k}, init});
  if (bias) {
    out.push_back({name + ".bias", Shape{1, cout, 1, 1}, bias_value == 0.0 ? Init::zero : Init::constant,
                   bias_value});
  }
}

inline void convt_param(std::vector<ParamSpec>& out, const std::string& name, int cin, int cout,
                        int k) {
  out.push_back({name + ".weight", Shape{cin, cout, k, k}, Init::gan_normal});
}

}  // namespace detail

/// Objectness bias prior: sigmoid(-4.6) ~= 0.01.
inline constexpr double kObjectnessPrior = -4.6;

/// Ordered parameter list of an architecture.
inline std::vector<ParamSpec> param_specs(const ArchConfig& a) {
  std::vector<ParamSpec> s;
  const int w = a.base_width;
  switch (a.kind) {
    case NetKind::generator: {
      detail::conv_param(s, "enc0", w, a.channels, 7, Init::gan_normal, false);
      detail::conv_param(s, "enc1", 2 * w, w, 3, Init::gan_normal, false);
      detail::conv_param(s, "enc2", 4 * w, 2 * w, 3, Init::gan_normal, false);
      for (int r = 0; r < a.res_blocks; ++r) {
        const std::string p = "res" + std::to_string(r);
        detail::conv_param(s, p + ".conv0", 4 * w, 4 * w, 3, Init::gan_normal, false);
        detail::conv_param(s, p + ".conv1", 4 * w, 4 * w, 3, Init::gan_normal, false);
      }
      detail::convt_param(s, "dec0", 4 * w, 2 * w, 3);
      detail::convt_param(s, "dec1", 2 * w, w, 3);
      detail::conv_param(s, "out", a.channels, w, 7, Init::gan_normal, true);
      break;
    }
    case NetKind::discriminator: {
      detail::conv_param(s, "conv0", w, a.channels, 4, Init::gan_normal, true);
      int c = w;
      for (int i = 1; i < a.down_layers; ++i) {
        detail::conv_param(s, "conv" + std::to_string(i), 2 * c, c, 4, Init::gan_normal, false);
        c *= 2;
      }
      detail::conv_param(s, "conv" + std::to_string(a.down_layers), 2 * c, c, 4, Init::gan_normal,
                         false);
      detail::conv_param(s, "score", 1, 2 * c, 4, Init::gan_normal, true);
      break;
    }
    case NetKind::detector: {
      const int slots = a.anchors_per_scale * a.slot_width();
      detail::conv_param(s, "stem", w, a.channels, 3, Init::he_normal, true);
      int c = w;
      for (int i = 1; i <= a.downsamples; ++i) {
        detail::conv_param(s, "down" + std::to_string(i), 2 * c, c, 3, Init::he_normal, true);
        c *= 2;
      }
      const int fine_c = c / 2;
      detail::conv_param(s, "coarse", c, c, 3, Init::he_normal, true);
      detail::conv_param(s, "coarse_head", slots, c, 1, Init::small_normal, true);
      detail::conv_param(s, "lateral", c / 4, c, 1, Init::he_normal, true);
      detail::conv_param(s, "fine", fine_c, c / 4 + fine_c, 3, Init::he_normal, true);
      detail::conv_param(s, "fine_head", slots, fine_c, 1, Init::small_normal, true);
      break;
    }
  }
  return s;
}

template <typename T>
struct NetworkHandle {
  ArchConfig arch;
  std::vector<Tensor<T>> params;
  bool trainable = true;
  Provenance provenance;

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }
};

inline void validate_arch(const ArchConfig& a) {
  if (a.channels != 3) throw std::invalid_argument("arch: channels must be 3");
  if (a.base_width < 1) throw std::invalid_argument("arch: base_width must be >= 1");
  if (a.image_size < 4) throw std::invalid_argument("arch: image_size too small");
  switch (a.kind) {
    case NetKind::generator:
      if (a.image_size % 4 != 0) throw std::invalid_argument("arch: generator image_size % 4");
      if (a.res_blocks < 0) throw std::invalid_argument("arch: res_blocks must be >= 0");
      break;
    case NetKind::discriminator:
      if (a.down_layers < 1) throw std::invalid_argument("arch: down_layers must be >= 1");
      break;
    case NetKind::detector:
      if (a.downsamples < 2 || a.coarse_grid() < 1 ||
          a.image_size % (1 << a.downsamples) != 0) {
        throw std::invalid_argument("arch: detector image_size must be divisible by 2^downsamples");
      }
      if (a.num_classes < 1) throw std::invalid_argument("arch: num_classes must be >= 1");
      if (static_cast<int>(a.anchors.size()) != 2 * a.anchors_per_scale) {
        throw std::invalid_argument("arch: detector needs 2*anchors_per_scale anchors");
      }
      break;
  }
}

/// Seeded initialization: N(0, 0.02) for GAN networks, He-normal for the
/// detector backbone, small normal for detector heads.
template <typename T>
NetworkHandle<T> make_network(const ArchConfig& arch, std::uint64_t seed) {
  validate_arch(arch);
  NetworkHandle<T> h;
  h.arch = arch;
  Rng rng(seed);
  const int slot_w = arch.slot_width();
  for (const auto& spec : param_specs(arch)) {
    Tensor<T> t(spec.shape);
    const double fan_in = static_cast<double>(spec.shape.c) * spec.shape.h * spec.shape.w;
    switch (spec.init) {
      case Init::gan_normal:
        for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, 0.02));
        break;
      case Init::he_normal:
        for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, std::sqrt(2.0 / fan_in)));
        break;
      case Init::small_normal:
        for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, 0.01));
        break;
      case Init::constant: t.fill(static_cast<T>(spec.value)); break;
      case Init::zero: break;
    }
    // Objectness bias prior on the detector heads.
    if (arch.kind == NetKind::detector && spec.name.ends_with("_head.bias")) {
      for (int a = 0; a < arch.anchors_per_scale; ++a) {
        t[static_cast<std::size_t>(a * slot_w + 4)] = static_cast<T>(kObjectnessPrior);
      }
    }
    h.params.push_back(std::move(t));
  }
  return h;
}

/// Leaf variables over a handle's parameters. Requesting gradients on a
/// frozen handle is a contract violation.
template <typename T>
std::vector<Var<T>> bind(const NetworkHandle<T>& h, bool requires_grad) {
  if (requires_grad && !h.trainable) {
    throw std::logic_error("bind: gradients requested for a frozen network");
  }
  std::vector<Var<T>> out;
  out.reserve(h.params.size());
  for (const auto& p : h.params) out.emplace_back(p, requires_grad);
  return out;
}

template <typename T>
std::vector<Tensor<T>> gradients(const std::vector<Var<T>>& bound) {
  std::vector<Tensor<T>> g;
  g.reserve(bound.size());
  for (const auto& v : bound) {
    g.push_back(v.grad().empty() ? Tensor<T>(v.shape()) : v.grad());
  }
  return g;
}

/// Two detection scales: coarse (S) then fine (2S). Each raw tensor is
/// (N, A*(5+C), S, S); slot j of anchor a lives at channel a*(5+C)+j with
/// j = tx, ty, tw, th, objectness, class logits...
template <typename T>
struct GridScale {
  int size = 0;
  std::vector<Anchor> anchors;
  Tensor<T> raw;
};

template <typename T>
struct DetectionGrid {
  std::vector<GridScale<T>> scales;
  int num_classes = 1;

  [[nodiscard]] int anchors_per_scale() const {
    return scales.empty() ? 0 : static_cast<int>(scales.front().anchors.size());
  }
  [[nodiscard]] int batch() const { return scales.empty() ? 0 : scales.front().raw.shape().n; }

  T& at(int scale, int n, int cy, int cx, int anchor, int slot) {
    auto& s = scales[scale];
    return s.raw.at(n, anchor * (5 + num_classes) + slot, cy, cx);
  }
  const T& at(int scale, int n, int cy, int cx, int anchor, int slot) const {
    const auto& s = scales[scale];
    return s.raw.at(n, anchor * (5 + num_classes) + slot, cy, cx);
  }
};

/// Anchors of a scale: index 0 is coarse (large anchors), 1 is fine.
inline std::vector<Anchor> scale_anchors(const ArchConfig& a, int scale) {
  const int k = a.anchors_per_scale;
  const auto first = a.anchors.begin() + (scale == 0 ? k : 0);
  return {first, first + k};
}

namespace detail {

template <typename T>
void check_input(const ArchConfig& a, const Shape& s, NetKind expected) {
  if (a.kind != expected) {
    throw std::invalid_argument(std::string("network kind is ") + to_string(a.kind) +
                                ", expected " + to_string(expected));
  }
  if (s.c != a.channels || s.h != a.image_size || s.w != a.image_size || s.n < 1) {
    throw ShapeError("input " + s.str() + " does not match configured size " +
                     std::to_string(a.image_size));
  }
}

template <typename T>
Var<T> none() {
  return Var<T>();
}

}  // namespace detail

using ops::ConvGeometry;
using ops::Pad;

/// ResNet encoder/decoder: reflect-padded 7x7 stem, two stride-2 downs,
/// residual blocks, two transposed-conv ups, 7x7 output with tanh.
template <typename T>
Var<T> generator_graph(const ArchConfig& a, std::span<const Var<T>> p, const Var<T>& x) {
  detail::check_input<T>(a, x.shape(), NetKind::generator);
  std::size_t i = 0;
  auto in_relu = [](const Var<T>& v) { return ops::relu(ops::instance_norm(v)); };
  Var<T> h = in_relu(ops::conv2d(x, p[i++], detail::none<T>(), ConvGeometry{7, 1, 3, Pad::reflect}));
  h = in_relu(ops::conv2d(h, p[i++], detail::none<T>(), ConvGeometry{3, 2, 1, Pad::zero}));
  h = in_relu(ops::conv2d(h, p[i++], detail::none<T>(), ConvGeometry{3, 2, 1, Pad::zero}));
  for (int r = 0; r < a.res_blocks; ++r) {
    Var<T> t = in_relu(ops::conv2d(h, p[i++], detail::none<T>(), ConvGeometry{3, 1, 1, Pad::reflect}));
    t = ops::instance_norm(ops::conv2d(t, p[i++], detail::none<T>(), ConvGeometry{3, 1, 1, Pad::reflect}));
    h = ops::add(h, t);
  }
  h = in_relu(ops::conv_transpose2d(h, p[i++], detail::none<T>(), ConvGeometry{3, 2, 1, Pad::zero}, 1));
  h = in_relu(ops::conv_transpose2d(h, p[i++], detail::none<T>(), ConvGeometry{3, 2, 1, Pad::zero}, 1));
  const Var<T>& w = p[i++];
  const Var<T>& b = p[i++];
  return ops::tanh(ops::conv2d(h, w, b, ConvGeometry{7, 1, 3, Pad::reflect}));
}

/// PatchGAN: `down_layers` stride-2 4x4 convs, one stride-1 4x4 conv, and a
/// 4x4 score conv. 64px with 3 down layers gives a 6x6 map.
template <typename T>
Var<T> discriminator_graph(const ArchConfig& a, std::span<const Var<T>> p, const Var<T>& x) {
  detail::check_input<T>(a, x.shape(), NetKind::discriminator);
  const T slope = T(0.2);
  std::size_t i = 0;
  Var<T> h = ops::leaky_relu(ops::conv2d(x, p[0], p[1], ConvGeometry{4, 2, 1, Pad::zero}), slope);
  i = 2;
  for (int l = 1; l < a.down_layers; ++l) {
    h = ops::leaky_relu(
        ops::instance_norm(ops::conv2d(h, p[i++], detail::none<T>(), ConvGeometry{4, 2, 1, Pad::zero})),
        slope);
  }
  h = ops::leaky_relu(
      ops::instance_norm(ops::conv2d(h, p[i++], detail::none<T>(), ConvGeometry{4, 1, 1, Pad::zero})),
      slope);
  const Var<T>& w = p[i++];
  const Var<T>& b = p[i++];
  return ops::conv2d(h, w, b, ConvGeometry{4, 1, 1, Pad::zero});
}

template <typename T>
struct DetectorOutputs {
  Var<T> coarse;
  Var<T> fine;
};

/// Small two-scale grid detector: strided 3x3 backbone, a coarse head at
/// stride 2^downsamples and a fine head on upsampled coarse features
/// concatenated with the previous stage.
template <typename T>
DetectorOutputs<T> detector_graph(const ArchConfig& a, std::span<const Var<T>> p,
                                  const Var<T>& x) {
  detail::check_input<T>(a, x.shape(), NetKind::detector);
  const T slope = T(0.1);
  std::size_t i = 0;
  auto conv = [&](const Var<T>& in, int k, int stride) {
    const Var<T>& w = p[i++];
    const Var<T>& b = p[i++];
    return ops::conv2d(in, w, b, ConvGeometry{k, stride, k / 2, Pad::zero});
  };
  Var<T> h = ops::leaky_relu(conv(x, 3, 1), slope);
  Var<T> route;
  for (int d = 1; d <= a.downsamples; ++d) {
    h = ops::leaky_relu(conv(h, 3, 2), slope);
    if (d == a.downsamples - 1) route = h;
  }
  h = ops::leaky_relu(conv(h, 3, 1), slope);
  Var<T> coarse = conv(h, 1, 1);
  Var<T> lateral = ops::upsample2x(ops::leaky_relu(conv(h, 1, 1), slope));
  Var<T> f = ops::leaky_relu(conv(ops::concat_channels(lateral, route), 3, 1), slope);
  Var<T> fine = conv(f, 1, 1);
  return {coarse, fine};
}

template <typename T>
DetectionGrid<T> to_grid(const ArchConfig& a, const Tensor<T>& coarse, const Tensor<T>& fine) {
  DetectionGrid<T> g;
  g.num_classes = a.num_classes;
  g.scales.push_back({coarse.shape().h, scale_anchors(a, 0), coarse});
  g.scales.push_back({fine.shape().h, scale_anchors(a, 1), fine});
  return g;
}

template <typename T>
Tensor<T> generator_forward(const NetworkHandle<T>& g, const Tensor<T>& image) {
  auto p = bind(g, false);
  return generator_graph<T>(g.arch, p, Var<T>(image)).value();
}

template <typename T>
Tensor<T> discriminator_forward(const NetworkHandle<T>& d, const Tensor<T>& image) {
  auto p = bind(d, false);
  return discriminator_graph<T>(d.arch, p, Var<T>(image)).value();
}

template <typename T>
DetectionGrid<T> detector_forward(const NetworkHandle<T>& t, const Tensor<T>& image) {
  auto p = bind(t, false);
  auto out = detector_graph<T>(t.arch, p, Var<T>(image));
  return to_grid(t.arch, out.coarse.value(), out.fine.value());
}

struct Detection {
  BoundingBox box;
  double confidence = 0.0;
};

/// Decodes sample `n` of a grid: center (cell + sigmoid(t))/S, extent
/// anchor * exp(t), confidence sigmoid(obj) * max class probability.
template <typename T>
std::vector<Detection> decode_detections(const DetectionGrid<T>& grid, double conf_threshold,
                                         int n = 0) {
  std::vector<Detection> out;
  const int c = grid.num_classes;
  for (std::size_t s = 0; s < grid.scales.size(); ++s) {
    const auto& sc = grid.scales[s];
    const int size = sc.size;
    for (int cy = 0; cy < size; ++cy) {
      for (int cx = 0; cx < size; ++cx) {
        for (int a = 0; a < static_cast<int>(sc.anchors.size()); ++a) {
          auto v = [&](int slot) {
            return static_cast<double>(grid.at(static_cast<int>(s), n, cy, cx, a, slot));
          };
          double best = 0.0;
          int best_cls = 0;
          for (int k = 0; k < c; ++k) {
            const double pk = ops::sigmoid(v(5 + k));
            if (pk > best) {
              best = pk;
              best_cls = k;
            }
          }
          const double conf = ops::sigmoid(v(4)) * best;
          if (conf < conf_threshold) continue;
          const double bx = (cx + ops::sigmoid(v(0))) / size;
          const double by = (cy + ops::sigmoid(v(1))) / size;
          const double bw = sc.anchors[a].w * std::exp(std::min(v(2), 20.0));
          const double bh = sc.anchors[a].h * std::exp(std::min(v(3), 20.0));
          BoundingBox box = clip_unit(BoundingBox{best_cls, bx, by, bw, bh});
          out.push_back({box, conf});
        }
      }
    }
  }
  return out;
}

/// Greedy non-maximum suppression with a stable confidence ordering. Disjoint
/// boxes never suppress each other, even at threshold 0.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const auto& d = dets[idx];
    bool keep = true;
    for (const auto& k : kept) {
      const double ov = iou(d.box, k.box);
      if (ov > 0.0 && ov >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(d);
  }
  return kept;
}

}  // namespace semgan::nets
