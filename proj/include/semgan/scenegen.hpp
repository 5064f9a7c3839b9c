#pragma once

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "semgan/box.hpp"
#include "semgan/core/random.hpp"
#include "semgan/data.hpp"
#include "semgan/io/hash.hpp"
#include "semgan/io/png.hpp"

namespace semgan::scenegen {

using Rgb = std::array<double, 3>;
using data::ValidationError;

enum class StyleName { synthetic, day_like, night_like };

inline std::string to_string(StyleName s) {
  switch (s) {
    case StyleName::synthetic: return "synthetic";
    case StyleName::day_like: return "day_like";
    case StyleName::night_like: return "night_like";
  }
  return "?";
}

inline StyleName style_from_string(const std::string& s) {
  if (s == "synthetic") return StyleName::synthetic;
  if (s == "day_like") return StyleName::day_like;
  if (s == "night_like") return StyleName::night_like;
  throw ValidationError("style: unknown style '" + s + "'");
}

/// Visual statistics of one domain. `berry_color` and `highlight` set the fruit
/// appearance; berries keep a purple hue in every preset.
struct DomainStyle {
  StyleName name = StyleName::synthetic;
  std::vector<Rgb> background_palette;
  double brightness = 1.0;
  double noise_sigma = 0.0;
  double vignette_strength = 0.0;
  double texture_frequency = 3.0;
  Rgb berry_color{0.42, 0.16, 0.55};
  double highlight = 0.3;

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (background_palette.empty()) throw ValidationError("background_palette: empty");
    for (const auto& c : background_palette) {
      for (double v : c) {
        if (!unit(v)) throw ValidationError("background_palette: channel outside [0,1]");
      }
    }
    for (double v : berry_color) {
      if (!unit(v)) throw ValidationError("berry_color: channel outside [0,1]");
    }
    if (!unit(brightness)) throw ValidationError("brightness: outside [0,1]");
    if (!(noise_sigma >= 0.0)) throw ValidationError("noise_sigma: negative");
    if (!unit(vignette_strength)) throw ValidationError("vignette_strength: outside [0,1]");
    if (!(texture_frequency > 0.0)) throw ValidationError("texture_frequency: must be > 0");
    if (!unit(highlight)) throw ValidationError("highlight: outside [0,1]");
  }

  /// Flat, lightly textured render-engine look.
  static DomainStyle synthetic() {
    DomainStyle s;
    s.name = StyleName::synthetic;
    s.background_palette = {{0.36, 0.58, 0.24}, {0.52, 0.66, 0.32}, {0.50, 0.44, 0.30}};
    s.brightness = 0.85;
    s.noise_sigma = 0.01;
    s.vignette_strength = 0.0;
    s.texture_frequency = 2.5;
    s.berry_color = {0.42, 0.16, 0.55};
    s.highlight = 0.25;
    return s;
  }

  /// Daylight field imagery: busier texture, sky patches, sensor noise.
  static DomainStyle day_like() {
    DomainStyle s;
    s.name = StyleName::day_like;
    s.background_palette = {{0.34, 0.50, 0.26}, {0.58, 0.62, 0.42}, {0.70, 0.74, 0.80}, {0.42, 0.36, 0.26}};
    s.brightness = 0.75;
    s.noise_sigma = 0.04;
    s.vignette_strength = 0.2;
    s.texture_frequency = 3.5;
    s.berry_color = {0.36, 0.13, 0.47};
    s.highlight = 0.2;
    return s;
  }

  /// Flash-lit night imagery: dark foliage, strong falloff, bright fruit.
  static DomainStyle night_like() {
    DomainStyle s;
    s.name = StyleName::night_like;
    s.background_palette = {{0.10, 0.16, 0.10}, {0.20, 0.22, 0.16}, {0.06, 0.07, 0.10}};
    s.brightness = 0.45;
    s.noise_sigma = 0.03;
    s.vignette_strength = 0.6;
    s.texture_frequency = 4.0;
    s.berry_color = {0.52, 0.20, 0.72};
    s.highlight = 0.45;
    return s;
  }

  static DomainStyle preset(StyleName n) {
    switch (n) {
      case StyleName::synthetic: return synthetic();
      case StyleName::day_like: return day_like();
      case StyleName::night_like: return night_like();
    }
    return synthetic();
  }
};

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct SceneSpec {
  int canvas_size = 64;
  IntRange cluster_count_range{1, 4};
  RealRange cluster_radius_range{0.10, 0.18};
  IntRange berries_per_cluster_range{6, 14};
  DomainStyle style = DomainStyle::synthetic();
  std::uint64_t seed = 0;

  void validate() const {
    if (canvas_size < 8 || (canvas_size & (canvas_size - 1)) != 0) {
      throw ValidationError(fmt::format("canvas_size: {} is not a power of two >= 8", canvas_size));
    }
    if (cluster_count_range.lo < 0 || cluster_count_range.lo > cluster_count_range.hi) {
      throw ValidationError("cluster_count_range: need 0 <= lo <= hi");
    }
    if (!(cluster_radius_range.lo > 0.0) || cluster_radius_range.lo > cluster_radius_range.hi ||
        cluster_radius_range.hi > 0.5) {
      throw ValidationError("cluster_radius_range: need 0 < lo <= hi <= 0.5");
    }
    if (berries_per_cluster_range.lo < 1 ||
        berries_per_cluster_range.lo > berries_per_cluster_range.hi) {
      throw ValidationError("berries_per_cluster_range: need 1 <= lo <= hi");
    }
    style.validate();
  }
};

/// Where the generator put one cluster, in pixels.
struct ClusterPlacement {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;
  int berries = 0;
  int visible_pixels = 0;
  bool labeled = false;
  /// Tight pixel bound of the visible pixels, [x0,x1) x [y0,y1).
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool inside_canvas = false;
};

struct SceneRender {
  io::Image8 raster;
  std::vector<BoundingBox> boxes;
  std::vector<ClusterPlacement> log;
  /// Per-pixel cluster index, -1 for background.
  std::vector<int> owner;
};

namespace detail {

struct Berry {
  double x, y, rx, ry;
};

inline Rgb palette_at(const std::vector<Rgb>& pal, double t) {
  if (pal.size() == 1) return pal[0];
  t = std::clamp(t, 0.0, 1.0) * static_cast<double>(pal.size() - 1);
  const auto i = std::min(static_cast<std::size_t>(t), pal.size() - 2);
  const double f = t - static_cast<double>(i);
  Rgb c;
  for (int k = 0; k < 3; ++k) c[k] = pal[i][k] * (1.0 - f) + pal[i + 1][k] * f;
  return c;
}

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Renders one scene. Pure function of `spec`.
inline SceneRender render_scene_logged(const SceneSpec& spec) {
  spec.validate();
  const int S = spec.canvas_size;
  const double Sd = S;
  const auto& st = spec.style;
  Rng rng(spec.seed);

  // Background: three oriented sinusoid layers mapped through the palette.
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int l = 0; l < 3; ++l) {
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double f = st.texture_frequency * (1.0 + l) * rng.uniform(0.7, 1.3);
    waves.push_back({f * std::cos(theta), f * std::sin(theta), rng.uniform(0.0, 2.0 * std::numbers::pi),
                     1.0 / (1.0 + l)});
  }
  double amp_sum = 0.0;
  for (const auto& w : waves) amp_sum += w.amp;

  // Clusters: non-overlapping discs by rejection sampling.
  SceneRender out;
  const int count = static_cast<int>(rng.between(spec.cluster_count_range.lo, spec.cluster_count_range.hi));
  std::vector<std::vector<detail::Berry>> clusters;
  for (int c = 0; c < count; ++c) {
    const double r = rng.uniform(spec.cluster_radius_range.lo, spec.cluster_radius_range.hi) * Sd;
    bool placed = false;
    double cx = 0, cy = 0;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      cx = rng.uniform(0.5 * r, Sd - 0.5 * r);
      cy = rng.uniform(0.5 * r, Sd - 0.5 * r);
      placed = true;
      for (const auto& p : out.log) {
        if (std::hypot(cx - p.cx, cy - p.cy) < r + p.radius + 1.0) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) continue;
    ClusterPlacement pl;
    pl.cx = cx;
    pl.cy = cy;
    pl.radius = r;
    pl.inside_canvas = cx - r >= 0.0 && cy - r >= 0.0 && cx + r <= Sd && cy + r <= Sd;
    // Berries: the first near the top of the bunch, each next one touching a
    // previous berry; all stay inside the cluster disc.
    const int n = static_cast<int>(
        rng.between(spec.berries_per_cluster_range.lo, spec.berries_per_cluster_range.hi));
    std::vector<detail::Berry> berries;
    const double br = std::max(1.2, r * rng.uniform(0.24, 0.32));
    berries.push_back({cx, cy - 0.4 * r, br, br * rng.uniform(0.9, 1.15)});
    for (int b = 1, tries = 0; b < n && tries < 40 * n; ++tries) {
      const auto& prev = berries[rng.below(berries.size())];
      const double ang = rng.uniform(0.15, std::numbers::pi - 0.15);  // mostly downward
      const double d = br * rng.uniform(1.0, 1.7);
      const double rx = br * rng.uniform(0.85, 1.1);
      const double ry = rx * rng.uniform(0.9, 1.15);
      const double x = prev.x + d * std::cos(ang) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      const double y = prev.y + d * std::sin(ang);
      if (std::hypot(x - cx, y - cy) + std::max(rx, ry) > r) continue;
      berries.push_back({x, y, rx, ry});
      ++b;
    }
    pl.berries = static_cast<int>(berries.size());
    out.log.push_back(pl);
    clusters.push_back(std::move(berries));
  }

  // Paint background then berries in order; later berries cover earlier ones.
  out.raster = io::Image8(S, S);
  out.owner.assign(static_cast<std::size_t>(S) * S, -1);
  std::vector<Rgb> color(static_cast<std::size_t>(S) * S);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double u = (x + 0.5) / Sd;
      const double v = (y + 0.5) / Sd;
      double t = 0.0;
      for (const auto& w : waves) {
        t += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
      }
      t = 0.5 + 0.5 * t / amp_sum;
      const double d2 = (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5);
      const double shade = st.brightness * (1.0 - st.vignette_strength * d2 / 0.5);
      Rgb c = detail::palette_at(st.background_palette, t);
      for (auto& ch : c) ch *= shade;
      color[static_cast<std::size_t>(y) * S + x] = c;
    }
  }
  for (std::size_t ci = 0; ci < clusters.size(); ++ci) {
    for (const auto& b : clusters[ci]) {
      const int xa = std::max(0, static_cast<int>(std::floor(b.x - b.rx)));
      const int xb = std::min(S - 1, static_cast<int>(std::ceil(b.x + b.rx)));
      const int ya = std::max(0, static_cast<int>(std::floor(b.y - b.ry)));
      const int yb = std::min(S - 1, static_cast<int>(std::ceil(b.y + b.ry)));
      for (int y = ya; y <= yb; ++y) {
        for (int x = xa; x <= xb; ++x) {
          const double dx = (x + 0.5 - b.x) / b.rx;
          const double dy = (y + 0.5 - b.y) / b.ry;
          const double q = dx * dx + dy * dy;
          if (q > 1.0) continue;
          const std::size_t idx = static_cast<std::size_t>(y) * S + x;
          out.owner[idx] = static_cast<int>(ci);
          // Shaded sphere with a specular spot up and to the left.
          const double body = 0.65 + 0.35 * (1.0 - q);
          const double hx = dx + 0.4;
          const double hy = dy + 0.4;
          const double spec_w = st.highlight * std::exp(-(hx * hx + hy * hy) / 0.08);
          Rgb c;
          for (int k = 0; k < 3; ++k) c[k] = st.berry_color[k] * body * (1.0 - spec_w) + spec_w;
          color[idx] = c;
        }
      }
    }
  }
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      auto* p = out.raster.px(x, y);
      const auto& c = color[static_cast<std::size_t>(y) * S + x];
      for (int k = 0; k < 3; ++k) {
        const double noise = st.noise_sigma > 0.0 ? rng.normal(0.0, st.noise_sigma) : 0.0;
        p[k] = detail::quantize(c[k] + noise);
      }
    }
  }

  // Labels from the visible pixels of each cluster.
  for (auto& pl : out.log) {
    pl.x0 = S;
    pl.y0 = S;
  }
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const int o = out.owner[static_cast<std::size_t>(y) * S + x];
      if (o < 0) continue;
      auto& pl = out.log[o];
      ++pl.visible_pixels;
      pl.x0 = std::min(pl.x0, x);
      pl.y0 = std::min(pl.y0, y);
      pl.x1 = std::max(pl.x1, x + 1);
      pl.y1 = std::max(pl.y1, y + 1);
    }
  }
  for (auto& pl : out.log) {
    if (pl.visible_pixels < 4) continue;
    pl.labeled = true;
    out.boxes.push_back(BoundingBox::from_corners(pl.x0 / Sd, pl.y0 / Sd, pl.x1 / Sd, pl.y1 / Sd, 0));
  }
  return out;
}

inline data::LabeledImage render_scene(const SceneSpec& spec) {
  auto r = render_scene_logged(spec);
  data::LabeledImage li;
  li.pixels = data::to_model_space(r.raster);
  li.boxes = std::move(r.boxes);
  li.domain = to_string(spec.style.name);
  return li;
}

struct ManifestEntry {
  std::string image;
  std::string labels;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::string style;
  int canvas_size = 0;
  std::vector<ManifestEntry> entries;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["style"] = style;
    j["canvas_size"] = canvas_size;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries) {
      j["entries"].push_back({{"image", e.image}, {"labels", e.labels}, {"seed", e.seed}});
    }
    return j;
  }
};

inline std::string image_stem(std::size_t index) { return fmt::format("img_{:05d}", index); }

/// Writes `count` scenes to `out_dir/images`, `out_dir/labels` and
/// `out_dir/manifest.json`. Image i uses seed spec.seed + i.
inline DatasetManifest generate_dataset(const SceneSpec& spec, int count,
                                        const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (count <= 0) throw ValidationError(fmt::format("count: must be positive, got {}", count));
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "labels", ec);
  if (ec || !fs::is_directory(out_dir / "images")) {
    throw std::runtime_error("cannot create dataset directory " + out_dir.string());
  }
  DatasetManifest m;
  m.style = to_string(spec.style.name);
  m.canvas_size = spec.canvas_size;
  for (int i = 0; i < count; ++i) {
    SceneSpec s = spec;
    s.seed = spec.seed + static_cast<std::uint64_t>(i);
    const auto r = render_scene_logged(s);
    const std::string stem = image_stem(static_cast<std::size_t>(i));
    ManifestEntry e{"images/" + stem + ".png", "labels/" + stem + ".txt", s.seed};
    io::write_png(out_dir / e.image, r.raster);
    io::write_file(out_dir / e.labels, data::serialize_labels(r.boxes));
    m.entries.push_back(e);
  }
  io::write_file(out_dir / "manifest.json", m.to_json().dump(2) + "\n");
  return m;
}

}  // namespace semgan::scenegen
