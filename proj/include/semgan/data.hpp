#pragma once

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "semgan/box.hpp"
#include "semgan/core/tensor.hpp"
#include "semgan/io/hash.hpp"
#include "semgan/io/png.hpp"

namespace semgan::data {

/// Input rejected by a precondition check; the message names the field.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& what)
      : std::runtime_error(fmt::format("line {}: {}", line, what)), line_(line) {}
  [[nodiscard]] int line() const { return line_; }

 private:
  int line_;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One image in model space ([-1,1], shape 1x3xHxW). `boxes` is absent for
/// unlabeled images, which is different from an empty box list.
struct LabeledImage {
  Tensor<float> pixels;
  std::optional<std::vector<BoundingBox>> boxes;
  std::string domain;
  std::string name;
  std::string content_hash;

  [[nodiscard]] bool labeled() const { return boxes.has_value(); }
  [[nodiscard]] const std::vector<BoundingBox>& labels() const {
    if (!boxes) throw DataError("image '" + name + "' has no labels");
    return *boxes;
  }
};

using Dataset = std::vector<LabeledImage>;

// ---- pixel space ----------------------------------------------------------

inline Tensor<float> to_model_space(const io::Image8& img) {
  Tensor<float> t(Shape{1, 3, img.height, img.width});
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const auto* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = 2.0f * (static_cast<float>(p[c]) / 255.0f) - 1.0f;
    }
  }
  return t;
}

/// Inverse of to_model_space with rounding; values outside [-1,1] saturate.
inline io::Image8 to_image8(const Tensor<float>& t, int sample = 0) {
  const Shape s = t.shape();
  if (s.c != 3) throw ShapeError("to_image8: expected 3 channels, got " + s.str());
  io::Image8 img(s.w, s.h);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      auto* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) {
        const double v = (static_cast<double>(t.at(sample, c, y, x)) + 1.0) * 0.5 * 255.0;
        p[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return img;
}

// ---- label files ----------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename V>
V parse_number(std::string_view tok, int line, const char* field) {
  V v{};
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ParseError(line, fmt::format("field '{}' is not a number: '{}'", field, tok));
  }
  return v;
}

}  // namespace detail

/// One "class cx cy w h" box per non-blank line.
inline std::vector<BoundingBox> parse_label_file(std::string_view text) {
  std::vector<BoundingBox> boxes;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    const auto toks = detail::split_ws(line);
    if (!toks.empty()) {
      if (toks.size() != 5) {
        throw ParseError(line_no, fmt::format("expected 5 fields, got {}", toks.size()));
      }
      BoundingBox b;
      b.class_id = detail::parse_number<int>(toks[0], line_no, "class");
      b.cx = detail::parse_number<double>(toks[1], line_no, "cx");
      b.cy = detail::parse_number<double>(toks[2], line_no, "cy");
      b.w = detail::parse_number<double>(toks[3], line_no, "w");
      b.h = detail::parse_number<double>(toks[4], line_no, "h");
      if (!b.valid()) throw ParseError(line_no, "box out of range");
      boxes.push_back(b);
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return boxes;
}

inline std::string serialize_labels(const std::vector<BoundingBox>& boxes) {
  std::string out;
  for (const auto& b : boxes) {
    out += fmt::format("{} {:.9g} {:.9g} {:.9g} {:.9g}\n", b.class_id, b.cx, b.cy, b.w, b.h);
  }
  return out;
}

/// Horizontal mirror of a box list.
inline std::vector<BoundingBox> mirror_boxes(const std::vector<BoundingBox>& boxes) {
  std::vector<BoundingBox> out = boxes;
  for (auto& b : out) b.cx = 1.0 - b.cx;
  return out;
}

// ---- split schedule -------------------------------------------------------

struct SplitSchedule {
  int k = 0;
  int a = 0;
  int b = 0;
  bool operator==(const SplitSchedule&) const = default;
};

/// The published rows, keyed by k.
inline const std::map<int, SplitSchedule>& published_schedule() {
  static const std::map<int, SplitSchedule> rows{
      {2, {2, 1, 1}},    {5, {5, 4, 1}},    {9, {9, 8, 1}},     {14, {14, 12, 2}},
      {19, {19, 16, 3}}, {30, {30, 24, 6}}, {40, {40, 32, 8}}, {50, {50, 40, 10}}};
  return rows;
}

inline std::vector<int> default_k_list() {
  std::vector<int> ks;
  for (const auto& [k, row] : published_schedule()) ks.push_back(k);
  return ks;
}

inline SplitSchedule split_schedule(int k) {
  if (k < 2) throw ValidationError(fmt::format("k must be >= 2, got {}", k));
  const auto& rows = published_schedule();
  if (auto it = rows.find(k); it != rows.end()) return it->second;
  int a = std::max(1, static_cast<int>(std::floor(0.8 * k)));
  if (k - a < 1) a = k - 1;
  return {k, a, k - a};
}

// ---- directories ----------------------------------------------------------

/// Reads `dir/images/*.png` in lexicographic order; with `labeled`, each image
/// needs `dir/labels/<stem>.txt`.
inline Dataset load_domain(const std::filesystem::path& dir, bool labeled) {
  namespace fs = std::filesystem;
  const fs::path images = dir / "images";
  if (!fs::is_directory(images)) throw DataError("no images directory in " + dir.string());
  std::string domain = dir.filename().string();
  if (fs::exists(dir / "manifest.json")) {
    const auto m = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
    if (m.contains("style")) domain = m["style"].get<std::string>();
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  Dataset out;
  out.reserve(files.size());
  for (const auto& f : files) {
    LabeledImage li;
    li.name = f.stem().string();
    li.domain = domain;
    li.content_hash = io::sha256_file(f);
    li.pixels = to_model_space(io::read_png(f));
    if (labeled) {
      const fs::path lf = dir / "labels" / (li.name + ".txt");
      if (!fs::exists(lf)) throw DataError("missing label file " + lf.string());
      try {
        li.boxes = parse_label_file(io::read_file(lf));
      } catch (const ParseError& e) {
        throw DataError(lf.string() + ": " + e.what());
      }
    }
    out.push_back(std::move(li));
  }
  return out;
}

/// Drops labels (target domain images used without supervision).
inline Dataset unlabeled(Dataset d) {
  for (auto& li : d) li.boxes.reset();
  return d;
}

}  // namespace semgan::data
