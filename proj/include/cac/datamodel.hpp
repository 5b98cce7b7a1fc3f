#pragma once

// Dataset schema, annotation I/O, preprocessing, and a synthetic blob
// counting dataset.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/image.hpp"

namespace cac {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

struct ExemplarBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  Point2 center() const { return {(x1 + x2) / 2.0, (y1 + y2) / 2.0}; }
  bool operator==(const ExemplarBox&) const = default;
};

struct AnnotatedImage {
  std::string id;
  std::string file;
  Image image;
  std::vector<Point2> points;
  std::vector<ExemplarBox> exemplars;
  std::string class_name;
  // Factor mapping original-image coordinates to the current ones.
  double scale = 1.0;
  int original_height = 0;
  int original_width = 0;
};

enum class SplitName { kTrain, kVal, kTest };

inline std::string to_string(SplitName s) {
  switch (s) {
    case SplitName::kTrain: return "train";
    case SplitName::kVal: return "val";
    case SplitName::kTest: return "test";
  }
  return "train";
}

inline SplitName parse_split_name(const std::string& s) {
  if (s == "train") return SplitName::kTrain;
  if (s == "val") return SplitName::kVal;
  if (s == "test") return SplitName::kTest;
  throw ValidationError("unknown split name: " + s);
}

struct DatasetSplit {
  SplitName name = SplitName::kTrain;
  std::vector<AnnotatedImage> samples;
};

// Checks one sample against the image bounds; throws naming the sample.
inline void validate_sample(const AnnotatedImage& s) {
  const double w = s.image.width, h = s.image.height;
  if (s.image.height < 2 || s.image.width < 2)
    throw ValidationError("image '" + s.id + "': degenerate image size");
  if (s.exemplars.empty()) throw ValidationError("image '" + s.id + "': no exemplar boxes");
  for (const auto& p : s.points) {
    if (!(p.x >= 0 && p.x <= w && p.y >= 0 && p.y <= h)) {
      std::ostringstream os;
      os << "image '" << s.id << "': point (" << p.x << ", " << p.y << ") outside " << s.image.width << "x"
         << s.image.height;
      throw ValidationError(os.str());
    }
  }
  for (const auto& b : s.exemplars) {
    std::ostringstream os;
    os << "image '" << s.id << "': exemplar [" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << "] ";
    if (!(b.x2 > b.x1 && b.y2 > b.y1)) throw ValidationError(os.str() + "is empty or inverted");
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > w || b.y2 > h) throw ValidationError(os.str() + "exceeds image bounds");
  }
}

// Parses the annotation document without touching pixels. Sample order is
// by image id.
inline std::vector<AnnotatedImage> parse_annotations(const std::string& text, const std::string& origin) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // Byte offset -> line number for the diagnostic.
    const size_t upto = std::min<size_t>(e.byte, text.size());
    const long line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n');
    throw ValidationError(origin + ":" + std::to_string(line) + ": malformed JSON: " + e.what());
  }
  std::vector<AnnotatedImage> out;
  try {
    for (const auto& entry : doc.at("images")) {
      AnnotatedImage s;
      s.id = entry.at("id").get<std::string>();
      s.file = entry.at("file").get<std::string>();
      s.class_name = entry.value("class", std::string());
      for (const auto& p : entry.at("points")) {
        if (p.size() != 2) throw ValidationError("image '" + s.id + "': point must be [x, y]");
        s.points.push_back({p[0].get<double>(), p[1].get<double>()});
      }
      for (const auto& b : entry.at("exemplars")) {
        if (b.size() != 4) throw ValidationError("image '" + s.id + "': exemplar must be [x1, y1, x2, y2]");
        s.exemplars.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
      }
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(origin + ": schema error: " + e.what());
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

inline nlohmann::json annotation_document(const DatasetSplit& split) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : split.samples) {
    nlohmann::json pts = nlohmann::json::array(), boxes = nlohmann::json::array();
    for (const auto& p : s.points) pts.push_back({p.x, p.y});
    for (const auto& b : s.exemplars) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    images.push_back({{"id", s.id}, {"file", s.file}, {"points", pts}, {"exemplars", boxes}, {"class", s.class_name}});
  }
  return {{"images", images}};
}

inline void save_annotations(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write annotations: " + path.string());
  os << annotation_document(split).dump(1) << "\n";
}

// Loads and validates a split; image files resolve relative to the document.
inline DatasetSplit load_annotations(const std::filesystem::path& path, SplitName name = SplitName::kTrain) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open annotations: " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  DatasetSplit split;
  split.name = name;
  split.samples = parse_annotations(buf.str(), path.string());
  for (auto& s : split.samples) {
    std::filesystem::path file(s.file);
    if (file.is_relative()) file = path.parent_path() / file;
    s.image = load_image(file);
    s.original_height = s.image.height;
    s.original_width = s.image.width;
    validate_sample(s);
  }
  return split;
}

// Returns one warning per class name shared between splits.
inline std::vector<std::string> check_class_disjoint(const std::vector<const DatasetSplit*>& splits) {
  std::vector<std::string> warnings;
  std::map<std::string, std::set<std::string>> owners;
  for (const auto* split : splits)
    for (const auto& s : split->samples)
      if (!s.class_name.empty()) owners[s.class_name].insert(to_string(split->name));
  for (const auto& [cls, names] : owners)
    if (names.size() > 1) {
      std::string joined;
      for (const auto& n : names) joined += (joined.empty() ? "" : ",") + n;
      warnings.push_back("class '" + cls + "' appears in splits " + joined);
    }
  return warnings;
}

inline int round_up(int value, int multiple) { return (value + multiple - 1) / multiple * multiple; }

// Resizes to target_height keeping aspect ratio, then zero-pads right and
// bottom to a multiple of the coarsest stride. Points and boxes are scaled by
// the same factor.
inline AnnotatedImage preprocess(const AnnotatedImage& sample, int target_height, int coarsest_stride) {
  if (target_height <= 0) throw ValidationError("target_height must be positive");
  if (coarsest_stride <= 0) throw ValidationError("coarsest stride must be positive");
  AnnotatedImage out = sample;
  if (out.original_height == 0) {
    out.original_height = sample.image.height;
    out.original_width = sample.image.width;
  }
  const double factor = static_cast<double>(target_height) / sample.image.height;
  const int new_w = std::max(1, static_cast<int>(std::lround(sample.image.width * factor)));
  Image resized = resize_image(sample.image, target_height, new_w);
  const int padded_h = round_up(target_height, coarsest_stride);
  const int padded_w = round_up(new_w, coarsest_stride);
  if (padded_h != target_height || padded_w != new_w) {
    Image padded(padded_h, padded_w);
    for (int y = 0; y < resized.height; ++y)
      std::copy_n(&resized.at(y, 0, 0), static_cast<size_t>(resized.width) * 3, &padded.at(y, 0, 0));
    resized = std::move(padded);
  }
  out.image = std::move(resized);
  if (factor != 1.0) {
    for (auto& p : out.points) p = {p.x * factor, p.y * factor};
    for (auto& b : out.exemplars) b = {b.x1 * factor, b.y1 * factor, b.x2 * factor, b.y2 * factor};
  }
  out.scale = sample.scale * factor;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic blobs

enum class BlobShape { kEllipse, kRectangle, kTriangle, kDiamond };

inline std::string to_string(BlobShape s) {
  switch (s) {
    case BlobShape::kEllipse: return "ellipse";
    case BlobShape::kRectangle: return "rectangle";
    case BlobShape::kTriangle: return "triangle";
    case BlobShape::kDiamond: return "diamond";
  }
  return "ellipse";
}

inline BlobShape parse_blob_shape(const std::string& s) {
  if (s == "ellipse") return BlobShape::kEllipse;
  if (s == "rectangle") return BlobShape::kRectangle;
  if (s == "triangle") return BlobShape::kTriangle;
  if (s == "diamond") return BlobShape::kDiamond;
  throw ValidationError("unknown blob shape: " + s);
}

using Rgb = std::array<float, 3>;

struct IntRange {
  int min = 0;
  int max = 0;
};

struct SyntheticConfig {
  int height = 128;
  int width = 128;
  IntRange target_count{5, 20};
  IntRange distractor_count{2, 6};
  IntRange blob_size{8, 16};
  std::vector<BlobShape> target_shapes{BlobShape::kEllipse, BlobShape::kRectangle};
  std::vector<Rgb> target_colors{{0.95f, 0.25f, 0.2f}, {0.95f, 0.85f, 0.2f}};
  std::vector<BlobShape> distractor_shapes{BlobShape::kTriangle, BlobShape::kDiamond};
  std::vector<Rgb> distractor_colors{{0.2f, 0.45f, 0.95f}, {0.3f, 0.9f, 0.4f}};
  double noise_stddev = 0.02;
  int gap = 2;
  uint64_t seed = 0;

  void validate() const {
    auto check_range = [](const IntRange& r, const char* what, int floor) {
      if (r.min > r.max) throw ValidationError(std::string(what) + ": empty range");
      if (r.min < floor) throw ValidationError(std::string(what) + ": below " + std::to_string(floor));
    };
    check_range(target_count, "target_count_range", 1);
    check_range(distractor_count, "distractor_count_range", 0);
    check_range(blob_size, "blob_size_range", 3);
    if (height < blob_size.max || width < blob_size.max) throw ValidationError("image smaller than largest blob");
    if (target_shapes.empty() || target_colors.empty()) throw ValidationError("empty target palette");
    if (distractor_count.max > 0 && (distractor_shapes.empty() || distractor_colors.empty()))
      throw ValidationError("empty distractor palette");
  }
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool inside_shape(BlobShape shape, double u, double v) {
  // u, v in [0, 1] across the blob's box.
  switch (shape) {
    case BlobShape::kRectangle: return true;
    case BlobShape::kEllipse: {
      const double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case BlobShape::kTriangle: return std::abs(u - 0.5) <= 0.5 * v;
    case BlobShape::kDiamond: return std::abs(u - 0.5) + std::abs(v - 0.5) <= 0.5;
  }
  return true;
}

struct PlacedBlob {
  int x0, y0, w, h;
};

inline void render_blob(Image& img, const PlacedBlob& b, BlobShape shape, const Rgb& color) {
  for (int y = 0; y < b.h; ++y)
    for (int x = 0; x < b.w; ++x) {
      const double u = (x + 0.5) / b.w, v = (y + 0.5) / b.h;
      if (!inside_shape(shape, u, v)) continue;
      for (int c = 0; c < 3; ++c) img.at(b.y0 + y, b.x0 + x, c) = color[c];
    }
}

}  // namespace detail

// One sample; depends only on (config.seed, index).
inline AnnotatedImage generate_synthetic_sample(const SyntheticConfig& config, int index) {
  std::seed_seq seq{static_cast<uint32_t>(config.seed), static_cast<uint32_t>(config.seed >> 32),
                    static_cast<uint32_t>(index)};
  std::mt19937_64 rng(seq);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  const BlobShape target_shape = config.target_shapes[uniform_int(0, static_cast<int>(config.target_shapes.size()) - 1)];
  const Rgb target_color = config.target_colors[uniform_int(0, static_cast<int>(config.target_colors.size()) - 1)];
  const int k = uniform_int(config.target_count.min, config.target_count.max);
  const int d = uniform_int(config.distractor_count.min, config.distractor_count.max);
  BlobShape distractor_shape = BlobShape::kRectangle;
  Rgb distractor_color{0, 0, 0};
  if (d > 0) {
    distractor_shape = config.distractor_shapes[uniform_int(0, static_cast<int>(config.distractor_shapes.size()) - 1)];
    distractor_color = config.distractor_colors[uniform_int(0, static_cast<int>(config.distractor_colors.size()) - 1)];
  }

  AnnotatedImage s;
  char id[64];
  std::snprintf(id, sizeof id, "synth_%llu_%05d", static_cast<unsigned long long>(config.seed), index);
  s.id = id;
  s.file = s.id + ".png";
  s.class_name = to_string(target_shape) + "_" + std::to_string(static_cast<int>(target_color[0] * 100)) + "_" +
                 std::to_string(static_cast<int>(target_color[1] * 100)) + "_" +
                 std::to_string(static_cast<int>(target_color[2] * 100));
  s.image = Image(config.height, config.width);
  s.original_height = config.height;
  s.original_width = config.width;

  const double background = uniform(0.05, 0.25);
  std::normal_distribution<double> noise(0.0, config.noise_stddev);
  for (auto& px : s.image.pixels) px = static_cast<float>(std::clamp(background + noise(rng), 0.0, 1.0));

  // Per-class base size with mild per-instance jitter.
  const int lo = config.blob_size.min, hi = config.blob_size.max;
  const double target_base = uniform(lo, hi), distractor_base = uniform(lo, hi);
  auto draw_side = [&](double base) {
    return std::clamp(static_cast<int>(std::lround(base * uniform(0.8, 1.2))), lo, hi);
  };

  std::vector<detail::PlacedBlob> placed;
  auto place = [&](double base) -> detail::PlacedBlob {
    for (int attempt = 0; attempt < 2000; ++attempt) {
      detail::PlacedBlob b{0, 0, draw_side(base), draw_side(base)};
      b.x0 = uniform_int(0, config.width - b.w);
      b.y0 = uniform_int(0, config.height - b.h);
      bool clear = true;
      for (const auto& o : placed) {
        if (b.x0 < o.x0 + o.w + config.gap && o.x0 < b.x0 + b.w + config.gap && b.y0 < o.y0 + o.h + config.gap &&
            o.y0 < b.y0 + b.h + config.gap) {
          clear = false;
          break;
        }
      }
      if (clear) {
        placed.push_back(b);
        return b;
      }
    }
    throw GenerationError("infeasible packing: could not place " + std::to_string(k + d) + " blobs in " +
                          std::to_string(config.width) + "x" + std::to_string(config.height));
  };

  auto jitter = [&](const Rgb& c) {
    Rgb out;
    for (int i = 0; i < 3; ++i) out[i] = static_cast<float>(std::clamp(c[i] + uniform(-0.05, 0.05), 0.0, 1.0));
    return out;
  };

  for (int i = 0; i < k; ++i) {
    const auto b = place(target_base);
    detail::render_blob(s.image, b, target_shape, jitter(target_color));
    s.points.push_back({b.x0 + b.w / 2.0, b.y0 + b.h / 2.0});
    if (i < 3) s.exemplars.push_back({double(b.x0), double(b.y0), double(b.x0 + b.w), double(b.y0 + b.h)});
  }
  for (int i = 0; i < d; ++i) {
    const auto b = place(distractor_base);
    detail::render_blob(s.image, b, distractor_shape, jitter(distractor_color));
  }
  return s;
}

// Samples first_index .. first_index + n_samples - 1 of the stream for config.seed.
inline DatasetSplit generate_synthetic(const SyntheticConfig& config, int n_samples, SplitName name = SplitName::kTrain,
                                       int first_index = 0) {
  config.validate();
  DatasetSplit split;
  split.name = name;
  for (int i = 0; i < n_samples; ++i) split.samples.push_back(generate_synthetic_sample(config, first_index + i));
  return split;
}

// ---------------------------------------------------------------------------
// Config (de)serialization

inline nlohmann::json to_json(const SyntheticConfig& c) {
  auto colors = [](const std::vector<Rgb>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& c : v) a.push_back({c[0], c[1], c[2]});
    return a;
  };
  auto shapes = [](const std::vector<BlobShape>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (auto s : v) a.push_back(to_string(s));
    return a;
  };
  return {{"image_size", {c.height, c.width}},
          {"target_count_range", {c.target_count.min, c.target_count.max}},
          {"distractor_count_range", {c.distractor_count.min, c.distractor_count.max}},
          {"blob_size_range", {c.blob_size.min, c.blob_size.max}},
          {"target_shapes", shapes(c.target_shapes)},
          {"target_colors", colors(c.target_colors)},
          {"distractor_shapes", shapes(c.distractor_shapes)},
          {"distractor_colors", colors(c.distractor_colors)},
          {"noise_stddev", c.noise_stddev},
          {"gap", c.gap},
          {"rng_seed", c.seed}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  auto range = [&](const char* key, IntRange& r) {
    if (j.contains(key)) r = {j[key].at(0).get<int>(), j[key].at(1).get<int>()};
  };
  if (j.contains("image_size")) {
    c.height = j["image_size"].at(0).get<int>();
    c.width = j["image_size"].at(1).get<int>();
  }
  range("target_count_range", c.target_count);
  range("distractor_count_range", c.distractor_count);
  range("blob_size_range", c.blob_size);
  auto shapes = [&](const char* key, std::vector<BlobShape>& v) {
    if (!j.contains(key)) return;
    v.clear();
    for (const auto& s : j[key]) v.push_back(parse_blob_shape(s.get<std::string>()));
  };
  auto colors = [&](const char* key, std::vector<Rgb>& v) {
    if (!j.contains(key)) return;
    v.clear();
    for (const auto& c : j[key]) v.push_back({c.at(0).get<float>(), c.at(1).get<float>(), c.at(2).get<float>()});
  };
  shapes("target_shapes", c.target_shapes);
  colors("target_colors", c.target_colors);
  shapes("distractor_shapes", c.distractor_shapes);
  colors("distractor_colors", c.distractor_colors);
  c.noise_stddev = j.value("noise_stddev", c.noise_stddev);
  c.gap = j.value("gap", c.gap);
  c.seed = j.value("rng_seed", c.seed);
  c.validate();
  return c;
}

}  // namespace cac
