#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "doam/boxes.hpp"
#include "doam/image_io.hpp"

namespace doam {

namespace fs = std::filesystem;

inline const std::vector<std::string>& opixray_classes() {
  static const std::vector<std::string> names{"Folding", "Straight", "Scissor", "Utility", "Multi-tool"};
  return names;
}

// Shape archetypes drawn by the synthetic generator.
inline const std::vector<std::string>& synthetic_classes() {
  static const std::vector<std::string> names{"blade", "shears", "hook", "ring", "bar"};
  return names;
}

inline bool is_known_class(const std::string& name) {
  auto in = [&](const std::vector<std::string>& v) { return std::find(v.begin(), v.end(), name) != v.end(); };
  return in(opixray_classes()) || in(synthetic_classes());
}

struct OcclusionThresholds {
  double partial = 0.2;  // OL2 starts here
  double severe = 0.5;   // OL3 starts here
};

// OL1 below 0.2, OL2 in [0.2, 0.5), OL3 from 0.5.
inline int assign_occlusion_level(double ratio, const OcclusionThresholds& t = {}) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::out_of_range("occlusion ratio outside [0,1]: " + std::to_string(ratio));
  if (ratio < t.partial) return 1;
  if (ratio < t.severe) return 2;
  return 3;
}

struct BoxAnnotation {
  std::string class_name;
  int xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  std::optional<int> level;
  std::optional<double> occlusion_ratio;  // generator metadata, not serialised in annotations

  Box box() const { return {double(xmin), double(ymin), double(xmax), double(ymax)}; }
  bool operator==(const BoxAnnotation& o) const {
    return class_name == o.class_name && xmin == o.xmin && ymin == o.ymin && xmax == o.xmax && ymax == o.ymax &&
           level == o.level;
  }
};

struct AnnotatedImage {
  std::string id;
  fs::path image_path;
  int width = 0;
  int height = 0;
  std::vector<BoxAnnotation> boxes;
  std::optional<int> occlusion_level;
  Tensor<float> pixels;  // [3,H,W]; empty until loaded

  void validate() const {
    if (boxes.empty()) throw ParseError(id + ": image has no boxes");
    for (const auto& b : boxes) {
      if (!(b.xmin < b.xmax && b.ymin < b.ymax)) throw ParseError(id + ": degenerate box");
      if (b.xmin < 0 || b.ymin < 0 || b.xmax > width || b.ymax > height) throw ParseError(id + ": box out of bounds");
    }
  }

  const Tensor<float>& load() {
    if (pixels.empty()) pixels = read_image(image_path);
    return pixels;
  }
};

struct DatasetSplit {
  std::string name;
  std::vector<AnnotatedImage> items;
  std::map<std::string, int> category_counts;

  void recount() {
    category_counts.clear();
    for (const auto& it : items)
      for (const auto& b : it.boxes) ++category_counts[b.class_name];
  }
};

// Parses `<class> <xmin> <ymin> <xmax> <ymax> [level]` lines. Blank lines are
// skipped; anything else malformed raises with file:line.
inline std::vector<BoxAnnotation> parse_annotations(std::istream& in, const std::string& source, int width, int height) {
  std::vector<BoxAnnotation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::vector<std::string> f;
    for (std::string tok; ss >> tok;) f.push_back(tok);
    if (f.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 5 && f.size() != 6)
      throw ParseError(where + "expected 5 or 6 fields, got " + std::to_string(f.size()));
    if (!is_known_class(f[0])) throw ParseError(where + "unknown class '" + f[0] + "'");
    auto num = [&](const std::string& s) {
      std::size_t pos = 0;
      int v = 0;
      try {
        v = std::stoi(s, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != s.size() || s.empty()) throw ParseError(where + "non-numeric field '" + s + "'");
      return v;
    };
    BoxAnnotation b{f[0], num(f[1]), num(f[2]), num(f[3]), num(f[4]), std::nullopt, std::nullopt};
    if (f.size() == 6) {
      const int lvl = num(f[5]);
      if (lvl < 1 || lvl > 3) throw ParseError(where + "occlusion level must be 1, 2 or 3");
      b.level = lvl;
    }
    if (!(b.xmin < b.xmax && b.ymin < b.ymax)) throw ParseError(where + "degenerate box");
    if (b.xmin < 0 || b.ymin < 0 || b.xmax > width || b.ymax > height)
      throw ParseError(where + "box out of bounds for " + std::to_string(width) + "x" + std::to_string(height) + " image");
    out.push_back(b);
  }
  if (out.empty()) throw ParseError(source + ": no boxes (every image carries at least one item)");
  return out;
}

inline void write_annotations(std::ostream& out, const std::vector<BoxAnnotation>& boxes) {
  for (const auto& b : boxes) {
    out << b.class_name << ' ' << b.xmin << ' ' << b.ymin << ' ' << b.xmax << ' ' << b.ymax;
    if (b.level) out << ' ' << *b.level;
    out << '\n';
  }
}

inline std::optional<int> image_level(const AnnotatedImage& item) {
  std::optional<int> lvl;
  for (const auto& b : item.boxes)
    if (b.level) lvl = std::max(lvl.value_or(0), *b.level);
  return lvl;
}

namespace detail {
inline fs::path find_image(const fs::path& images_dir, const std::string& id) {
  for (const char* ext : {".png", ".jpg", ".jpeg", ".PNG", ".JPG"}) {
    fs::path p = images_dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  throw IoError("missing image for annotation '" + id + "' in " + images_dir.string());
}

inline std::map<std::string, int> read_levels_csv(const fs::path& p) {
  std::map<std::string, int> out;
  std::ifstream in(p);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("image_id", 0) == 0)) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(p.string() + ":" + std::to_string(lineno) + ": expected image_id,level");
    int lvl = 0;
    try {
      lvl = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw ParseError(p.string() + ":" + std::to_string(lineno) + ": non-numeric level");
    }
    if (lvl < 1 || lvl > 3) throw ParseError(p.string() + ":" + std::to_string(lineno) + ": level must be 1..3");
    out[line.substr(0, comma)] = lvl;
  }
  return out;
}
}  // namespace detail

// Loads `train`, `test` or one of `OL1`..`OL3` (a filtered view of test).
inline DatasetSplit load_dataset(const fs::path& root, const std::string& split) {
  int want_level = 0;
  std::string dir = split;
  if (split == "OL1" || split == "OL2" || split == "OL3") {
    want_level = split[2] - '0';
    dir = "test";
  } else if (split != "train" && split != "test") {
    throw ConfigError("unknown split '" + split + "'");
  }
  const fs::path base = root / dir;
  const fs::path ann_dir = base / "annotations", img_dir = base / "images";
  if (!fs::is_directory(ann_dir)) throw IoError("missing directory " + ann_dir.string());
  if (!fs::is_directory(img_dir)) throw IoError("missing directory " + img_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(ann_dir))
    if (e.path().extension() == ".txt") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::map<std::string, int> csv_levels;
  if (fs::exists(base / "occlusion_levels.csv")) csv_levels = detail::read_levels_csv(base / "occlusion_levels.csv");

  DatasetSplit out;
  out.name = split;
  for (const auto& f : files) {
    AnnotatedImage item;
    item.id = f.stem().string();
    item.image_path = detail::find_image(img_dir, item.id);
    std::tie(item.width, item.height) = image_size(item.image_path);
    std::ifstream in(f);
    if (!in) throw IoError("cannot read " + f.string());
    item.boxes = parse_annotations(in, f.string(), item.width, item.height);
    if (auto it = csv_levels.find(item.id); it != csv_levels.end()) item.occlusion_level = it->second;
    else item.occlusion_level = image_level(item);
    if (want_level) {
      if (!item.occlusion_level)
        throw ParseError(item.id + ": no occlusion level available for split " + split);
      if (*item.occlusion_level != want_level) continue;
    }
    out.items.push_back(std::move(item));
  }
  out.recount();
  return out;
}

// Writes a split under root/<dir>/{images,annotations}. Items must have
// pixels loaded. Image-level occlusion goes to occlusion_levels.csv when any
// item carries one.
inline void write_split(const fs::path& root, const std::string& dir, DatasetSplit& split) {
  const fs::path base = root / dir;
  fs::create_directories(base / "images");
  fs::create_directories(base / "annotations");
  bool any_level = false;
  for (auto& item : split.items) {
    item.validate();
    const fs::path img = base / "images" / (item.id + ".png");
    write_png(img, item.load());
    item.image_path = img;
    std::ofstream out(base / "annotations" / (item.id + ".txt"));
    if (!out) throw IoError("cannot write annotations for " + item.id);
    write_annotations(out, item.boxes);
    any_level = any_level || item.occlusion_level.has_value();
  }
  if (any_level) {
    std::ofstream csv(base / "occlusion_levels.csv");
    csv << "image_id,level\n";
    for (const auto& item : split.items)
      if (item.occlusion_level) csv << item.id << ',' << *item.occlusion_level << '\n';
  }
}

// Bilinear resize with boxes scaled by the same factors and rounded.
inline AnnotatedImage resize_with_boxes(AnnotatedImage item, int target_h, int target_w) {
  item.load();
  if (item.height == 0) item.height = item.pixels.dim(1);
  if (item.width == 0) item.width = item.pixels.dim(2);
  if (target_h == item.height && target_w == item.width) return item;
  const double sx = static_cast<double>(target_w) / item.width, sy = static_cast<double>(target_h) / item.height;
  for (auto& b : item.boxes) {
    b.xmin = static_cast<int>(std::lround(b.xmin * sx));
    b.xmax = static_cast<int>(std::lround(b.xmax * sx));
    b.ymin = static_cast<int>(std::lround(b.ymin * sy));
    b.ymax = static_cast<int>(std::lround(b.ymax * sy));
    if (!(b.xmin < b.xmax && b.ymin < b.ymax))
      throw ParseError(item.id + ": box of class " + b.class_name + " collapses to zero area at " +
                       std::to_string(target_w) + "x" + std::to_string(target_h));
  }
  item.pixels = resize_bilinear(item.pixels, target_h, target_w);
  item.height = target_h;
  item.width = target_w;
  item.validate();
  return item;
}

}  // namespace doam
