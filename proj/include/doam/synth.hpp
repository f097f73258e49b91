#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "doam/data.hpp"
#include "doam/rng.hpp"

namespace doam {

struct SynthConfig {
  int n_images = 10;
  int height = 300;
  int width = 300;
  std::vector<std::string> classes{"blade", "ring", "hook"};
  int occluders_min = 2;
  int occluders_max = 5;
  double ratio_min = 0.0;  // target occlusion ratio range
  double ratio_max = 1.0;
  int targets_min = 1;
  int targets_max = 2;
  double size_min = 0.22;  // target length as a fraction of min(H, W)
  double size_max = 0.38;
  std::uint64_t seed = 0;
  std::string id_prefix = "img";
  std::size_t index_offset = 0;  // first image index, for disjoint splits from one seed
  OcclusionThresholds thresholds;

  void validate() const {
    if (n_images < 1) throw ConfigError("SynthConfig: n_images must be >= 1");
    if (height < 16 || width < 16) throw ConfigError("SynthConfig: canvas must be at least 16x16");
    if (!(0.0 <= ratio_min && ratio_min <= ratio_max && ratio_max <= 1.0))
      throw ConfigError("SynthConfig: occlusion ratio range must lie within [0,1]");
    if (occluders_min < 0 || occluders_min > occluders_max)
      throw ConfigError("SynthConfig: invalid occluder count range");
    if (targets_min < 1 || targets_min > targets_max) throw ConfigError("SynthConfig: invalid target count range");
    if (!(0.05 <= size_min && size_min <= size_max && size_max <= 0.6))
      throw ConfigError("SynthConfig: target size range must lie within [0.05,0.6]");
    if (!(0 < thresholds.partial && thresholds.partial < thresholds.severe && thresholds.severe < 1))
      throw ConfigError("SynthConfig: level thresholds must satisfy 0 < t1 < t2 < 1");
    if (classes.empty()) throw ConfigError("SynthConfig: no classes");
    for (const auto& c : classes)
      if (std::find(synthetic_classes().begin(), synthetic_classes().end(), c) == synthetic_classes().end())
        throw ConfigError("SynthConfig: unknown archetype '" + c + "'");
    if (occluders_max < targets_min && ratio_min > 0)
      throw ConfigError("SynthConfig: a positive minimum occlusion ratio needs at least one occluder per target");
  }
};

// Per-pixel masks of one generated image, kept for independent checks of the
// recorded occlusion ratios.
struct SceneMasks {
  std::vector<std::vector<std::uint8_t>> targets;  // one HxW mask per box
  std::vector<std::uint8_t> occluders;             // union of all occluders
};

struct SyntheticSet {
  DatasetSplit split;
  std::vector<SceneMasks> masks;
  int regenerated = 0;  // images redrawn because the ratio range was not met
};

namespace synth_detail {

struct Shape {
  int archetype;  // index into synthetic_classes(), or -1 for occluders
  double cx, cy, length, angle;
  double a = 0, b = 0;  // occluder semi-axes
  bool rect = false;
  std::array<double, 3> colour{};
  double alpha = 1;
  std::uint64_t texture_seed = 0;

  // (u, v): coordinates along / across the shape's long axis, scaled by length.
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s), v = (-dx * s + dy * c);
    if (archetype < 0) {
      if (rect) return std::abs(u) <= a && std::abs(v) <= b;
      return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
    const double un = u / length, vn = v / length;
    switch (archetype) {
      case 0: {  // blade: tapered blade plus handle
        if (un >= -0.5 && un < 0.1) return std::abs(vn) <= 0.13 * (un + 0.5) / 0.6 + 0.02;
        return un >= 0.1 && un <= 0.5 && std::abs(vn) <= 0.09;
      }
      case 1: {  // shears: two crossed blades with finger rings
        for (double sgn : {-1.0, 1.0}) {
          const double ca = std::cos(sgn * 0.3), sa = std::sin(sgn * 0.3);
          const double ur = un * ca + vn * sa, vr = -un * sa + vn * ca;
          if (ur >= -0.5 && ur <= 0.15 && std::abs(vr) <= 0.06) return true;
          const double ru = ur - 0.3, rv = vr;
          const double r2 = ru * ru + rv * rv;
          if (r2 <= 0.15 * 0.15 && r2 >= 0.08 * 0.08) return true;
        }
        return false;
      }
      case 2: {  // hook: long shaft with a perpendicular arm
        if (un >= -0.5 && un <= 0.5 && std::abs(vn) <= 0.08) return true;
        return un >= 0.3 && un <= 0.5 && vn >= -0.08 && vn <= 0.4;
      }
      case 3: {  // ring
        const double r2 = un * un + vn * vn;
        return r2 <= 0.25 && r2 >= 0.3 * 0.3;
      }
      case 4:  // bar
        return std::abs(un) <= 0.5 && std::abs(vn) <= 0.16;
    }
    return false;
  }
};

// Pseudo-colour transmittance per archetype: metals blue, mixed green,
// organics orange.
inline std::array<double, 3> archetype_colour(int a) {
  static const std::array<std::array<double, 3>, 5> c{{{0.15, 0.35, 0.85},
                                                       {0.2, 0.55, 0.75},
                                                       {0.3, 0.25, 0.8},
                                                       {0.3, 0.75, 0.3},
                                                       {0.9, 0.55, 0.15}}};
  return c[static_cast<std::size_t>(a)];
}

inline std::vector<std::uint8_t> rasterize(const Shape& s, int h, int w) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(h) * w, 0);
  const double r = std::max({s.length, s.a, s.b}) * 1.5 + 2;
  const int y0 = std::max(0, static_cast<int>(s.cy - r)), y1 = std::min(h, static_cast<int>(s.cy + r) + 1);
  const int x0 = std::max(0, static_cast<int>(s.cx - r)), x1 = std::min(w, static_cast<int>(s.cx + r) + 1);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m[static_cast<std::size_t>(y) * w + x] = s.contains(x + 0.5, y + 0.5) ? 1 : 0;
  return m;
}

inline std::array<int, 4> mask_bounds(const std::vector<std::uint8_t>& m, int h, int w) {
  int xmin = w, ymin = h, xmax = -1, ymax = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (m[static_cast<std::size_t>(y) * w + x]) {
        xmin = std::min(xmin, x), xmax = std::max(xmax, x);
        ymin = std::min(ymin, y), ymax = std::max(ymax, y);
      }
  return {xmin, ymin, xmax + 1, ymax + 1};
}

struct Scene {
  AnnotatedImage item;
  SceneMasks masks;
};

// One attempt at an image; empty optional if the ratio range was not met in
// 100 occluder placements.
inline std::optional<Scene> try_scene(const SynthConfig& cfg, std::uint64_t seed, const std::string& id) {
  std::mt19937_64 gen(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen); };
  auto irange = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); };
  const int h = cfg.height, w = cfg.width;
  const double base = std::min(h, w);

  std::vector<Shape> targets;
  std::vector<std::vector<std::uint8_t>> tmasks;
  std::vector<std::array<int, 4>> tboxes;
  const int n_targets = irange(cfg.targets_min, cfg.targets_max);
  for (int t = 0, tries = 0; t < n_targets && tries < 200; ++tries) {
    const auto& name = cfg.classes[static_cast<std::size_t>(irange(0, static_cast<int>(cfg.classes.size()) - 1))];
    const int arch = static_cast<int>(std::find(synthetic_classes().begin(), synthetic_classes().end(), name) -
                                      synthetic_classes().begin());
    Shape s{arch, 0, 0, uni(cfg.size_min, cfg.size_max) * base, uni(0, std::numbers::pi)};
    const double margin = s.length * 0.55 + 1;
    s.cx = uni(margin, w - margin);
    s.cy = uni(margin, h - margin);
    s.colour = archetype_colour(arch);
    s.alpha = uni(0.75, 0.95);
    auto m = rasterize(s, h, w);
    auto bb = mask_bounds(m, h, w);
    if (bb[2] <= bb[0] || bb[3] <= bb[1]) continue;
    bool overlap = false;
    for (const auto& o : tboxes)
      overlap = overlap || intersection_area({double(bb[0]), double(bb[1]), double(bb[2]), double(bb[3])},
                                             {double(o[0]), double(o[1]), double(o[2]), double(o[3])}) > 0;
    if (overlap) continue;
    targets.push_back(s);
    tmasks.push_back(std::move(m));
    tboxes.push_back(bb);
    ++t;
  }
  if (targets.empty()) return std::nullopt;

  // The image draws one occlusion level among those the ratio range reaches;
  // every target aims for a ratio inside that level so levels stay balanced.
  const std::array<double, 4> edges{0.0, cfg.thresholds.partial, cfg.thresholds.severe, 1.0};
  std::vector<int> levels;
  for (int l = 0; l < 3; ++l)
    if (std::max(edges[l], cfg.ratio_min) < std::min(edges[l + 1], cfg.ratio_max) ||
        (cfg.ratio_min == cfg.ratio_max && assign_occlusion_level(cfg.ratio_min, cfg.thresholds) == l + 1))
      levels.push_back(l);
  const int level = levels[static_cast<std::size_t>(irange(0, static_cast<int>(levels.size()) - 1))];
  const double lo = std::max(edges[level], cfg.ratio_min), hi = std::min(edges[level + 1], cfg.ratio_max);
  std::vector<double> desired;
  for (std::size_t t = 0; t < targets.size(); ++t) desired.push_back(lo < hi ? uni(lo, hi) : lo);

  static const std::array<std::array<double, 3>, 5> palette{
      {{0.95, 0.6, 0.2}, {0.45, 0.75, 0.35}, {0.3, 0.45, 0.85}, {0.55, 0.55, 0.55}, {0.85, 0.7, 0.3}}};
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<Shape> occ;
    const int n_occ = irange(cfg.occluders_min, cfg.occluders_max);
    for (int o = 0; o < n_occ; ++o) {
      Shape s{-1, 0, 0, 0, uni(0, std::numbers::pi)};
      s.rect = uni(0, 1) < 0.4;
      s.colour = palette[static_cast<std::size_t>(irange(0, 4))];
      s.alpha = uni(0.55, 0.95);
      s.texture_seed = gen();
      if (o < static_cast<int>(targets.size())) {
        // covering occluder: closer to the target centre for larger desired ratios
        const auto& t = targets[static_cast<std::size_t>(o)];
        s.a = uni(0.35, 0.8) * t.length;
        s.b = uni(0.3, 0.7) * t.length;
        const double dir = uni(0, 2 * std::numbers::pi);
        const double dist = (1.0 - desired[static_cast<std::size_t>(o)]) * (0.5 * t.length + s.a) * uni(0.7, 1.3);
        s.cx = t.cx + dist * std::cos(dir);
        s.cy = t.cy + dist * std::sin(dir);
      } else {
        s.a = uni(0.08, 0.25) * base;
        s.b = uni(0.06, 0.2) * base;
        s.cx = uni(0, w);
        s.cy = uni(0, h);
      }
      occ.push_back(s);
    }
    std::vector<std::uint8_t> union_mask(static_cast<std::size_t>(h) * w, 0);
    for (const auto& s : occ) {
      auto m = rasterize(s, h, w);
      for (std::size_t i = 0; i < m.size(); ++i) union_mask[i] |= m[i];
    }
    std::vector<double> ratios;
    bool ok = true;
    for (std::size_t t = 0; t < targets.size() && ok; ++t) {
      std::size_t in = 0, tot = 0;
      for (std::size_t i = 0; i < union_mask.size(); ++i)
        if (tmasks[t][i]) ++tot, in += union_mask[i];
      const double r = static_cast<double>(in) / static_cast<double>(tot);
      ratios.push_back(r);
      ok = r >= cfg.ratio_min && r <= cfg.ratio_max;
      if (static_cast<int>(t) < n_occ)
        ok = ok && std::abs(r - desired[t]) <= 0.15 && assign_occlusion_level(r, cfg.thresholds) == level + 1;
    }
    if (!ok) continue;

    // Render: background, then every object multiplies its transmittance in.
    Tensor<float> img({3, h, w});
    std::array<double, 3> tint{uni(0.93, 1.0), uni(0.93, 1.0), uni(0.9, 1.0)};
    std::array<std::array<double, 4>, 3> blobs;
    for (auto& b : blobs) b = {uni(0, w), uni(0, h), uni(0.15, 0.4) * base, uni(0.0, 0.12)};
    std::normal_distribution<double> noise(0.0, 0.01);
    std::vector<double> shade(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double d = 1.0;
        for (const auto& b : blobs) {
          const double dx = x - b[0], dy = y - b[1];
          d -= b[3] * std::exp(-(dx * dx + dy * dy) / (2 * b[2] * b[2]));
        }
        shade[static_cast<std::size_t>(y) * w + x] = d;
      }
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < shade.size(); ++i) img[c * shade.size() + i] = static_cast<float>(tint[c] * shade[i]);
    auto stamp = [&](const Shape& s, const std::vector<std::uint8_t>& m) {
      std::mt19937_64 tex(s.texture_seed);
      std::uniform_real_distribution<double> jitter(-0.04, 0.04);
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (!m[i]) continue;
        const double j = s.texture_seed ? jitter(tex) : 0.0;
        for (int c = 0; c < 3; ++c) {
          const double tr = std::clamp(1.0 - s.alpha * (1.0 - s.colour[c]) + j, 0.02, 1.0);
          img[c * m.size() + i] = static_cast<float>(img[c * m.size() + i] * tr);
        }
      }
    };
    for (std::size_t t = 0; t < targets.size(); ++t) stamp(targets[t], tmasks[t]);
    for (const auto& s : occ) stamp(s, rasterize(s, h, w));
    for (auto& v : img.vec()) v = std::round(std::clamp(v + static_cast<float>(noise(gen)), 0.0f, 1.0f) * 255.0f) / 255.0f;

    Scene scene;
    scene.item.id = id;
    scene.item.width = w;
    scene.item.height = h;
    scene.item.pixels = std::move(img);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      BoxAnnotation b{synthetic_classes()[static_cast<std::size_t>(targets[t].archetype)], tboxes[t][0], tboxes[t][1],
                      tboxes[t][2], tboxes[t][3], assign_occlusion_level(ratios[t], cfg.thresholds), ratios[t]};
      scene.item.boxes.push_back(b);
    }
    scene.item.occlusion_level = image_level(scene.item);
    scene.masks.targets = std::move(tmasks);
    scene.masks.occluders = std::move(union_mask);
    return scene;
  }
  return std::nullopt;
}

}  // namespace synth_detail

// Deterministic given cfg.seed. Image i uses a sub-seed derived from
// (seed, index) so any subset regenerates identically.
inline SyntheticSet generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SyntheticSet out;
  out.split.name = "synthetic";
  for (int i = 0; i < cfg.n_images; ++i) {
    const std::size_t index = cfg.index_offset + static_cast<std::size_t>(i);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", index);
    const std::string id = cfg.id_prefix + "_" + buf;
    std::uint64_t sub = derive_seed(cfg.seed, static_cast<std::uint64_t>(index));
    std::optional<synth_detail::Scene> scene;
    for (int redo = 0; redo < 50 && !scene; ++redo) {
      scene = synth_detail::try_scene(cfg, sub, id);
      if (!scene) {
        ++out.regenerated;
        sub = splitmix64(sub);
      }
    }
    if (!scene) throw ConfigError("synthetic generation: occlusion ratio range unsatisfiable for image " + id);
    out.split.items.push_back(std::move(scene->item));
    out.masks.push_back(std::move(scene->masks));
  }
  out.split.recount();
  return out;
}

struct SyntheticDataset {
  SyntheticSet train;
  SyntheticSet test;
};

// Disjoint train/test sets from one seed: test images continue the index
// sequence after the training images.
inline SyntheticDataset generate_train_test(SynthConfig cfg, int n_test) {
  if (n_test < 1 || n_test >= cfg.n_images) throw ConfigError("test split must hold between 1 and n-1 images");
  const int n_total = cfg.n_images;
  SyntheticDataset out;
  cfg.n_images = n_total - n_test;
  out.train = generate_synthetic(cfg);
  out.train.split.name = "train";
  cfg.index_offset += static_cast<std::size_t>(n_total - n_test);
  cfg.n_images = n_test;
  out.test = generate_synthetic(cfg);
  out.test.split.name = "test";
  return out;
}

inline nlohmann::json synth_config_json(const SynthConfig& cfg) {
  return {{"n_images", cfg.n_images},
          {"height", cfg.height},
          {"width", cfg.width},
          {"classes", cfg.classes},
          {"occluders", {cfg.occluders_min, cfg.occluders_max}},
          {"occlusion_range", {cfg.ratio_min, cfg.ratio_max}},
          {"targets", {cfg.targets_min, cfg.targets_max}},
          {"size_range", {cfg.size_min, cfg.size_max}},
          {"seed", cfg.seed},
          {"level_thresholds", {cfg.thresholds.partial, cfg.thresholds.severe}}};
}

// Per-box true occlusion ratios and levels.
inline nlohmann::json split_meta_json(const DatasetSplit& split, const std::string& name) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& it : split.items) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : it.boxes)
      boxes.push_back({{"class", b.class_name},
                       {"box", {b.xmin, b.ymin, b.xmax, b.ymax}},
                       {"ratio", b.occlusion_ratio.value_or(0.0)},
                       {"level", b.level.value_or(0)}});
    images.push_back({{"id", it.id}, {"split", name}, {"level", it.occlusion_level.value_or(0)}, {"boxes", boxes}});
  }
  return images;
}

}  // namespace doam
