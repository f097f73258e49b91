#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "doam/boxes.hpp"
#include "doam/data.hpp"

namespace doam {

// One detection of a single class, tagged with its image.
struct ScoredBox {
  std::size_t image;
  double score;
  Box box;
};

struct GtBox {
  std::size_t image;
  Box box;
};

struct PRPoint {
  double recall;
  double precision;
  double score_threshold;
};

struct APResult {
  double ap = 0;
  std::vector<PRPoint> curve;
  bool undefined = false;  // no ground truth for the class
};

// All-point interpolated AP for one class. Detections are ranked by score
// (stable: equal scores keep input order); each takes the highest-IoU
// still-unmatched box of its image with IoU >= threshold. A degenerate
// detection overlaps nothing and counts as a false positive.
inline APResult average_precision(const std::vector<ScoredBox>& dets, const std::vector<GtBox>& gts, double iou_thresh) {
  APResult r;
  if (gts.empty()) {
    r.undefined = true;
    return r;
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::map<std::size_t, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) by_image[gts[g].image].push_back(g);
  std::vector<bool> used(gts.size(), false);
  std::size_t tp = 0, fp = 0;
  for (std::size_t idx : order) {
    const auto& d = dets[idx];
    double best = -1;
    std::size_t best_g = 0;
    if (auto it = by_image.find(d.image); it != by_image.end() && d.box.valid())
      for (std::size_t g : it->second) {
        if (used[g]) continue;
        const double v = iou(d.box, gts[g].box);
        if (v > best) best = v, best_g = g;
      }
    if (best >= iou_thresh) {
      used[best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    r.curve.push_back({static_cast<double>(tp) / gts.size(), static_cast<double>(tp) / (tp + fp), d.score});
  }
  // area under the monotone (non-increasing) precision envelope
  double envelope = 0, prev_recall = 0, area = 0;
  std::vector<double> env(r.curve.size());
  for (std::size_t i = r.curve.size(); i-- > 0;) {
    envelope = std::max(envelope, r.curve[i].precision);
    env[i] = envelope;
  }
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    area += (r.curve[i].recall - prev_recall) * env[i];
    prev_recall = r.curve[i].recall;
  }
  r.ap = area;
  return r;
}

// Single-image convenience form.
inline double average_precision(const std::vector<Detection>& dets, const std::vector<Box>& gts, double iou_thresh) {
  std::vector<ScoredBox> d;
  for (const auto& x : dets) d.push_back({0, x.score, x.box});
  std::vector<GtBox> g;
  for (const auto& b : gts) g.push_back({0, b});
  return average_precision(d, g, iou_thresh).ap;
}

struct ClassCounts {
  int detections = 0;
  int ground_truths = 0;
};

struct LevelReport {
  double map = 0;
  std::map<std::string, double> per_class_ap;
};

struct EvalReport {
  double map = 0;
  std::map<std::string, double> per_class_ap;  // classes present in ground truth
  std::map<std::string, LevelReport> per_level;
  std::map<std::string, ClassCounts> counts;
  std::vector<std::string> flagged;  // classes detected but absent from ground truth
  double iou_threshold = 0.5;
};

// Detections keyed by image id; class given by name.
struct NamedDetection {
  std::string class_name;
  double score;
  Box box;
};
using DetectionsByImage = std::map<std::string, std::vector<NamedDetection>>;

namespace detail {
inline LevelReport evaluate_subset(const DetectionsByImage& dets, const std::vector<const AnnotatedImage*>& items,
                                   double iou_thresh, std::map<std::string, ClassCounts>* counts,
                                   std::vector<std::string>* flagged) {
  std::map<std::string, std::vector<ScoredBox>> d;
  std::map<std::string, std::vector<GtBox>> g;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (const auto& b : items[i]->boxes) g[b.class_name].push_back({i, b.box()});
    if (auto it = dets.find(items[i]->id); it != dets.end())
      for (const auto& x : it->second) d[x.class_name].push_back({i, x.score, x.box});
  }
  LevelReport r;
  double sum = 0;
  for (const auto& [name, gts] : g) {
    static const std::vector<ScoredBox> none;
    auto it = d.find(name);
    const double ap = average_precision(it == d.end() ? none : it->second, gts, iou_thresh).ap;
    r.per_class_ap[name] = ap;
    sum += ap;
  }
  r.map = r.per_class_ap.empty() ? 0.0 : sum / static_cast<double>(r.per_class_ap.size());
  if (counts) {
    for (const auto& [name, gts] : g) (*counts)[name].ground_truths = static_cast<int>(gts.size());
    for (const auto& [name, ds] : d) (*counts)[name].detections = static_cast<int>(ds.size());
  }
  if (flagged)
    for (const auto& [name, ds] : d)
      if (!g.count(name)) flagged->push_back(name);
  return r;
}
}  // namespace detail

// Per-class AP and mAP over a split; per-level sub-reports when images carry
// occlusion levels.
inline EvalReport evaluate(const DetectionsByImage& dets, const DatasetSplit& split, double iou_thresh = 0.5) {
  std::set<std::string> ids;
  std::set<std::string> known_classes;
  for (const auto& it : split.items) ids.insert(it.id);
  for (const auto& [id, ds] : dets) {
    if (!ids.count(id)) throw ConfigError("evaluate: unknown image id '" + id + "'");
    for (const auto& d : ds)
      if (!is_known_class(d.class_name)) throw ConfigError("evaluate: unknown class '" + d.class_name + "'");
  }
  EvalReport rep;
  rep.iou_threshold = iou_thresh;
  std::vector<const AnnotatedImage*> all;
  for (const auto& it : split.items) all.push_back(&it);
  auto whole = detail::evaluate_subset(dets, all, iou_thresh, &rep.counts, &rep.flagged);
  rep.map = whole.map;
  rep.per_class_ap = whole.per_class_ap;
  for (int lvl = 1; lvl <= 3; ++lvl) {
    std::vector<const AnnotatedImage*> sub;
    for (const auto& it : split.items)
      if (it.occlusion_level == lvl) sub.push_back(&it);
    if (!sub.empty()) rep.per_level["OL" + std::to_string(lvl)] = detail::evaluate_subset(dets, sub, iou_thresh, nullptr, nullptr);
  }
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["iou_threshold"] = r.iou_threshold;
  j["map"] = r.map;
  j["per_class_ap"] = r.per_class_ap;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [name, c] : r.counts) counts[name] = {{"detections", c.detections}, {"ground_truths", c.ground_truths}};
  j["counts"] = counts;
  nlohmann::json levels = nlohmann::json::object();
  for (const auto& [name, l] : r.per_level) levels[name] = {{"map", l.map}, {"per_class_ap", l.per_class_ap}};
  j["per_level"] = levels;
  j["flagged_classes"] = r.flagged;
  return j;
}

// Aligned text tables: mAP plus per-class AP, then mAP per occlusion level.
// Values in percent.
inline std::string to_text(const EvalReport& r, const std::string& method = "model") {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  const int w = std::max<int>(10, static_cast<int>(method.size()) + 2);
  os << std::left << std::setw(w) << "Method" << std::right << std::setw(8) << "mAP";
  for (const auto& [name, ap] : r.per_class_ap) os << std::setw(std::max<int>(9, static_cast<int>(name.size()) + 2)) << name;
  os << '\n' << std::left << std::setw(w) << method << std::right << std::setw(8) << r.map * 100;
  for (const auto& [name, ap] : r.per_class_ap) os << std::setw(std::max<int>(9, static_cast<int>(name.size()) + 2)) << ap * 100;
  os << '\n';
  if (!r.per_level.empty()) {
    os << '\n' << std::left << std::setw(w) << "Method" << std::right;
    for (const auto& [lvl, l] : r.per_level) os << std::setw(8) << lvl;
    os << '\n' << std::left << std::setw(w) << method << std::right;
    for (const auto& [lvl, l] : r.per_level) os << std::setw(8) << l.map * 100;
    os << '\n';
  }
  return os.str();
}

// CSV `image_id,class_name,score,xmin,ymin,xmax,ymax`, optional header line.
inline DetectionsByImage read_detections_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read detections file " + path.string());
  DetectionsByImage out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("image_id", 0) == 0)) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 7) throw ParseError(where + "expected 7 fields");
    try {
      std::size_t pos = 0;
      auto num = [&](const std::string& s) {
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
      };
      out[f[0]].push_back({f[1], num(f[2]), {num(f[3]), num(f[4]), num(f[5]), num(f[6])}});
    } catch (const std::exception&) {
      throw ParseError(where + "non-numeric field");
    }
  }
  return out;
}

inline void write_detections_csv(const fs::path& path, const DetectionsByImage& dets) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "image_id,class_name,score,xmin,ymin,xmax,ymax\n";
  out << std::setprecision(9);
  for (const auto& [id, ds] : dets)
    for (const auto& d : ds)
      out << id << ',' << d.class_name << ',' << d.score << ',' << d.box.xmin << ',' << d.box.ymin << ',' << d.box.xmax
          << ',' << d.box.ymax << '\n';
}

}  // namespace doam
