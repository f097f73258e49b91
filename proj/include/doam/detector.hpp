#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "doam/boxes.hpp"
#include "doam/nn.hpp"

namespace doam {

struct AnchorSpec {
  double size;    // fraction of min(H, W)
  double aspect;  // width / height
};

// Reference single-stage detector: a stack of conv-BN-ReLU stages and two
// prediction heads reading from `head_stages`.
struct DetectorConfig {
  int in_channels = 3;
  int num_classes = 5;
  std::vector<int> widths{32, 64, 96, 128, 128};
  std::vector<int> strides{1, 2, 2, 2, 1};
  std::vector<int> head_stages{2, 4};
  std::vector<std::vector<AnchorSpec>> anchors{
      {{0.15, 1.0}, {0.22, 1.0}, {0.22, 2.0}, {0.22, 0.5}},
      {{0.32, 1.0}, {0.42, 1.0}, {0.42, 2.0}, {0.42, 0.5}},
  };

  int anchors_per_cell(std::size_t head) const { return static_cast<int>(anchors.at(head).size()); }
  int values_per_anchor() const { return num_classes + 1 + 4; }

  void validate() const {
    if (in_channels < 1 || num_classes < 1) throw ConfigError("DetectorConfig: channels and classes must be positive");
    if (widths.empty() || widths.size() != strides.size())
      throw ConfigError("DetectorConfig: widths and strides must be non-empty and equally long");
    if (head_stages.size() != anchors.size() || head_stages.empty())
      throw ConfigError("DetectorConfig: one anchor list per head required");
    for (int s : head_stages)
      if (s < 0 || s >= static_cast<int>(widths.size())) throw ConfigError("DetectorConfig: head stage out of range");
    for (const auto& a : anchors)
      if (a.empty()) throw ConfigError("DetectorConfig: empty anchor list");
  }
};

// Output grid (rows, cols) of every head for an input of h x w pixels.
inline std::vector<std::pair<int, int>> head_grids(const DetectorConfig& cfg, int h, int w) {
  std::vector<std::pair<int, int>> stage_hw;
  for (int s : cfg.strides) {
    h = (h + 2 - 3) / s + 1;
    w = (w + 2 - 3) / s + 1;
    stage_hw.emplace_back(h, w);
  }
  std::vector<std::pair<int, int>> out;
  for (int s : cfg.head_stages) out.push_back(stage_hw[s]);
  return out;
}

// Anchors in prediction order: head, row, column, anchor.
inline std::vector<Anchor> make_anchors(const DetectorConfig& cfg, int h, int w) {
  const auto grids = head_grids(cfg, h, w);
  const double base = std::min(h, w);
  std::vector<Anchor> out;
  for (std::size_t hd = 0; hd < grids.size(); ++hd) {
    const auto [gh, gw] = grids[hd];
    const double sy = static_cast<double>(h) / gh, sx = static_cast<double>(w) / gw;
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x)
        for (const auto& spec : cfg.anchors[hd]) {
          const double r = std::sqrt(spec.aspect);
          out.push_back({(x + 0.5) * sx, (y + 0.5) * sy, spec.size * base * r, spec.size * base / r});
        }
  }
  return out;
}

namespace ops {
// Reorders head maps [N, A*V, Hs, Ws] into [N, sum(Hs*Ws*A), V].
template <class T>
Var<T> flatten_heads(const std::vector<Var<T>>& heads, const std::vector<int>& anchors_per_cell, int values) {
  const int n = heads.at(0).dim(0);
  int total = 0;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].dim(1) != anchors_per_cell[i] * values) throw ShapeError("flatten_heads: channel count mismatch");
    total += heads[i].dim(2) * heads[i].dim(3) * anchors_per_cell[i];
  }
  Tensor<T> out({n, total, values});
  // index map: out position -> source offset within head i
  auto for_each = [&](auto&& fn) {
    for (int b = 0; b < n; ++b) {
      std::size_t row = static_cast<std::size_t>(b) * total;
      for (std::size_t i = 0; i < heads.size(); ++i) {
        const int a = anchors_per_cell[i], hs = heads[i].dim(2), ws = heads[i].dim(3);
        const std::size_t plane = static_cast<std::size_t>(hs) * ws;
        const std::size_t base = static_cast<std::size_t>(b) * a * values * plane;
        for (int y = 0; y < hs; ++y)
          for (int x = 0; x < ws; ++x)
            for (int k = 0; k < a; ++k, ++row)
              for (int v = 0; v < values; ++v)
                fn(i, base + (static_cast<std::size_t>(k * values + v) * plane + y * ws + x), row * values + v);
      }
    }
  };
  for_each([&](std::size_t i, std::size_t src, std::size_t dst) { out[dst] = heads[i].value()[src]; });
  return make_result<T>(std::move(out), heads, [=](Node<T>& self) {
    std::vector<Tensor<T>*> grads;
    for (auto& p : self.parents) grads.push_back(p->requires_grad ? &p->ensure_grad() : nullptr);
    for (int b = 0; b < n; ++b) {
      std::size_t row = static_cast<std::size_t>(b) * total;
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        const auto& hv = self.parents[i]->value;
        const int a = anchors_per_cell[i], hs = hv.dim(2), ws = hv.dim(3);
        const std::size_t plane = static_cast<std::size_t>(hs) * ws;
        const std::size_t base = static_cast<std::size_t>(b) * a * values * plane;
        for (int y = 0; y < hs; ++y)
          for (int x = 0; x < ws; ++x)
            for (int k = 0; k < a; ++k, ++row)
              if (grads[i])
                for (int v = 0; v < values; ++v)
                  (*grads[i])[base + (static_cast<std::size_t>(k * values + v) * plane + y * ws + x)] +=
                      self.grad[row * values + v];
      }
    }
  });
}
}  // namespace ops

template <class T>
struct TinyDetector {
  using scalar_type = T;
  DetectorConfig config;
  std::vector<ConvBlock<T>> stages;
  std::vector<Conv2d<T>> heads;

  TinyDetector() = default;
  explicit TinyDetector(DetectorConfig cfg, std::uint64_t seed = 0) : config(std::move(cfg)) {
    config.validate();
    int c = config.in_channels;
    for (std::size_t i = 0; i < config.widths.size(); ++i) {
      stages.emplace_back(c, config.widths[i], config.strides[i]);
      c = config.widths[i];
    }
    for (std::size_t h = 0; h < config.head_stages.size(); ++h)
      heads.emplace_back(config.widths[config.head_stages[h]], config.anchors_per_cell(h) * config.values_per_anchor(), 3,
                         1, 1);
    init(seed);
  }

  void init(std::uint64_t seed) {
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].init(seed, "detector.stage" + std::to_string(i));
    for (std::size_t i = 0; i < heads.size(); ++i) {
      heads[i].init(seed, "detector.head" + std::to_string(i));
      // Small head weights keep initial class probabilities near uniform.
      for (auto& v : heads[i].weight.mutable_value().vec()) v *= T(0.1);
    }
  }

  // Raw head maps, one per head.
  std::vector<Var<T>> raw_heads(const Var<T>& input, bool training) {
    if (input.shape().size() != 4 || input.dim(1) != config.in_channels)
      throw ShapeError("detector: expected [N," + std::to_string(config.in_channels) + ",H,W], got " +
                       shape_str(input.shape()));
    std::vector<Var<T>> feats;
    Var<T> x = input;
    for (auto& s : stages) {
      x = s(x, training);
      feats.push_back(x);
    }
    std::vector<Var<T>> out;
    for (std::size_t h = 0; h < heads.size(); ++h) out.push_back(heads[h](feats[config.head_stages[h]]));
    return out;
  }

  // Per-anchor predictions [N, anchors, num_classes + 1 + 4]: background
  // logit, class logits, then box offsets.
  Var<T> operator()(const Var<T>& input, bool training) {
    std::vector<int> apc;
    for (std::size_t h = 0; h < heads.size(); ++h) apc.push_back(config.anchors_per_cell(h));
    return ops::flatten_heads(raw_heads(input, training), apc, config.values_per_anchor());
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].visit(join_path(prefix, "stage" + std::to_string(i)), fn);
    for (std::size_t i = 0; i < heads.size(); ++i) heads[i].visit(join_path(prefix, "head" + std::to_string(i)), fn);
  }
};

struct GroundTruth {
  int class_id;  // 0-based object class
  Box box;
};

// Anchor assignment of one image: -1 background, otherwise index into the
// image's ground truth.
struct MatchResult {
  std::vector<int> assigned;
  std::vector<int> excluded_gt;  // boxes that overlap no anchor at all
};

inline constexpr double kMatchIou = 0.5;
inline constexpr int kNegativeRatio = 3;

// Anchors with IoU >= 0.5 to a box are positives for their best box; each box
// additionally claims its single best anchor.
inline MatchResult match_anchors(const std::vector<Anchor>& anchors, const std::vector<GroundTruth>& gts) {
  MatchResult r;
  r.assigned.assign(anchors.size(), -1);
  std::vector<double> best(anchors.size(), 0.0);
  std::vector<Box> abox(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) abox[a] = anchors[a].box();
  for (std::size_t g = 0; g < gts.size(); ++g) {
    double gbest = 0;
    std::size_t gidx = 0;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const double v = iou(abox[a], gts[g].box);
      if (v > gbest) gbest = v, gidx = a;
      if (v >= kMatchIou && v > best[a]) best[a] = v, r.assigned[a] = static_cast<int>(g);
    }
    if (gbest <= 0) {
      r.excluded_gt.push_back(static_cast<int>(g));
      continue;
    }
    // forced match for the box's best anchor
    best[gidx] = 2.0;
    r.assigned[gidx] = static_cast<int>(g);
  }
  return r;
}

inline double smooth_l1(double d) {
  const double a = std::abs(d);
  return a < 1 ? 0.5 * d * d : a - 0.5;
}

struct LossBreakdown {
  double confidence = 0;
  double localization = 0;
  int positives = 0;
};

// Multibox loss: softmax cross-entropy over positives and the hardest
// negatives (3 per positive, at least 3 per image) plus smooth-L1 on the
// positives' offsets, all divided by max(1, total positives).
template <class T>
Var<T> multibox_loss(const Var<T>& predictions, const std::vector<Anchor>& anchors,
                     const std::vector<std::vector<GroundTruth>>& gts, LossBreakdown* breakdown = nullptr,
                     std::ostream* warnings = nullptr) {
  const int n = predictions.dim(0), na = predictions.dim(1), v = predictions.dim(2);
  const int k1 = v - 4;  // background + classes
  if (static_cast<std::size_t>(na) != anchors.size() || static_cast<int>(gts.size()) != n)
    throw ShapeError("multibox_loss: predictions do not match anchors / batch");
  const auto& p = predictions.value();
  Tensor<T> grad(predictions.shape());
  double conf = 0, loc = 0;
  int total_pos = 0;
  std::vector<double> prob(k1);
  for (int b = 0; b < n; ++b) {
    auto m = match_anchors(anchors, gts[b]);
    if (warnings)
      for (int g : m.excluded_gt)
        *warnings << "warning: ground-truth box " << g << " of batch item " << b << " matches no anchor; excluded\n";
    std::vector<double> bg_loss(na);
    std::vector<int> negatives;
    int pos = 0;
    for (int a = 0; a < na; ++a) {
      const T* row = p.data() + (static_cast<std::size_t>(b) * na + a) * v;
      double mx = row[0];
      for (int c = 1; c < k1; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double z = 0;
      for (int c = 0; c < k1; ++c) z += std::exp(row[c] - mx);
      bg_loss[a] = std::log(z) + mx - row[0];
      if (m.assigned[a] >= 0) ++pos;
      else negatives.push_back(a);
    }
    std::stable_sort(negatives.begin(), negatives.end(), [&](int x, int y) { return bg_loss[x] > bg_loss[y]; });
    const std::size_t keep = std::min<std::size_t>(negatives.size(), kNegativeRatio * std::max(pos, 1));
    negatives.resize(keep);
    total_pos += pos;
    auto add_ce = [&](int a, int target) {
      const std::size_t off = (static_cast<std::size_t>(b) * na + a) * v;
      const T* row = p.data() + off;
      double mx = row[0];
      for (int c = 1; c < k1; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double z = 0;
      for (int c = 0; c < k1; ++c) z += (prob[c] = std::exp(row[c] - mx));
      conf += std::log(z) + mx - row[target];
      for (int c = 0; c < k1; ++c) grad[off + c] = static_cast<T>(prob[c] / z - (c == target ? 1.0 : 0.0));
    };
    for (int a : negatives) add_ce(a, 0);
    for (int a = 0; a < na; ++a) {
      const int g = m.assigned[a];
      if (g < 0) continue;
      add_ce(a, gts[b][g].class_id + 1);
      const auto target = encode_box(gts[b][g].box, anchors[a]);
      const std::size_t off = (static_cast<std::size_t>(b) * na + a) * v + k1;
      for (int j = 0; j < 4; ++j) {
        const double d = p[off + j] - target[j];
        loc += smooth_l1(d);
        grad[off + j] = static_cast<T>(std::clamp(d, -1.0, 1.0));
      }
    }
  }
  const double norm = std::max(total_pos, 1);
  for (auto& g : grad.vec()) g = static_cast<T>(g / norm);
  if (breakdown) *breakdown = {conf / norm, loc / norm, total_pos};
  Tensor<T> value({1}, std::vector<T>{static_cast<T>((conf + loc) / norm)});
  return make_result<T>(std::move(value), {predictions}, [grad](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * grad[i];
  });
}

struct PredictOptions {
  double score_threshold = 0.01;
  double nms_iou = 0.45;
  std::size_t top_k = 200;
};

// Decodes one image's prediction rows [anchors, V] into detections.
template <class T>
std::vector<Detection> decode_predictions(const T* rows, const std::vector<Anchor>& anchors, int values, int width,
                                          int height, const PredictOptions& opt) {
  const int k1 = values - 4;
  std::vector<Detection> dets;
  std::vector<double> prob(k1);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const T* row = rows + a * values;
    double mx = row[0];
    for (int c = 1; c < k1; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0;
    for (int c = 0; c < k1; ++c) z += (prob[c] = std::exp(row[c] - mx));
    bool any = false;
    for (int c = 1; c < k1; ++c) any = any || prob[c] / z >= opt.score_threshold;
    if (!any) continue;
    const Box box = clip_box(decode_box({row[k1], row[k1 + 1], row[k1 + 2], row[k1 + 3]}, anchors[a]), width, height);
    if (!box.valid()) continue;
    for (int c = 1; c < k1; ++c)
      if (prob[c] / z >= opt.score_threshold) dets.push_back({c - 1, prob[c] / z, box});
  }
  return nms(std::move(dets), opt.nms_iou, opt.top_k);
}

}  // namespace doam
