#pragma once

#include <optional>
#include <string>
#include <vector>

#include "doam/material_awareness.hpp"

namespace doam {

struct DoamConfig {
  int n1 = 2;
  int n2 = 2;
  int c_e = 32;
  int c_r = 32;
  std::vector<int> k_set{5, 10, 15};
  std::uint64_t seed = 0;
  // Initial bias of the fusion conv; sigmoid(2) ~ 0.88 leaves the detector
  // input nearly untouched at the start of training.
  double fusion_bias = 2.0;

  void validate() const {
    if (n1 < 1 || n2 < 1 || c_e < 1 || c_r < 1) throw ConfigError("DoamConfig: n1, n2, c_e, c_r must be positive");
    if (k_set.empty()) throw ConfigError("DoamConfig: k_set must not be empty");
    for (std::size_t i = 0; i < k_set.size(); ++i) {
      if (k_set[i] < 1) throw ConfigError("DoamConfig: k values must be positive");
      for (std::size_t j = 0; j < i; ++j)
        if (k_set[i] == k_set[j]) throw ConfigError("DoamConfig: k values must be distinct");
    }
  }
  int max_k() const { return *std::max_element(k_set.begin(), k_set.end()); }
};

// Which DOAM sub-modules are active.
enum class DoamMode {
  full,           // EG + MA with gated multi-scale selection
  without_ma,     // attention from F_E alone
  without_gate,   // MA with the single k = 10 candidate, no gate
};

// F_fus = W_m (F_E || F_M) + b_m with a 1x1 kernel and a single output channel.
template <class T>
Var<T> fuse(const Var<T>& f_e, const Var<T>& f_m, const Conv2d<T>& params) {
  if (f_m.defined()) {
    if (f_e.dim(2) != f_m.dim(2) || f_e.dim(3) != f_m.dim(3))
      throw ShapeError("fuse: F_E " + shape_str(f_e.shape()) + " vs F_M " + shape_str(f_m.shape()));
    return params(ops::concat_channels<T>({f_e, f_m}));
  }
  return params(f_e);
}

template <class T>
Var<T> attention_from_fusion(const Var<T>& f_fus) {
  if (f_fus.dim(1) != 1) throw ShapeError("attention_from_fusion: expected a single channel");
  return ops::sigmoid(f_fus);
}

template <class T>
AttentionMap<T> attention_from_fusion(const FeatureMap<T>& f_fus) {
  if (f_fus.rank() != 3 || f_fus.dim(0) != 1) throw ShapeError("attention_from_fusion: expected [1,H,W]");
  Tensor<T> out({f_fus.dim(1), f_fus.dim(2)});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ops::sigmoid_scalar(f_fus[i]);
  return out;
}

// F[c,i,j] = S[i,j] * P[c,i,j]
template <class T>
FeatureMap<T> apply_attention(const AttentionMap<T>& s, const Tensor<T>& p) {
  if (s.rank() != 2 || p.rank() != 3 || s.dim(0) != p.dim(1) || s.dim(1) != p.dim(2))
    throw ShapeError("apply_attention: S " + shape_str(s.shape()) + " vs P " + shape_str(p.shape()));
  Tensor<T> out(p.shape());
  const std::size_t hw = s.size();
  for (int c = 0; c < p.dim(0); ++c)
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = s[i] * p[c * hw + i];
  return out;
}

template <class T>
struct DoamOutput {
  Var<T> refined;    // F, [N,C+1,H,W]
  Var<T> attention;  // S, [N,1,H,W]
  Tensor<T> edge;    // E, [N,1,H,W]
  Var<T> input;      // P, [N,C+1,H,W]
  Var<T> f_e;
  Var<T> f_m;        // undefined without MA
};

// Edge images for a batch of RGB images [N,3,H,W] -> [N,1,H,W].
template <class T>
Tensor<T> batch_edge_images(const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("expected [N,3,H,W], got " + shape_str(images.shape()));
  std::vector<Tensor<T>> edges;
  for (int n = 0; n < images.dim(0); ++n) edges.push_back(edge_image(unstack(images, n)));
  return stack<T>(edges);
}

// The de-occlusion attention module.
template <class T>
struct Doam {
  using scalar_type = T;
  DoamConfig config;
  DoamMode mode = DoamMode::full;
  EdgeGuidance<T> eg;
  std::optional<MaterialAwareness<T>> ma;
  Conv2d<T> fusion;

  Doam() = default;
  explicit Doam(DoamConfig cfg, DoamMode m = DoamMode::full, int image_channels = 3) : config(std::move(cfg)), mode(m) {
    config.validate();
    eg = EdgeGuidance<T>(config.n1, config.c_e);
    int fused = config.c_e;
    if (mode == DoamMode::full) {
      ma.emplace(image_channels + 1, config.n2, config.c_r, config.k_set, true);
    } else if (mode == DoamMode::without_gate) {
      ma.emplace(image_channels + 1, config.n2, config.c_r, std::vector<int>{10}, false);
    }
    if (ma) fused += config.c_r;
    fusion = Conv2d<T>(fused, 1, 1, 1, 0);
    init(config.seed);
  }

  void init(std::uint64_t seed) {
    eg.init(seed, "eg");
    if (ma) ma->init(seed, "ma");
    fusion.init(seed, "fusion");
    fusion.bias.mutable_value().fill(static_cast<T>(config.fusion_bias));
  }

  // Algorithm: Sobel -> magnitude -> EG refine -> concat -> MA refine ->
  // candidates -> gated selection -> fuse -> sigmoid -> apply.
  DoamOutput<T> operator()(const Var<T>& images, bool training) {
    if (images.shape().size() != 4 || images.dim(2) < 3 || images.dim(3) < 3)
      throw ShapeError("doam: expected [N,C,H,W] with H,W >= 3, got " + shape_str(images.shape()));
    DoamOutput<T> out;
    out.edge = batch_edge_images(images.value());
    Var<T> edge(out.edge);
    out.f_e = eg(edge, training);
    out.input = ops::concat_channels<T>({images, edge});
    if (ma) out.f_m = (*ma)(out.input, training);
    out.attention = attention_from_fusion(fuse(out.f_e, out.f_m, fusion));
    out.refined = ops::spatial_gate(out.attention, out.input);
    return out;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    eg.visit(join_path(prefix, "eg"), fn);
    if (ma) ma->visit(join_path(prefix, "ma"), fn);
    fusion.visit(join_path(prefix, "fusion"), fn);
  }
};

// Single-image forward in evaluation mode. Returns refined [C+1,H,W] and
// attention [H,W].
template <class T>
std::pair<FeatureMap<T>, AttentionMap<T>> doam_forward(const ImageTensor<T>& image, Doam<T>& doam) {
  NoGradGuard guard;
  if (image.rank() != 3) throw ShapeError("doam_forward: expected [C,H,W]");
  auto out = doam(Var<T>(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})), false);
  const int h = image.dim(1), w = image.dim(2);
  return {unstack(out.refined.value(), 0), out.attention.value().reshaped({h, w})};
}

// 3x3 conv handing the refined map to a detector expecting `out_channels`.
// Initialised as a selector on the first channels so that a saturated
// attention map reproduces the raw image.
template <class T>
struct Adapter {
  using scalar_type = T;
  Conv2d<T> conv;

  Adapter() = default;
  Adapter(int in_channels, int out_channels) : conv(in_channels, out_channels, 3, 1, 1) { init_selector(); }

  void init_selector() {
    conv.weight.mutable_value().fill(T{0});
    conv.bias.mutable_value().fill(T{0});
    for (int c = 0; c < std::min(conv.in_channels(), conv.out_channels()); ++c)
      conv.weight.mutable_value().at(c, c, 1, 1) = T{1};
  }

  Var<T> operator()(const Var<T>& refined) const {
    if (refined.dim(1) != conv.in_channels())
      throw ShapeError("adapter: expects " + std::to_string(conv.in_channels()) + " channels, got " +
                       std::to_string(refined.dim(1)));
    return conv(refined);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) { conv.visit(prefix, fn); }
};

template <class T>
FeatureMap<T> adapt_to_detector(const FeatureMap<T>& refined, const Adapter<T>& adapter) {
  NoGradGuard guard;
  if (refined.rank() != 3) throw ShapeError("adapt_to_detector: expected [C,H,W]");
  auto out = adapter(Var<T>(refined.reshaped({1, refined.dim(0), refined.dim(1), refined.dim(2)})));
  return unstack(out.value(), 0);
}

}  // namespace doam
