#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "doam/model.hpp"

namespace doam {

enum class LayerKind { conv, batchnorm, pool, elementwise, sigmoid, concat };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::pool: return "pool";
    case LayerKind::elementwise: return "elementwise";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::concat: return "concat";
  }
  return "?";
}

struct LayerRecord {
  LayerKind kind;
  std::string name;
  int in_channels, out_channels;
  int kernel = 1, stride = 1, padding = 0;
  int in_h, in_w, out_h, out_w;
  bool bias = true;      // conv only
  bool fixed = false;    // conv with frozen weights (Sobel, luminance)
  bool chained = true;   // input is the previous record's output
};

struct ModelDescription {
  std::vector<LayerRecord> layers;

  void append(const ModelDescription& o) { layers.insert(layers.end(), o.layers.begin(), o.layers.end()); }
};

inline void validate_description(const ModelDescription& d) {
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    const auto& l = d.layers[i];
    auto fail = [&](const std::string& why) {
      throw ConfigError("inconsistent model description at layer " + std::to_string(i) + " (" + l.name + "): " + why);
    };
    if (l.in_channels < 1 || l.out_channels < 1 || l.in_h < 1 || l.in_w < 1 || l.out_h < 1 || l.out_w < 1)
      fail("non-positive dimension");
    const int fh = (l.in_h + 2 * l.padding - l.kernel) / std::max(l.stride, 1) + 1;
    const int fw = (l.in_w + 2 * l.padding - l.kernel) / std::max(l.stride, 1) + 1;
    switch (l.kind) {
      case LayerKind::conv:
        if (l.out_h != fh || l.out_w != fw) fail("conv output size");
        break;
      case LayerKind::pool:
        // plain pooling or pooling broadcast back to the input size
        if (!((l.out_h == fh && l.out_w == fw) || (l.out_h == l.in_h && l.out_w == l.in_w))) fail("pool output size");
        if (l.in_channels != l.out_channels) fail("pool changes channels");
        break;
      case LayerKind::batchnorm:
      case LayerKind::elementwise:
      case LayerKind::sigmoid:
        if (l.in_channels != l.out_channels || l.in_h != l.out_h || l.in_w != l.out_w) fail("shape must be preserved");
        break;
      case LayerKind::concat:
        if (l.out_channels <= l.in_channels || l.in_h != l.out_h || l.in_w != l.out_w) fail("concat shape");
        break;
    }
    if (i > 0 && l.chained) {
      const auto& p = d.layers[i - 1];
      if (p.out_channels != l.in_channels || p.out_h != l.in_h || p.out_w != l.in_w) fail("does not follow previous layer");
    }
  }
}

// Learnable parameters: conv out*in*k*k (+ out bias); batch-norm 2*out.
inline std::uint64_t count_parameters(const ModelDescription& d) {
  validate_description(d);
  std::uint64_t n = 0;
  for (const auto& l : d.layers) {
    if (l.kind == LayerKind::conv && !l.fixed)
      n += static_cast<std::uint64_t>(l.out_channels) * l.in_channels * l.kernel * l.kernel + (l.bias ? l.out_channels : 0);
    else if (l.kind == LayerKind::batchnorm)
      n += 2ULL * l.out_channels;
  }
  return n;
}

// Non-trainable tensors: batch-norm running statistics and frozen conv kernels.
inline std::uint64_t count_buffers(const ModelDescription& d) {
  validate_description(d);
  std::uint64_t n = 0;
  for (const auto& l : d.layers) {
    if (l.kind == LayerKind::batchnorm) n += 2ULL * l.out_channels;
    if (l.kind == LayerKind::conv && l.fixed)
      n += static_cast<std::uint64_t>(l.out_channels) * l.in_channels * l.kernel * l.kernel + (l.bias ? l.out_channels : 0);
  }
  return n;
}

// GFLOPs, counting multiply and add separately: conv 2*out*in*k*k*Ho*Wo;
// batch-norm, elementwise and sigmoid 2 per output element; pooling 1 per
// output element; concatenation free.
inline double estimate_flops(const ModelDescription& d, int c, int h, int w) {
  validate_description(d);
  if (!d.layers.empty()) {
    const auto& f = d.layers.front();
    if (f.in_channels != c || f.in_h != h || f.in_w != w)
      throw ConfigError("estimate_flops: description does not start at the given input shape");
  }
  double flops = 0;
  for (const auto& l : d.layers) {
    const double out_elems = static_cast<double>(l.out_channels) * l.out_h * l.out_w;
    switch (l.kind) {
      case LayerKind::conv:
        flops += 2.0 * l.out_channels * l.in_channels * l.kernel * l.kernel * l.out_h * l.out_w;
        break;
      case LayerKind::batchnorm:
      case LayerKind::elementwise:
      case LayerKind::sigmoid: flops += 2.0 * out_elems; break;
      case LayerKind::pool: flops += out_elems; break;
      case LayerKind::concat: break;
    }
  }
  return flops / 1e9;
}

inline double model_size_mb(std::uint64_t params) { return 4.0 * static_cast<double>(params) / (1024.0 * 1024.0); }

namespace detail {
struct DescBuilder {
  ModelDescription d;
  int c, h, w;

  void conv(const std::string& name, int out, int k, int stride, int pad, bool chained = true, bool fixed = false,
            bool bias = true) {
    const int oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
    d.layers.push_back({LayerKind::conv, name, c, out, k, stride, pad, h, w, oh, ow, bias, fixed, chained});
    c = out, h = oh, w = ow;
  }
  void same(LayerKind kind, const std::string& name, bool chained = true) {
    d.layers.push_back({kind, name, c, c, 1, 1, 0, h, w, h, w, true, false, chained});
  }
  void pool_broadcast(const std::string& name, int k, bool chained = true) {
    d.layers.push_back({LayerKind::pool, name, c, c, k, k, 0, h, w, h, w, true, false, chained});
  }
  void concat(const std::string& name, int extra, bool chained = true) {
    d.layers.push_back({LayerKind::concat, name, c, c + extra, 1, 1, 0, h, w, h, w, true, false, chained});
    c += extra;
  }
  void block(const std::string& name, int out, int stride = 1, bool chained = true) {
    conv(name + ".conv", out, 3, stride, 1, chained);
    same(LayerKind::batchnorm, name + ".bn");
    same(LayerKind::elementwise, name + ".relu");
  }
  void at(int channels) { c = channels; }
};
}  // namespace detail

// DOAM layers for a C x H x W input, including the adapter to a 3-channel
// detector input.
inline ModelDescription describe_doam(const DoamConfig& cfg, DoamMode mode, int c, int h, int w) {
  detail::DescBuilder b{{}, c, h, w};
  b.conv("gray", 1, 1, 1, 0, true, true, false);
  b.conv("sobel_h", 1, 3, 1, 1, true, true, false);
  b.at(1);
  b.conv("sobel_v", 1, 3, 1, 1, false, true, false);
  b.same(LayerKind::elementwise, "magnitude");
  for (int i = 0; i < cfg.n1; ++i) b.block("eg.block" + std::to_string(i), cfg.c_e, 1, i == 0);
  if (mode != DoamMode::without_ma) {
    b.at(c);
    b.concat("concat_p", 1, false);
    for (int i = 0; i < cfg.n2; ++i) b.block("ma.block" + std::to_string(i), cfg.c_r, 1, i == 0);
    const std::vector<int> ks = mode == DoamMode::full ? cfg.k_set : std::vector<int>{10};
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const std::string p = "ma.k" + std::to_string(ks[i]);
      b.at(cfg.c_r);
      b.pool_broadcast(p + ".pool", ks[i], false);
      b.concat(p + ".concat", cfg.c_r);
      if (mode == DoamMode::full) {
        b.conv(p + ".feature", 2 * cfg.c_r, 3, 1, 1);
        b.at(2 * cfg.c_r);
        b.conv(p + ".gate", 1, 3, 1, 1, false);
        b.same(LayerKind::sigmoid, p + ".gate_sigmoid");
        b.at(2 * cfg.c_r);
        b.same(LayerKind::elementwise, p + ".gating", false);
        if (i > 0) b.same(LayerKind::elementwise, p + ".accumulate");
      }
    }
    b.conv("ma.proj", cfg.c_r, 1, 1, 0);
    b.at(cfg.c_e);
    b.concat("concat_fusion", cfg.c_r, false);
  } else {
    b.at(cfg.c_e);
  }
  b.conv("fusion", 1, 1, 1, 0);
  b.same(LayerKind::sigmoid, "attention");
  b.at(c + 1);
  b.same(LayerKind::elementwise, "apply_attention", false);
  b.conv("adapter", 3, 3, 1, 1);
  return b.d;
}

inline ModelDescription describe_detector(const DetectorConfig& cfg, int h, int w) {
  detail::DescBuilder b{{}, cfg.in_channels, h, w};
  std::vector<std::array<int, 3>> stage_out;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    b.block("detector.stage" + std::to_string(i), cfg.widths[i], cfg.strides[i]);
    stage_out.push_back({b.c, b.h, b.w});
  }
  for (std::size_t hd = 0; hd < cfg.head_stages.size(); ++hd) {
    const auto s = stage_out[static_cast<std::size_t>(cfg.head_stages[hd])];
    b.c = s[0], b.h = s[1], b.w = s[2];
    b.conv("detector.head" + std::to_string(hd), cfg.anchors_per_cell(hd) * cfg.values_per_anchor(), 3, 1, 1, false);
  }
  return b.d;
}

// Whole model for a variant, matching DetectionModel's trainable parameters.
inline ModelDescription describe_model(const ModelConfig& cfg) {
  ModelDescription d;
  DetectorConfig det = cfg.detector;
  det.in_channels = 3;
  switch (cfg.variant) {
    case AblationVariant::baseline: break;
    case AblationVariant::concat_only: {
      detail::DescBuilder b{{}, 3, cfg.height, cfg.width};
      b.conv("gray", 1, 1, 1, 0, true, true, false);
      b.conv("sobel_h", 1, 3, 1, 1, true, true, false);
      b.at(1);
      b.conv("sobel_v", 1, 3, 1, 1, false, true, false);
      b.same(LayerKind::elementwise, "magnitude");
      b.at(3);
      b.concat("concat_p", 1, false);
      b.conv("adapter", 3, 3, 1, 1);
      d = b.d;
      break;
    }
    case AblationVariant::doam_minus_ma: d = describe_doam(cfg.doam, DoamMode::without_ma, 3, cfg.height, cfg.width); break;
    case AblationVariant::doam_minus_gate: d = describe_doam(cfg.doam, DoamMode::without_gate, 3, cfg.height, cfg.width); break;
    case AblationVariant::full_doam: d = describe_doam(cfg.doam, DoamMode::full, 3, cfg.height, cfg.width); break;
  }
  auto det_desc = describe_detector(det, cfg.height, cfg.width);
  if (!d.layers.empty()) det_desc.layers.front().chained = true;
  d.append(det_desc);
  return d;
}

}  // namespace doam
