#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "doam/attention_fusion.hpp"
#include "doam/detector.hpp"

namespace doam {

enum class AblationVariant { baseline, concat_only, doam_minus_ma, doam_minus_gate, full_doam };

inline std::string_view to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::baseline: return "baseline";
    case AblationVariant::concat_only: return "concat_only";
    case AblationVariant::doam_minus_ma: return "doam_minus_ma";
    case AblationVariant::doam_minus_gate: return "doam_minus_gate";
    case AblationVariant::full_doam: return "full_doam";
  }
  return "?";
}

inline AblationVariant parse_variant(std::string_view s) {
  for (auto v : {AblationVariant::baseline, AblationVariant::concat_only, AblationVariant::doam_minus_ma,
                 AblationVariant::doam_minus_gate, AblationVariant::full_doam})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

inline bool uses_attention(AblationVariant v) {
  return v == AblationVariant::doam_minus_ma || v == AblationVariant::doam_minus_gate || v == AblationVariant::full_doam;
}

struct ModelConfig {
  AblationVariant variant = AblationVariant::full_doam;
  DoamConfig doam;
  DetectorConfig detector;
  int height = 300;
  int width = 300;
  std::uint64_t seed = 0;

  void validate() const {
    doam.validate();
    detector.validate();
    if (height < 3 || width < 3) throw ConfigError("model input must be at least 3x3");
    if (uses_attention(variant)) {
      const int kmax = variant == AblationVariant::doam_minus_gate ? 10 : (variant == AblationVariant::full_doam ? doam.max_k() : 1);
      if (kmax > std::min(height, width))
        throw ConfigError("region scale " + std::to_string(kmax) + " exceeds input " + std::to_string(height) + "x" +
                          std::to_string(width));
    }
  }
};

template <class T>
struct ModelOutput {
  Var<T> predictions;
  std::optional<DoamOutput<T>> doam;
};

// Detector with an optional DOAM front end wired per ablation variant:
//   baseline        x -> detector
//   concat_only     (x || E) -> adapter -> detector
//   attention modes S (.) (x || E) -> adapter -> detector
template <class T>
struct DetectionModel {
  using scalar_type = T;
  ModelConfig config;
  std::optional<Doam<T>> doam;
  std::optional<Adapter<T>> adapter;
  TinyDetector<T> detector;
  std::vector<Anchor> anchors;

  DetectionModel() = default;
  explicit DetectionModel(ModelConfig cfg) : config(std::move(cfg)) {
    config.detector.in_channels = 3;
    config.validate();
    config.doam.seed = config.seed;
    switch (config.variant) {
      case AblationVariant::full_doam: doam.emplace(config.doam, DoamMode::full); break;
      case AblationVariant::doam_minus_ma: doam.emplace(config.doam, DoamMode::without_ma); break;
      case AblationVariant::doam_minus_gate: doam.emplace(config.doam, DoamMode::without_gate); break;
      default: break;
    }
    if (config.variant != AblationVariant::baseline) adapter.emplace(4, config.detector.in_channels);
    detector = TinyDetector<T>(config.detector, config.seed);
    anchors = make_anchors(config.detector, config.height, config.width);
  }

  // images [N,3,H,W]
  ModelOutput<T> operator()(const Tensor<T>& images, bool training) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config.height || images.dim(3) != config.width)
      throw ShapeError("model: expected [N,3," + std::to_string(config.height) + "," + std::to_string(config.width) +
                       "], got " + shape_str(images.shape()));
    ModelOutput<T> out;
    Var<T> x(images);
    if (doam) {
      out.doam = (*doam)(x, training);
      x = (*adapter)(out.doam->refined);
    } else if (adapter) {
      Var<T> edge(batch_edge_images(images));
      x = (*adapter)(ops::concat_channels<T>({x, edge}));
    }
    out.predictions = detector(x, training);
    return out;
  }

  void visit(const ParamVisitor<T>& fn) {
    if (doam) doam->visit("", fn);
    if (adapter) adapter->visit("adapter", fn);
    detector.visit("detector", fn);
  }

  std::size_t trainable_parameters() {
    std::size_t n = 0;
    visit([&](const std::string&, Var<T>& v, bool trainable) {
      if (trainable) n += v.value().size();
    });
    return n;
  }
};

}  // namespace doam
