#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "doam/checkpoint.hpp"
#include "doam/data.hpp"
#include "doam/evaluation.hpp"
#include "doam/model.hpp"

namespace doam {

struct TrainConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 8;  // 24 for full-size runs; 8 fits desk memory
  int epochs = 0;      // mandatory
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be set (>= 1)");
  }
};

// SGD with momentum and L2 weight decay on trainable tensors:
//   v <- m v + (g + wd w);  w <- w - lr v
template <class T>
class Sgd {
 public:
  Sgd(DetectionModel<T>& model, const TrainConfig& cfg) : cfg_(cfg) {
    model.visit([&](const std::string&, Var<T>& v, bool trainable) {
      if (trainable) params_.push_back(v);
    });
    velocity_.reserve(params_.size());
    for (auto& p : params_) velocity_.emplace_back(p.shape(), T{0});
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    const T lr = static_cast<T>(cfg_.learning_rate), m = static_cast<T>(cfg_.momentum),
            wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = params_[i].mutable_value();
      const auto& g = params_[i].grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T gj = g[j] + wd * w[j];
        v[j] = m * v[j] + gj;
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> velocity_;
};

// Images and targets at the model's input size.
struct PreparedSet {
  Tensor<float> images;  // [N,3,H,W]
  std::vector<std::vector<GroundTruth>> targets;
};

inline int class_index(const std::vector<std::string>& classes, const std::string& name) {
  auto it = std::find(classes.begin(), classes.end(), name);
  if (it == classes.end()) throw ConfigError("class '" + name + "' is not in the model's class list");
  return static_cast<int>(it - classes.begin());
}

inline PreparedSet prepare(DatasetSplit& split, const std::vector<std::string>& classes, int h, int w) {
  PreparedSet out;
  const std::size_t per = 3ULL * h * w;
  out.images = Tensor<float>({static_cast<int>(split.items.size()), 3, h, w});
  for (std::size_t i = 0; i < split.items.size(); ++i) {
    auto& item = split.items[i];
    item.load();
    AnnotatedImage sized = (item.height == h && item.width == w) ? item : resize_with_boxes(item, h, w);
    std::copy(sized.pixels.data(), sized.pixels.data() + per, out.images.data() + i * per);
    std::vector<GroundTruth> g;
    for (const auto& b : sized.boxes) g.push_back({class_index(classes, b.class_name), b.box()});
    out.targets.push_back(std::move(g));
  }
  return out;
}

inline Tensor<float> gather_batch(const Tensor<float>& images, const std::vector<std::size_t>& idx) {
  const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  Tensor<float> out({static_cast<int>(idx.size()), c, h, w});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(images.data() + idx[i] * per, images.data() + (idx[i] + 1) * per, out.data() + i * per);
  return out;
}

struct TrainHooks {
  std::ostream* log = nullptr;             // progress lines
  std::ostream* loss_csv = nullptr;        // epoch,step,loss
  std::filesystem::path checkpoint_dir;    // per-epoch checkpoints when set
  std::vector<std::string> classes;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> step_loss;
};

// Trains `model` in place. Order of samples is shuffled per epoch from a
// stream derived from (seed, epoch).
inline TrainResult train(DetectionModel<float>& model, const PreparedSet& data, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  const std::size_t n = data.targets.size();
  if (n == 0) throw ConfigError("train: dataset is empty");
  Sgd<float> opt(model, cfg);
  TrainResult res;
  std::vector<std::size_t> order(n);
  std::size_t global_step = 0;
  if (hooks.loss_csv) *hooks.loss_csv << "epoch,step,loss\n";
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 gen(derive_seed(derive_seed(cfg.seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), gen);
    double sum = 0;
    int steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + std::min(n, start + cfg.batch_size));
      std::vector<std::vector<GroundTruth>> gts;
      for (auto i : idx) gts.push_back(data.targets[i]);
      opt.zero_grad();
      auto out = model(gather_batch(data.images, idx), true);
      if (!all_finite(out.predictions.value()))
        throw DivergenceError("non-finite predictions at batch " + std::to_string(global_step),
                              static_cast<long>(global_step));
      auto loss = multibox_loss(out.predictions, model.anchors, gts, nullptr, hooks.log);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) throw DivergenceError("loss is not finite at batch " + std::to_string(global_step), static_cast<long>(global_step));
      loss.backward();
      opt.step();
      sum += lv;
      ++steps;
      res.step_loss.push_back(lv);
      if (hooks.loss_csv) *hooks.loss_csv << epoch << ',' << global_step << ',' << lv << '\n';
      ++global_step;
    }
    res.epoch_loss.push_back(sum / steps);
    if (hooks.log) *hooks.log << "epoch " << epoch << " mean loss " << sum / steps << '\n';
    if (!hooks.checkpoint_dir.empty()) {
      json extra = {{"epoch", epoch},
                    {"train", {{"learning_rate", cfg.learning_rate}, {"momentum", cfg.momentum},
                               {"weight_decay", cfg.weight_decay}, {"batch_size", cfg.batch_size},
                               {"epochs", cfg.epochs}, {"seed", cfg.seed}}}};
      save_checkpoint(hooks.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), model, hooks.classes, extra);
      save_checkpoint(hooks.checkpoint_dir / "last.ckpt", model, hooks.classes, extra);
    }
  }
  return res;
}

// Detections for every image of `split`, in the images' own pixel
// coordinates.
inline DetectionsByImage predict(DetectionModel<float>& model, DatasetSplit& split,
                                 const std::vector<std::string>& classes, const PredictOptions& opt = {},
                                 int batch_size = 16) {
  NoGradGuard guard;
  DetectionsByImage out;
  const int h = model.config.height, w = model.config.width;
  const int values = model.config.detector.values_per_anchor();
  for (std::size_t start = 0; start < split.items.size(); start += batch_size) {
    const std::size_t end = std::min(split.items.size(), start + batch_size);
    Tensor<float> batch({static_cast<int>(end - start), 3, h, w});
    const std::size_t per = 3ULL * h * w;
    for (std::size_t i = start; i < end; ++i) {
      auto& item = split.items[i];
      const auto& px = item.load();
      const Tensor<float> sized = (px.dim(1) == h && px.dim(2) == w) ? px : resize_bilinear(px, h, w);
      std::copy(sized.data(), sized.data() + per, batch.data() + (i - start) * per);
    }
    auto pred = model(batch, false).predictions.value();
    const std::size_t rows = model.anchors.size() * values;
    for (std::size_t i = start; i < end; ++i) {
      auto& item = split.items[i];
      const double sx = double(item.pixels.dim(2)) / w, sy = double(item.pixels.dim(1)) / h;
      auto dets = decode_predictions(pred.data() + (i - start) * rows, model.anchors, values, w, h, opt);
      auto& list = out[item.id];
      for (const auto& d : dets) {
        if (d.class_id < 0 || d.class_id >= static_cast<int>(classes.size())) continue;
        list.push_back({classes[d.class_id], d.score,
                        {d.box.xmin * sx, d.box.ymin * sy, d.box.xmax * sx, d.box.ymax * sy}});
      }
    }
  }
  return out;
}

}  // namespace doam
