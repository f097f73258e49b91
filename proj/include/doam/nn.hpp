#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "doam/ops.hpp"
#include "doam/rng.hpp"

namespace doam {

// Visitor over every tensor a module owns, keyed by dotted path.
// `trainable` is false for running statistics and other buffers.
template <class T>
using ParamVisitor = std::function<void(const std::string& name, Var<T>& var, bool trainable)>;

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <class T>
Var<T> param(Shape shape, T fill = T{0}) {
  return Var<T>(Tensor<T>(std::move(shape), fill), true);
}

// He-normal initialisation drawn from a stream keyed by the parameter path.
template <class T>
void he_normal(Var<T>& w, std::uint64_t seed, const std::string& name) {
  std::mt19937_64 gen(derive_seed(seed, name));
  const auto& s = w.shape();
  const double fan_in = static_cast<double>(s[1]) * s[2] * s[3];
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w.mutable_value().vec()) v = static_cast<T>(dist(gen));
}

template <class T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride_, int pad_)
      : weight(param<T>({out_ch, in_ch, kernel, kernel})), bias(param<T>({out_ch})), stride(stride_), pad(pad_) {}

  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }
  int kernel() const { return weight.dim(2); }

  void init(std::uint64_t seed, const std::string& prefix) {
    he_normal(weight, seed, join_path(prefix, "weight"));
    bias.mutable_value().fill(T{0});
  }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(join_path(prefix, "weight"), weight, true);
    fn(join_path(prefix, "bias"), bias, true);
  }
};

template <class T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  Var<T> running_mean;
  Var<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : gamma(param<T>({channels}, T{1})),
        beta(param<T>({channels}, T{0})),
        running_mean(Tensor<T>({channels}, T{0})),
        running_var(Tensor<T>({channels}, T{1})) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    ops::BatchNormStats<T> stats{std::move(running_mean.mutable_value()), std::move(running_var.mutable_value()),
                                 momentum, eps};
    auto out = ops::batch_norm(x, gamma, beta, stats, training);
    running_mean.mutable_value() = std::move(stats.running_mean);
    running_var.mutable_value() = std::move(stats.running_var);
    return out;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(join_path(prefix, "gamma"), gamma, true);
    fn(join_path(prefix, "beta"), beta, true);
    fn(join_path(prefix, "running_mean"), running_mean, false);
    fn(join_path(prefix, "running_var"), running_var, false);
  }
};

// conv3x3 -> batch-norm -> ReLU. Holds W, b of one refinement step plus its
// normalisation parameters.
template <class T>
struct ConvBlock {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  ConvBlock() = default;
  ConvBlock(int in_ch, int out_ch, int stride = 1) : conv(in_ch, out_ch, 3, stride, 1), bn(out_ch) {}

  void init(std::uint64_t seed, const std::string& prefix) { conv.init(seed, join_path(prefix, "conv")); }

  Var<T> operator()(const Var<T>& x, bool training) { return ops::relu(bn(conv(x), training)); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    conv.visit(join_path(prefix, "conv"), fn);
    bn.visit(join_path(prefix, "bn"), fn);
  }
};

template <class T>
using ConvBlockParams = ConvBlock<T>;

template <class Module>
std::size_t count_trainable(Module& m) {
  using T = typename std::remove_cvref_t<decltype(m)>::scalar_type;
  std::size_t n = 0;
  m.visit("", [&](const std::string&, Var<T>& v, bool trainable) {
    if (trainable) n += v.value().size();
  });
  return n;
}

}  // namespace doam
