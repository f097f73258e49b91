#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "doam/nn.hpp"

namespace doam {

// Fixed Sobel kernels, applied as cross-correlation. Never trained.
struct SobelKernels {
  static constexpr std::array<std::array<int, 3>, 3> horizontal{{{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}}};
  static constexpr std::array<std::array<int, 3>, 3> vertical{{{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}}};
};

template <class T>
struct EdgePair {
  Tensor<T> horizontal;  // [1,H,W]
  Tensor<T> vertical;    // [1,H,W]
};

// Luminance 0.299 R + 0.587 G + 0.114 B.
template <class T>
ImageTensor<T> to_grayscale(const ImageTensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("to_grayscale: expected [3,H,W], got " + shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  Tensor<T> out({1, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      out.at(0, i, j) = T(0.299) * image.at(0, i, j) + T(0.587) * image.at(1, i, j) + T(0.114) * image.at(2, i, j);
  return out;
}

namespace detail {
template <class T>
Tensor<T> correlate3x3(const Tensor<T>& gray, const std::array<std::array<int, 3>, 3>& k) {
  const int h = gray.dim(1), w = gray.dim(2);
  Tensor<T> out({1, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      T acc{0};
      for (int a = -1; a <= 1; ++a) {
        const int y = i + a;
        if (y < 0 || y >= h) continue;
        for (int b = -1; b <= 1; ++b) {
          const int x = j + b;
          if (x < 0 || x >= w) continue;
          acc += static_cast<T>(k[a + 1][b + 1]) * gray.at(0, y, x);
        }
      }
      out.at(0, i, j) = acc;
    }
  return out;
}
}  // namespace detail

// Same-size Sobel responses with zero padding of one pixel.
template <class T>
EdgePair<T> sobel_edges(const ImageTensor<T>& gray) {
  if (gray.rank() != 3 || gray.dim(0) != 1 || gray.dim(1) < 3 || gray.dim(2) < 3)
    throw ShapeError("sobel_edges: expected [1,H,W] with H,W >= 3, got " + shape_str(gray.shape()));
  return {detail::correlate3x3(gray, SobelKernels::horizontal), detail::correlate3x3(gray, SobelKernels::vertical)};
}

// Euclidean magnitude divided by its per-image maximum. An all-zero magnitude
// stays zero.
template <class T>
ImageTensor<T> edge_magnitude(const EdgePair<T>& pair) {
  if (pair.horizontal.shape() != pair.vertical.shape())
    throw ShapeError("edge_magnitude: components differ in shape");
  Tensor<T> out(pair.horizontal.shape());
  T peak{0};
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T h = pair.horizontal[i], v = pair.vertical[i];
    out[i] = std::sqrt(h * h + v * v);
    peak = std::max(peak, out[i]);
  }
  if (peak > T{0})
    for (auto& v : out.vec()) v /= peak;
  return out;
}

// Edge image E of an RGB image.
template <class T>
ImageTensor<T> edge_image(const ImageTensor<T>& rgb) {
  return edge_magnitude(sobel_edges(to_grayscale(rgb)));
}

// N1 conv-BN-ReLU blocks turning the edge image into the edge-guidance
// feature F_E.
template <class T>
struct EdgeGuidance {
  using scalar_type = T;
  std::vector<ConvBlock<T>> blocks;

  EdgeGuidance() = default;
  EdgeGuidance(int n1, int channels) {
    if (n1 < 1 || channels < 1) throw ConfigError("EdgeGuidance: n1 and c_e must be positive");
    blocks.emplace_back(1, channels);
    for (int i = 1; i < n1; ++i) blocks.emplace_back(channels, channels);
  }

  int channels() const { return blocks.back().conv.out_channels(); }

  void init(std::uint64_t seed, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].init(seed, join_path(prefix, "block" + std::to_string(i)));
  }

  Var<T> operator()(const Var<T>& edge, bool training) { return eg_refine(edge, blocks, static_cast<int>(blocks.size()), training); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(join_path(prefix, "block" + std::to_string(i)), fn);
  }

  // Applies `blocks` in order to a [N,Cin,H,W] input.
  static Var<T> eg_refine(const Var<T>& input, std::vector<ConvBlock<T>>& params, int n, bool training) {
    if (static_cast<int>(params.size()) != n)
      throw ConfigError("refine: expected " + std::to_string(n) + " blocks, got " + std::to_string(params.size()));
    Var<T> x = input;
    for (auto& block : params) {
      if (block.conv.in_channels() != x.dim(1))
        throw ShapeError("refine: block expects " + std::to_string(block.conv.in_channels()) + " channels, input has " +
                         std::to_string(x.dim(1)));
      x = block(x, training);
    }
    return x;
  }
};

}  // namespace doam
