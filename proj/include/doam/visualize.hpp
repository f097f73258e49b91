#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "doam/tensor.hpp"

namespace doam {

// Viridis sampled at 9 evenly spaced points, linearly interpolated.
inline std::array<float, 3> viridis(double t) {
  static constexpr float lut[9][3] = {
      {0.267f, 0.005f, 0.329f}, {0.283f, 0.141f, 0.458f}, {0.254f, 0.265f, 0.530f},
      {0.207f, 0.372f, 0.553f}, {0.164f, 0.471f, 0.558f}, {0.128f, 0.567f, 0.551f},
      {0.135f, 0.659f, 0.518f}, {0.478f, 0.821f, 0.318f}, {0.993f, 0.906f, 0.144f},
  };
  t = std::clamp(t, 0.0, 1.0) * 8.0;
  const int i = std::min(static_cast<int>(t), 7);
  const float f = static_cast<float>(t - i);
  return {lut[i][0] + f * (lut[i + 1][0] - lut[i][0]), lut[i][1] + f * (lut[i + 1][1] - lut[i][1]),
          lut[i][2] + f * (lut[i + 1][2] - lut[i][2])};
}

// Min-max normalised to [0,1]; a constant map becomes all zeros.
template <class T>
Tensor<T> normalize_minmax(const Tensor<T>& m) {
  Tensor<T> out(m.shape());
  if (m.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(m.vec().begin(), m.vec().end());
  const T range = *hi - *lo;
  if (!(range > T{0})) return out;
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = (m[i] - *lo) / range;
  return out;
}

// Colour-mapped attention map [H,W] -> [3,H,W].
inline Tensor<float> colorize(const Tensor<float>& attention) {
  if (attention.rank() != 2) throw ShapeError("colorize: expected [H,W]");
  const auto n = normalize_minmax(attention);
  const int h = attention.dim(0), w = attention.dim(1);
  Tensor<float> out({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto c = viridis(n[static_cast<std::size_t>(y) * w + x]);
      for (int k = 0; k < 3; ++k) out.at(k, y, x) = c[k];
    }
  return out;
}

// alpha * heatmap + (1 - alpha) * image
inline Tensor<float> overlay_attention(const Tensor<float>& image, const Tensor<float>& attention, float alpha = 0.5f) {
  if (image.rank() != 3 || image.dim(0) != 3 || attention.rank() != 2 || image.dim(1) != attention.dim(0) ||
      image.dim(2) != attention.dim(1))
    throw ShapeError("overlay_attention: image " + shape_str(image.shape()) + " vs attention " +
                     shape_str(attention.shape()));
  const auto heat = colorize(attention);
  Tensor<float> out(image.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * heat[i] + (1 - alpha) * image[i];
  return out;
}

// Places [3,H,W] images left to right, separated by `gap` white columns.
inline Tensor<float> side_by_side(const std::vector<Tensor<float>>& images, int gap = 4) {
  if (images.empty()) throw ShapeError("side_by_side: no images");
  const int h = images.front().dim(1);
  int w = 0;
  for (const auto& im : images) {
    if (im.rank() != 3 || im.dim(0) != 3 || im.dim(1) != h) throw ShapeError("side_by_side: images must be [3,H,*] with equal H");
    w += im.dim(2);
  }
  w += gap * static_cast<int>(images.size() - 1);
  Tensor<float> out({3, h, w}, 1.0f);
  int x0 = 0;
  for (const auto& im : images) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < im.dim(2); ++x) out.at(c, y, x0 + x) = im.at(c, y, x);
    x0 += im.dim(2) + gap;
  }
  return out;
}

}  // namespace doam
