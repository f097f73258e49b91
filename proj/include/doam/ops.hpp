#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "doam/autograd.hpp"

namespace doam::ops {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
inline Tensor<T>* grad_of(const std::shared_ptr<Node<T>>& p) {
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
}

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// col[(c*kh + i)*kw + j][oy*wo + ox] = x[c][oy*s - p + i][ox*s - p + j]
template <class T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, T* col) {
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        T* row = col + (static_cast<std::size_t>(ch * kh + i) * kw + j) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + i;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + j;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T{0};
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo, T* x) {
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const T* row = col + (static_cast<std::size_t>(ch * kh + i) * kw + j) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (static_cast<std::size_t>(ch) * h + iy) * w;
          const T* src = row + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + j;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// 2-D cross-correlation. x [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout]
// (may be undefined).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  using detail::MatRM;
  detail::require_rank4(x.shape(), "conv2d");
  const auto& ws = weight.shape();
  if (ws.size() != 4 || ws[1] != x.dim(1))
    throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(x.shape()));
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = ws[0], kh = ws[2], kw = ws[3];
  const int ho = detail::conv_out(h, kh, stride, pad), wo = detail::conv_out(w, kw, stride, pad);
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.value().size() != static_cast<std::size_t>(cout)))
    throw ShapeError("conv2d: bias size mismatch");
  const int k = cin * kh * kw, l = ho * wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  Tensor<T> out({n, cout, ho, wo});
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(k) * l);
  Eigen::Map<const MatRM<T>> wm(weight.value().data(), cout, k);
  for (int b = 0; b < n; ++b) {
    const T* xb = x.value().data() + static_cast<std::size_t>(b) * cin * h * w;
    if (!pointwise) detail::im2col(xb, cin, h, w, kh, kw, stride, pad, ho, wo, col.data());
    Eigen::Map<const MatRM<T>> cm(pointwise ? xb : col.data(), k, l);
    Eigen::Map<MatRM<T>> om(out.data() + static_cast<std::size_t>(b) * cout * l, cout, l);
    om.noalias() = wm * cm;
    if (has_bias)
      for (int o = 0; o < cout; ++o) om.row(o).array() += bias.value()[o];
  }

  std::vector<Var<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    Tensor<T>* gx = detail::grad_of(px);
    Tensor<T>* gw = detail::grad_of(pw);
    Tensor<T>* gb = has_bias ? detail::grad_of(self.parents[2]) : nullptr;
    std::vector<T> colbuf(pointwise ? 0 : static_cast<std::size_t>(k) * l);
    std::vector<T> dcol(static_cast<std::size_t>(k) * l);
    Eigen::Map<const MatRM<T>> wmat(pw->value.data(), cout, k);
    for (int b = 0; b < n; ++b) {
      Eigen::Map<const MatRM<T>> dy(self.grad.data() + static_cast<std::size_t>(b) * cout * l, cout, l);
      const T* xb = px->value.data() + static_cast<std::size_t>(b) * cin * h * w;
      if (gw) {
        if (!pointwise) detail::im2col(xb, cin, h, w, kh, kw, stride, pad, ho, wo, colbuf.data());
        Eigen::Map<const MatRM<T>> cm(pointwise ? xb : colbuf.data(), k, l);
        Eigen::Map<MatRM<T>> dw(gw->data(), cout, k);
        dw.noalias() += dy * cm.transpose();
      }
      if (gb)
        for (int o = 0; o < cout; ++o) (*gb)[o] += dy.row(o).sum();
      if (gx) {
        T* gxb = gx->data() + static_cast<std::size_t>(b) * cin * h * w;
        if (pointwise) {
          Eigen::Map<MatRM<T>> dxm(gxb, k, l);
          dxm.noalias() += wmat.transpose() * dy;
        } else {
          Eigen::Map<MatRM<T>> dc(dcol.data(), k, l);
          dc.noalias() = wmat.transpose() * dy;
          detail::col2im_add(dcol.data(), cin, h, w, kh, kw, stride, pad, ho, wo, gxb);
        }
      }
    }
  });
}

// Running statistics owned by a batch-norm layer. Updated in training mode.
template <class T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

// Per-channel normalisation over (N,H,W). Training mode normalises with batch
// statistics and updates `stats`; evaluation mode uses the running values.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats, bool training) {
  detail::require_rank4(x.shape(), "batch_norm");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c))
    throw ShapeError("batch_norm: affine parameter size mismatch");
  if (!(stats.eps > T{0})) throw ConfigError("batch_norm: eps must be positive");
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  std::vector<T> mean(c), invstd(c);
  const T* xv = x.value().data();
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double s = 0, s2 = 0;
      for (int b = 0; b < n; ++b) {
        const T* p = xv + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      for (int b = 0; b < n; ++b) {
        const T* p = xv + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) s2 += (p[i] - mu) * (p[i] - mu);
      }
      const double var = s2 / static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(stats.eps)));
      const double unbiased = m > 1 ? s2 / static_cast<double>(m - 1) : var;
      stats.running_mean[ch] = (T{1} - stats.momentum) * stats.running_mean[ch] + stats.momentum * static_cast<T>(mu);
      stats.running_var[ch] = (T{1} - stats.momentum) * stats.running_var[ch] + stats.momentum * static_cast<T>(unbiased);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      invstd[ch] = T{1} / std::sqrt(stats.running_var[ch] + stats.eps);
    }
  }
  Tensor<T> out(x.shape());
  const T* g = gamma.value().data();
  const T* bt = beta.value().data();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) out[off + i] = (xv[off + i] - mean[ch]) * invstd[ch] * g[ch] + bt[ch];
    }
  return make_result<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    auto& px = self.parents[0];
    Tensor<T>* gx = detail::grad_of(px);
    Tensor<T>* gg = detail::grad_of(self.parents[1]);
    Tensor<T>* gbeta = detail::grad_of(self.parents[2]);
    const T* xs = px->value.data();
    const T* dy = self.grad.data();
    const T* gam = self.parents[1]->value.data();
    for (int ch = 0; ch < c; ++ch) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int b = 0; b < n; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          const double xhat = (xs[off + i] - mean[ch]) * invstd[ch];
          sum_dy += dy[off + i];
          sum_dy_xhat += dy[off + i] * xhat;
        }
      }
      if (gg) (*gg)[ch] += static_cast<T>(sum_dy_xhat);
      if (gbeta) (*gbeta)[ch] += static_cast<T>(sum_dy);
      if (!gx) continue;
      const double md = static_cast<double>(m);
      for (int b = 0; b < n; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          if (training) {
            const double xhat = (xs[off + i] - mean[ch]) * invstd[ch];
            (*gx)[off + i] += static_cast<T>(gam[ch] * invstd[ch] / md *
                                             (md * dy[off + i] - sum_dy - xhat * sum_dy_xhat));
          } else {
            (*gx)[off + i] += gam[ch] * invstd[ch] * dy[off + i];
          }
        }
      }
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& px = self.parents[0];
    Tensor<T>& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (px->value[i] > T{0}) g[i] += self.grad[i];
  });
}

template <class T>
T sigmoid_scalar(T v) {
  return v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.value[i];
      g[i] += self.grad[i] * s * (T{1} - s);
    }
  });
}

// Channel concatenation of [N,Ci,H,W] tensors.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& v : xs) detail::require_rank4(v.shape(), "concat_channels");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int c = 0;
  for (const auto& v : xs) {
    if (v.dim(0) != n || v.dim(2) != h || v.dim(3) != w)
      throw ShapeError("concat_channels: mismatched shapes " + shape_str(xs[0].shape()) + " vs " + shape_str(v.shape()));
    c += v.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<T> out({n, c, h, w});
  for (int b = 0; b < n; ++b) {
    int co = 0;
    for (const auto& v : xs) {
      const int ci = v.dim(1);
      const T* src = v.value().data() + static_cast<std::size_t>(b) * ci * hw;
      std::copy(src, src + ci * hw, out.data() + (static_cast<std::size_t>(b) * c + co) * hw);
      co += ci;
    }
  }
  return make_result<T>(std::move(out), xs, [=](Node<T>& self) {
    for (int b = 0; b < n; ++b) {
      int co = 0;
      for (auto& p : self.parents) {
        const int ci = p->value.dim(1);
        if (p->requires_grad) {
          T* dst = p->ensure_grad().data() + static_cast<std::size_t>(b) * ci * hw;
          const T* src = self.grad.data() + (static_cast<std::size_t>(b) * c + co) * hw;
          for (std::size_t i = 0; i < ci * hw; ++i) dst[i] += src[i];
        }
        co += ci;
      }
    }
  });
}

// Channels [c0,c1) of a [N,C,H,W] tensor.
template <class T>
Var<T> narrow_channels(const Var<T>& x, int c0, int c1) {
  detail::require_rank4(x.shape(), "narrow_channels");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c0 < 0 || c1 > c || c0 >= c1) throw ShapeError("narrow_channels: bad range");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const int cc = c1 - c0;
  Tensor<T> out({n, cc, h, w});
  for (int b = 0; b < n; ++b) {
    const T* src = x.value().data() + (static_cast<std::size_t>(b) * c + c0) * hw;
    std::copy(src, src + cc * hw, out.data() + static_cast<std::size_t>(b) * cc * hw);
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->ensure_grad();
    for (int b = 0; b < n; ++b) {
      T* dst = g.data() + (static_cast<std::size_t>(b) * c + c0) * hw;
      const T* src = self.grad.data() + static_cast<std::size_t>(b) * cc * hw;
      for (std::size_t i = 0; i < cc * hw; ++i) dst[i] += src[i];
    }
  });
}

// out[n,c,i,j] = gate[n,0,i,j] * x[n,c,i,j]
template <class T>
Var<T> spatial_gate(const Var<T>& gate, const Var<T>& x) {
  detail::require_rank4(gate.shape(), "spatial_gate");
  detail::require_rank4(x.shape(), "spatial_gate");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gate.dim(0) != n || gate.dim(1) != 1 || gate.dim(2) != h || gate.dim(3) != w)
    throw ShapeError("spatial_gate: gate " + shape_str(gate.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<T> out(x.shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T* g = gate.value().data() + b * hw;
      const T* xv = x.value().data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      T* o = out.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) o[i] = g[i] * xv[i];
    }
  return make_result<T>(std::move(out), {gate, x}, [=](Node<T>& self) {
    auto& pg = self.parents[0];
    auto& px = self.parents[1];
    Tensor<T>* gg = detail::grad_of(pg);
    Tensor<T>* gx = detail::grad_of(px);
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T dy = self.grad[off + i];
          if (gg) (*gg)[b * hw + i] += dy * px->value[off + i];
          if (gx) (*gx)[off + i] += dy * pg->value[b * hw + i];
        }
      }
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
  Tensor<T> out(a.value());
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->ensure_grad() += self.grad;
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.value());
  for (auto& v : out.vec()) v *= factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

// Scalar sum_i a_i * w_i with a constant weight tensor.
template <class T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& weights) {
  if (a.value().size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  T s{0};
  for (std::size_t i = 0; i < weights.size(); ++i) s += a.value()[i] * weights[i];
  return make_result<T>(Tensor<T>({1}, std::vector<T>{s}), {a}, [weights](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  return weighted_sum(a, Tensor<T>(a.shape(), T{1}));
}

}  // namespace doam::ops
