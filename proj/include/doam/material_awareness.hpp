#pragma once

#include <algorithm>
#include <vector>

#include "doam/edge_guidance.hpp"

namespace doam {

// P = x || E, image channels first, edge channel last.
template <class T>
Tensor<T> concat_input(const ImageTensor<T>& image, const ImageTensor<T>& edge) {
  if (image.rank() != 3 || edge.rank() != 3 || edge.dim(0) != 1 || image.dim(1) != edge.dim(1) ||
      image.dim(2) != edge.dim(2))
    throw ShapeError("concat_input: image " + shape_str(image.shape()) + " vs edge " + shape_str(edge.shape()));
  const int c = image.dim(0);
  std::vector<T> data(image.vec());
  data.insert(data.end(), edge.vec().begin(), edge.vec().end());
  return Tensor<T>({c + 1, image.dim(1), image.dim(2)}, std::move(data));
}

namespace detail {

inline void check_block_size(int k, int h, int w) {
  if (k < 1 || k > std::min(h, w))
    throw ConfigError("invalid region scale k=" + std::to_string(k) + " for " + std::to_string(h) + "x" +
                      std::to_string(w) + " map");
}

// In-place over `planes` consecutive HxW planes: every k x k cell anchored at
// multiples of k gets the mean of its in-bounds members.
template <class T>
void block_average_planes(const T* in, T* out, std::size_t planes, int h, int w, int k) {
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = in + p * h * w;
    T* dst = out + p * h * w;
    for (int r0 = 0; r0 < h; r0 += k) {
      const int r1 = std::min(r0 + k, h);
      for (int c0 = 0; c0 < w; c0 += k) {
        const int c1 = std::min(c0 + k, w);
        T acc{0};
        for (int r = r0; r < r1; ++r)
          for (int c = c0; c < c1; ++c) acc += src[r * w + c];
        const T mean = acc / static_cast<T>((r1 - r0) * (c1 - c0));
        for (int r = r0; r < r1; ++r)
          for (int c = c0; c < c1; ++c) dst[r * w + c] = mean;
      }
    }
  }
}

}  // namespace detail

// Region information aggregation: k x k block average broadcast back to full
// resolution. Works on [C,H,W] and [N,C,H,W]. Boundary cells that overrun the
// map are averaged over their in-bounds members only.
template <class T>
Tensor<T> block_average_broadcast(const Tensor<T>& f, int k) {
  if (f.rank() < 2) throw ShapeError("block_average_broadcast: rank too small");
  const int h = f.dim(-2), w = f.dim(-1);
  detail::check_block_size(k, h, w);
  Tensor<T> out(f.shape());
  detail::block_average_planes(f.data(), out.data(), f.size() / (static_cast<std::size_t>(h) * w), h, w, k);
  return out;
}

namespace ops {
template <class T>
Var<T> block_average(const Var<T>& x, int k) {
  const int h = x.value().dim(-2), w = x.value().dim(-1);
  Tensor<T> out = block_average_broadcast(x.value(), k);
  return make_result<T>(std::move(out), {x}, [h, w, k](Node<T>& self) {
    // Each output is a cell mean, so every member receives the cell's summed
    // gradient divided by the member count: the same block average.
    Tensor<T> g(self.grad.shape());
    doam::detail::block_average_planes(self.grad.data(), g.data(), g.size() / (static_cast<std::size_t>(h) * w), h, w, k);
    self.parents[0]->ensure_grad() += g;
  });
}
}  // namespace ops

// F_tmp3^k = F_tmp1 || blockavg_k(F_tmp1), [N,2C_r,H,W].
template <class T>
struct ScaleCandidate {
  int k;
  Var<T> feature;
};

template <class T>
using CandidateSet = std::vector<ScaleCandidate<T>>;

template <class T>
CandidateSet<T> build_candidates(const Var<T>& f_tmp1, const std::vector<int>& k_set) {
  CandidateSet<T> out;
  out.reserve(k_set.size());
  for (int k : k_set) out.push_back({k, ops::concat_channels<T>({f_tmp1, ops::block_average(f_tmp1, k)})});
  return out;
}

// One gated convolution per scale: 3x3 feature path and 3x3 single-channel
// gate path.
template <class T>
struct GatedBranch {
  Conv2d<T> feature;
  Conv2d<T> gate;

  GatedBranch() = default;
  explicit GatedBranch(int channels) : feature(channels, channels, 3, 1, 1), gate(channels, 1, 3, 1, 1) {}

  void init(std::uint64_t seed, const std::string& prefix) {
    feature.init(seed, join_path(prefix, "feature"));
    gate.init(seed, join_path(prefix, "gate"));
  }
  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    feature.visit(join_path(prefix, "feature"), fn);
    gate.visit(join_path(prefix, "gate"), fn);
  }
};

template <class T>
struct GateParams {
  std::vector<GatedBranch<T>> branches;
  Conv2d<T> projection;  // 1x1, 2C_r -> C_r
};

// Soft selection over the candidate set:
//   F_M = proj( sum_k sigmoid(gate_k * S_k) (.) (feature_k * S_k) )
template <class T>
Var<T> gated_select(const CandidateSet<T>& cands, const std::vector<GatedBranch<T>>& branches,
                    const Conv2d<T>& projection) {
  if (cands.empty() || cands.size() != branches.size())
    throw ShapeError("gated_select: " + std::to_string(branches.size()) + " gates for " +
                     std::to_string(cands.size()) + " candidates");
  Var<T> acc;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto& br = branches[i];
    Var<T> gated = ops::spatial_gate(ops::sigmoid(br.gate(cands[i].feature)), br.feature(cands[i].feature));
    acc = acc.defined() ? ops::add(acc, gated) : gated;
  }
  return projection(acc);
}

template <class T>
Var<T> gated_select(const CandidateSet<T>& cands, const GateParams<T>& gates) {
  return gated_select(cands, gates.branches, gates.projection);
}

// Material-awareness branch. With `gated` false the branch keeps a single
// scale and replaces the gate by the projection alone.
template <class T>
struct MaterialAwareness {
  using scalar_type = T;
  std::vector<ConvBlock<T>> blocks;
  std::vector<int> k_set;
  bool gated = true;
  std::vector<GatedBranch<T>> branches;
  Conv2d<T> projection;

  MaterialAwareness() = default;
  MaterialAwareness(int in_channels, int n2, int channels, std::vector<int> ks, bool use_gate = true)
      : k_set(std::move(ks)), gated(use_gate), projection(2 * channels, channels, 1, 1, 0) {
    if (n2 < 1 || channels < 1) throw ConfigError("MaterialAwareness: n2 and c_r must be positive");
    if (k_set.empty()) throw ConfigError("MaterialAwareness: k_set must not be empty");
    if (!gated && k_set.size() != 1) throw ConfigError("MaterialAwareness: ungated branch takes exactly one scale");
    blocks.emplace_back(in_channels, channels);
    for (int i = 1; i < n2; ++i) blocks.emplace_back(channels, channels);
    if (gated)
      for (std::size_t i = 0; i < k_set.size(); ++i) branches.emplace_back(2 * channels);
  }

  int channels() const { return blocks.back().conv.out_channels(); }

  void init(std::uint64_t seed, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].init(seed, join_path(prefix, "block" + std::to_string(i)));
    for (std::size_t i = 0; i < branches.size(); ++i) branches[i].init(seed, join_path(prefix, "gate" + std::to_string(i)));
    projection.init(seed, join_path(prefix, "proj"));
  }

  Var<T> ma_refine(const Var<T>& p, bool training) {
    return EdgeGuidance<T>::eg_refine(p, blocks, static_cast<int>(blocks.size()), training);
  }

  Var<T> operator()(const Var<T>& p, bool training) {
    Var<T> f_tmp1 = ma_refine(p, training);
    auto cands = build_candidates(f_tmp1, k_set);
    if (!gated) return projection(cands.front().feature);
    return gated_select(cands, branches, projection);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(join_path(prefix, "block" + std::to_string(i)), fn);
    for (std::size_t i = 0; i < branches.size(); ++i) branches[i].visit(join_path(prefix, "gate" + std::to_string(i)), fn);
    projection.visit(join_path(prefix, "proj"), fn);
  }
};

}  // namespace doam
