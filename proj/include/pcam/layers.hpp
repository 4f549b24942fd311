#pragma once

// Point-convolution building blocks shared by the matching and confidence
// networks. A convolution is a PointNet-style local aggregator: for every
// point i and each of its k neighbors j, a shared two-layer MLP sees
// [x_j - x_i, f_j]; the neighbor responses are averaged.
//
// The first MLP layer is linear, so W [x_j - x_i, f_j] + b splits into a
// per-point term (x_j Wx + f_j Wf + b) minus a per-center term (x_i Wx), both
// computed once per point. The second layer is linear too and commutes with
// the mean, so it is applied after aggregation.

#include <cmath>
#include <string>
#include <vector>

#include "pcam/autodiff.hpp"
#include "pcam/geometry.hpp"
#include "pcam/optim.hpp"
#include "pcam/rng.hpp"

namespace pcam {

/// Coordinates and neighborhoods of one cloud, computed once per forward pass.
struct CloudContext {
  ad::Tensor coords;  // n x 3, constant
  IndexMatrix neighbors;

  static CloudContext build(const PointCloud& cloud, std::size_t k) {
    if (k > cloud.size()) {
      throw ShapeError("neighborhood size " + std::to_string(k) + " exceeds cloud size " + std::to_string(cloud.size()));
    }
    return CloudContext{coords_tensor(cloud), knn(cloud, cloud, k)};
  }

  std::size_t size() const { return neighbors.rows; }

  static ad::Tensor coords_tensor(const PointCloud& cloud) {
    std::vector<double> v;
    v.reserve(cloud.size() * 3);
    for (const auto& p : cloud) v.insert(v.end(), {p.x(), p.y(), p.z()});
    return ad::Tensor::constant({cloud.size(), 3}, std::move(v));
  }
};

inline ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b) {
  return ad::add_row_bias(ad::matmul(x, w), b);
}

class PointConv {
 public:
  PointConv() = default;

  /// `zero_output` initializes the output projection to zero.
  PointConv(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
            Rng& rng, bool zero_output = false)
      : in_(in), out_(out) {
    // w_xyz and w_feat are the two row blocks of one (3 + in) x hidden
    // matrix and share its fan-in.
    const double bound = std::sqrt(6.0 / static_cast<double>(3 + in));
    w_xyz_ = store.add_uniform(prefix + ".w_xyz", {3, hidden}, bound, rng);
    w_feat_ = store.add_uniform(prefix + ".w_feat", {in, hidden}, bound, rng);
    b_hidden_ = store.add_constant(prefix + ".b_hidden", {hidden}, 0.0);
    if (zero_output) {
      w_out_ = store.add_constant(prefix + ".w_out", {hidden, out}, 0.0);
    } else {
      w_out_ = store.add_he_uniform(prefix + ".w_out", hidden, out, rng);
    }
    b_out_ = store.add_constant(prefix + ".b_out", {out}, 0.0);
  }

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }

  ad::Tensor forward(const ad::Tensor& features, const CloudContext& ctx) const {
    if (features.dim(1) != in_) {
      throw ShapeError("point conv expects " + std::to_string(in_) + " channels, got " + std::to_string(features.dim(1)));
    }
    const ad::Tensor xyz = ad::matmul(ctx.coords, w_xyz_);
    const ad::Tensor per_point = ad::add_row_bias(ad::add(xyz, ad::matmul(features, w_feat_)), b_hidden_);
    const ad::Tensor pooled = ad::neighbor_relu_mean(per_point, xyz, ctx.neighbors);
    return linear(pooled, w_out_, b_out_);
  }

 private:
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  ad::Tensor w_xyz_, w_feat_, b_hidden_, w_out_, b_out_;
};

class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(ParameterStore& store, const std::string& prefix, std::size_t channels)
      : gamma_(store.add_constant(prefix + ".gamma", {channels}, 1.0)),
        beta_(store.add_constant(prefix + ".beta", {channels}, 0.0)) {}

  ad::Tensor forward(const ad::Tensor& x) const { return ad::instance_norm_rows(x, gamma_, beta_); }

 private:
  ad::Tensor gamma_, beta_;
};

/// conv -> IN -> ReLU -> conv -> IN, plus the (projected when the channel
/// count changes) input, then ReLU.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
      : conv1_(store, prefix + ".conv1", in, out, out, rng),
        norm1_(store, prefix + ".norm1", out),
        conv2_(store, prefix + ".conv2", out, out, out, rng),
        norm2_(store, prefix + ".norm2", out) {
    if (in != out) {
      proj_w_ = store.add_he_uniform(prefix + ".proj.w", in, out, rng);
      proj_b_ = store.add_constant(prefix + ".proj.b", {out}, 0.0);
    }
  }

  ad::Tensor forward(const ad::Tensor& x, const CloudContext& ctx) const {
    ad::Tensor h = ad::relu(norm1_.forward(conv1_.forward(x, ctx)));
    h = norm2_.forward(conv2_.forward(h, ctx));
    const ad::Tensor shortcut = proj_w_.defined() ? linear(x, proj_w_, proj_b_) : x;
    return ad::relu(ad::add(h, shortcut));
  }

  std::size_t out_channels() const { return conv2_.out_channels(); }

 private:
  PointConv conv1_;
  InstanceNorm norm1_;
  PointConv conv2_;
  InstanceNorm norm2_;
  ad::Tensor proj_w_, proj_b_;
};

/// Centered coordinates as the initial per-point features.
inline ad::Tensor centered_coords(const PointCloud& cloud) {
  const Vec3 c = cloud.centroid();
  std::vector<double> v;
  v.reserve(cloud.size() * 3);
  for (const auto& p : cloud) {
    const Vec3 d = p - c;
    v.insert(v.end(), {d.x(), d.y(), d.z()});
  }
  return ad::Tensor::constant({cloud.size(), 3}, std::move(v));
}

}  // namespace pcam
