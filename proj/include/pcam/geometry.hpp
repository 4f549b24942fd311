#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pcam/error.hpp"

namespace pcam {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Ordered set of 3D points. Indices are stable: other structures
/// (neighborhoods, correspondences, masks) refer to points by position.
class PointCloud {
 public:
  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> points) : points_(std::move(points)) {
    for (std::size_t i = 0; i < points_.size(); ++i) {
      if (!points_[i].allFinite()) {
        throw ParameterError("point " + std::to_string(i) + " has a non-finite coordinate");
      }
    }
  }

  std::size_t size() const noexcept { return points_.size(); }
  bool empty() const noexcept { return points_.empty(); }
  const Vec3& operator[](std::size_t i) const { return points_[i]; }
  const std::vector<Vec3>& points() const noexcept { return points_; }
  auto begin() const noexcept { return points_.begin(); }
  auto end() const noexcept { return points_.end(); }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points_) c += p;
    return points_.empty() ? c : Vec3(c / static_cast<double>(points_.size()));
  }

  /// Points at the given indices, in the given order.
  PointCloud select(std::span<const std::size_t> indices) const {
    std::vector<Vec3> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(points_.at(i));
    return PointCloud(std::move(out));
  }

  friend bool operator==(const PointCloud& a, const PointCloud& b) { return a.points_ == b.points_; }

 private:
  std::vector<Vec3> points_;
};

/// Rotation + translation. Construction checks that R is a proper rotation.
class RigidTransform {
 public:
  static constexpr double kOrthoTolerance = 1e-9;

  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    if (!rotation_.allFinite() || !translation_.allFinite()) {
      throw ParameterError("rigid transform has non-finite entries");
    }
    if (!is_rotation(rotation_)) throw ParameterError("matrix is not a proper rotation");
  }

  static RigidTransform identity() { return {}; }

  static bool is_rotation(const Mat3& r, double tol = kOrthoTolerance) {
    const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
  }

  const Mat3& rotation() const noexcept { return rotation_; }
  const Vec3& translation() const noexcept { return translation_; }

  Vec3 operator()(const Vec3& p) const { return rotation_ * p + translation_; }

  /// (this ∘ other): applies `other` first.
  RigidTransform operator*(const RigidTransform& other) const {
    return RigidTransform(Unchecked{}, rotation_ * other.rotation_,
                          rotation_ * other.translation_ + translation_);
  }

  RigidTransform inverse() const {
    const Mat3 rt = rotation_.transpose();
    return RigidTransform(Unchecked{}, rt, -rt * translation_);
  }

  /// Row-major R followed by t.
  std::array<double, 12> to_array() const {
    std::array<double, 12> out{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(3 * r + c)] = rotation_(r, c);
    for (int i = 0; i < 3; ++i) out[static_cast<std::size_t>(9 + i)] = translation_(i);
    return out;
  }

  static RigidTransform from_array(std::span<const double> v) {
    if (v.size() != 12) throw ParameterError("rigid transform needs 12 values");
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = v[static_cast<std::size_t>(3 * i + j)];
    return RigidTransform(r, Vec3(v[9], v[10], v[11]));
  }

 private:
  struct Unchecked {};
  // Products and inverses of rotations stay rotations up to round-off.
  RigidTransform(Unchecked, const Mat3& r, const Vec3& t) : rotation_(r), translation_(t) {}

  Mat3 rotation_;
  Vec3 translation_;
};

inline Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
  std::vector<Vec3> out;
  out.reserve(cloud.size());
  for (const auto& p : cloud) out.push_back(t(p));
  return PointCloud(std::move(out));
}

inline RigidTransform invert(const RigidTransform& t) { return t.inverse(); }

/// Row-major index matrix: row i holds `cols` indices.
struct IndexMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> data;

  std::uint32_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const std::uint32_t> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  friend bool operator==(const IndexMatrix&, const IndexMatrix&) = default;
};

/// Exact k nearest neighbors of every query point, ascending by distance,
/// ties broken by lower reference index. Brute force: the clouds handled
/// here are a few hundred points.
inline IndexMatrix knn(const PointCloud& reference, const PointCloud& queries, std::size_t k) {
  if (k == 0) throw ParameterError("knn: k must be positive");
  if (k > reference.size()) {
    throw ShapeError("knn: k = " + std::to_string(k) + " exceeds reference size " +
                     std::to_string(reference.size()));
  }
  IndexMatrix out{queries.size(), k, std::vector<std::uint32_t>(queries.size() * k)};
  std::vector<std::pair<double, std::uint32_t>> cand(reference.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const Vec3& x = queries[q];
    for (std::size_t r = 0; r < reference.size(); ++r) {
      cand[r] = {(reference[r] - x).squaredNorm(), static_cast<std::uint32_t>(r)};
    }
    auto kth = cand.begin() + static_cast<std::ptrdiff_t>(k);
    std::partial_sort(cand.begin(), kth, cand.end());
    for (std::size_t j = 0; j < k; ++j) out.data[q * k + j] = cand[j].second;
  }
  return out;
}

/// Index of the nearest reference point to `x` (lowest index on ties).
inline std::size_t nearest_index(const PointCloud& reference, const Vec3& x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < reference.size(); ++r) {
    const double d = (reference[r] - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = r;
    }
  }
  return best;
}

/// One centroid per occupied voxel, ordered by integer cell (z, then y, then x).
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) {
    throw ParameterError("voxel_downsample: voxel size must be positive");
  }
  using Key = std::tuple<std::int64_t, std::int64_t, std::int64_t>;
  std::map<Key, std::pair<Vec3, std::size_t>> cells;
  for (const auto& p : cloud) {
    const auto cell = [&](int axis) {
      return static_cast<std::int64_t>(std::floor(p(axis) / voxel_size));
    };
    auto& [sum, count] = cells[Key{cell(2), cell(1), cell(0)}];
    if (count == 0) sum.setZero();
    sum += p;
    ++count;
  }
  std::vector<Vec3> out;
  out.reserve(cells.size());
  for (const auto& [key, acc] : cells) out.push_back(acc.first / static_cast<double>(acc.second));
  return PointCloud(std::move(out));
}

/// Global minimizer of sum_i w_i |R src_i + t - dst_i|^2 (Kabsch with weights).
/// Throws DegenerateWeightsError when the weights sum to zero and
/// RankDeficiencyError when the weighted points are collinear or coincident.
inline RigidTransform weighted_procrustes(const PointCloud& src, const PointCloud& dst,
                                          std::span<const double> weights) {
  if (src.size() != dst.size() || src.size() != weights.size()) {
    throw ShapeError("weighted_procrustes: src, dst and weights must have equal length");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ParameterError("weighted_procrustes: weights must be finite and >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw DegenerateWeightsError("weighted_procrustes: weights sum to zero");

  Vec3 cs = Vec3::Zero();
  Vec3 cd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double w = weights[i] / total;
    cs += w * src[i];
    cd += w * dst[i];
  }
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (weights[i] == 0.0) continue;
    h += (weights[i] / total) * (src[i] - cs) * (dst[i] - cd).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  // Planar configurations (rank 2) still determine the rotation; rank < 2 does not.
  if (!(s(0) > 0.0) || s(1) <= 1e-10 * s(0)) {
    throw RankDeficiencyError("weighted_procrustes: weighted points are collinear or coincident");
  }
  const Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  if ((v * u.transpose()).determinant() < 0.0) v.col(2) *= -1.0;
  Mat3 r = v * u.transpose();
  return RigidTransform(r, cd - r * cs);
}

/// Unweighted Procrustes over paired points.
inline RigidTransform procrustes(const PointCloud& src, const PointCloud& dst) {
  const std::vector<double> w(src.size(), 1.0);
  return weighted_procrustes(src, dst, w);
}

struct IcpOptions {
  std::size_t max_iters = 50;
  double convergence_eps = 1e-10;
  double max_pair_dist = 0.1;
};

struct IcpResult {
  RigidTransform transform;
  double inlier_rms = 0.0;
  std::size_t inliers = 0;
  std::size_t iterations = 0;
  /// Set when T_init has no pair within max_pair_dist.
  bool no_progress = false;
};

namespace detail {

struct IcpPairs {
  std::vector<Vec3> src;
  std::vector<Vec3> dst;
  double rms = 0.0;
};

inline IcpPairs icp_pairs(const PointCloud& p, const PointCloud& q, const RigidTransform& t,
                          double max_pair_dist) {
  IcpPairs out;
  double sq = 0.0;
  const double lim = max_pair_dist * max_pair_dist;
  for (const auto& x : p) {
    const Vec3 y = t(x);
    const std::size_t j = nearest_index(q, y);
    const double d = (q[j] - y).squaredNorm();
    if (d <= lim) {
      out.src.push_back(x);
      out.dst.push_back(q[j]);
      sq += d;
    }
  }
  if (!out.src.empty()) out.rms = std::sqrt(sq / static_cast<double>(out.src.size()));
  return out;
}

inline double transform_change(const RigidTransform& a, const RigidTransform& b) {
  return std::max((a.rotation() - b.rotation()).cwiseAbs().maxCoeff(),
                  (a.translation() - b.translation()).cwiseAbs().maxCoeff());
}

}  // namespace detail

/// Point-to-point ICP from `init`. An iterate is accepted only if it does not
/// raise the inlier RMS, so the result is never worse than `init` under
/// that measure.
inline IcpResult icp_refine(const PointCloud& p, const PointCloud& q, const RigidTransform& init,
                            const IcpOptions& opt = {}) {
  if (p.empty() || q.empty()) throw ParameterError("icp_refine: clouds must be nonempty");
  IcpResult res{init, 0.0, 0, 0, false};
  auto pairs = detail::icp_pairs(p, q, init, opt.max_pair_dist);
  if (pairs.src.empty()) {
    res.no_progress = true;
    return res;
  }
  res.inlier_rms = pairs.rms;
  res.inliers = pairs.src.size();
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    RigidTransform next;
    try {
      next = procrustes(PointCloud(pairs.src), PointCloud(pairs.dst));
    } catch (const RankDeficiencyError&) {
      break;
    }
    auto next_pairs = detail::icp_pairs(p, q, next, opt.max_pair_dist);
    if (next_pairs.src.empty() || next_pairs.rms > res.inlier_rms) break;
    const double change = detail::transform_change(next, res.transform);
    res.transform = next;
    res.inlier_rms = next_pairs.rms;
    res.inliers = next_pairs.src.size();
    res.iterations = it + 1;
    pairs = std::move(next_pairs);
    if (change < opt.convergence_eps) break;
  }
  return res;
}

}  // namespace pcam
