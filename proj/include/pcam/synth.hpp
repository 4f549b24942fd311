#pragma once

// Synthetic partial-overlap registration pairs.
//
// A pair is cut from one generated scene: each view keeps the points on one
// side of a plane ("camera half-space"), the two half-spaces facing each other
// so that their intersection is the overlap. Both views index into the same
// scene points, so overlapping points correspond exactly before noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <functional>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "pcam/error.hpp"
#include "pcam/geometry.hpp"
#include "pcam/rng.hpp"

namespace pcam {

enum class ShapeKind { box_room, multi_sphere, plane_clusters };

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::box_room: return "box-room";
    case ShapeKind::multi_sphere: return "multi-sphere";
    case ShapeKind::plane_clusters: return "plane-clusters";
  }
  return "?";
}

inline ShapeKind parse_shape_kind(const std::string& s) {
  if (s == "box-room") return ShapeKind::box_room;
  if (s == "multi-sphere") return ShapeKind::multi_sphere;
  if (s == "plane-clusters") return ShapeKind::plane_clusters;
  throw ConfigError("unknown shape kind '" + s + "'");
}

struct SynthConfig {
  std::size_t n_points = 512;      // scene size
  std::size_t view_points = 256;   // points kept per view; 0 keeps every cropped point
  double overlap_target = 0.5;
  double rotation_max = 45.0 * std::numbers::pi / 180.0;
  double translation_max = 0.5;
  double noise_sigma = 0.005;
  ShapeKind shape = ShapeKind::box_room;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_points < 32) throw ConfigError("scene needs at least 32 points");
    if (!(overlap_target > 0.0 && overlap_target <= 1.0)) throw ConfigError("overlap_target must lie in (0, 1]");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (!(rotation_max >= 0.0) || !(translation_max >= 0.0)) throw ConfigError("pose ranges must be >= 0");
    if (view_points > n_points) throw ConfigError("view_points exceeds the scene size");
  }
};

struct RegistrationPair {
  PointCloud p;
  PointCloud q;
  RigidTransform t_gt;  // maps P onto Q
  std::vector<bool> mask_p;
  std::vector<bool> mask_q;
  std::uint64_t seed = 0;

  static double fraction(const std::vector<bool>& mask) {
    if (mask.empty()) return 0.0;
    return static_cast<double>(std::count(mask.begin(), mask.end(), true)) / static_cast<double>(mask.size());
  }
  double overlap_p() const { return fraction(mask_p); }
  double overlap_q() const { return fraction(mask_q); }
};

inline Vec3 random_unit(Rng& rng) {
  // Uniform on the sphere.
  const double z = rng.uniform(-1.0, 1.0);
  const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(a), r * std::sin(a), z};
}

/// Uniform axis, angle uniform in [0, rotation_max], translation uniform in
/// the ball of radius translation_max.
inline RigidTransform sample_transform(Rng& rng, double rotation_max, double translation_max) {
  const Vec3 axis = random_unit(rng);
  const double angle = rng.uniform(0.0, rotation_max);
  const Vec3 dir = random_unit(rng);
  const double radius = translation_max * std::cbrt(rng.uniform());
  return RigidTransform(axis_angle(axis, angle), radius * dir);
}

namespace detail {

struct Surface {
  double area;
  std::function<Vec3(Rng&)> sample;
};

inline Vec3 box_surface_point(Rng& rng, const Vec3& lo, const Vec3& hi, bool with_bottom) {
  const Vec3 e = hi - lo;
  const double faces[6] = {e.y() * e.z(), e.y() * e.z(), e.x() * e.z(), e.x() * e.z(), e.x() * e.y(),
                           with_bottom ? e.x() * e.y() : 0.0};
  double total = 0.0;
  for (double f : faces) total += f;
  double r = rng.uniform(0.0, total);
  int face = 0;
  while (face < 5 && r >= faces[face]) r -= faces[face++];
  const double u = rng.uniform(), v = rng.uniform();
  switch (face) {
    case 0: return {lo.x(), lo.y() + u * e.y(), lo.z() + v * e.z()};
    case 1: return {hi.x(), lo.y() + u * e.y(), lo.z() + v * e.z()};
    case 2: return {lo.x() + u * e.x(), lo.y(), lo.z() + v * e.z()};
    case 3: return {lo.x() + u * e.x(), hi.y(), lo.z() + v * e.z()};
    case 4: return {lo.x() + u * e.x(), lo.y() + v * e.y(), hi.z()};
    default: return {lo.x() + u * e.x(), lo.y() + v * e.y(), lo.z()};
  }
}

inline std::vector<Surface> box_room(Rng& rng) {
  std::vector<Surface> s;
  // Floor and four walls of the unit cube.
  s.push_back({1.0, [](Rng& r) { return Vec3(r.uniform(), r.uniform(), 0.0); }});
  s.push_back({1.0, [](Rng& r) { return Vec3(0.0, r.uniform(), r.uniform()); }});
  s.push_back({1.0, [](Rng& r) { return Vec3(1.0, r.uniform(), r.uniform()); }});
  s.push_back({1.0, [](Rng& r) { return Vec3(r.uniform(), 0.0, r.uniform()); }});
  s.push_back({1.0, [](Rng& r) { return Vec3(r.uniform(), 1.0, r.uniform()); }});
  // Furniture: boxes standing on the floor, inside the room.
  const int n_furniture = 3 + static_cast<int>(rng.index(4));
  for (int i = 0; i < n_furniture; ++i) {
    const Vec3 size(rng.uniform(0.1, 0.35), rng.uniform(0.1, 0.35), rng.uniform(0.1, 0.5));
    const Vec3 lo(rng.uniform(0.0, 1.0 - size.x()), rng.uniform(0.0, 1.0 - size.y()), 0.0);
    const Vec3 hi = lo + size;
    const double area = 2.0 * (size.x() * size.z() + size.y() * size.z()) + size.x() * size.y();
    s.push_back({area, [lo, hi](Rng& r) { return box_surface_point(r, lo, hi, false); }});
  }
  return s;
}

inline std::vector<Surface> multi_sphere(Rng& rng) {
  std::vector<Surface> s;
  const int n = 3 + static_cast<int>(rng.index(4));
  for (int i = 0; i < n; ++i) {
    const double radius = rng.uniform(0.1, 0.3);
    const Vec3 c(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8));
    s.push_back({4.0 * std::numbers::pi * radius * radius,
                 [c, radius](Rng& r) { return Vec3(c + radius * random_unit(r)); }});
  }
  return s;
}

inline std::vector<Surface> plane_clusters(Rng& rng) {
  std::vector<Surface> s;
  const int n_planes = 2 + static_cast<int>(rng.index(2));
  for (int i = 0; i < n_planes; ++i) {
    const Vec3 normal = random_unit(rng);
    const Vec3 a = normal.unitOrthogonal();
    const Vec3 b = normal.cross(a);
    const Vec3 c(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7));
    const double half = rng.uniform(0.25, 0.45);
    s.push_back({4.0 * half * half, [=](Rng& r) {
                   return Vec3(c + r.uniform(-half, half) * a + r.uniform(-half, half) * b);
                 }});
  }
  const int n_clusters = 3 + static_cast<int>(rng.index(4));
  for (int i = 0; i < n_clusters; ++i) {
    const Vec3 c(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
    const double sigma = rng.uniform(0.02, 0.06);
    s.push_back({0.15, [c, sigma](Rng& r) { return Vec3(c + sigma * Vec3(r.normal(), r.normal(), r.normal())); }});
  }
  return s;
}

}  // namespace detail

/// Deterministic in `seed`. Box-room and multi-sphere scenes stay inside the
/// unit cube; plane-clusters scenes lie near it.
inline PointCloud generate_scene(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.n_points < 32) throw ConfigError("scene needs at least 32 points");
  Rng rng(mix_seed(seed));
  std::vector<detail::Surface> surfaces;
  switch (cfg.shape) {
    case ShapeKind::box_room: surfaces = detail::box_room(rng); break;
    case ShapeKind::multi_sphere: surfaces = detail::multi_sphere(rng); break;
    case ShapeKind::plane_clusters: surfaces = detail::plane_clusters(rng); break;
  }
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& s : surfaces) cumulative.push_back(total += s.area);
  std::vector<Vec3> pts;
  pts.reserve(cfg.n_points);
  for (std::size_t i = 0; i < cfg.n_points; ++i) {
    const double r = rng.uniform(0.0, total);
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const auto s = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), surfaces.size() - 1);
    pts.push_back(surfaces[s].sample(rng));
  }
  return PointCloud(std::move(pts));
}

inline PointCloud generate_scene(const SynthConfig& cfg) { return generate_scene(cfg, cfg.seed); }

namespace detail {

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

/// Draws `count` distinct elements of `from` (order randomized).
inline std::vector<std::size_t> draw(std::vector<std::size_t> from, std::size_t count, Rng& rng) {
  shuffle(from, rng);
  from.resize(count);
  return from;
}

struct ViewSplit {
  std::vector<std::size_t> p, q;  // scene indices
};

inline bool contains_sorted(const std::vector<std::size_t>& v, std::size_t x) {
  return std::binary_search(v.begin(), v.end(), x);
}

/// One cropping attempt; empty result when the overlap target is missed.
inline std::optional<ViewSplit> crop_views(const PointCloud& scene, const SynthConfig& cfg, Rng& rng) {
  const std::size_t n = scene.size();
  const std::size_t want = cfg.view_points ? cfg.view_points : 0;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (cfg.overlap_target >= 1.0) {
    auto idx = want ? draw(all, want, rng) : all;
    std::sort(idx.begin(), idx.end());
    return ViewSplit{idx, idx};
  }
  const Vec3 c = scene.centroid();
  const Vec3 d1 = random_unit(rng);
  // The second camera looks from roughly the opposite side.
  Vec3 d2 = (-d1 + 0.35 * random_unit(rng)).normalized();
  const double r = rng.uniform(cfg.overlap_target, std::min(1.0, cfg.overlap_target + 0.25));
  const double keep = 1.0 / (2.0 - r);  // fraction per view giving overlap r when the cuts are parallel
  auto cut = [&](const Vec3& d) {
    std::vector<double> proj(n);
    for (std::size_t i = 0; i < n; ++i) proj[i] = d.dot(scene[i] - c);
    std::vector<double> sorted = proj;
    const auto kth = static_cast<std::size_t>(std::ceil(keep * static_cast<double>(n))) - 1;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(kth), sorted.end());
    const double thr = sorted[kth];
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (proj[i] <= thr) idx.push_back(i);
    return idx;
  };
  std::vector<std::size_t> vp = cut(-d1), vq = cut(-d2);
  // vp holds points far along d1, vq points far along d2.
  std::vector<std::size_t> common, only_p, only_q;
  std::set_intersection(vp.begin(), vp.end(), vq.begin(), vq.end(), std::back_inserter(common));
  std::set_difference(vp.begin(), vp.end(), vq.begin(), vq.end(), std::back_inserter(only_p));
  std::set_difference(vq.begin(), vq.end(), vp.begin(), vp.end(), std::back_inserter(only_q));
  const double frac_p = static_cast<double>(common.size()) / static_cast<double>(vp.size());
  const double frac_q = static_cast<double>(common.size()) / static_cast<double>(vq.size());
  const double frac = std::min(frac_p, frac_q);
  if (frac < cfg.overlap_target) return std::nullopt;
  if (!want) return ViewSplit{vp, vq};

  // Subsample each view to `want` points, keeping the shared points shared.
  auto k_common = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(want)));
  k_common = std::max(k_common, want - std::min(want, std::min(only_p.size(), only_q.size())));
  if (k_common > common.size() || k_common > want) return std::nullopt;
  const auto shared = draw(common, k_common, rng);
  ViewSplit out{shared, shared};
  for (auto i : draw(only_p, want - k_common, rng)) out.p.push_back(i);
  for (auto i : draw(only_q, want - k_common, rng)) out.q.push_back(i);
  std::sort(out.p.begin(), out.p.end());
  std::sort(out.q.begin(), out.q.end());
  return out;
}

}  // namespace detail

/// Crops two overlapping views of `scene`, moves the second by a sampled
/// rigid motion and adds Gaussian noise to both. Throws GenerationError if
/// 100 attempts miss the overlap target.
inline RegistrationPair make_pair(const PointCloud& scene, const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed ^ 0x5bd1e995ULL));
  std::optional<detail::ViewSplit> split;
  for (int attempt = 0; attempt < 100 && !split; ++attempt) split = detail::crop_views(scene, cfg, rng);
  if (!split) throw GenerationError("could not reach overlap target " + std::to_string(cfg.overlap_target));

  RegistrationPair pair;
  pair.seed = seed;
  pair.t_gt = sample_transform(rng, cfg.rotation_max, cfg.translation_max);
  auto order_p = split->p;
  auto order_q = split->q;
  detail::shuffle(order_p, rng);
  detail::shuffle(order_q, rng);
  std::vector<std::size_t> sorted_p = split->p, sorted_q = split->q;  // already sorted
  std::vector<Vec3> p, q;
  for (auto i : order_p) {
    p.push_back(scene[i] + cfg.noise_sigma * Vec3(rng.normal(), rng.normal(), rng.normal()));
    pair.mask_p.push_back(detail::contains_sorted(sorted_q, i));
  }
  for (auto i : order_q) {
    q.push_back(pair.t_gt(scene[i]) + cfg.noise_sigma * Vec3(rng.normal(), rng.normal(), rng.normal()));
    pair.mask_q.push_back(detail::contains_sorted(sorted_p, i));
  }
  pair.p = PointCloud(std::move(p));
  pair.q = PointCloud(std::move(q));
  return pair;
}

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

/// Deterministic pair sequence. Split k draws seeds from
/// [base + k * 2^40, base + (k + 1) * 2^40), so splits never share a seed.
class Dataset {
 public:
  static constexpr std::uint64_t kSplitStride = std::uint64_t{1} << 40;

  Dataset(SynthConfig cfg, Split split, std::size_t count) : cfg_(cfg), split_(split), count_(count) {
    if (count == 0) throw ConfigError("dataset needs at least one pair");
    if (count >= kSplitStride) throw ConfigError("dataset too large");
    cfg_.validate();
  }

  std::size_t size() const { return count_; }
  Split split() const { return split_; }
  const SynthConfig& config() const { return cfg_; }

  std::uint64_t seed_of(std::size_t i) const {
    return cfg_.seed + static_cast<std::uint64_t>(split_) * kSplitStride + i;
  }

  RegistrationPair operator[](std::size_t i) const {
    if (i >= count_) throw ParameterError("dataset index out of range");
    const auto seed = seed_of(i);
    return make_pair(generate_scene(cfg_, seed), cfg_, seed);
  }

  class iterator {
   public:
    using value_type = RegistrationPair;
    using difference_type = std::ptrdiff_t;
    iterator(const Dataset* d, std::size_t i) : d_(d), i_(i) {}
    RegistrationPair operator*() const { return (*d_)[i_]; }
    iterator& operator++() {
      ++i_;
      return *this;
    }
    bool operator==(const iterator& o) const { return i_ == o.i_; }

   private:
    const Dataset* d_;
    std::size_t i_;
  };

  iterator begin() const { return {this, 0}; }
  iterator end() const { return {this, count_}; }

 private:
  SynthConfig cfg_;
  Split split_;
  std::size_t count_;
};

}  // namespace pcam
