#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pcam.hpp"

namespace pcam::testing {

inline Mat3 random_rotation(Rng& rng) {
  // Uniform on SO(3) via a normalized Gaussian quaternion.
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

inline RigidTransform random_transform(Rng& rng, double translation_scale = 1.0) {
  return RigidTransform(random_rotation(rng),
                        translation_scale * Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
}

inline PointCloud random_cloud(std::size_t n, Rng& rng, double half_extent = 1.0) {
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < n; ++i) {
    pts.emplace_back(rng.uniform(-half_extent, half_extent), rng.uniform(-half_extent, half_extent),
                     rng.uniform(-half_extent, half_extent));
  }
  return PointCloud(std::move(pts));
}

/// Points on a small integer grid, so exact distance ties are common.
inline PointCloud grid_cloud(std::size_t n, Rng& rng, int extent = 3) {
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < n; ++i) {
    pts.emplace_back(static_cast<double>(rng.index(static_cast<std::size_t>(extent))),
                     static_cast<double>(rng.index(static_cast<std::size_t>(extent))),
                     static_cast<double>(rng.index(static_cast<std::size_t>(extent))));
  }
  return PointCloud(std::move(pts));
}

inline std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // extra step reductions taken near kinks
};

/// Compares backward() against central differences of the scalar `f` with
/// respect to the leaves in `inputs`. `f` must rebuild its graph from the
/// current leaf values on every call. When `per_tensor` is nonzero, only that
/// many entries (chosen by `rng`) of each input are probed. With `refine`, a probe
/// whose estimate changes when h shrinks fourfold is taken to straddle a
/// relu kink and is re-measured with smaller steps until two successive
/// estimates agree (down to h = 1e-9).
inline GradCheckResult grad_check(const std::function<ad::Tensor()>& f, std::vector<ad::Tensor> inputs,
                                  double h = 1e-6, std::size_t per_tensor = 0, Rng* rng = nullptr,
                                  bool refine = false) {
  for (auto& t : inputs) t.zero_grad();
  ad::backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());
  // Components far below the largest one are compared on the scale of the
  // largest, since finite-difference roundoff does not shrink with them.
  double scale = 0.0;
  for (const auto& g : analytic)
    for (double v : g) scale = std::max(scale, std::abs(v));
  const double floor = std::max(1e-6, 1e-3 * scale);
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k].mutable_values();
    std::vector<std::size_t> probe(x.size());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
    if (per_tensor && per_tensor < probe.size()) {
      for (std::size_t i = 0; i < per_tensor; ++i) std::swap(probe[i], probe[i + rng->index(probe.size() - i)]);
      probe.resize(per_tensor);
    }
    for (auto i : probe) {
      const double orig = x[i];
      auto central = [&](double step) {
        ad::NoGradGuard ng;
        x[i] = orig + step;
        const double fp = f().item();
        x[i] = orig - step;
        const double fm = f().item();
        x[i] = orig;
        return (fp - fm) / (2.0 * step);
      };
      double numeric = central(h);
      if (refine) {
        for (double step = h / 4.0; step >= 1e-9; step /= 4.0) {
          const double next = central(step);
          const bool stable = relative_error(numeric, next, floor) <= 1e-6;
          numeric = next;
          if (stable) break;
          ++res.refined;
        }
      }
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[k][i], numeric, floor));
      ++res.checked;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return res;
}

/// A RegistrationPair with full overlap: Q is T(P) shuffled, optionally noisy.
inline RegistrationPair full_overlap_pair(std::size_t n, Rng& rng, double noise = 0.0, double rotation_max_deg = 45.0) {
  SynthConfig sc;
  sc.n_points = std::max<std::size_t>(n, 32);
  sc.view_points = 0;
  const PointCloud scene = generate_scene(sc, rng.index(1u << 30));
  std::vector<std::size_t> idx(scene.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  idx.resize(n);
  RegistrationPair pr;
  pr.p = scene.select(idx);
  pr.t_gt = sample_transform(rng, deg2rad(rotation_max_deg), 0.5);
  std::vector<std::size_t> perm = idx;
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  std::vector<Vec3> q;
  for (auto i : perm) q.push_back(pr.t_gt(scene[i]) + noise * Vec3(rng.normal(), rng.normal(), rng.normal()));
  pr.q = PointCloud(std::move(q));
  pr.mask_p.assign(n, true);
  pr.mask_q.assign(n, true);
  return pr;
}

}  // namespace pcam::testing
