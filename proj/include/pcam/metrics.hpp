#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "pcam/error.hpp"
#include "pcam/geometry.hpp"

namespace pcam {

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Geodesic angle between two rotations, acos((tr(R_gt^T R_est) - 1) / 2).
inline double rotation_error(const Mat3& r_est, const Mat3& r_gt) {
  const double c = ((r_gt.transpose() * r_est).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

inline double translation_error(const Vec3& t_est, const Vec3& t_gt) { return (t_est - t_gt).norm(); }

struct RegistrationResult {
  RigidTransform transform;
  double te = 0.0;
  double re = 0.0;
  bool success = false;
};

inline RegistrationResult score_registration(const RigidTransform& est, const RigidTransform& gt,
                                             double te_max, double re_max) {
  RegistrationResult r;
  r.transform = est;
  r.te = translation_error(est.translation(), gt.translation());
  r.re = rotation_error(est.rotation(), gt.rotation());
  r.success = r.te <= te_max && r.re <= re_max;
  return r;
}

/// The five registration columns: recall, mean errors over all pairs, and
/// mean errors over successful pairs (NaN when there are none).
struct RecallSummary {
  double recall = 0.0;
  double te_all = 0.0;
  double re_all = 0.0;
  double te = 0.0;
  double re = 0.0;
  std::size_t successes = 0;
  std::size_t count = 0;
};

/// Success is re-evaluated against the given thresholds; the stored
/// `success` flags are ignored.
inline RecallSummary recall(std::span<const RegistrationResult> results, double te_max, double re_max) {
  if (results.empty()) throw ParameterError("recall: no results");
  RecallSummary s;
  s.count = results.size();
  double te_ok = 0.0;
  double re_ok = 0.0;
  for (const auto& r : results) {
    s.te_all += r.te;
    s.re_all += r.re;
    if (r.te <= te_max && r.re <= re_max) {
      ++s.successes;
      te_ok += r.te;
      re_ok += r.re;
    }
  }
  const auto n = static_cast<double>(results.size());
  s.te_all /= n;
  s.re_all /= n;
  s.recall = static_cast<double>(s.successes) / n;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.te = s.successes ? te_ok / static_cast<double>(s.successes) : nan;
  s.re = s.successes ? re_ok / static_cast<double>(s.successes) : nan;
  return s;
}

/// Intrinsic Z-Y-X Euler angles (yaw, pitch, roll) in radians:
/// R = Rz(yaw) Ry(pitch) Rx(roll).
inline Vec3 euler_zyx(const Mat3& r) {
  const double sp = std::clamp(-r(2, 0), -1.0, 1.0);
  const double pitch = std::asin(sp);
  if (std::abs(sp) > 1.0 - 1e-12) {
    // Gimbal lock: roll folded into yaw.
    return {std::atan2(-r(0, 1), r(1, 1)), pitch, 0.0};
  }
  return {std::atan2(r(1, 0), r(0, 0)), pitch, std::atan2(r(2, 1), r(2, 2))};
}

struct RmseMae {
  double rmse_r_deg = 0.0;
  double mae_r_deg = 0.0;
  double rmse_t = 0.0;
  double mae_t = 0.0;
};

/// Rotation statistics pool the three Z-Y-X Euler angles (degrees) of the
/// residual R_gt^T R_est; translation statistics pool the components of
/// t_est - t_gt.
inline RmseMae rmse_mae_rotation_translation(std::span<const RigidTransform> estimates,
                                             std::span<const RigidTransform> truths) {
  if (estimates.empty() || estimates.size() != truths.size()) {
    throw ParameterError("rmse_mae: need equally many, nonempty estimates and ground truths");
  }
  RmseMae m;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const Vec3 e = euler_zyx(truths[i].rotation().transpose() * estimates[i].rotation());
    const Vec3 dt = estimates[i].translation() - truths[i].translation();
    for (int a = 0; a < 3; ++a) {
      const double deg = rad2deg(e(a));
      m.rmse_r_deg += deg * deg;
      m.mae_r_deg += std::abs(deg);
      m.rmse_t += dt(a) * dt(a);
      m.mae_t += std::abs(dt(a));
    }
  }
  const double n = 3.0 * static_cast<double>(estimates.size());
  m.rmse_r_deg = std::sqrt(m.rmse_r_deg / n);
  m.mae_r_deg /= n;
  m.rmse_t = std::sqrt(m.rmse_t / n);
  m.mae_t /= n;
  return m;
}

}  // namespace pcam
