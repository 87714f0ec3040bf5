#pragma once

// Planar homographies on full-image pixel coordinates (pixel centres at
// integer positions): random generation, warping, normalized DLT estimation
// and the corner-based accuracy metrics.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "vmatcher/error.hpp"
#include "vmatcher/random.hpp"
#include "vmatcher/tensor.hpp"

namespace vmatcher {

using Homography = Eigen::Matrix3d;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline Point2 apply(const Homography& h, Point2 p) {
  const Eigen::Vector3d q = h * Eigen::Vector3d(p.x, p.y, 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

/// Ranges of the random warp. All zero gives the identity.
struct WarpJitter {
  double max_rotation_deg = 15.0;
  double min_scale = 0.8;
  double max_scale = 1.25;
  double max_translation = 0.1;  // fraction of the image extent
  double max_perspective = 1e-4;

  static WarpJitter none() { return {0.0, 1.0, 1.0, 0.0, 0.0}; }
};

/// Rotation and scale about the image centre, then translation, with a
/// small projective term. Resamples when the linear part is near-singular.
inline Homography random_homography(Rng& rng, std::size_t width, std::size_t height, const WarpJitter& j = {}) {
  const double cx = (static_cast<double>(width) - 1.0) / 2.0, cy = (static_cast<double>(height) - 1.0) / 2.0;
  for (;;) {
    const double theta = rng.uniform(-j.max_rotation_deg, j.max_rotation_deg) * std::numbers::pi / 180.0;
    const double s = j.min_scale == j.max_scale ? j.min_scale : rng.uniform(j.min_scale, j.max_scale);
    const double tx = rng.uniform(-j.max_translation, j.max_translation) * static_cast<double>(width);
    const double ty = rng.uniform(-j.max_translation, j.max_translation) * static_cast<double>(height);
    const double px = rng.uniform(-j.max_perspective, j.max_perspective);
    const double py = rng.uniform(-j.max_perspective, j.max_perspective);
    Homography to_origin = Homography::Identity(), back = Homography::Identity(), linear = Homography::Identity(),
               persp = Homography::Identity();
    to_origin(0, 2) = -cx;
    to_origin(1, 2) = -cy;
    back(0, 2) = cx + tx;
    back(1, 2) = cy + ty;
    linear(0, 0) = s * std::cos(theta);
    linear(0, 1) = -s * std::sin(theta);
    linear(1, 0) = s * std::sin(theta);
    linear(1, 1) = s * std::cos(theta);
    persp(2, 0) = px;
    persp(2, 1) = py;
    Homography h = back * linear * persp * to_origin;
    h /= h(2, 2);
    if (std::abs(h.topLeftCorner<2, 2>().determinant()) >= 0.1) return h;
  }
}

/// Bilinear sample of a [1,H,W] image at continuous (x, y); 0 outside.
template <typename T>
double sample_bilinear(const BasicTensor<T>& img, double x, double y) {
  const auto h = static_cast<std::ptrdiff_t>(img.dim(1)), w = static_cast<std::ptrdiff_t>(img.dim(2));
  const double fx = std::floor(x), fy = std::floor(y);
  const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
  const double ax = x - fx, ay = y - fy;
  auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return static_cast<double>(img[static_cast<std::size_t>(yy * w + xx)]);
  };
  if (x < -1.0 || y < -1.0 || x > static_cast<double>(w) || y > static_cast<double>(h)) return 0.0;
  return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) + ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
}

/// out(p) = src(H^-1 p): the image seen after warping by H.
template <typename T>
BasicTensor<T> warp_image(const BasicTensor<T>& src, const Homography& h) {
  const std::size_t height = src.dim(1), width = src.dim(2);
  const Homography inv = h.inverse();
  BasicTensor<T> out({1, height, width});
  auto o = out.mutable_data();
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const Point2 s = apply(inv, {static_cast<double>(x), static_cast<double>(y)});
      o[y * width + x] = static_cast<T>(sample_bilinear(src, s.x, s.y));
    }
  return out;
}

struct Correspondence {
  Point2 a;
  Point2 b;
};

namespace detail {

// Similarity transform moving the centroid to the origin with mean distance sqrt(2).
inline Homography normalizer(const std::vector<Point2>& pts) {
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += p.x;
    my += p.y;
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double d = 0;
  for (const auto& p : pts) d += std::hypot(p.x - mx, p.y - my);
  d /= static_cast<double>(pts.size());
  const double s = d > 0 ? std::sqrt(2.0) / d : 1.0;
  Homography t = Homography::Identity();
  t(0, 0) = t(1, 1) = s;
  t(0, 2) = -s * mx;
  t(1, 2) = -s * my;
  return t;
}

}  // namespace detail

/// Normalized direct linear transform (least squares over all
/// correspondences, no outlier rejection). Needs at least four.
inline Homography estimate_homography(const std::vector<Correspondence>& corr) {
  if (corr.size() < 4) throw DomainError("estimate_homography: need at least 4 correspondences");
  std::vector<Point2> pa, pb;
  for (const auto& c : corr) {
    pa.push_back(c.a);
    pb.push_back(c.b);
  }
  const Homography ta = detail::normalizer(pa), tb = detail::normalizer(pb);
  Eigen::MatrixXd m(2 * corr.size(), 9);
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const Point2 a = apply(ta, pa[i]), b = apply(tb, pb[i]);
    const auto r = static_cast<Eigen::Index>(2 * i);
    m.row(r) << -a.x, -a.y, -1, 0, 0, 0, b.x * a.x, b.x * a.y, b.x;
    m.row(r + 1) << 0, 0, 0, -a.x, -a.y, -1, b.y * a.x, b.y * a.y, b.y;
  }
  // Null vector of M via the smallest eigenvector of M^T M (9x9).
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> eig(m.transpose() * m);
  const Eigen::Matrix<double, 9, 1> v = eig.eigenvectors().col(0);
  Homography hn;
  hn << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8);
  Homography h = tb.inverse() * hn * ta;
  if (!std::isfinite(h(2, 2)) || std::abs(h(2, 2)) < 1e-12) throw DomainError("estimate_homography: degenerate input");
  return h / h(2, 2);
}

/// Mean distance between the four image corners mapped by the estimate and
/// by the ground truth.
inline double corner_error(const Homography& estimate, const Homography& truth, std::size_t width, std::size_t height) {
  const double w = static_cast<double>(width) - 1.0, h = static_cast<double>(height) - 1.0;
  const std::array<Point2, 4> corners{{{0, 0}, {w, 0}, {0, h}, {w, h}}};
  double total = 0;
  for (const auto& c : corners) {
    const Point2 p = apply(estimate, c), q = apply(truth, c);
    const double d = std::hypot(p.x - q.x, p.y - q.y);
    if (!std::isfinite(d)) return std::numeric_limits<double>::infinity();
    total += d;
  }
  return total / 4.0;
}

/// Area under the cumulative error curve up to `threshold`, normalized to
/// [0, 1]. The curve passes through (0, 0) and (e_k, k/n) for the sorted
/// errors and is integrated with the trapezoid rule.
inline double error_auc(std::vector<double> errors, double threshold) {
  if (errors.empty()) return 0.0;
  std::sort(errors.begin(), errors.end());
  const double n = static_cast<double>(errors.size());
  double area = 0, px = 0, py = 0;
  for (std::size_t i = 0; i < errors.size() && errors[i] <= threshold; ++i) {
    const double x = errors[i], y = static_cast<double>(i + 1) / n;
    area += (x - px) * (y + py) / 2.0;
    px = x;
    py = y;
  }
  area += (threshold - px) * py;
  return area / threshold;
}

}  // namespace vmatcher
