#pragma once

// Seeded procedural image pairs related by a known homography.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "vmatcher/homography.hpp"

namespace vmatcher {

struct SynthConfig {
  WarpJitter jitter;
  double noise_sigma = 0.02;

  static SynthConfig identity() { return {WarpJitter::none(), 0.0}; }
};

struct SynthPair {
  Tensor image_a;  // [1, H, W] in [0, 1]
  Tensor image_b;
  Homography h;    // maps A pixel coordinates to B
};

namespace detail {

// Value noise: a random lattice with the given cell size, bilinearly interpolated.
inline void add_value_noise(std::vector<double>& img, std::size_t size, double cell, double amplitude, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / cell)) + 2;
  std::vector<double> lattice(n * n);
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double gx = static_cast<double>(x) / cell, gy = static_cast<double>(y) / cell;
      const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
      const double fx = gx - static_cast<double>(ix), fy = gy - static_cast<double>(iy);
      const double v = (1 - fy) * ((1 - fx) * lattice[iy * n + ix] + fx * lattice[iy * n + ix + 1]) +
                       fy * ((1 - fx) * lattice[(iy + 1) * n + ix] + fx * lattice[(iy + 1) * n + ix + 1]);
      img[y * size + x] += amplitude * v;
    }
}

inline void add_shapes(std::vector<double>& img, std::size_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  const std::size_t count = 10 + rng.below(10);
  for (std::size_t k = 0; k < count; ++k) {
    const double value = rng.uniform(0.0, 1.0);
    const double cx = rng.uniform(0, s), cy = rng.uniform(0, s);
    const double r = rng.uniform(0.03, 0.15) * s;
    const std::uint64_t kind = rng.below(3);
    const double angle = rng.uniform(0, std::numbers::pi);
    const double aspect = rng.uniform(0.3, 1.0);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        bool inside = false;
        if (kind == 0) {
          inside = dx * dx + dy * dy <= r * r;
        } else if (kind == 1) {
          const double u = dx * std::cos(angle) + dy * std::sin(angle);
          const double v = -dx * std::sin(angle) + dy * std::cos(angle);
          inside = std::abs(u) <= r && std::abs(v) <= r * aspect;
        } else {
          // Triangle: three half-planes through a rotated equilateral frame.
          inside = true;
          for (int e = 0; e < 3; ++e) {
            const double a = angle + e * 2.0 * std::numbers::pi / 3.0;
            if (dx * std::cos(a) + dy * std::sin(a) > r * 0.5) inside = false;
          }
        }
        if (inside) img[y * size + x] = value;
      }
  }
}

}  // namespace detail

/// Smoothed multi-octave noise overlaid with random discs, boxes and
/// triangles, normalized to [0, 1].
inline Tensor procedural_texture(Rng& rng, std::size_t size) {
  std::vector<double> img(size * size, 0.0);
  detail::add_value_noise(img, size, 32.0, 0.5, rng);
  detail::add_value_noise(img, size, 12.0, 0.3, rng);
  detail::add_value_noise(img, size, 5.0, 0.15, rng);
  double lo = *std::min_element(img.begin(), img.end()), hi = *std::max_element(img.begin(), img.end());
  for (auto& v : img) v = (v - lo) / std::max(hi - lo, 1e-9);
  detail::add_shapes(img, size, rng);
  Tensor out({1, size, size});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < img.size(); ++i) o[i] = static_cast<float>(img[i]);
  return out;
}

/// Deterministic per seed: texture A, random H, B = warp(A, H) + noise.
inline SynthPair synth_pair(std::uint64_t seed, std::size_t size, const SynthConfig& cfg = {}) {
  if (size == 0 || size % 8 != 0) throw ContractError("synth_pair: size must be a positive multiple of 8");
  Rng rng(mix_seed(seed, 0x5157));
  SynthPair p;
  p.image_a = procedural_texture(rng, size);
  p.h = random_homography(rng, size, size, cfg.jitter);
  p.image_b = warp_image(p.image_a, p.h);
  if (cfg.noise_sigma > 0) {
    for (auto& v : p.image_b.mutable_data())
      v = static_cast<float>(std::clamp(double(v) + cfg.noise_sigma * rng.normal(), 0.0, 1.0));
  }
  return p;
}

/// Pixel-coordinate matrix of one of the 8 symmetries of a square image:
/// bit 2 mirrors x, bits 0-1 count quarter turns applied after the mirror.
inline Homography dihedral_matrix(unsigned code, std::size_t size) {
  const double e = static_cast<double>(size) - 1.0;
  Homography m = Homography::Identity();
  if (code & 4u) {
    Homography f;
    f << -1, 0, e, 0, 1, 0, 0, 0, 1;
    m = f;
  }
  Homography r;
  r << 0, 1, 0, -1, 0, e, 0, 0, 1;  // (x, y) -> (y, e - x)
  for (unsigned k = 0; k < (code & 3u); ++k) m = r * m;
  return m;
}

/// Training-time view of a pair: the same symmetry applied to both images
/// (H becomes D H D^-1, so the warp distribution is unchanged), and with
/// `swap` the roles of A and B exchanged (H becomes its inverse).
inline SynthPair augmented_pair(const SynthPair& p, unsigned symmetry, bool swap) {
  const std::size_t size = p.image_a.dim(2);
  if (p.image_a.dim(1) != size || p.image_b.dim(1) != size || p.image_b.dim(2) != size)
    throw ContractError("augmented_pair: images must be square and of equal size");
  const Homography d = dihedral_matrix(symmetry, size), d_inv = d.inverse();
  auto transform = [&](const Tensor& img) {
    Tensor out({1, size, size});
    auto o = out.mutable_data();
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const Point2 src = apply(d_inv, {static_cast<double>(x), static_cast<double>(y)});
        o[y * size + x] = img[static_cast<std::size_t>(std::lround(src.y)) * size + static_cast<std::size_t>(std::lround(src.x))];
      }
    return out;
  };
  SynthPair out;
  out.image_a = transform(swap ? p.image_b : p.image_a);
  out.image_b = transform(swap ? p.image_a : p.image_b);
  const Homography h = swap ? Homography(p.h.inverse()) : p.h;
  out.h = d * h * d_inv;
  out.h /= out.h(2, 2);
  return out;
}

}  // namespace vmatcher
