#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "bsh/common.hpp"
#include "bsh/grid.hpp"

namespace bsh {

// Oriented 3D box: center, size, yaw about Z. Theta is kept in (-pi, pi].
struct Box3D {
  double x = 0, y = 0, z = 0;
  double l = 0, w = 0, h = 0;
  double theta = 0;

  bool valid() const { return l > 0 && w > 0 && h > 0; }
  double bev_area() const { return l * w; }
  double volume() const { return l * w * h; }
  double z_bottom() const { return z - 0.5 * h; }
  double z_top() const { return z + 0.5 * h; }

  // BEV corners, counter-clockwise.
  std::array<std::array<double, 2>, 4> bev_corners() const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double hl = 0.5 * l, hw = 0.5 * w;
    std::array<std::array<double, 2>, 4> out{};
    const double ux[4] = {hl, -hl, -hl, hl};
    const double uy[4] = {hw, hw, -hw, -hw};
    for (int i = 0; i < 4; ++i) {
      out[size_t(i)] = {x + ux[i] * c - uy[i] * s, y + ux[i] * s + uy[i] * c};
    }
    return out;
  }

  // True if (px,py) lies inside the BEV rectangle.
  bool contains_bev(double px, double py) const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (px - x) * c + (py - y) * s;
    const double v = -(px - x) * s + (py - y) * c;
    return std::abs(u) <= 0.5 * l && std::abs(v) <= 0.5 * w;
  }

  bool contains(double px, double py, double pz) const {
    return contains_bev(px, py) && pz >= z_bottom() && pz <= z_top();
  }
};

struct ScoredBox {
  Box3D box;
  double score = 0;
  int class_id = 0;
};

namespace detail {

inline constexpr double kClipEps = 1e-9;

// Intersection area of two convex BEV rectangles: Sutherland-Hodgman clip
// of a's corners against b's edges, then shoelace.
inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  auto ca = a.bev_corners();
  auto cb = b.bev_corners();

  std::vector<std::array<double, 2>> poly(ca.begin(), ca.end());
  std::vector<std::array<double, 2>> next;
  next.reserve(8);

  for (int e = 0; e < 4 && !poly.empty(); ++e) {
    const auto& p = cb[size_t(e)];
    const auto& q = cb[size_t((e + 1) % 4)];
    const double ex = q[0] - p[0], ey = q[1] - p[1];
    next.clear();
    const size_t n = poly.size();
    for (size_t i = 0; i < n; ++i) {
      const auto& s = poly[i];
      const auto& t = poly[(i + 1) % n];
      const double ds = ex * (s[1] - p[1]) - ey * (s[0] - p[0]);
      const double dt = ex * (t[1] - p[1]) - ey * (t[0] - p[0]);
      const bool in_s = ds >= -kClipEps;
      const bool in_t = dt >= -kClipEps;
      if (in_s) next.push_back(s);
      if (in_s != in_t) {
        const double denom = ds - dt;
        if (std::abs(denom) > kClipEps * kClipEps) {
          const double u = ds / denom;
          next.push_back({s[0] + u * (t[0] - s[0]), s[1] + u * (t[1] - s[1])});
        }
      }
    }
    poly.swap(next);
  }
  if (poly.size() < 3) return 0.0;

  double area2 = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const auto& s = poly[i];
    const auto& t = poly[(i + 1) % poly.size()];
    area2 += s[0] * t[1] - t[0] * s[1];
  }
  return 0.5 * std::abs(area2);
}

}  // namespace detail

// Rotated IoU of the BEV footprints. Degenerate boxes give 0.
inline double bev_iou(const Box3D& a, const Box3D& b) {
  const double aa = a.bev_area(), ab = b.bev_area();
  if (aa <= 0.0 || ab <= 0.0) return 0.0;
  double inter = detail::bev_intersection_area(a, b);
  inter = std::min(inter, std::min(aa, ab));
  const double uni = aa + ab - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

// Full 3D IoU: BEV intersection times vertical overlap over union volume.
inline double iou3d(const Box3D& a, const Box3D& b) {
  const double va = a.volume(), vb = b.volume();
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  const double zi = std::min(a.z_top(), b.z_top()) - std::max(a.z_bottom(), b.z_bottom());
  if (zi <= 0.0) return 0.0;
  const double inter = detail::bev_intersection_area(a, b) * zi;
  const double uni = va + vb - inter;
  if (uni <= 0.0) return 0.0;
  return std::min(1.0, inter / uni);
}

enum class IouMetric { kBev, k3d };

inline double box_iou(const Box3D& a, const Box3D& b, IouMetric metric) {
  return metric == IouMetric::kBev ? bev_iou(a, b) : iou3d(a, b);
}

// Greedy descending-score suppression; survivors come out sorted by score,
// ties broken by lower input index.
inline std::vector<ScoredBox> nms(const std::vector<ScoredBox>& dets, double iou_thresh,
                                  IouMetric metric) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) {
    return dets[i].score > dets[j].score;
  });

  std::vector<ScoredBox> kept;
  for (size_t oi : order) {
    bool suppressed = false;
    for (const ScoredBox& k : kept) {
      if (k.class_id != dets[oi].class_id) continue;
      if (box_iou(k.box, dets[oi].box, metric) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[oi]);
  }
  return kept;
}

// Seven-value anchor residual: offsets normalized by the anchor diagonal,
// log size ratios and sin of the yaw gap.
struct BoxResidual {
  std::array<double, 7> v{};  // dx, dy, dz, dl, dw, dh, dtheta
  double& operator[](size_t i) { return v[i]; }
  double operator[](size_t i) const { return v[i]; }
};

inline BoxResidual encode_box(const Box3D& gt, const Box3D& anchor) {
  if (!gt.valid() || !anchor.valid())
    throw numeric_error("encode_box: non-positive box size");
  const double d = std::sqrt(anchor.l * anchor.l + anchor.w * anchor.w);
  BoxResidual r;
  r[0] = (gt.x - anchor.x) / d;
  r[1] = (gt.y - anchor.y) / d;
  r[2] = (gt.z - anchor.z) / anchor.h;
  r[3] = std::log(gt.l / anchor.l);
  r[4] = std::log(gt.w / anchor.w);
  r[5] = std::log(gt.h / anchor.h);
  r[6] = std::sin(gt.theta - anchor.theta);
  return r;
}

// Inverse of encode_box up to the sine ambiguity; exact when the yaw gap
// lies within [-pi/2, pi/2].
inline Box3D decode_box(const BoxResidual& r, const Box3D& anchor) {
  const double d = std::sqrt(anchor.l * anchor.l + anchor.w * anchor.w);
  Box3D b;
  b.x = anchor.x + r[0] * d;
  b.y = anchor.y + r[1] * d;
  b.z = anchor.z + r[2] * anchor.h;
  b.l = anchor.l * std::exp(r[3]);
  b.w = anchor.w * std::exp(r[4]);
  b.h = anchor.h * std::exp(r[5]);
  b.theta = normalize_angle(anchor.theta + std::asin(std::clamp(r[6], -1.0, 1.0)));
  return b;
}

struct AnchorClassCfg {
  double l = 3.9, w = 1.6, h = 1.56;  // de-facto KITTI car prior
  double z_center = -1.0;
  int class_id = 0;
};

// Anchors of yaw 0 and pi/2 at every cell center of the (feature-map) grid.
// Index layout: ((ix * ny + iy) * 2 + yaw_idx).
struct AnchorSet {
  BevGrid grid;
  AnchorClassCfg cfg;
  static constexpr int kYawCount = 2;
  static constexpr double kYaws[kYawCount] = {0.0, 0.5 * kPi};

  std::vector<Box3D> boxes;

  int count() const { return int(boxes.size()); }
  int index(int ix, int iy, int yaw_idx) const {
    return (ix * grid.ny + iy) * kYawCount + yaw_idx;
  }
};

inline AnchorSet make_anchors(const BevGrid& grid, const AnchorClassCfg& cfg) {
  AnchorSet set;
  set.grid = grid;
  set.cfg = cfg;
  set.boxes.reserve(size_t(grid.nx) * size_t(grid.ny) * AnchorSet::kYawCount);
  for (int ix = 0; ix < grid.nx; ++ix) {
    for (int iy = 0; iy < grid.ny; ++iy) {
      for (double yaw : AnchorSet::kYaws) {
        Box3D b;
        b.x = grid.center_x(ix);
        b.y = grid.center_y(iy);
        b.z = cfg.z_center;
        b.l = cfg.l;
        b.w = cfg.w;
        b.h = cfg.h;
        b.theta = yaw;
        set.boxes.push_back(b);
      }
    }
  }
  return set;
}

}  // namespace bsh
