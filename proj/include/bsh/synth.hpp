#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "bsh/box.hpp"
#include "bsh/common.hpp"
#include "bsh/data_io.hpp"
#include "bsh/grid.hpp"
#include "bsh/shape_labels.hpp"

namespace bsh {

// Synthetic LiDAR scenes: boxes ray-cast from the origin with first-hit
// semantics, so occluders shadow everything behind them and far objects
// collect fewer returns.
struct SynthSceneCfg {
  BevGrid grid;
  int min_objects = 4;
  int max_objects = 8;
  double l_min = 3.5, l_max = 4.4;
  double w_min = 1.5, w_max = 1.8;
  double h_min = 1.4, h_max = 1.7;
  double z_center = -1.0;
  double min_range = 3.0;
  double az_res_deg = 0.2;
  int elev_rings = 26;
  double elev_min_deg = -28.0;
  double elev_max_deg = 2.0;
  double max_range = 60.0;
  double occluder_frac = 0.5;  // fraction of targets given a dedicated occluder
  double bank_spacing = 0.15;
  std::uint64_t seed = 1;
};

struct SynthScene {
  Frame frame;
  std::vector<ShapeBankEntry> bank_entries;   // ideal full samplings, one per object
  std::vector<double> occlusion_frac;         // per object
};

namespace detail {

// First positive entry parameter of a ray into an oriented box (slab test),
// or a negative value when the ray misses.
inline double ray_box_entry(const Box3D& b, double dx, double dy, double dz) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  // origin is the sensor at (0,0,0); transform into the box frame
  const double ox = (-b.x) * c + (-b.y) * s;
  const double oy = -(-b.x) * s + (-b.y) * c;
  const double oz = -b.z;
  const double rdx = dx * c + dy * s;
  const double rdy = -dx * s + dy * c;
  const double rdz = dz;
  double tmin = 0.0, tmax = 1e30;
  const double half[3] = {0.5 * b.l, 0.5 * b.w, 0.5 * b.h};
  const double o[3] = {ox, oy, oz};
  const double d[3] = {rdx, rdy, rdz};
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-12) {
      if (std::abs(o[i]) > half[i]) return -1.0;
      continue;
    }
    double t0 = (-half[i] - o[i]) / d[i];
    double t1 = (half[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return -1.0;
  }
  return tmin > 1e-9 ? tmin : -1.0;
}

// Uniform surface sampling of a canonical box: four side faces plus top.
inline std::vector<Point4> sample_box_surface(double l, double w, double h, double spacing,
                                              double reflectance) {
  std::vector<Point4> pts;
  auto steps = [spacing](double extent) {
    return std::max(2, int(std::floor(extent / spacing)) + 1);
  };
  const int nl = steps(l), nw = steps(w), nh = steps(h);
  auto lin = [](double extent, int i, int n) { return -0.5 * extent + extent * i / (n - 1); };
  for (int i = 0; i < nl; ++i)
    for (int k = 0; k < nh; ++k) {
      const double x = lin(l, i, nl), z = lin(h, k, nh);
      pts.push_back({x, -0.5 * w, z, reflectance});
      pts.push_back({x, 0.5 * w, z, reflectance});
    }
  for (int j = 0; j < nw; ++j)
    for (int k = 0; k < nh; ++k) {
      const double y = lin(w, j, nw), z = lin(h, k, nh);
      pts.push_back({-0.5 * l, y, z, reflectance});
      pts.push_back({0.5 * l, y, z, reflectance});
    }
  for (int i = 0; i < nl; ++i)
    for (int j = 0; j < nw; ++j) pts.push_back({lin(l, i, nl), lin(w, j, nw), 0.5 * h, reflectance});
  return pts;
}

}  // namespace detail

inline SynthScene synth_scene(const SynthSceneCfg& cfg) {
  Rng rng(cfg.seed);
  SynthScene scene;
  scene.frame.calib = Calib::nominal();

  const BevGrid& grid = cfg.grid;
  std::vector<Box3D> boxes;

  auto try_place = [&](double range_lo, double range_hi, double az_lo, double az_hi,
                       Box3D& out) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      Box3D b;
      b.l = rng.uniform(cfg.l_min, cfg.l_max);
      b.w = rng.uniform(cfg.w_min, cfg.w_max);
      b.h = rng.uniform(cfg.h_min, cfg.h_max);
      b.z = cfg.z_center;
      b.theta = normalize_angle(rng.uniform(-kPi, kPi));
      const double range = rng.uniform(range_lo, range_hi);
      const double az = rng.uniform(az_lo, az_hi);
      b.x = range * std::cos(az);
      b.y = range * std::sin(az);
      const double margin = 0.5 * std::sqrt(b.l * b.l + b.w * b.w);
      if (b.x - margin < grid.x_min || b.x + margin > grid.x_max) continue;
      if (b.y - margin < grid.y_min || b.y + margin > grid.y_max) continue;
      if (std::hypot(b.x, b.y) < cfg.min_range + margin) continue;
      bool clash = false;
      for (const Box3D& o : boxes) {
        if (bev_iou(b, o) > 0.0) {
          clash = true;
          break;
        }
      }
      if (!clash) {
        out = b;
        return true;
      }
    }
    return false;
  };

  // Azimuth window that covers the whole grid from the sensor.
  const double corner_az[4] = {std::atan2(grid.y_min, grid.x_min),
                               std::atan2(grid.y_min, grid.x_max),
                               std::atan2(grid.y_max, grid.x_min),
                               std::atan2(grid.y_max, grid.x_max)};
  double az_min = *std::min_element(corner_az, corner_az + 4);
  double az_max = *std::max_element(corner_az, corner_az + 4);
  if (grid.x_min <= 0.0) {  // grid wraps around the sensor
    az_min = -kPi;
    az_max = kPi;
  }

  const double max_place_range =
      std::min(cfg.max_range, std::hypot(std::max(std::abs(grid.x_min), std::abs(grid.x_max)),
                                         std::max(std::abs(grid.y_min), std::abs(grid.y_max))));

  const int n_objects =
      cfg.min_objects + int(rng.uniform_index(std::uint64_t(cfg.max_objects - cfg.min_objects + 1)));
  for (int i = 0; i < n_objects; ++i) {
    Box3D target;
    if (!try_place(cfg.min_range + 2.0, max_place_range, az_min, az_max, target)) continue;
    boxes.push_back(target);
    if (rng.bernoulli(cfg.occluder_frac)) {
      const double t_range = std::hypot(target.x, target.y);
      const double t_az = std::atan2(target.y, target.x);
      Box3D occ;
      if (try_place(std::max(cfg.min_range, 0.35 * t_range), 0.75 * t_range, t_az - 0.12,
                    t_az + 0.12, occ)) {
        boxes.push_back(occ);
      }
    }
  }

  // Per-object reflectance so crops stay distinguishable.
  std::vector<double> refl(boxes.size());
  for (auto& r : refl) r = rng.uniform(0.2, 0.9);

  // Ray casting with first-hit semantics.
  const double az_step = cfg.az_res_deg * kPi / 180.0;
  const int n_az = std::max(1, int(std::floor((az_max - az_min) / az_step)) + 1);
  std::vector<int> hits(boxes.size(), 0);
  std::vector<int> solo(boxes.size(), 0);
  for (int ia = 0; ia < n_az; ++ia) {
    const double az = az_min + ia * az_step;
    for (int ie = 0; ie < cfg.elev_rings; ++ie) {
      const double elev = (cfg.elev_min_deg +
                           (cfg.elev_max_deg - cfg.elev_min_deg) *
                               (cfg.elev_rings == 1 ? 0.5 : double(ie) / (cfg.elev_rings - 1))) *
                          kPi / 180.0;
      const double dx = std::cos(elev) * std::cos(az);
      const double dy = std::cos(elev) * std::sin(az);
      const double dz = std::sin(elev);
      double best_t = cfg.max_range;
      int best_i = -1;
      for (size_t bi = 0; bi < boxes.size(); ++bi) {
        const double t = detail::ray_box_entry(boxes[bi], dx, dy, dz);
        if (t > 0.0 && t <= cfg.max_range) {
          ++solo[bi];
          if (t < best_t) {
            best_t = t;
            best_i = int(bi);
          }
        }
      }
      if (best_i >= 0) {
        ++hits[size_t(best_i)];
        scene.frame.points.push_back(
            {best_t * dx, best_t * dy, best_t * dz, refl[size_t(best_i)]});
      }
    }
  }

  for (size_t bi = 0; bi < boxes.size(); ++bi) {
    const double occl =
        solo[bi] > 0 ? 1.0 - double(hits[bi]) / double(solo[bi]) : 1.0;
    scene.occlusion_frac.push_back(occl);
    ObjectLabel ol;
    ol.class_id = 0;
    ol.type = "Car";
    ol.box = boxes[bi];
    ol.truncated = 0.0;
    ol.occluded = occl < 0.2 ? 0 : occl < 0.5 ? 1 : 2;
    scene.frame.objects.push_back(ol);

    ShapeBankEntry e;
    e.class_id = 0;
    e.l = boxes[bi].l;
    e.w = boxes[bi].w;
    e.h = boxes[bi].h;
    e.points =
        detail::sample_box_surface(boxes[bi].l, boxes[bi].w, boxes[bi].h, cfg.bank_spacing,
                                   refl[bi]);
    scene.bank_entries.push_back(std::move(e));
  }
  return scene;
}

// ---- augmentation (gt-sampling, flip, rotate, scale) ----

struct AugmentCfg {
  bool gt_sampling = true;
  int max_injections = 4;
  double flip_prob = 0.5;
  double rot_range_deg = 45.0;
  double scale_min = 0.95;
  double scale_max = 1.05;
};

// Injects bank objects at BEV-collision-free poses, then applies a global
// flip / rotation / scaling consistently to points and boxes.
inline void augment(Frame& frame, const ShapeBank& bank, const BevGrid& grid, Rng& rng,
                    const AugmentCfg& cfg = {}) {
  if (cfg.gt_sampling && !bank.entries.empty()) {
    const int n_inject = int(rng.uniform_index(std::uint64_t(cfg.max_injections) + 1));
    for (int i = 0; i < n_inject; ++i) {
      const auto& entry = bank.entries[rng.uniform_index(bank.entries.size())];
      Box3D b;
      b.l = entry.l;
      b.w = entry.w;
      b.h = entry.h;
      b.z = -1.0;
      bool placed = false;
      for (int attempt = 0; attempt < 25 && !placed; ++attempt) {
        b.theta = normalize_angle(rng.uniform(-kPi, kPi));
        const double margin = 0.5 * std::sqrt(b.l * b.l + b.w * b.w);
        b.x = rng.uniform(grid.x_min + margin, grid.x_max - margin);
        b.y = rng.uniform(grid.y_min + margin, grid.y_max - margin);
        bool clash = false;
        for (const ObjectLabel& o : frame.objects) {
          if (bev_iou(b, o.box) > 0.0) {
            clash = true;
            break;
          }
        }
        placed = !clash;
      }
      if (!placed) continue;
      std::vector<Point4> world = to_world_frame(entry.points, b);
      frame.points.insert(frame.points.end(), world.begin(), world.end());
      ObjectLabel ol;
      ol.class_id = entry.class_id;
      ol.type = class_name(entry.class_id);
      ol.box = b;
      frame.objects.push_back(ol);
    }
  }

  if (rng.bernoulli(cfg.flip_prob)) {
    for (Point4& p : frame.points) p.y = -p.y;
    for (ObjectLabel& o : frame.objects) {
      o.box.y = -o.box.y;
      o.box.theta = normalize_angle(-o.box.theta);
    }
    for (Box3D& b : frame.ignore_regions) {
      b.y = -b.y;
      b.theta = normalize_angle(-b.theta);
    }
  }

  const double phi = rng.uniform(-cfg.rot_range_deg, cfg.rot_range_deg) * kPi / 180.0;
  const double c = std::cos(phi), s = std::sin(phi);
  auto rotate = [&](double& x, double& y) {
    const double nx = x * c - y * s;
    const double ny = x * s + y * c;
    x = nx;
    y = ny;
  };
  for (Point4& p : frame.points) rotate(p.x, p.y);
  for (ObjectLabel& o : frame.objects) {
    rotate(o.box.x, o.box.y);
    o.box.theta = normalize_angle(o.box.theta + phi);
  }
  for (Box3D& b : frame.ignore_regions) {
    rotate(b.x, b.y);
    b.theta = normalize_angle(b.theta + phi);
  }

  const double sc = rng.uniform(cfg.scale_min, cfg.scale_max);
  for (Point4& p : frame.points) {
    p.x *= sc;
    p.y *= sc;
    p.z *= sc;
  }
  auto scale_box = [sc](Box3D& b) {
    b.x *= sc;
    b.y *= sc;
    b.z *= sc;
    b.l *= sc;
    b.w *= sc;
    b.h *= sc;
  };
  for (ObjectLabel& o : frame.objects) scale_box(o.box);
  for (Box3D& b : frame.ignore_regions) scale_box(b);
}

// Points inside a labeled object's box, used for label generation.
inline std::vector<Point4> crop_object_points(const Frame& frame, const Box3D& box) {
  std::vector<Point4> out;
  for (const Point4& p : frame.points)
    if (box.contains(p.x, p.y, p.z)) out.push_back(p);
  return out;
}

}  // namespace bsh
