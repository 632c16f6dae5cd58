#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "bsh/box.hpp"
#include "bsh/common.hpp"
#include "bsh/grid.hpp"
#include "bsh/tensor.hpp"

namespace bsh {

// Canonical per-object point set: centered at the box center, yaw-aligned.
struct ShapeBankEntry {
  int class_id = 0;
  double l = 0, w = 0, h = 0;
  std::vector<Point4> points;
};

struct ShapeBank {
  std::vector<ShapeBankEntry> entries;
};

// Per-class BEV occupancy-probability map on a grid.
struct ShapeHeatmap {
  Tensor data;  // (K, H, W) with H = grid.nx, W = grid.ny
  BevGrid grid;

  int classes() const { return data.rank() == 3 ? data.dim(0) : 0; }
};

inline std::vector<Point4> to_object_frame(const std::vector<Point4>& pts, const Box3D& box) {
  std::vector<Point4> out;
  out.reserve(pts.size());
  const double c = std::cos(box.theta), s = std::sin(box.theta);
  for (const Point4& p : pts) {
    const double dx = p.x - box.x, dy = p.y - box.y;
    out.push_back({dx * c + dy * s, -dx * s + dy * c, p.z - box.z, p.r});
  }
  return out;
}

inline std::vector<Point4> to_world_frame(const std::vector<Point4>& pts, const Box3D& box) {
  std::vector<Point4> out;
  out.reserve(pts.size());
  const double c = std::cos(box.theta), s = std::sin(box.theta);
  for (const Point4& p : pts) {
    out.push_back({box.x + p.x * c - p.y * s, box.y + p.x * s + p.y * c, box.z + p.z, p.r});
  }
  return out;
}

// ---- similar-shape retrieval ----

struct RetrievalCfg {
  int k = 3;
  double size_weight = 1.0;
  double count_weight = 0.5;
};

struct RetrievalResult {
  std::vector<int> indices;  // bank indices, ascending cost
  bool underfull = false;    // bank had fewer than k entries
};

inline double retrieval_cost(const ShapeBankEntry& donor, const Box3D& target,
                             size_t mirrored_count, const RetrievalCfg& cfg) {
  const double dl = (donor.l - target.l) / target.l;
  const double dw = (donor.w - target.w) / target.w;
  const double dh = (donor.h - target.h) / target.h;
  const double size_gap = std::sqrt(dl * dl + dw * dw + dh * dh);
  const double nd = double(donor.points.size());
  const double nt = double(mirrored_count);
  const double count_gap = std::abs(nd - nt) / std::max({nd, nt, 1.0});
  return cfg.size_weight * size_gap + cfg.count_weight * count_gap;
}

// Top-k donors by ascending cost; the target's point count is taken after
// mirroring across its heading axis.
inline RetrievalResult retrieve_similar(const std::vector<Point4>& target_points,
                                        const Box3D& target, const ShapeBank& bank,
                                        const RetrievalCfg& cfg = {}) {
  if (bank.entries.empty()) throw data_error("retrieve_similar: empty shape bank");
  const size_t mirrored_count = target_points.size() * 2;
  std::vector<std::pair<double, int>> scored;
  scored.reserve(bank.entries.size());
  for (size_t i = 0; i < bank.entries.size(); ++i) {
    scored.emplace_back(retrieval_cost(bank.entries[i], target, mirrored_count, cfg), int(i));
  }
  std::stable_sort(scored.begin(), scored.end());
  RetrievalResult res;
  const int take = std::min(cfg.k, int(scored.size()));
  res.underfull = take < cfg.k;
  for (int i = 0; i < take; ++i) res.indices.push_back(scored[size_t(i)].second);
  return res;
}

// ---- shape assembly ----

// Union of the target points, their mirror across the heading axis, and
// donor points rescaled into the target box. Points outside the box (5%
// margin) are clipped away. Inputs and output are in the world frame.
inline std::vector<Point4> assemble_shape(const std::vector<Point4>& target_points,
                                          const Box3D& target,
                                          const std::vector<const ShapeBankEntry*>& donors) {
  std::vector<Point4> canon = to_object_frame(target_points, target);
  std::vector<Point4> acc;
  acc.reserve(canon.size() * 2);
  for (const Point4& p : canon) acc.push_back(p);
  for (const Point4& p : canon) acc.push_back({p.x, -p.y, p.z, p.r});
  for (const ShapeBankEntry* d : donors) {
    if (!d || d->points.empty()) continue;
    const double sx = target.l / d->l, sy = target.w / d->w, sz = target.h / d->h;
    for (const Point4& p : d->points) acc.push_back({p.x * sx, p.y * sy, p.z * sz, p.r});
  }
  std::vector<Point4> kept;
  kept.reserve(acc.size());
  const double mx = 0.525 * target.l, my = 0.525 * target.w, mz = 0.525 * target.h;
  for (const Point4& p : acc) {
    if (std::abs(p.x) <= mx && std::abs(p.y) <= my && std::abs(p.z) <= mz) kept.push_back(p);
  }
  return to_world_frame(kept, target);
}

// ---- compression and rendering ----

// Binary (K,H,W) occupancy: 1 where any point projects into the cell.
inline Tensor compress_to_bev(const std::vector<Point4>& points, const BevGrid& grid,
                              int class_id, int num_classes) {
  Tensor map({num_classes, grid.nx, grid.ny});
  for (const Point4& p : points) {
    if (!grid.contains_xy(p.x, p.y)) continue;
    map(class_id, grid.cell_ix(p.x), grid.cell_iy(p.y)) = 1.0;
  }
  return map;
}

// CornerNet-style Gaussian radius for a footprint of the given cell dims,
// at the stated minimum overlap.
inline double gaussian_radius(double height, double width, double min_overlap) {
  const double a1 = 1, b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(std::max(0.0, b1 * b1 - 4 * a1 * c1))) / 2;

  const double a2 = 4, b2 = 2 * (height + width);
  const double c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(std::max(0.0, b2 * b2 - 4 * a2 * c2))) / 2;

  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(std::max(0.0, b3 * b3 - 4 * a3 * c3))) / 2;
  return std::min({r1, r2, r3});
}

inline double box_sigma_cells(const Box3D& box, const BevGrid& grid) {
  const double r = gaussian_radius(box.l / grid.dx, box.w / grid.dy, 0.7);
  return std::max(r / 3.0, 1.0);
}

// Size-adaptive Gaussian splat around every occupied cell; overlapping
// splats combine by max and the support is truncated at 3 sigma.
inline Tensor gaussian_render(const Tensor& s2d, const std::vector<Box3D>& boxes,
                              const BevGrid& grid) {
  Tensor out = s2d;
  const int K = s2d.dim(0), H = s2d.dim(1), W = s2d.dim(2);
  for (int k = 0; k < K; ++k) {
    for (int ix = 0; ix < H; ++ix) {
      for (int iy = 0; iy < W; ++iy) {
        if (s2d(k, ix, iy) != 1.0) continue;
        // pair the cell with the box that contains it, else nearest center
        const Box3D* owner = nullptr;
        const double px = grid.center_x(ix), py = grid.center_y(iy);
        for (const Box3D& b : boxes) {
          if (b.contains_bev(px, py)) {
            owner = &b;
            break;
          }
        }
        if (!owner) {
          double best_d = 0;
          for (const Box3D& b : boxes) {
            const double d = (b.x - px) * (b.x - px) + (b.y - py) * (b.y - py);
            if (owner == nullptr || d < best_d) {
              owner = &b;
              best_d = d;
            }
          }
        }
        if (!owner) continue;
        const double sigma = box_sigma_cells(*owner, grid);
        const int rad = int(std::ceil(3.0 * sigma));
        const double inv = 1.0 / (2.0 * sigma * sigma);
        for (int dx = -rad; dx <= rad; ++dx) {
          const int jx = ix + dx;
          if (jx < 0 || jx >= H) continue;
          for (int dy = -rad; dy <= rad; ++dy) {
            const int jy = iy + dy;
            if (jy < 0 || jy >= W) continue;
            const double v = std::exp(-(double(dx) * dx + double(dy) * dy) * inv);
            double& cell = out(k, jx, jy);
            cell = std::min(1.0, std::max(cell, v));
          }
        }
      }
    }
  }
  return out;
}

// ---- full label pipeline ----

struct ShapeLabelCfg {
  RetrievalCfg retrieval;
  bool gaussian = true;  // off reproduces the raw binary S_2d labels
  int num_classes = 1;
};

struct LabeledObject {
  Box3D box;
  int class_id = 0;
  std::vector<Point4> points;  // world-frame points inside the box
};

struct ShapeLabelResult {
  ShapeHeatmap heatmap;
  int empty_objects = 0;        // rendered from box footprint alone
  int underfull_retrievals = 0;
};

// Cells covered by the BEV rectangle of a box (cell centers inside).
inline std::vector<Point4> box_footprint_points(const Box3D& box, const BevGrid& grid) {
  std::vector<Point4> pts;
  const double reach = 0.5 * std::sqrt(box.l * box.l + box.w * box.w);
  const int ix0 = std::max(0, grid.cell_ix(box.x - reach));
  const int ix1 = std::min(grid.nx - 1, grid.cell_ix(box.x + reach));
  const int iy0 = std::max(0, grid.cell_iy(box.y - reach));
  const int iy1 = std::min(grid.ny - 1, grid.cell_iy(box.y + reach));
  for (int ix = ix0; ix <= ix1; ++ix)
    for (int iy = iy0; iy <= iy1; ++iy) {
      const double px = grid.center_x(ix), py = grid.center_y(iy);
      if (box.contains_bev(px, py)) pts.push_back({px, py, box.z, 0.0});
    }
  return pts;
}

// retrieve -> assemble -> compress -> render per object, merged by max
// across objects of the same class.
inline ShapeLabelResult make_shape_label(const std::vector<LabeledObject>& objects,
                                         const ShapeBank& bank, const BevGrid& grid,
                                         const ShapeLabelCfg& cfg = {}) {
  ShapeLabelResult res;
  res.heatmap.grid = grid;
  res.heatmap.data = Tensor({cfg.num_classes, grid.nx, grid.ny});
  for (const LabeledObject& obj : objects) {
    if (obj.class_id < 0 || obj.class_id >= cfg.num_classes) continue;
    std::vector<Point4> sc;
    if (obj.points.empty()) {
      ++res.empty_objects;
      sc = box_footprint_points(obj.box, grid);
    } else if (bank.entries.empty()) {
      sc = assemble_shape(obj.points, obj.box, {});
    } else {
      RetrievalResult ret = retrieve_similar(obj.points, obj.box, bank, cfg.retrieval);
      if (ret.underfull) ++res.underfull_retrievals;
      std::vector<const ShapeBankEntry*> donors;
      for (int idx : ret.indices) donors.push_back(&bank.entries[size_t(idx)]);
      sc = assemble_shape(obj.points, obj.box, donors);
    }
    Tensor s2d = compress_to_bev(sc, grid, obj.class_id, cfg.num_classes);
    Tensor rendered = cfg.gaussian ? gaussian_render(s2d, {obj.box}, grid) : s2d;
    for (size_t i = 0; i < rendered.numel(); ++i)
      res.heatmap.data.data[i] = std::max(res.heatmap.data.data[i], rendered.data[i]);
  }
  return res;
}

// ---- heatmap file format ----
// 32-byte header: magic "BSH1", u32 K,H,W, f32 cell dx,dy, f32 origin x,y;
// then K*H*W little-endian f32 values.

inline void save_heatmap(const std::string& path, const ShapeHeatmap& hm) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write heatmap: " + path);
  const char magic[4] = {'B', 'S', 'H', '1'};
  f.write(magic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    char b[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
    f.write(b, 4);
  };
  auto put_f32 = [&](float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(u);
  };
  put_u32(std::uint32_t(hm.data.dim(0)));
  put_u32(std::uint32_t(hm.data.dim(1)));
  put_u32(std::uint32_t(hm.data.dim(2)));
  put_f32(float(hm.grid.dx));
  put_f32(float(hm.grid.dy));
  put_f32(float(hm.grid.x_min));
  put_f32(float(hm.grid.y_min));
  std::vector<float> buf(hm.data.numel());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(hm.data.data[i]);
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
  if (!f) throw data_error("short write on heatmap: " + path);
}

inline ShapeHeatmap load_heatmap(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read heatmap: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "BSH1", 4) != 0) throw data_error("bad heatmap magic: " + path);
  auto get_u32 = [&]() {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
  };
  auto get_f32 = [&]() {
    std::uint32_t u = get_u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  };
  const int K = int(get_u32()), H = int(get_u32()), W = int(get_u32());
  const double dx = get_f32(), dy = get_f32();
  const double x0 = get_f32(), y0 = get_f32();
  if (!f || K <= 0 || H <= 0 || W <= 0) throw data_error("bad heatmap header: " + path);
  ShapeHeatmap hm;
  hm.grid = BevGrid(x0, x0 + H * dx, y0, y0 + W * dy, 0.0, 1.0, dx, dy, 1.0);
  hm.data = Tensor({K, H, W});
  std::vector<float> buf(hm.data.numel());
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
  if (!f) throw data_error("truncated heatmap: " + path);
  for (size_t i = 0; i < buf.size(); ++i) hm.data.data[i] = double(buf[i]);
  return hm;
}

}  // namespace bsh
