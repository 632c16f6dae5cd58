#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bsh/common.hpp"

namespace bsh {

// One LiDAR return: position plus reflectance in [0,1].
struct Point4 {
  double x = 0, y = 0, z = 0, r = 0;
};

// Discretization of metric space into BEV cells. Rows follow x, columns
// follow y: a (C,H,W) map has H == nx and W == ny.
struct BevGrid {
  double x_min = 0, x_max = 0;
  double y_min = 0, y_max = 0;
  double z_min = 0, z_max = 0;
  double dx = 0, dy = 0, dz = 0;
  int nx = 0, ny = 0, nz = 0;

  BevGrid() = default;

  BevGrid(double x0, double x1, double y0, double y1, double z0, double z1,
          double cell_x, double cell_y, double cell_z)
      : x_min(x0), x_max(x1), y_min(y0), y_max(y1), z_min(z0), z_max(z1),
        dx(cell_x), dy(cell_y), dz(cell_z) {
    nx = exact_cells(x1 - x0, cell_x, "x");
    ny = exact_cells(y1 - y0, cell_y, "y");
    nz = exact_cells(z1 - z0, cell_z, "z");
  }

  // Pillar grid from section IV-B of the reference configuration.
  static BevGrid kitti_pillar() {
    return BevGrid(0.0, 69.12, -39.68, 39.68, -3.0, 1.0, 0.16, 0.16, 4.0);
  }

  bool contains(double x, double y, double z) const {
    return x >= x_min && x < x_max && y >= y_min && y < y_max && z >= z_min && z < z_max;
  }

  bool contains_xy(double x, double y) const {
    return x >= x_min && x < x_max && y >= y_min && y < y_max;
  }

  int cell_ix(double x) const { return int(std::floor((x - x_min) / dx)); }
  int cell_iy(double y) const { return int(std::floor((y - y_min) / dy)); }

  double center_x(int ix) const { return x_min + (ix + 0.5) * dx; }
  double center_y(int iy) const { return y_min + (iy + 0.5) * dy; }

  // Grid of the same extents at a coarser cell size (feature-map stride).
  BevGrid downsampled(int stride) const {
    if (nx % stride != 0 || ny % stride != 0)
      throw config_error("grid dims not divisible by stride");
    return BevGrid(x_min, x_max, y_min, y_max, z_min, z_max, dx * stride, dy * stride,
                   dz);
  }

 private:
  static int exact_cells(double range, double cell, const char* axis) {
    if (cell <= 0 || range <= 0) throw config_error(std::string("bad grid range on ") + axis);
    double n = range / cell;
    int ni = int(std::lround(n));
    if (std::abs(n - ni) > 1e-6 * std::max(1.0, n))
      throw config_error(std::string("grid range does not divide by cell size on ") + axis);
    return ni;
  }
};

// Points grouped into vertical columns. Pillars appear in first-occurrence
// order of the input cloud, which keeps the batch deterministic.
struct PillarBatch {
  struct Pillar {
    int ix = 0, iy = 0;
    std::vector<Point4> points;
  };
  BevGrid grid;
  std::vector<Pillar> pillars;

  int count() const { return int(pillars.size()); }
};

inline PillarBatch pillarize(const std::vector<Point4>& points, const BevGrid& grid,
                             int max_points) {
  PillarBatch batch;
  batch.grid = grid;
  std::vector<int> slot(size_t(grid.nx) * size_t(grid.ny), -1);
  for (const Point4& p : points) {
    if (!grid.contains(p.x, p.y, p.z)) continue;
    int ix = grid.cell_ix(p.x);
    int iy = grid.cell_iy(p.y);
    size_t key = size_t(ix) * size_t(grid.ny) + size_t(iy);
    int s = slot[key];
    if (s < 0) {
      s = batch.count();
      slot[key] = s;
      batch.pillars.push_back({ix, iy, {}});
    }
    auto& buf = batch.pillars[size_t(s)].points;
    if (int(buf.size()) < max_points) buf.push_back(p);
  }
  return batch;
}

}  // namespace bsh
