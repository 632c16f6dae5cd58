#pragma once

#include <array>
#include <string>
#include <vector>

#include "bsh/autograd.hpp"
#include "bsh/grid.hpp"
#include "bsh/nn.hpp"

namespace bsh {

// Per-point augmented input: raw (x,y,z,r), offsets to the pillar point
// mean, and BEV offsets to the pillar center.
inline constexpr int kPillarPointDims = 9;

struct PillarNetCfg {
  int channels = 8;
};

inline void pillar_net_init(ParamStore& store, const std::string& prefix,
                            const PillarNetCfg& cfg, Rng& rng) {
  store.create(prefix + ".w",
               kaiming_uniform(rng, {cfg.channels, kPillarPointDims}, kPillarPointDims));
  store.create(prefix + ".b", Tensor::zeros({cfg.channels}));
}

namespace detail {

struct PillarAug {
  int ix = 0, iy = 0;
  std::vector<std::array<double, kPillarPointDims>> pts;
};

inline std::vector<PillarAug> augment_pillars(const PillarBatch& batch) {
  std::vector<PillarAug> out;
  out.reserve(batch.pillars.size());
  for (const auto& pil : batch.pillars) {
    PillarAug a;
    a.ix = pil.ix;
    a.iy = pil.iy;
    double mx = 0, my = 0, mz = 0;
    for (const Point4& p : pil.points) {
      mx += p.x;
      my += p.y;
      mz += p.z;
    }
    const double inv = 1.0 / double(pil.points.size());
    mx *= inv;
    my *= inv;
    mz *= inv;
    const double cx = batch.grid.center_x(pil.ix);
    const double cy = batch.grid.center_y(pil.iy);
    a.pts.reserve(pil.points.size());
    for (const Point4& p : pil.points) {
      a.pts.push_back({p.x, p.y, p.z, p.r, p.x - mx, p.y - my, p.z - mz, p.x - cx, p.y - cy});
    }
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace detail

// Shared linear+ReLU per point, max-pool per pillar, scatter to (C,H,W).
// Empty pillars stay all-zero columns.
inline int pillar_features(Graph& g, ParamStore& store, const std::string& prefix,
                           const PillarBatch& batch, const PillarNetCfg& cfg) {
  const int w_id = g.param(store, prefix + ".w");
  const int b_id = g.param(store, prefix + ".b");
  const Tensor& w = g.val(w_id);
  const Tensor& b = g.val(b_id);
  const int C = cfg.channels;
  const int H = batch.grid.nx, W = batch.grid.ny;

  auto aug = detail::augment_pillars(batch);

  Tensor out({C, H, W});
  // argmax[(pillar, channel)]: winning point, or -1 when the pooled
  // activation is zero (ReLU inactive everywhere).
  std::vector<int> argmax(aug.size() * size_t(C), -1);
  for (size_t pi = 0; pi < aug.size(); ++pi) {
    for (int c = 0; c < C; ++c) {
      const double* wr = w.ptr() + size_t(c) * kPillarPointDims;
      double best = 0.0;
      int best_idx = -1;
      for (size_t k = 0; k < aug[pi].pts.size(); ++k) {
        double z = b(c);
        for (int d = 0; d < kPillarPointDims; ++d) z += wr[d] * aug[pi].pts[k][size_t(d)];
        if (z > best) {
          best = z;
          best_idx = int(k);
        }
      }
      argmax[pi * size_t(C) + size_t(c)] = best_idx;
      out(c, aug[pi].ix, aug[pi].iy) = best;
    }
  }

  return g.make_node(std::move(out), [w_id, b_id, aug, argmax, C](Graph& gr, int id) {
    const Tensor& go = gr.grad(id);
    Tensor& gw = gr.grad_rw(w_id);
    Tensor& gb = gr.grad_rw(b_id);
    for (size_t pi = 0; pi < aug.size(); ++pi) {
      for (int c = 0; c < C; ++c) {
        const int k = argmax[pi * size_t(C) + size_t(c)];
        if (k < 0) continue;
        const double gv = go(c, aug[pi].ix, aug[pi].iy);
        if (gv == 0.0) continue;
        gb.data[size_t(c)] += gv;
        double* gwr = gw.ptr() + size_t(c) * kPillarPointDims;
        for (int d = 0; d < kPillarPointDims; ++d)
          gwr[d] += gv * aug[pi].pts[size_t(k)][size_t(d)];
      }
    }
  });
}

// Convenience forward without a graph, for tests and inference paths.
inline Tensor pillar_features_value(const ParamStore& store, const std::string& prefix,
                                    const PillarBatch& batch, const PillarNetCfg& cfg) {
  const Tensor& w = store.get(prefix + ".w").value;
  const Tensor& b = store.get(prefix + ".b").value;
  const int C = cfg.channels;
  Tensor out({C, batch.grid.nx, batch.grid.ny});
  auto aug = detail::augment_pillars(batch);
  for (const auto& pil : aug) {
    for (int c = 0; c < C; ++c) {
      const double* wr = w.ptr() + size_t(c) * kPillarPointDims;
      double best = 0.0;
      for (const auto& pt : pil.pts) {
        double z = b(c);
        for (int d = 0; d < kPillarPointDims; ++d) z += wr[d] * pt[size_t(d)];
        best = std::max(best, z);
      }
      out(c, pil.ix, pil.iy) = best;
    }
  }
  return out;
}

}  // namespace bsh
