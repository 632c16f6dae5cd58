#pragma once

#include <array>
#include <string>
#include <vector>

#include "bsh/autograd.hpp"
#include "bsh/nn.hpp"
#include "bsh/shape_labels.hpp"

namespace bsh {

// Pillar-wise shape occupancy network: top-down blocks at strides 1/2/4,
// transposed-conv branches back to full resolution, concat, conv head.
struct OccupancyNetCfg {
  int in_channels = 8;
  std::array<int, 3> block_channels = {8, 12, 16};
  int up_channels = 8;
  int head_channels = 8;
  int num_classes = 1;
  double bias_prior = 0.01;  // final-layer bias set to -ln((1-p)/p)
};

struct ShapeLossCfg {
  double alpha = 2.0;
  double beta = 4.0;
  double lambda = 6.0;  // weight of the shape term in the total loss
};

inline void occupancy_net_init(ParamStore& store, const std::string& prefix,
                               const OccupancyNetCfg& cfg, Rng& rng) {
  const auto& bc = cfg.block_channels;
  conv_block_init(store, prefix + ".b0.c0", {cfg.in_channels, bc[0], 3, 1, 1}, rng);
  conv_block_init(store, prefix + ".b0.c1", {bc[0], bc[0], 3, 1, 1}, rng);
  conv_block_init(store, prefix + ".b1.c0", {bc[0], bc[1], 3, 2, 1}, rng);
  conv_block_init(store, prefix + ".b1.c1", {bc[1], bc[1], 3, 1, 1}, rng);
  conv_block_init(store, prefix + ".b2.c0", {bc[1], bc[2], 3, 2, 1}, rng);
  conv_block_init(store, prefix + ".b2.c1", {bc[2], bc[2], 3, 1, 1}, rng);
  tconv_block_init(store, prefix + ".u0", {bc[0], cfg.up_channels, 1, 1}, rng);
  tconv_block_init(store, prefix + ".u1", {bc[1], cfg.up_channels, 2, 2}, rng);
  tconv_block_init(store, prefix + ".u2", {bc[2], cfg.up_channels, 4, 4}, rng);
  conv_block_init(store, prefix + ".head.c0", {3 * cfg.up_channels, cfg.head_channels, 3, 1, 1},
                  rng);
  conv_block_init(store, prefix + ".head.c1", {cfg.head_channels, cfg.head_channels, 3, 1, 1},
                  rng);
  ConvSpec fin{cfg.head_channels, cfg.num_classes, 3, 1, 1};
  fin.bn = false;
  fin.act = false;
  conv_block_init(store, prefix + ".head.out", fin, rng);
  const double b = -std::log((1.0 - cfg.bias_prior) / cfg.bias_prior);
  store.get(prefix + ".head.out.b").value.fill(b);
}

// Sigmoid-activated K-channel occupancy probabilities at the pillar-grid
// resolution.
inline int psc_forward(Graph& g, ParamStore& store, const std::string& prefix, int fp,
                       const OccupancyNetCfg& cfg, bool training) {
  if (g.val(fp).dim(0) != cfg.in_channels)
    throw numeric_error("psc_forward: pillar feature channel mismatch");
  const auto& bc = cfg.block_channels;
  int b0 = conv_block(g, store, prefix + ".b0.c0", {cfg.in_channels, bc[0], 3, 1, 1}, fp,
                      training);
  b0 = conv_block(g, store, prefix + ".b0.c1", {bc[0], bc[0], 3, 1, 1}, b0, training);
  int b1 = conv_block(g, store, prefix + ".b1.c0", {bc[0], bc[1], 3, 2, 1}, b0, training);
  b1 = conv_block(g, store, prefix + ".b1.c1", {bc[1], bc[1], 3, 1, 1}, b1, training);
  int b2 = conv_block(g, store, prefix + ".b2.c0", {bc[1], bc[2], 3, 2, 1}, b1, training);
  b2 = conv_block(g, store, prefix + ".b2.c1", {bc[2], bc[2], 3, 1, 1}, b2, training);
  const int u0 = tconv_block(g, store, prefix + ".u0", {bc[0], cfg.up_channels, 1, 1}, b0,
                             training);
  const int u1 = tconv_block(g, store, prefix + ".u1", {bc[1], cfg.up_channels, 2, 2}, b1,
                             training);
  const int u2 = tconv_block(g, store, prefix + ".u2", {bc[2], cfg.up_channels, 4, 4}, b2,
                             training);
  int h = g.concat_channels({u0, u1, u2});
  h = conv_block(g, store, prefix + ".head.c0",
                 {3 * cfg.up_channels, cfg.head_channels, 3, 1, 1}, h, training);
  h = conv_block(g, store, prefix + ".head.c1",
                 {cfg.head_channels, cfg.head_channels, 3, 1, 1}, h, training);
  ConvSpec fin{cfg.head_channels, cfg.num_classes, 3, 1, 1};
  fin.bn = false;
  fin.act = false;
  h = conv_block(g, store, prefix + ".head.out", fin, h, training);
  return g.sigmoid(h);
}

namespace detail {

inline double clamped_log(double v) { return std::log(std::max(v, 1e-12)); }
inline double clamped_log_grad(double v) { return v > 1e-12 ? 1.0 / v : 0.0; }

}  // namespace detail

// Focal shape loss over probabilities: cells with Y == 1 use the positive
// branch, everything else is weighted by (1-Y)^beta. Normalized by the
// count of Y == 1 cells (at least 1).
inline double shape_focal_loss_value(const Tensor& probs, const Tensor& target,
                                     const ShapeLossCfg& cfg) {
  if (!probs.same_shape(target)) throw numeric_error("shape_focal_loss: shape mismatch");
  if (!probs.all_finite() || !target.all_finite())
    throw numeric_error("shape_focal_loss: non-finite input");
  size_t n_pos = 0;
  double acc = 0;
  for (size_t i = 0; i < probs.numel(); ++i) {
    const double p = probs.data[i];
    const double y = target.data[i];
    if (y == 1.0) {
      ++n_pos;
      acc += std::pow(1.0 - p, cfg.alpha) * detail::clamped_log(p);
    } else {
      acc += std::pow(1.0 - y, cfg.beta) * std::pow(p, cfg.alpha) *
             detail::clamped_log(1.0 - p);
    }
  }
  const double n = double(std::max<size_t>(n_pos, 1));
  return -acc / n;
}

inline int shape_focal_loss(Graph& g, int probs, const Tensor& target,
                            const ShapeLossCfg& cfg) {
  const Tensor& p = g.val(probs);
  const double loss = shape_focal_loss_value(p, target, cfg);
  size_t n_pos = 0;
  for (double y : target.data)
    if (y == 1.0) ++n_pos;
  const double inv_n = 1.0 / double(std::max<size_t>(n_pos, 1));
  Tensor tgt = target;
  const double alpha = cfg.alpha, beta = cfg.beta;
  return g.make_node(Tensor::scalar(loss), [probs, tgt, alpha, beta, inv_n](Graph& gr,
                                                                            int id) {
    const double go = gr.grad(id).data[0];
    const Tensor& p = gr.val(probs);
    Tensor& gp = gr.grad_rw(probs);
    for (size_t i = 0; i < p.numel(); ++i) {
      const double pv = p.data[i];
      const double y = tgt.data[i];
      double d;
      if (y == 1.0) {
        d = -alpha * std::pow(1.0 - pv, alpha - 1.0) * detail::clamped_log(pv) +
            std::pow(1.0 - pv, alpha) * detail::clamped_log_grad(pv);
      } else {
        d = std::pow(1.0 - y, beta) *
            (alpha * std::pow(pv, alpha - 1.0) * detail::clamped_log(1.0 - pv) -
             std::pow(pv, alpha) * detail::clamped_log_grad(1.0 - pv));
      }
      gp.data[i] += go * (-inv_n) * d;
    }
  });
}

// Zero sub-threshold probabilities, keep the rest (soft mask); threshold
// is inclusive at 0.5.
inline Tensor threshold_heatmap_value(const Tensor& probs, double thresh = 0.5) {
  Tensor out = probs;
  for (auto& v : out.data)
    if (v < thresh) v = 0.0;
  return out;
}

inline int threshold_heatmap(Graph& g, int probs, double thresh = 0.5) {
  Tensor out = threshold_heatmap_value(g.val(probs), thresh);
  return g.make_node(std::move(out), [probs, thresh](Graph& gr, int id) {
    const Tensor& go = gr.grad(id);
    const Tensor& p = gr.val(probs);
    Tensor& gp = gr.grad_rw(probs);
    for (size_t i = 0; i < go.numel(); ++i)
      if (p.data[i] >= thresh) gp.data[i] += go.data[i];
  });
}

}  // namespace bsh
