#pragma once

#include <string>

#include "bsh/autograd.hpp"
#include "bsh/nn.hpp"

namespace bsh {

// Attention-based densification fusion: densify the concatenated backbone
// features and heatmap, then apply channel-wise and grid-wise attention.
struct AdfCfg {
  int feature_channels = 16;  // backbone output C_b
  int heatmap_channels = 1;   // K
  int fused_channels = 16;    // F_id channels
  int reduction = 8;          // channel-attention MLP bottleneck ratio
};

inline MlpSpec adf_channel_mlp_spec(const AdfCfg& cfg) {
  const int hidden = std::max(1, cfg.fused_channels / cfg.reduction);
  return MlpSpec{{cfg.fused_channels, hidden, cfg.fused_channels}};
}

inline void adf_init(ParamStore& store, const std::string& prefix, const AdfCfg& cfg,
                     Rng& rng) {
  const int cin = cfg.feature_channels + cfg.heatmap_channels;
  conv_block_init(store, prefix + ".dens.c0", {cin, cfg.fused_channels, 3, 1, 1}, rng);
  conv_block_init(store, prefix + ".dens.c1",
                  {cfg.fused_channels, cfg.fused_channels, 3, 1, 1}, rng);
  mlp_init(store, prefix + ".cattn", adf_channel_mlp_spec(cfg), rng);
  ConvSpec gconv{2, 1, 7, 1, 3};
  gconv.bn = false;
  gconv.act = false;
  conv_block_init(store, prefix + ".gattn", gconv, rng);
}

// F_c = concat(F_b, heatmap); F_id = two 3x3 conv blocks over F_c.
inline int adf_densify(Graph& g, ParamStore& store, const std::string& prefix, int features,
                       int heatmap, const AdfCfg& cfg, bool training) {
  const Tensor& vf = g.val(features);
  const Tensor& vh = g.val(heatmap);
  if (vf.dim(1) != vh.dim(1) || vf.dim(2) != vh.dim(2))
    throw numeric_error("adf_densify: spatial dims mismatch after resampling");
  const int cin = cfg.feature_channels + cfg.heatmap_channels;
  int fc = g.concat_channels({features, heatmap});
  int fid = conv_block(g, store, prefix + ".dens.c0", {cin, cfg.fused_channels, 3, 1, 1}, fc,
                       training);
  fid = conv_block(g, store, prefix + ".dens.c1",
                   {cfg.fused_channels, cfg.fused_channels, 3, 1, 1}, fid, training);
  return fid;
}

// M_c = sigmoid(MLP(avgpool(F_id)) + MLP(maxpool(F_id))), shape (C,1,1).
// The MLP weights are shared between the two branches.
inline int adf_channel_attention(Graph& g, ParamStore& store, const std::string& prefix,
                                 int fid, const AdfCfg& cfg) {
  const MlpSpec mlp = adf_channel_mlp_spec(cfg);
  const int avg = mlp_forward(g, store, prefix + ".cattn", mlp, g.spatial_avg(fid));
  const int mx = mlp_forward(g, store, prefix + ".cattn", mlp, g.spatial_max(fid));
  const int merged = g.sigmoid(g.add(avg, mx));
  return g.reshape(merged, {cfg.fused_channels, 1, 1});
}

// M_g = sigmoid(conv7x7(concat(channel-avg, channel-max))), shape (1,H,W).
inline int adf_grid_attention(Graph& g, ParamStore& store, const std::string& prefix,
                              int fid) {
  const Tensor& v = g.val(fid);
  const int H = v.dim(1), W = v.dim(2);
  const int avg = g.reshape(g.channel_avg(fid), {1, H, W});
  const int mx = g.reshape(g.channel_max(fid), {1, H, W});
  ConvSpec gconv{2, 1, 7, 1, 3};
  gconv.bn = false;
  gconv.act = false;
  const int mixed = conv_block(g, store, prefix + ".gattn", gconv,
                               g.concat_channels({avg, mx}), /*training=*/false);
  return g.sigmoid(mixed);
}

// F_adf = M_g (x) M_c (x) F_id with broadcasting.
inline int adf_fuse(Graph& g, int fid, int channel_mask, int grid_mask) {
  return g.mul(grid_mask, g.mul(channel_mask, fid));
}

inline int adf_forward(Graph& g, ParamStore& store, const std::string& prefix, int features,
                       int heatmap, const AdfCfg& cfg, bool training) {
  const int fid = adf_densify(g, store, prefix, features, heatmap, cfg, training);
  const int mc = adf_channel_attention(g, store, prefix, fid, cfg);
  const int mg = adf_grid_attention(g, store, prefix, fid);
  return adf_fuse(g, fid, mc, mg);
}

}  // namespace bsh
