#pragma once

#include <string>
#include <vector>

#include "bsh/autograd.hpp"
#include "bsh/common.hpp"
#include "bsh/params.hpp"

namespace bsh {

// Kaiming-uniform fan-in init, the convention for the conv/MLP weights here.
inline Tensor kaiming_uniform(Rng& rng, std::vector<int> shape, int fan_in) {
  Tensor t(shape);
  const double bound = std::sqrt(6.0 / double(fan_in));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

struct ConvSpec {
  int in = 0, out = 0;
  int k = 3, stride = 1, pad = 1;
  bool bn = true;
  bool act = true;
};

inline void conv_block_init(ParamStore& store, const std::string& prefix, const ConvSpec& c,
                            Rng& rng) {
  store.create(prefix + ".w", kaiming_uniform(rng, {c.out, c.in, c.k, c.k}, c.in * c.k * c.k));
  store.create(prefix + ".b", Tensor::zeros({c.out}));
  if (c.bn) {
    store.create(prefix + ".bn.g", Tensor::full({c.out}, 1.0));
    store.create(prefix + ".bn.b", Tensor::zeros({c.out}));
    store.create(prefix + ".bn.rm", Tensor::zeros({c.out}), /*trainable=*/false);
    store.create(prefix + ".bn.rv", Tensor::full({c.out}, 1.0), /*trainable=*/false);
  }
}

inline int conv_block(Graph& g, ParamStore& store, const std::string& prefix,
                      const ConvSpec& c, int x, bool training) {
  int y = g.conv2d(x, g.param(store, prefix + ".w"), g.param(store, prefix + ".b"), c.stride,
                   c.pad);
  if (c.bn) {
    y = g.batchnorm2d(y, g.param(store, prefix + ".bn.g"), g.param(store, prefix + ".bn.b"),
                      store.get(prefix + ".bn.rm").value, store.get(prefix + ".bn.rv").value,
                      training);
  }
  if (c.act) y = g.relu(y);
  return y;
}

struct TconvSpec {
  int in = 0, out = 0;
  int k = 1, stride = 1;  // k == stride upsamples to an exact multiple
  bool bn = true;
  bool act = true;
};

inline void tconv_block_init(ParamStore& store, const std::string& prefix, const TconvSpec& c,
                             Rng& rng) {
  store.create(prefix + ".w", kaiming_uniform(rng, {c.in, c.out, c.k, c.k}, c.in * c.k * c.k));
  store.create(prefix + ".b", Tensor::zeros({c.out}));
  if (c.bn) {
    store.create(prefix + ".bn.g", Tensor::full({c.out}, 1.0));
    store.create(prefix + ".bn.b", Tensor::zeros({c.out}));
    store.create(prefix + ".bn.rm", Tensor::zeros({c.out}), false);
    store.create(prefix + ".bn.rv", Tensor::full({c.out}, 1.0), false);
  }
}

inline int tconv_block(Graph& g, ParamStore& store, const std::string& prefix,
                       const TconvSpec& c, int x, bool training) {
  int y = g.tconv2d(x, g.param(store, prefix + ".w"), g.param(store, prefix + ".b"), c.stride);
  if (c.bn) {
    y = g.batchnorm2d(y, g.param(store, prefix + ".bn.g"), g.param(store, prefix + ".bn.b"),
                      store.get(prefix + ".bn.rm").value, store.get(prefix + ".bn.rv").value,
                      training);
  }
  if (c.act) y = g.relu(y);
  return y;
}

// Fully connected stack; ReLU between layers, last layer linear.
struct MlpSpec {
  std::vector<int> widths;  // input width first
};

inline void mlp_init(ParamStore& store, const std::string& prefix, const MlpSpec& m,
                     Rng& rng) {
  for (size_t i = 0; i + 1 < m.widths.size(); ++i) {
    const int in = m.widths[i], out = m.widths[i + 1];
    store.create(prefix + ".l" + std::to_string(i) + ".w",
                 kaiming_uniform(rng, {out, in}, in));
    store.create(prefix + ".l" + std::to_string(i) + ".b", Tensor::zeros({out}));
  }
}

inline int mlp_forward(Graph& g, ParamStore& store, const std::string& prefix,
                       const MlpSpec& m, int x) {
  int y = x;
  for (size_t i = 0; i + 1 < m.widths.size(); ++i) {
    const std::string l = prefix + ".l" + std::to_string(i);
    y = g.linear(y, g.param(store, l + ".w"), g.param(store, l + ".b"));
    if (i + 2 < m.widths.size()) y = g.relu(y);
  }
  return y;
}

}  // namespace bsh
