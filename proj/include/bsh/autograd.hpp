#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bsh/common.hpp"
#include "bsh/params.hpp"
#include "bsh/tensor.hpp"

namespace bsh {

// Reverse-mode autodiff over a tape of op closures. A graph instance is
// built per forward pass and is single-threaded; parameters live outside
// in a ParamStore and receive accumulated gradients on backward().
template <class T>
class GraphT {
 public:
  using Tensor = TensorT<T>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(GraphT&, int)> back;
    ParamT<T>* bound = nullptr;
    bool touched = false;
  };

  int leaf(Tensor v) { return push(std::move(v), nullptr, nullptr); }

  int param(ParamStoreT<T>& store, const std::string& name) {
    ParamT<T>& p = store.get(name);
    return push(p.value, nullptr, &p);
  }

  int make_node(Tensor value, std::function<void(GraphT&, int)> back) {
    return push(std::move(value), std::move(back), nullptr);
  }

  const Tensor& val(int id) const { return nodes_[size_t(id)].value; }
  const Tensor& grad(int id) const { return nodes_[size_t(id)].grad; }

  // Gradient buffer for writing; marks the node as reached.
  Tensor& grad_rw(int id) {
    nodes_[size_t(id)].touched = true;
    return nodes_[size_t(id)].grad;
  }

  size_t size() const { return nodes_.size(); }

  // Reverse accumulation from a scalar loss. Parameter gradients are added
  // into their store entries, so repeated calls accumulate.
  void backward(int loss) {
    if (loss < 0 || loss >= int(nodes_.size()))
      throw numeric_error("backward: no recorded forward for this loss");
    if (nodes_[size_t(loss)].value.numel() != 1)
      throw numeric_error("backward: loss must be scalar");
    for (auto& n : nodes_) {
      n.grad.fill(T(0));
      n.touched = false;
    }
    nodes_[size_t(loss)].grad.data[0] = T(1);
    nodes_[size_t(loss)].touched = true;
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.back && n.touched) n.back(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.bound && n.touched) {
        for (size_t i = 0; i < n.grad.numel(); ++i) n.bound->grad.data[i] += n.grad.data[i];
      }
    }
  }

  // ---- elementwise ----

  int add(int a, int b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw numeric_error("add: shape mismatch");
    Tensor out = va;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
    return make_node(std::move(out), [a, b](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      Tensor& gb = g.grad_rw(b);
      for (size_t i = 0; i < go.numel(); ++i) {
        ga.data[i] += go.data[i];
        gb.data[i] += go.data[i];
      }
    });
  }

  int scale(int a, double c) {
    Tensor out = val(a);
    for (auto& v : out.data) v = T(double(v) * c);
    return make_node(std::move(out), [a, c](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      for (size_t i = 0; i < go.numel(); ++i) ga.data[i] += T(double(go.data[i]) * c);
    });
  }

  int relu(int a) {
    Tensor out = val(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return make_node(std::move(out), [a](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      const Tensor& va = g.val(a);
      Tensor& ga = g.grad_rw(a);
      for (size_t i = 0; i < go.numel(); ++i)
        if (va.data[i] > T(0)) ga.data[i] += go.data[i];
    });
  }

  int sigmoid(int a) {
    Tensor out = val(a);
    for (auto& v : out.data) v = stable_sigmoid(v);
    Tensor saved = out;
    return make_node(std::move(out), [a, saved](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      for (size_t i = 0; i < go.numel(); ++i) {
        const T s = saved.data[i];
        ga.data[i] += go.data[i] * s * (T(1) - s);
      }
    });
  }

  // Elementwise product with broadcasting over size-1 axes (rank <= 3),
  // e.g. (C,H,W) x (C,1,1) or (C,H,W) x (1,H,W).
  int mul(int a, int b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.rank() != vb.rank()) throw numeric_error("mul: rank mismatch");
    std::vector<int> oshape(size_t(va.rank()));
    for (int i = 0; i < va.rank(); ++i) {
      int da = va.dim(i), db = vb.dim(i);
      if (da != db && da != 1 && db != 1) throw numeric_error("mul: shape mismatch");
      oshape[size_t(i)] = std::max(da, db);
    }
    while (oshape.size() < 3) oshape.push_back(1);
    Tensor out(oshape);
    const int D0 = oshape[0], D1 = oshape[1], D2 = oshape[2];
    auto idx = [](const Tensor& t, int i, int j, int k) {
      int r = t.rank();
      int d0 = r > 0 ? t.shape[0] : 1, d1 = r > 1 ? t.shape[1] : 1,
          d2 = r > 2 ? t.shape[2] : 1;
      return (size_t(d0 == 1 ? 0 : i) * size_t(d1) + size_t(d1 == 1 ? 0 : j)) * size_t(d2) +
             size_t(d2 == 1 ? 0 : k);
    };
    for (int i = 0; i < D0; ++i)
      for (int j = 0; j < D1; ++j)
        for (int k = 0; k < D2; ++k)
          out(i, j, k) = va.data[idx(va, i, j, k)] * vb.data[idx(vb, i, j, k)];
    return make_node(std::move(out), [a, b, D0, D1, D2, idx](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      const Tensor& va = g.val(a);
      const Tensor& vb = g.val(b);
      Tensor& ga = g.grad_rw(a);
      Tensor& gb = g.grad_rw(b);
      for (int i = 0; i < D0; ++i)
        for (int j = 0; j < D1; ++j)
          for (int k = 0; k < D2; ++k) {
            const T gv = go.data[(size_t(i) * size_t(D1) + size_t(j)) * size_t(D2) + size_t(k)];
            ga.data[idx(va, i, j, k)] += gv * vb.data[idx(vb, i, j, k)];
            gb.data[idx(vb, i, j, k)] += gv * va.data[idx(va, i, j, k)];
          }
    });
  }

  // ---- shape ops ----

  int reshape(int a, std::vector<int> new_shape) {
    Tensor out(new_shape);
    const Tensor& va = val(a);
    if (out.numel() != va.numel()) throw numeric_error("reshape: numel mismatch");
    out.data = va.data;
    return make_node(std::move(out), [a](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      for (size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
    });
  }

  int concat_channels(const std::vector<int>& xs) {
    if (xs.empty()) throw numeric_error("concat: empty input");
    const Tensor& first = val(xs[0]);
    if (first.rank() != 3) throw numeric_error("concat: rank-3 expected");
    const int H = first.dim(1), W = first.dim(2);
    int C = 0;
    for (int x : xs) {
      const Tensor& v = val(x);
      if (v.rank() != 3 || v.dim(1) != H || v.dim(2) != W)
        throw numeric_error("concat: spatial dims mismatch");
      C += v.dim(0);
    }
    Tensor out({C, H, W});
    size_t off = 0;
    for (int x : xs) {
      const Tensor& v = val(x);
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + long(off));
      off += v.numel();
    }
    std::vector<int> parts(xs.begin(), xs.end());
    return make_node(std::move(out), [parts](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      size_t off = 0;
      for (int x : parts) {
        Tensor& gx = g.grad_rw(x);
        for (size_t i = 0; i < gx.numel(); ++i) gx.data[i] += go.data[off + i];
        off += gx.numel();
      }
    });
  }

  // Concatenate rank-2 tensors along columns: (P,Ca)+(P,Cb) -> (P,Ca+Cb).
  int concat_cols(const std::vector<int>& xs) {
    if (xs.empty()) throw numeric_error("concat_cols: empty input");
    const int P = val(xs[0]).dim(0);
    int D = 0;
    for (int x : xs) {
      const Tensor& v = val(x);
      if (v.rank() != 2 || v.dim(0) != P) throw numeric_error("concat_cols: shape mismatch");
      D += v.dim(1);
    }
    Tensor out({P, D});
    int col = 0;
    for (int x : xs) {
      const Tensor& v = val(x);
      const int d = v.dim(1);
      for (int p = 0; p < P; ++p)
        for (int j = 0; j < d; ++j) out(p, col + j) = v(p, j);
      col += d;
    }
    std::vector<int> parts(xs.begin(), xs.end());
    return make_node(std::move(out), [parts, P](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      int col = 0;
      for (int x : parts) {
        Tensor& gx = g.grad_rw(x);
        const int d = gx.dim(1);
        for (int p = 0; p < P; ++p)
          for (int j = 0; j < d; ++j) gx(p, j) += go(p, col + j);
        col += d;
      }
    });
  }

  // ---- reductions ----

  int sum(int a) {
    const Tensor& va = val(a);
    double s = 0;
    for (T v : va.data) s += double(v);
    return make_node(Tensor::scalar(T(s)), [a](GraphT& g, int id) {
      const T go = g.grad(id).data[0];
      Tensor& ga = g.grad_rw(a);
      for (auto& v : ga.data) v += go;
    });
  }

  int mean(int a) {
    const Tensor& va = val(a);
    const double inv = 1.0 / double(va.numel());
    double s = 0;
    for (T v : va.data) s += double(v);
    return make_node(Tensor::scalar(T(s * inv)), [a, inv](GraphT& g, int id) {
      const T go = g.grad(id).data[0];
      Tensor& ga = g.grad_rw(a);
      for (auto& v : ga.data) v += T(double(go) * inv);
    });
  }

  // Spatial descriptors over (C,H,W): mean and max across H*W.
  int spatial_avg(int a) {
    const Tensor& va = val(a);
    require_rank3(va, "spatial_avg");
    const int C = va.dim(0);
    const size_t hw = size_t(va.dim(1)) * size_t(va.dim(2));
    Tensor out({C});
    for (int c = 0; c < C; ++c) {
      double s = 0;
      const T* p = va.ptr() + size_t(c) * hw;
      for (size_t i = 0; i < hw; ++i) s += double(p[i]);
      out(c) = T(s / double(hw));
    }
    return make_node(std::move(out), [a, C, hw](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      const T inv = T(1.0 / double(hw));
      for (int c = 0; c < C; ++c) {
        T* p = ga.ptr() + size_t(c) * hw;
        const T gv = go.data[size_t(c)] * inv;
        for (size_t i = 0; i < hw; ++i) p[i] += gv;
      }
    });
  }

  int spatial_max(int a) {
    const Tensor& va = val(a);
    require_rank3(va, "spatial_max");
    const int C = va.dim(0);
    const size_t hw = size_t(va.dim(1)) * size_t(va.dim(2));
    Tensor out({C});
    std::vector<size_t> arg(size_t(C));
    for (int c = 0; c < C; ++c) {
      const T* p = va.ptr() + size_t(c) * hw;
      size_t best = 0;
      for (size_t i = 1; i < hw; ++i)
        if (p[i] > p[best]) best = i;
      arg[size_t(c)] = best;
      out(c) = p[best];
    }
    return make_node(std::move(out), [a, C, hw, arg](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      for (int c = 0; c < C; ++c) ga.data[size_t(c) * hw + arg[size_t(c)]] += go.data[size_t(c)];
    });
  }

  // Channel descriptors over (C,H,W): mean and max across C, output (H,W).
  int channel_avg(int a) {
    const Tensor& va = val(a);
    require_rank3(va, "channel_avg");
    const int C = va.dim(0), H = va.dim(1), W = va.dim(2);
    const size_t hw = size_t(H) * size_t(W);
    Tensor out({H, W});
    for (size_t i = 0; i < hw; ++i) {
      double s = 0;
      for (int c = 0; c < C; ++c) s += double(va.data[size_t(c) * hw + i]);
      out.data[i] = T(s / C);
    }
    return make_node(std::move(out), [a, C, hw](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      const T inv = T(1.0 / C);
      for (size_t i = 0; i < hw; ++i) {
        const T gv = go.data[i] * inv;
        for (int c = 0; c < C; ++c) ga.data[size_t(c) * hw + i] += gv;
      }
    });
  }

  int channel_max(int a) {
    const Tensor& va = val(a);
    require_rank3(va, "channel_max");
    const int C = va.dim(0), H = va.dim(1), W = va.dim(2);
    const size_t hw = size_t(H) * size_t(W);
    Tensor out({H, W});
    std::vector<int> arg(hw);
    for (size_t i = 0; i < hw; ++i) {
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (va.data[size_t(c) * hw + i] > va.data[size_t(best) * hw + i]) best = c;
      arg[i] = best;
      out.data[i] = va.data[size_t(best) * hw + i];
    }
    return make_node(std::move(out), [a, hw, arg](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      for (size_t i = 0; i < hw; ++i) ga.data[size_t(arg[i]) * hw + i] += go.data[i];
    });
  }

  int avgpool2d(int a, int k, int s) {
    const Tensor& va = val(a);
    require_rank3(va, "avgpool2d");
    const int C = va.dim(0), H = va.dim(1), W = va.dim(2);
    const int Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
    if (Ho <= 0 || Wo <= 0) throw numeric_error("avgpool2d: window larger than input");
    Tensor out({C, Ho, Wo});
    const double inv = 1.0 / double(k * k);
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = 0;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) acc += double(va(c, oy * s + ky, ox * s + kx));
          out(c, oy, ox) = T(acc * inv);
        }
    return make_node(std::move(out), [a, k, s, C, Ho, Wo, inv](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& ga = g.grad_rw(a);
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const T gv = T(double(go(c, oy, ox)) * inv);
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) ga(c, oy * s + ky, ox * s + kx) += gv;
          }
    });
  }

  // ---- linear algebra ----

  // y = W x + b for x of shape (N) -> (M), or row-wise (P,N) -> (P,M).
  int linear(int x, int w, int b) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    if (vw.rank() != 2) throw numeric_error("linear: weight must be rank-2");
    const int M = vw.dim(0), N = vw.dim(1);
    if (vb.rank() != 1 || vb.dim(0) != M) throw numeric_error("linear: bias shape");
    const bool rows = vx.rank() == 2;
    const int P = rows ? vx.dim(0) : 1;
    const int xn = rows ? vx.dim(1) : vx.dim(0);
    if (vx.rank() > 2 || xn != N) throw numeric_error("linear: input shape");
    Tensor out(rows ? std::vector<int>{P, M} : std::vector<int>{M});
    for (int p = 0; p < P; ++p) {
      const T* xp = vx.ptr() + size_t(p) * size_t(N);
      T* op = out.ptr() + size_t(p) * size_t(M);
      for (int m = 0; m < M; ++m) {
        double acc = double(vb(m));
        const T* wr = vw.ptr() + size_t(m) * size_t(N);
        for (int n = 0; n < N; ++n) acc += double(wr[n]) * double(xp[n]);
        op[m] = T(acc);
      }
    }
    return make_node(std::move(out), [x, w, b, P, M, N](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      const Tensor& vx = g.val(x);
      const Tensor& vw = g.val(w);
      Tensor& gx = g.grad_rw(x);
      Tensor& gw = g.grad_rw(w);
      Tensor& gb = g.grad_rw(b);
      for (int p = 0; p < P; ++p) {
        const T* xp = vx.ptr() + size_t(p) * size_t(N);
        const T* gop = go.ptr() + size_t(p) * size_t(M);
        T* gxp = gx.ptr() + size_t(p) * size_t(N);
        for (int m = 0; m < M; ++m) {
          const T gv = gop[m];
          gb.data[size_t(m)] += gv;
          const T* wr = vw.ptr() + size_t(m) * size_t(N);
          T* gwr = gw.ptr() + size_t(m) * size_t(N);
          for (int n = 0; n < N; ++n) {
            gwr[n] += gv * xp[n];
            gxp[n] += gv * wr[n];
          }
        }
      }
    });
  }

  // ---- convolution ----

  // Cross-correlation of x(Ci,H,W) with w(Co,Ci,kh,kw) plus bias.
  int conv2d(int x, int w, int b, int stride, int pad) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    require_rank3(vx, "conv2d");
    if (vw.rank() != 4) throw numeric_error("conv2d: weight must be rank-4");
    const int Ci = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    const int Co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(1) != Ci) throw numeric_error("conv2d: channel mismatch");
    if (vb.rank() != 1 || vb.dim(0) != Co) throw numeric_error("conv2d: bias shape");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw numeric_error("conv2d: empty output");
    Tensor out({Co, Ho, Wo});
    for (int co = 0; co < Co; ++co) {
      T* op = out.ptr() + size_t(co) * size_t(Ho) * size_t(Wo);
      const T bias = vb(co);
      for (size_t i = 0; i < size_t(Ho) * size_t(Wo); ++i) op[i] = bias;
    }
    conv_accumulate(vx, vw, out, stride, pad, Ci, H, W, Co, kh, kw, Ho, Wo);
    const int s = stride, p = pad;
    return make_node(std::move(out),
                     [x, w, b, s, p, Ci, H, W, Co, kh, kw, Ho, Wo](GraphT& g, int id) {
                       conv_backward(g, id, x, w, b, s, p, Ci, H, W, Co, kh, kw, Ho, Wo);
                     });
  }

  // Transposed convolution: x(Ci,H,W) with w(Ci,Co,kh,kw), stride s, no pad.
  // Output spatial dims are (H-1)*s + k.
  int tconv2d(int x, int w, int b, int stride) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    require_rank3(vx, "tconv2d");
    if (vw.rank() != 4) throw numeric_error("tconv2d: weight must be rank-4");
    const int Ci = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    const int Co = vw.dim(1), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(0) != Ci) throw numeric_error("tconv2d: channel mismatch");
    if (vb.rank() != 1 || vb.dim(0) != Co) throw numeric_error("tconv2d: bias shape");
    const int Ho = (H - 1) * stride + kh;
    const int Wo = (W - 1) * stride + kw;
    Tensor out({Co, Ho, Wo});
    for (int co = 0; co < Co; ++co) {
      T* op = out.ptr() + size_t(co) * size_t(Ho) * size_t(Wo);
      const T bias = vb(co);
      for (size_t i = 0; i < size_t(Ho) * size_t(Wo); ++i) op[i] = bias;
    }
    for (int ci = 0; ci < Ci; ++ci)
      for (int co = 0; co < Co; ++co)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = vw(ci, co, ky, kx);
            if (wv == T(0)) continue;
            for (int y = 0; y < H; ++y) {
              const T* xr = vx.ptr() + (size_t(ci) * size_t(H) + size_t(y)) * size_t(W);
              T* orow = out.ptr() +
                        (size_t(co) * size_t(Ho) + size_t(y * stride + ky)) * size_t(Wo) + kx;
              for (int xi = 0; xi < W; ++xi) orow[size_t(xi) * size_t(stride)] += wv * xr[xi];
            }
          }
    const int s = stride;
    return make_node(std::move(out), [x, w, b, s, Ci, H, W, Co, kh, kw, Ho, Wo](GraphT& g,
                                                                                int id) {
      const Tensor& go = g.grad(id);
      const Tensor& vx = g.val(x);
      const Tensor& vw = g.val(w);
      Tensor& gx = g.grad_rw(x);
      Tensor& gw = g.grad_rw(w);
      Tensor& gb = g.grad_rw(b);
      for (int co = 0; co < Co; ++co) {
        const T* gp = go.ptr() + size_t(co) * size_t(Ho) * size_t(Wo);
        double acc = 0;
        for (size_t i = 0; i < size_t(Ho) * size_t(Wo); ++i) acc += double(gp[i]);
        gb.data[size_t(co)] += T(acc);
      }
      for (int ci = 0; ci < Ci; ++ci)
        for (int co = 0; co < Co; ++co)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const T wv = vw(ci, co, ky, kx);
              double wacc = 0;
              for (int y = 0; y < H; ++y) {
                const T* xr = vx.ptr() + (size_t(ci) * size_t(H) + size_t(y)) * size_t(W);
                T* gxr = gx.ptr() + (size_t(ci) * size_t(H) + size_t(y)) * size_t(W);
                const T* grow = go.ptr() +
                                (size_t(co) * size_t(Ho) + size_t(y * s + ky)) * size_t(Wo) +
                                kx;
                for (int xi = 0; xi < W; ++xi) {
                  const T gv = grow[size_t(xi) * size_t(s)];
                  gxr[xi] += wv * gv;
                  wacc += double(xr[xi]) * double(gv);
                }
              }
              gw(ci, co, ky, kx) += T(wacc);
            }
    });
  }

  // Per-channel batch normalization over the spatial extent of (C,H,W).
  // Training mode uses batch statistics and updates the running buffers;
  // eval mode reads them.
  int batchnorm2d(int x, int gamma, int beta, Tensor& running_mean, Tensor& running_var,
                  bool training, double momentum = 0.1) {
    const Tensor& vx = val(x);
    require_rank3(vx, "batchnorm2d");
    const int C = vx.dim(0);
    const size_t hw = size_t(vx.dim(1)) * size_t(vx.dim(2));
    if (val(gamma).rank() != 1 || val(gamma).dim(0) != C || val(beta).dim(0) != C)
      throw numeric_error("batchnorm2d: affine shape mismatch");
    if (training && hw < 2)
      throw numeric_error("batchnorm2d: need >= 2 spatial elements in train mode");
    constexpr double eps = 1e-5;

    std::vector<double> mean(size_t(C)), invstd(size_t(C));
    if (training) {
      for (int c = 0; c < C; ++c) {
        const T* p = vx.ptr() + size_t(c) * hw;
        double m = 0;
        for (size_t i = 0; i < hw; ++i) m += double(p[i]);
        m /= double(hw);
        double var = 0;
        for (size_t i = 0; i < hw; ++i) {
          const double d = double(p[i]) - m;
          var += d * d;
        }
        var /= double(hw);
        mean[size_t(c)] = m;
        invstd[size_t(c)] = 1.0 / std::sqrt(var + eps);
        const double unbiased = var * double(hw) / double(hw - 1);
        running_mean.data[size_t(c)] =
            T((1.0 - momentum) * double(running_mean.data[size_t(c)]) + momentum * m);
        running_var.data[size_t(c)] =
            T((1.0 - momentum) * double(running_var.data[size_t(c)]) + momentum * unbiased);
      }
    } else {
      for (int c = 0; c < C; ++c) {
        mean[size_t(c)] = double(running_mean.data[size_t(c)]);
        invstd[size_t(c)] = 1.0 / std::sqrt(double(running_var.data[size_t(c)]) + eps);
      }
    }

    Tensor out = vx;
    const Tensor& vg = val(gamma);
    const Tensor& vbt = val(beta);
    for (int c = 0; c < C; ++c) {
      T* p = out.ptr() + size_t(c) * hw;
      const double m = mean[size_t(c)], is = invstd[size_t(c)];
      const double gm = double(vg(c)), bt = double(vbt(c));
      for (size_t i = 0; i < hw; ++i) p[i] = T((double(p[i]) - m) * is * gm + bt);
    }
    return make_node(std::move(out), [x, gamma, beta, C, hw, mean, invstd,
                                      training](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      const Tensor& vx = g.val(x);
      const Tensor& vg = g.val(gamma);
      Tensor& gx = g.grad_rw(x);
      Tensor& gg = g.grad_rw(gamma);
      Tensor& gb = g.grad_rw(beta);
      for (int c = 0; c < C; ++c) {
        const T* xp = vx.ptr() + size_t(c) * hw;
        const T* gp = go.ptr() + size_t(c) * hw;
        T* gxp = gx.ptr() + size_t(c) * hw;
        const double m = mean[size_t(c)], is = invstd[size_t(c)];
        const double gm = double(vg(c));
        double sum_g = 0, sum_gx = 0;
        for (size_t i = 0; i < hw; ++i) {
          const double xh = (double(xp[i]) - m) * is;
          sum_g += double(gp[i]);
          sum_gx += double(gp[i]) * xh;
        }
        gg.data[size_t(c)] += T(sum_gx);
        gb.data[size_t(c)] += T(sum_g);
        if (training) {
          const double n = double(hw);
          for (size_t i = 0; i < hw; ++i) {
            const double xh = (double(xp[i]) - m) * is;
            const double d = gm * is * (double(gp[i]) - sum_g / n - xh * sum_gx / n);
            gxp[i] += T(d);
          }
        } else {
          for (size_t i = 0; i < hw; ++i) gxp[i] += T(double(gp[i]) * gm * is);
        }
      }
    });
  }

  // Bilinear samples of map(C,H,W) at continuous cell coordinates; points
  // outside the map contribute zero. Output (P,C).
  int bilinear_gather(int map, const std::vector<std::array<double, 2>>& pts) {
    const Tensor& vm = val(map);
    require_rank3(vm, "bilinear_gather");
    const int C = vm.dim(0), H = vm.dim(1), W = vm.dim(2);
    const int P = int(pts.size());
    if (P == 0) throw numeric_error("bilinear_gather: no points");
    struct Tap {
      int cell;
      double wgt;
    };
    std::vector<std::array<Tap, 4>> taps(size_t(P));
    for (int p = 0; p < P; ++p) {
      const double fx = pts[size_t(p)][0];
      const double fy = pts[size_t(p)][1];
      const int x0 = int(std::floor(fx));
      const int y0 = int(std::floor(fy));
      const double ax = fx - x0, ay = fy - y0;
      const double wts[4] = {(1 - ax) * (1 - ay), (1 - ax) * ay, ax * (1 - ay), ax * ay};
      const int xs[4] = {x0, x0, x0 + 1, x0 + 1};
      const int ys[4] = {y0, y0 + 1, y0, y0 + 1};
      for (int t = 0; t < 4; ++t) {
        if (xs[t] >= 0 && xs[t] < H && ys[t] >= 0 && ys[t] < W && wts[t] != 0.0)
          taps[size_t(p)][size_t(t)] = {xs[t] * W + ys[t], wts[t]};
        else
          taps[size_t(p)][size_t(t)] = {-1, 0.0};
      }
    }
    Tensor out({P, C});
    const size_t hw = size_t(H) * size_t(W);
    for (int p = 0; p < P; ++p)
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (const Tap& t : taps[size_t(p)])
          if (t.cell >= 0) acc += t.wgt * double(vm.data[size_t(c) * hw + size_t(t.cell)]);
        out(p, c) = T(acc);
      }
    return make_node(std::move(out), [map, taps, C, hw, P](GraphT& g, int id) {
      const Tensor& go = g.grad(id);
      Tensor& gm = g.grad_rw(map);
      for (int p = 0; p < P; ++p)
        for (int c = 0; c < C; ++c) {
          const double gv = double(go(p, c));
          for (const Tap& t : taps[size_t(p)])
            if (t.cell >= 0) gm.data[size_t(c) * hw + size_t(t.cell)] += T(t.wgt * gv);
        }
    });
  }

  static T stable_sigmoid(T x) {
    if (x >= T(0)) {
      const double e = std::exp(-double(x));
      return T(1.0 / (1.0 + e));
    }
    const double e = std::exp(double(x));
    return T(e / (1.0 + e));
  }

 private:
  static void require_rank3(const Tensor& t, const char* op) {
    if (t.rank() != 3) throw numeric_error(std::string(op) + ": rank-3 tensor expected");
  }

  static void conv_accumulate(const Tensor& vx, const Tensor& vw, Tensor& out, int s, int p,
                              int Ci, int H, int W, int Co, int kh, int kw, int Ho, int Wo) {
    for (int co = 0; co < Co; ++co)
      for (int ci = 0; ci < Ci; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = vw(co, ci, ky, kx);
            if (wv == T(0)) continue;
            int lo, hi;
            col_range(kx, p, s, W, Wo, lo, hi);
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * s + ky - p;
              if (iy < 0 || iy >= H) continue;
              const T* xr = vx.ptr() + (size_t(ci) * size_t(H) + size_t(iy)) * size_t(W);
              T* orow = out.ptr() + (size_t(co) * size_t(Ho) + size_t(oy)) * size_t(Wo);
              for (int ox = lo; ox <= hi; ++ox) orow[ox] += wv * xr[ox * s + kx - p];
            }
          }
  }

  static void conv_backward(GraphT& g, int id, int x, int w, int b, int s, int p, int Ci,
                            int H, int W, int Co, int kh, int kw, int Ho, int Wo) {
    const Tensor& go = g.grad(id);
    const Tensor& vx = g.val(x);
    const Tensor& vw = g.val(w);
    Tensor& gx = g.grad_rw(x);
    Tensor& gw = g.grad_rw(w);
    Tensor& gb = g.grad_rw(b);
    for (int co = 0; co < Co; ++co) {
      const T* gp = go.ptr() + size_t(co) * size_t(Ho) * size_t(Wo);
      double acc = 0;
      for (size_t i = 0; i < size_t(Ho) * size_t(Wo); ++i) acc += double(gp[i]);
      gb.data[size_t(co)] += T(acc);
    }
    for (int co = 0; co < Co; ++co)
      for (int ci = 0; ci < Ci; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = vw(co, ci, ky, kx);
            double wacc = 0;
            int lo, hi;
            col_range(kx, p, s, W, Wo, lo, hi);
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * s + ky - p;
              if (iy < 0 || iy >= H) continue;
              const T* xr = vx.ptr() + (size_t(ci) * size_t(H) + size_t(iy)) * size_t(W);
              T* gxr = gx.ptr() + (size_t(ci) * size_t(H) + size_t(iy)) * size_t(W);
              const T* grow = go.ptr() + (size_t(co) * size_t(Ho) + size_t(oy)) * size_t(Wo);
              for (int ox = lo; ox <= hi; ++ox) {
                const int ix = ox * s + kx - p;
                gxr[ix] += wv * grow[ox];
                wacc += double(xr[ix]) * double(grow[ox]);
              }
            }
            gw(co, ci, ky, kx) += T(wacc);
          }
  }

  // Output-column range for which ix = ox*s + kx - p stays inside [0, W).
  static void col_range(int kx, int p, int s, int W, int Wo, int& lo, int& hi) {
    lo = kx < p ? (p - kx + s - 1) / s : 0;
    const int t = W - 1 - kx + p;
    hi = t < 0 ? -1 : std::min(Wo - 1, t / s);
  }

  int push(Tensor v, std::function<void(GraphT&, int)> back, ParamT<T>* bound) {
    Node n;
    n.grad = Tensor::zeros(v.shape);
    n.value = std::move(v);
    n.back = std::move(back);
    n.bound = bound;
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

using Graph = GraphT<double>;

}  // namespace bsh
