#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "retfuse/tensor.hpp"

namespace retfuse::nn {

enum class Pad { Zero, Replicate };

template <typename T>
class Graph;

// Handle into a Graph's node arena.
template <typename T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor<T>& value() const { return g->node(id).value; }
  // Zero-shaped until backward touched this node.
  const Tensor<T>& grad() const { return g->node(id).grad; }
  T item() const { return value().v[0]; }
};

// Define-by-run reverse-mode tape over NCHW tensors. One Graph per training
// step; nodes are created in topological order, backward walks them in
// reverse creation order, which is deterministic by construction.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    std::vector<int> parents;
    std::function<void(Graph&, Node&)> back;
    bool requires_grad = false;
  };

  Var<T> leaf(Tensor<T> t, bool requires_grad) {
    Node nd;
    nd.value = std::move(t);
    nd.requires_grad = requires_grad;
    nodes_.push_back(std::move(nd));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> constant(Tensor<T> t) { return leaf(std::move(t), false); }

  Var<T> make(Tensor<T> value, std::vector<int> parents,
              std::function<void(Graph&, Node&)> back) {
    bool rg = false;
    for (int p : parents) rg = rg || nodes_[p].requires_grad;
    Node nd;
    nd.value = std::move(value);
    nd.parents = std::move(parents);
    nd.requires_grad = rg;
    if (rg) nd.back = std::move(back);
    nodes_.push_back(std::move(nd));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(int id, const Tensor<T>& g) {
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (!nd.requires_grad) return;
    if (nd.grad.empty()) nd.grad = Tensor<T>::zeros_like(nd.value);
    nd.grad.add_(g);
  }

  // Raw accumulation target for ops that write gradients in place.
  Tensor<T>* grad_buffer(int id) {
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (!nd.requires_grad) return nullptr;
    if (nd.grad.empty()) nd.grad = Tensor<T>::zeros_like(nd.value);
    return &nd.grad;
  }

  void backward(Var<T> loss) {
    require(loss.valid() && loss.g == this, ErrorKind::InvalidArgument,
            "backward: var does not belong to this graph");
    Node& root = nodes_[static_cast<std::size_t>(loss.id)];
    require(root.value.numel() == 1, ErrorKind::InvalidArgument,
            "backward: loss must be scalar");
    require(root.requires_grad, ErrorKind::InvalidArgument,
            "backward: loss does not depend on any trainable leaf");
    root.grad = Tensor<T>::scalar(T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& nd = nodes_[static_cast<std::size_t>(i)];
      if (!nd.requires_grad || nd.grad.empty() || !nd.back) continue;
      nd.back(*this, nd);
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void check_same_graph(Var<T> a, Var<T> b) {
  require(a.valid() && b.valid() && a.g == b.g, ErrorKind::InvalidArgument,
          "op: vars from different graphs");
}

// Valid elementwise pairing: identical shapes, or one side single-channel
// broadcast across the other's channels (same n/h/w).
template <typename T>
int broadcast_mode(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.same_shape(b)) return 0;
  if (a.n == b.n && a.h == b.h && a.w == b.w) {
    if (a.c == 1 && b.c > 1) return 1;  // a broadcast over b's channels
    if (b.c == 1 && a.c > 1) return 2;  // b broadcast over a's channels
  }
  fail(ErrorKind::ShapeError,
       "elementwise op: incompatible shapes " + a.shape_str() + " vs " +
           b.shape_str());
}

// Sum a full-shaped gradient down to a single-channel tensor.
template <typename T>
Tensor<T> reduce_channels(const Tensor<T>& g) {
  Tensor<T> out(g.n, 1, g.h, g.w);
  const std::size_t plane = g.plane();
  for (int in = 0; in < g.n; ++in) {
    T* o = out.data() + static_cast<std::size_t>(in) * plane;
    for (int ic = 0; ic < g.c; ++ic) {
      const T* src = g.data() + (static_cast<std::size_t>(in) * g.c + ic) * plane;
      for (std::size_t i = 0; i < plane; ++i) o[i] += src[i];
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Var<T> binary_op(Var<T> a, Var<T> b, Fwd fwd, Bwd bwd) {
  detail::check_same_graph(a, b);
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  const Tensor<T>& bv = g.node(b.id).value;
  const int mode = detail::broadcast_mode(av, bv);
  const Tensor<T>& full = (mode == 1) ? bv : av;
  Tensor<T> out(full.n, full.c, full.h, full.w);
  const std::size_t plane = full.plane();
  for (int in = 0; in < full.n; ++in) {
    for (int ic = 0; ic < full.c; ++ic) {
      const std::size_t o0 = (static_cast<std::size_t>(in) * full.c + ic) * plane;
      const T* ap = av.data() + (mode == 1
                                     ? static_cast<std::size_t>(in) * plane
                                     : (static_cast<std::size_t>(in) * av.c + ic) * plane);
      const T* bp = bv.data() + (mode == 2
                                     ? static_cast<std::size_t>(in) * plane
                                     : (static_cast<std::size_t>(in) * bv.c + ic) * plane);
      T* op = out.data() + o0;
      for (std::size_t i = 0; i < plane; ++i) op[i] = fwd(ap[i], bp[i]);
    }
  }
  const int aid = a.id, bid = b.id;
  return g.make(std::move(out), {aid, bid},
                [aid, bid, mode, bwd](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  const Tensor<T>& av2 = gr.node(aid).value;
                  const Tensor<T>& bv2 = gr.node(bid).value;
                  const Tensor<T>& go = nd.grad;
                  Tensor<T> ga = Tensor<T>::zeros_like(go);
                  Tensor<T> gb = Tensor<T>::zeros_like(go);
                  const std::size_t plane = go.plane();
                  for (int in = 0; in < go.n; ++in) {
                    for (int ic = 0; ic < go.c; ++ic) {
                      const std::size_t o0 =
                          (static_cast<std::size_t>(in) * go.c + ic) * plane;
                      const T* ap = av2.data() +
                                    (mode == 1
                                         ? static_cast<std::size_t>(in) * plane
                                         : (static_cast<std::size_t>(in) * av2.c + ic) * plane);
                      const T* bp = bv2.data() +
                                    (mode == 2
                                         ? static_cast<std::size_t>(in) * plane
                                         : (static_cast<std::size_t>(in) * bv2.c + ic) * plane);
                      const T* gp = go.data() + o0;
                      T* gap = ga.data() + o0;
                      T* gbp = gb.data() + o0;
                      for (std::size_t i = 0; i < plane; ++i) {
                        auto [da, db] = bwd(ap[i], bp[i], gp[i]);
                        gap[i] = da;
                        gbp[i] = db;
                      }
                    }
                  }
                  if (gr.node(aid).requires_grad) {
                    gr.accumulate(aid, mode == 1 ? detail::reduce_channels(ga) : ga);
                  }
                  if (gr.node(bid).requires_grad) {
                    gr.accumulate(bid, mode == 2 ? detail::reduce_channels(gb) : gb);
                  }
                });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T go) { return std::pair<T, T>(go, go); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T go) { return std::pair<T, T>(go, -go); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T go) { return std::pair<T, T>(go * y, go * x); });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T go) {
        return std::pair<T, T>(go / y, -go * x / (y * y));
      });
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary_op(Var<T> a, Fwd fwd, Bwd bwd) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  Tensor<T> out = Tensor<T>::zeros_like(av);
  for (std::size_t i = 0; i < av.numel(); ++i) out.v[i] = fwd(av.v[i]);
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid, bwd](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  const Tensor<T>& av2 = gr.node(aid).value;
                  Tensor<T> ga = Tensor<T>::zeros_like(nd.grad);
                  for (std::size_t i = 0; i < ga.numel(); ++i) {
                    ga.v[i] = bwd(av2.v[i], nd.value.v[i], nd.grad.v[i]);
                  }
                  gr.accumulate(aid, ga);
                });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T, T go) { return x > T(0) ? go : T(0); });
}

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary_op(
      a, [](T x) { return sigmoid_scalar(x); },
      [](T, T y, T go) { return go * y * (T(1) - y); });
}

template <typename T>
Var<T> abs_val(Var<T> a) {
  // Subgradient 0 at the kink.
  return unary_op(
      a, [](T x) { return std::abs(x); },
      [](T x, T, T go) { return x > T(0) ? go : (x < T(0) ? -go : T(0)); });
}

template <typename T>
Var<T> clamp_min(Var<T> a, T lo) {
  return unary_op(
      a, [lo](T x) { return x < lo ? lo : x; },
      [lo](T x, T, T go) { return x < lo ? T(0) : go; });
}

template <typename T>
Var<T> scale(Var<T> a, T k) {
  return unary_op(
      a, [k](T x) { return k * x; }, [k](T, T, T go) { return k * go; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T k) {
  return unary_op(
      a, [k](T x) { return x + k; }, [](T, T, T go) { return go; });
}

// Value passes through, gradient does not.
template <typename T>
Var<T> detach(Var<T> a) {
  return a.g->constant(a.value());
}

// ---------------------------------------------------------------------------
// Reductions & structure ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> a) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  T s = 0;
  for (T x : av.v) s += x;
  const int aid = a.id;
  return g.make(Tensor<T>::scalar(s), {aid},
                [aid](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  const T go = nd.grad.v[0];
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  for (auto& x : gb->v) x += go;
                });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  const T inv_n = T(1) / static_cast<T>(av.numel());
  T s = 0;
  for (T x : av.v) s += x;
  const int aid = a.id;
  return g.make(Tensor<T>::scalar(s * inv_n), {aid},
                [aid, inv_n](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  const T go = nd.grad.v[0] * inv_n;
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  for (auto& x : gb->v) x += go;
                });
}

// mean((a-b)^2) over all elements; the one reduction convention every loss
// term in this project uses.
template <typename T>
Var<T> mean_sq_diff(Var<T> a, Var<T> b) {
  auto d = sub(a, b);
  return mean_all(mul(d, d));
}

// Forward difference along x, replicate boundary: out[..., j] = x[..., j+1] - x[..., j],
// last column 0.
template <typename T>
Var<T> forward_diff_x(Var<T> a) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  Tensor<T> out = Tensor<T>::zeros_like(av);
  const int W = av.w;
  const std::size_t rows = av.numel() / W;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = av.data() + r * W;
    T* dst = out.data() + r * W;
    for (int j = 0; j + 1 < W; ++j) dst[j] = src[j + 1] - src[j];
  }
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  const int W = nd.grad.w;
                  const std::size_t rows = nd.grad.numel() / W;
                  for (std::size_t r = 0; r < rows; ++r) {
                    const T* go = nd.grad.data() + r * W;
                    T* gx = gb->data() + r * W;
                    for (int j = 0; j + 1 < W; ++j) {
                      gx[j] -= go[j];
                      gx[j + 1] += go[j];
                    }
                  }
                });
}

template <typename T>
Var<T> forward_diff_y(Var<T> a) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  Tensor<T> out = Tensor<T>::zeros_like(av);
  const int W = av.w, H = av.h;
  const std::size_t planes = av.numel() / (static_cast<std::size_t>(H) * W);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = av.data() + p * H * W;
    T* dst = out.data() + p * H * W;
    for (int i = 0; i + 1 < H; ++i) {
      for (int j = 0; j < W; ++j) dst[i * W + j] = src[(i + 1) * W + j] - src[i * W + j];
    }
  }
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  const int W = nd.grad.w, H = nd.grad.h;
                  const std::size_t planes =
                      nd.grad.numel() / (static_cast<std::size_t>(H) * W);
                  for (std::size_t p = 0; p < planes; ++p) {
                    const T* go = nd.grad.data() + p * H * W;
                    T* gx = gb->data() + p * H * W;
                    for (int i = 0; i + 1 < H; ++i) {
                      for (int j = 0; j < W; ++j) {
                        gx[i * W + j] -= go[i * W + j];
                        gx[(i + 1) * W + j] += go[i * W + j];
                      }
                    }
                  }
                });
}

// Per-pixel max over channels -> single channel. Ties route the gradient to
// the lowest channel index.
template <typename T>
Var<T> channel_max(Var<T> a) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  Tensor<T> out(av.n, 1, av.h, av.w);
  std::vector<std::int32_t> arg(out.numel(), 0);
  const std::size_t plane = av.plane();
  for (int in = 0; in < av.n; ++in) {
    T* o = out.data() + static_cast<std::size_t>(in) * plane;
    std::int32_t* am = arg.data() + static_cast<std::size_t>(in) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const T* base = av.data() + static_cast<std::size_t>(in) * av.c * plane;
      T best = base[i];
      int bc = 0;
      for (int ic = 1; ic < av.c; ++ic) {
        const T x = base[static_cast<std::size_t>(ic) * plane + i];
        if (x > best) {
          best = x;
          bc = ic;
        }
      }
      o[i] = best;
      am[i] = bc;
    }
  }
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid, arg = std::move(arg)](Graph<T>& gr,
                                            typename Graph<T>::Node& nd) {
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  const std::size_t plane = nd.grad.plane();
                  for (int in = 0; in < nd.grad.n; ++in) {
                    const T* go = nd.grad.data() + static_cast<std::size_t>(in) * plane;
                    const std::int32_t* am =
                        arg.data() + static_cast<std::size_t>(in) * plane;
                    T* base = gb->data() +
                              static_cast<std::size_t>(in) * gb->c * gb->plane();
                    for (std::size_t i = 0; i < plane; ++i) {
                      base[static_cast<std::size_t>(am[i]) * plane + i] += go[i];
                    }
                  }
                });
}

// 1 channel -> k identical channels (backbone preprocessing).
template <typename T>
Var<T> replicate_channels(Var<T> a, int k) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  require(av.c == 1, ErrorKind::ShapeError, "replicate_channels: input must be 1-channel");
  Tensor<T> out(av.n, k, av.h, av.w);
  const std::size_t plane = av.plane();
  for (int in = 0; in < av.n; ++in) {
    const T* src = av.data() + static_cast<std::size_t>(in) * plane;
    for (int ic = 0; ic < k; ++ic) {
      T* dst = out.data() + (static_cast<std::size_t>(in) * k + ic) * plane;
      std::copy(src, src + plane, dst);
    }
  }
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  const std::size_t plane = gb->plane();
                  for (int in = 0; in < nd.grad.n; ++in) {
                    T* dst = gb->data() + static_cast<std::size_t>(in) * plane;
                    for (int ic = 0; ic < nd.grad.c; ++ic) {
                      const T* src = nd.grad.data() +
                                     (static_cast<std::size_t>(in) * nd.grad.c + ic) * plane;
                      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
                    }
                  }
                });
}

// (x - shift[c]) * scl[c]
template <typename T>
Var<T> normalize_channels(Var<T> a, std::vector<T> shift, std::vector<T> scl) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  require(static_cast<int>(shift.size()) == av.c &&
              static_cast<int>(scl.size()) == av.c,
          ErrorKind::ShapeError, "normalize_channels: bad constant size");
  Tensor<T> out = Tensor<T>::zeros_like(av);
  const std::size_t plane = av.plane();
  for (int in = 0; in < av.n; ++in) {
    for (int ic = 0; ic < av.c; ++ic) {
      const std::size_t o0 = (static_cast<std::size_t>(in) * av.c + ic) * plane;
      const T sh = shift[ic], sc = scl[ic];
      for (std::size_t i = 0; i < plane; ++i) out.v[o0 + i] = (av.v[o0 + i] - sh) * sc;
    }
  }
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid, scl](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  const std::size_t plane = gb->plane();
                  for (int in = 0; in < nd.grad.n; ++in) {
                    for (int ic = 0; ic < nd.grad.c; ++ic) {
                      const std::size_t o0 =
                          (static_cast<std::size_t>(in) * nd.grad.c + ic) * plane;
                      for (std::size_t i = 0; i < plane; ++i) {
                        gb->v[o0 + i] += nd.grad.v[o0 + i] * scl[ic];
                      }
                    }
                  }
                });
}

// 2x2 max pooling, stride 2, floor semantics for odd sizes. First maximum in
// scan order wins, so gradients are deterministic.
template <typename T>
Var<T> maxpool2(Var<T> a) {
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  require(av.h >= 2 && av.w >= 2, ErrorKind::ShapeError,
          "maxpool2: input smaller than window, got " + av.shape_str());
  const int oh = av.h / 2, ow = av.w / 2;
  Tensor<T> out(av.n, av.c, oh, ow);
  std::vector<std::int32_t> arg(out.numel());
  const std::size_t planes = static_cast<std::size_t>(av.n) * av.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = av.data() + p * av.plane();
    T* dst = out.data() + p * static_cast<std::size_t>(oh) * ow;
    std::int32_t* am = arg.data() + p * static_cast<std::size_t>(oh) * ow;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        int by = 2 * i, bx = 2 * j;
        T best = src[by * av.w + bx];
        int bidx = by * av.w + bx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (2 * i + dy) * av.w + (2 * j + dx);
            if (src[idx] > best) {
              best = src[idx];
              bidx = idx;
            }
          }
        }
        dst[i * ow + j] = best;
        am[i * ow + j] = bidx;
      }
    }
  }
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid, arg = std::move(arg)](Graph<T>& gr,
                                            typename Graph<T>::Node& nd) {
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  const std::size_t planes =
                      static_cast<std::size_t>(nd.grad.n) * nd.grad.c;
                  const std::size_t oplane = nd.grad.plane();
                  for (std::size_t p = 0; p < planes; ++p) {
                    const T* go = nd.grad.data() + p * oplane;
                    const std::int32_t* am = arg.data() + p * oplane;
                    T* gx = gb->data() + p * gb->plane();
                    for (std::size_t i = 0; i < oplane; ++i) gx[am[i]] += go[i];
                  }
                });
}

// Channel co-occurrence matrix per batch item: G = F F^T / (C*H*W) with F the
// C x (H*W) flattening. Output shape (n, 1, C, C).
template <typename T>
Var<T> gram(Var<T> a) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Graph<T>& g = *a.g;
  const Tensor<T>& av = g.node(a.id).value;
  const int C = av.c;
  const std::size_t P = av.plane();
  const T inv = T(1) / (static_cast<T>(C) * static_cast<T>(P));
  Tensor<T> out(av.n, 1, C, C);
  for (int in = 0; in < av.n; ++in) {
    Eigen::Map<const Mat> F(av.data() + static_cast<std::size_t>(in) * C * P, C,
                            static_cast<Eigen::Index>(P));
    Eigen::Map<Mat> G(out.data() + static_cast<std::size_t>(in) * C * C, C, C);
    G.noalias() = F * F.transpose();
    G *= inv;
  }
  const int aid = a.id;
  return g.make(std::move(out), {aid},
                [aid, inv](Graph<T>& gr, typename Graph<T>::Node& nd) {
                  Tensor<T>* gb = gr.grad_buffer(aid);
                  if (!gb) return;
                  const Tensor<T>& av2 = gr.node(aid).value;
                  const int C = av2.c;
                  const std::size_t P = av2.plane();
                  for (int in = 0; in < av2.n; ++in) {
                    Eigen::Map<const Mat> F(
                        av2.data() + static_cast<std::size_t>(in) * C * P, C,
                        static_cast<Eigen::Index>(P));
                    Eigen::Map<const Mat> dG(
                        nd.grad.data() + static_cast<std::size_t>(in) * C * C, C, C);
                    Eigen::Map<Mat> dF(gb->data() + static_cast<std::size_t>(in) * C * P,
                                       C, static_cast<Eigen::Index>(P));
                    dF.noalias() += inv * (dG + dG.transpose()) * F;
                  }
                });
}

// ---------------------------------------------------------------------------
// Convolution: stride 1, odd kernel, "same" output size, zero or replicate
// padding. Weight (outC, inC, kh, kw), bias (1, outC, 1, 1).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

// cols is (K x P) column-major, K = inC*kh*kw, P = H*W, one column per output
// pixel. Out-of-range taps read 0 (Pad::Zero) or the clamped border pixel.
template <typename T>
void im2col(const T* x, int inC, int H, int W, int kh, int kw, Pad pad, T* cols) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t K = static_cast<std::size_t>(inC) * kh * kw;
  std::size_t col = 0;
  for (int oy = 0; oy < H; ++oy) {
    for (int ox = 0; ox < W; ++ox, ++col) {
      T* dst = cols + col * K;
      std::size_t r = 0;
      for (int ic = 0; ic < inC; ++ic) {
        const T* plane = x + static_cast<std::size_t>(ic) * H * W;
        for (int dy = -ph; dy <= ph; ++dy) {
          int iy = oy + dy;
          const bool in_y = iy >= 0 && iy < H;
          if (!in_y && pad == Pad::Replicate) iy = iy < 0 ? 0 : H - 1;
          for (int dx = -pw; dx <= pw; ++dx, ++r) {
            int ix = ox + dx;
            const bool in_x = ix >= 0 && ix < W;
            if (!in_x && pad == Pad::Replicate) ix = ix < 0 ? 0 : W - 1;
            if (pad == Pad::Zero && (!in_y || !in_x)) {
              dst[r] = T(0);
            } else {
              dst[r] = plane[iy * W + ix];
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-add (K x P) columns back onto the image,
// mirroring the padding rule (replicate accumulates on the border pixels).
template <typename T>
void col2im_add(const T* cols, int inC, int H, int W, int kh, int kw, Pad pad, T* gx) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t K = static_cast<std::size_t>(inC) * kh * kw;
  std::size_t col = 0;
  for (int oy = 0; oy < H; ++oy) {
    for (int ox = 0; ox < W; ++ox, ++col) {
      const T* src = cols + col * K;
      std::size_t r = 0;
      for (int ic = 0; ic < inC; ++ic) {
        T* plane = gx + static_cast<std::size_t>(ic) * H * W;
        for (int dy = -ph; dy <= ph; ++dy) {
          int iy = oy + dy;
          const bool in_y = iy >= 0 && iy < H;
          if (!in_y && pad == Pad::Replicate) iy = iy < 0 ? 0 : H - 1;
          for (int dx = -pw; dx <= pw; ++dx, ++r) {
            int ix = ox + dx;
            const bool in_x = ix >= 0 && ix < W;
            if (!in_x && pad == Pad::Replicate) ix = ix < 0 ? 0 : W - 1;
            if (pad == Pad::Zero && (!in_y || !in_x)) continue;
            plane[iy * W + ix] += src[r];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Pad pad) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
  detail::check_same_graph(x, w);
  detail::check_same_graph(x, b);
  Graph<T>& g = *x.g;
  const Tensor<T>& xv = g.node(x.id).value;
  const Tensor<T>& wv = g.node(w.id).value;
  const Tensor<T>& bv = g.node(b.id).value;
  const int outC = wv.n, inC = wv.c, kh = wv.h, kw = wv.w;
  require(kh % 2 == 1 && kw % 2 == 1, ErrorKind::InvalidArgument,
          "conv2d: kernel must be odd");
  require(xv.c == inC, ErrorKind::ShapeError,
          "conv2d: input channels " + std::to_string(xv.c) +
              " do not match weight " + wv.shape_str());
  require(bv.n == 1 && bv.c == outC && bv.h == 1 && bv.w == 1,
          ErrorKind::ShapeError, "conv2d: bias must be (1,outC,1,1)");
  const int H = xv.h, W = xv.w;
  const std::size_t K = static_cast<std::size_t>(inC) * kh * kw;
  const std::size_t P = static_cast<std::size_t>(H) * W;

  Tensor<T> out(xv.n, outC, H, W);
  std::vector<T>& cols = detail::conv_scratch<T>();
  cols.resize(K * P);
  Eigen::Map<const RowMat> Wm(wv.data(), outC, static_cast<Eigen::Index>(K));
  for (int in = 0; in < xv.n; ++in) {
    detail::im2col(xv.data() + static_cast<std::size_t>(in) * inC * P, inC, H, W,
                   kh, kw, pad, cols.data());
    Eigen::Map<const ColMat> Cm(cols.data(), static_cast<Eigen::Index>(K),
                                static_cast<Eigen::Index>(P));
    Eigen::Map<RowMat> Om(out.data() + static_cast<std::size_t>(in) * outC * P,
                          outC, static_cast<Eigen::Index>(P));
    Om.noalias() = Wm * Cm;
    for (int oc = 0; oc < outC; ++oc) Om.row(oc).array() += bv.v[oc];
  }

  const int xid = x.id, wid = w.id, bid = b.id;
  return g.make(
      std::move(out), {xid, wid, bid},
      [xid, wid, bid, pad](Graph<T>& gr, typename Graph<T>::Node& nd) {
        const Tensor<T>& xv2 = gr.node(xid).value;
        const Tensor<T>& wv2 = gr.node(wid).value;
        const int outC = wv2.n, inC = wv2.c, kh = wv2.h, kw = wv2.w;
        const int H = xv2.h, W = xv2.w;
        const std::size_t K = static_cast<std::size_t>(inC) * kh * kw;
        const std::size_t P = static_cast<std::size_t>(H) * W;
        Tensor<T>* gx = gr.grad_buffer(xid);
        Tensor<T>* gw = gr.grad_buffer(wid);
        Tensor<T>* gb = gr.grad_buffer(bid);
        std::vector<T>& cols = detail::conv_scratch<T>();
        std::vector<T> dcols;
        if (gx) dcols.resize(K * P);
        Eigen::Map<const RowMat> Wm(wv2.data(), outC, static_cast<Eigen::Index>(K));
        for (int in = 0; in < xv2.n; ++in) {
          Eigen::Map<const RowMat> dO(
              nd.grad.data() + static_cast<std::size_t>(in) * outC * P, outC,
              static_cast<Eigen::Index>(P));
          if (gw) {
            cols.resize(K * P);
            detail::im2col(xv2.data() + static_cast<std::size_t>(in) * inC * P,
                           inC, H, W, kh, kw, pad, cols.data());
            Eigen::Map<const ColMat> Cm(cols.data(), static_cast<Eigen::Index>(K),
                                        static_cast<Eigen::Index>(P));
            Eigen::Map<RowMat> dWm(gw->data(), outC, static_cast<Eigen::Index>(K));
            dWm.noalias() += dO * Cm.transpose();
          }
          if (gb) {
            for (int oc = 0; oc < outC; ++oc) gb->v[oc] += dO.row(oc).sum();
          }
          if (gx) {
            Eigen::Map<ColMat> dCm(dcols.data(), static_cast<Eigen::Index>(K),
                                   static_cast<Eigen::Index>(P));
            dCm.noalias() = Wm.transpose() * dO;
            detail::col2im_add(dcols.data(), inC, H, W, kh, kw, pad,
                               gx->data() + static_cast<std::size_t>(in) * inC * P);
          }
        }
      });
}

}  // namespace retfuse::nn
