#pragma once

#include <algorithm>
#include <atomic>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>

#include <Eigen/Dense>

#include "dvc/common.hpp"

namespace dvc {

class GradStore;

// One vertex of the computation graph. Nodes are created in program order and
// the creation id doubles as a topological order for the backward sweep.
struct Node {
  std::vector<int64_t> shape;
  std::shared_ptr<std::vector<double>> data;
  bool needs_grad = false;  // gradient flows to or through this node
  bool is_leaf = false;     // created directly with requires_grad
  uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<double>&, GradStore&)> backward;
  std::vector<double> gbuf;  // gradient accumulator for the pass stamped below
  uint64_t pass = 0;         // which GradStore currently owns gbuf
  uint64_t visit = 0;        // traversal stamp for the reachability sweep

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
};

using NodePtr = std::shared_ptr<Node>;

inline uint64_t next_node_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1);
}

inline uint64_t next_pass_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1);
}

// Gradient buffers live in the nodes, stamped with the pass that owns them, so
// accumulation needs no lookup structure and a leaf's buffer is recycled
// across passes. Passes must therefore run one at a time.
class GradStore {
 public:
  GradStore() : pass_(next_pass_id()) {}

  // accumulation buffer for a node, zero-initialised on first touch
  std::vector<double>& of(Node* n) {
    if (n->pass != pass_) {
      n->pass = pass_;
      n->gbuf.assign(static_cast<size_t>(n->numel()), 0.0);
    }
    return n->gbuf;
  }

  void accum(const NodePtr& n, const std::vector<double>& g) {
    if (!n->needs_grad) return;
    auto& buf = of(n.get());
    double* b = buf.data();
    const double* s = g.data();
    for (size_t i = 0; i < g.size(); ++i) b[i] += s[i];
  }

  const std::vector<double>* find(const Node* n) const {
    return n->pass == pass_ ? &n->gbuf : nullptr;
  }

  bool contains(const Node* n) const { return n->pass == pass_; }
  void erase(Node* n) {
    if (n->pass != pass_) return;
    n->pass = 0;
    // intermediates give their memory back right away; leaf buffers persist
    // so parameter gradients reuse the same allocation every pass
    if (!n->is_leaf) std::vector<double>().swap(n->gbuf);
  }

 private:
  uint64_t pass_;
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

// Disables graph construction in scope; forward values are still computed.
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Value-semantics handle on a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor leaf(std::vector<int64_t> shape, std::vector<double> values,
                     bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::make_shared<std::vector<double>>(std::move(values));
    if (static_cast<int64_t>(n->data->size()) != n->numel())
      throw ShapeError("leaf data size does not match shape " + shape_str(n->shape));
    n->needs_grad = requires_grad && grad_enabled();
    n->is_leaf = requires_grad;
    n->id = next_node_id();
    return Tensor(n);
  }

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                requires_grad);
  }

  static Tensor full(std::vector<int64_t> shape, double v, bool requires_grad = false) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), v),
                requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return leaf({}, {v}, requires_grad);
  }

  const std::vector<int64_t>& shape() const { return n_->shape; }
  int64_t size(size_t axis) const { return n_->shape.at(axis); }
  int64_t numel() const { return n_->numel(); }
  int64_t ndim() const { return static_cast<int64_t>(n_->shape.size()); }
  const std::vector<double>& data() const { return *n_->data; }
  std::vector<double>& mutable_data() { return *n_->data; }
  bool needs_grad() const { return n_->needs_grad; }
  bool defined() const { return n_ != nullptr; }
  const NodePtr& node() const { return n_; }

  double item() const {
    if (n_->numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(n_->shape));
    return (*n_->data)[0];
  }

  double at(int64_t i) const { return (*n_->data)[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const {
    return (*n_->data)[static_cast<size_t>(r * n_->shape[1] + c)];
  }

  // Same storage, no history. With requires_grad the result is a fresh leaf,
  // which is how downstream graphs hand their input gradients back.
  Tensor detach(bool requires_grad = false) const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->data = n_->data;
    n->needs_grad = requires_grad && grad_enabled();
    n->is_leaf = requires_grad;
    n->id = next_node_id();
    return Tensor(n);
  }

 private:
  NodePtr n_;
};

namespace detail {

inline Tensor make_op(std::vector<int64_t> shape, std::vector<double> values,
                      std::vector<NodePtr> parents,
                      std::function<void(const std::vector<double>&, GradStore&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::make_shared<std::vector<double>>(std::move(values));
  n->id = next_node_id();
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p->needs_grad) n->needs_grad = true;
    if (n->needs_grad) {
      n->parents = std::move(parents);
      n->backward = std::move(backward);
    }
  }
  return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb},
                         [pa, pb](const std::vector<double>& g, GradStore& gs) {
                           gs.accum(pa, g);
                           gs.accum(pb, g);
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb},
                         [pa, pb](const std::vector<double>& g, GradStore& gs) {
                           gs.accum(pa, g);
                           if (pb->needs_grad) {
                             std::vector<double> gb(g.size());
                             for (size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
                             gs.accum(pb, gb);
                           }
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  auto da = a.node()->data, db = b.node()->data;
  return detail::make_op(a.shape(), std::move(out), {pa, pb},
                         [pa, pb, da, db](const std::vector<double>& g, GradStore& gs) {
                           if (pa->needs_grad) {
                             std::vector<double> ga(g.size());
                             for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*db)[i];
                             gs.accum(pa, ga);
                           }
                           if (pb->needs_grad) {
                             std::vector<double> gb(g.size());
                             for (size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * (*da)[i];
                             gs.accum(pb, gb);
                           }
                         });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  auto pa = a.node(), pb = b.node();
  auto da = a.node()->data, db = b.node()->data;
  return detail::make_op(a.shape(), std::move(out), {pa, pb},
                         [pa, pb, da, db](const std::vector<double>& g, GradStore& gs) {
                           if (pa->needs_grad) {
                             std::vector<double> ga(g.size());
                             for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / (*db)[i];
                             gs.accum(pa, ga);
                           }
                           if (pb->needs_grad) {
                             std::vector<double> gb(g.size());
                             for (size_t i = 0; i < g.size(); ++i) {
                               double bi = (*db)[i];
                               gb[i] = -g[i] * (*da)[i] / (bi * bi);
                             }
                             gs.accum(pb, gb);
                           }
                         });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa},
                         [pa](const std::vector<double>& g, GradStore& gs) { gs.accum(pa, g); });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa},
                         [pa, s](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(g.size());
                           for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
                           gs.accum(pa, ga);
                         });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

namespace detail {

template <typename Fwd, typename Dfwd>
Tensor unary_op(const Tensor& a, Fwd f, Dfwd df) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto pa = a.node();
  auto da = a.node()->data;
  auto dout = std::make_shared<std::vector<double>>(out);
  return make_op(a.shape(), std::move(out), {pa},
                 [pa, da, dout, df](const std::vector<double>& g, GradStore& gs) {
                   std::vector<double> ga(g.size());
                   for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * df((*da)[i], (*dout)[i]);
                   gs.accum(pa, ga);
                 });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh_t(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp_t(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log_t(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt_t(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor recip(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor abs_t(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// gradient passes through the interior, zero where the clamp is active
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- reductions ----

inline Tensor sum_all(const Tensor& a) {
  const auto& av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  auto pa = a.node();
  return detail::make_op({}, {s}, {pa}, [pa](const std::vector<double>& g, GradStore& gs) {
    if (!pa->needs_grad) return;
    std::vector<double> ga(static_cast<size_t>(pa->numel()), g[0]);
    gs.accum(pa, ga);
  });
}

inline Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// [R,C] -> [R]
inline Tensor sum_lastdim(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("sum_lastdim expects a matrix, got " + shape_str(a.shape()));
  int64_t R = a.size(0), C = a.size(1);
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(R), 0.0);
  for (int64_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) s += av[static_cast<size_t>(r * C + c)];
    out[static_cast<size_t>(r)] = s;
  }
  auto pa = a.node();
  return detail::make_op({R}, std::move(out), {pa},
                         [pa, R, C](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(static_cast<size_t>(R * C));
                           for (int64_t r = 0; r < R; ++r)
                             for (int64_t c = 0; c < C; ++c)
                               ga[static_cast<size_t>(r * C + c)] = g[static_cast<size_t>(r)];
                           gs.accum(pa, ga);
                         });
}

inline Tensor mean_lastdim(const Tensor& a) {
  return mul_scalar(sum_lastdim(a), 1.0 / static_cast<double>(a.size(1)));
}

// [T,D] -> [D], mean over rows
inline Tensor mean_rows(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("mean_rows expects a matrix, got " + shape_str(a.shape()));
  int64_t T = a.size(0), D = a.size(1);
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(D), 0.0);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t d = 0; d < D; ++d) out[static_cast<size_t>(d)] += av[static_cast<size_t>(t * D + d)];
  double inv = 1.0 / static_cast<double>(T);
  for (auto& v : out) v *= inv;
  auto pa = a.node();
  return detail::make_op({D}, std::move(out), {pa},
                         [pa, T, D, inv](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(static_cast<size_t>(T * D));
                           for (int64_t t = 0; t < T; ++t)
                             for (int64_t d = 0; d < D; ++d)
                               ga[static_cast<size_t>(t * D + d)] = g[static_cast<size_t>(d)] * inv;
                           gs.accum(pa, ga);
                         });
}

// ---- shape ops ----

// zero-copy view; gradient is reshaped the same way
inline Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->data = a.node()->data;
  out->id = next_node_id();
  auto pa = a.node();
  if (grad_enabled() && pa->needs_grad) {
    out->needs_grad = true;
    out->parents = {pa};
    out->backward = [pa](const std::vector<double>& g, GradStore& gs) { gs.accum(pa, g); };
  }
  return Tensor(out);
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose2d expects a matrix");
  int64_t R = a.size(0), C = a.size(1);
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(R * C));
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) out[static_cast<size_t>(c * R + r)] = av[static_cast<size_t>(r * C + c)];
  auto pa = a.node();
  return detail::make_op({C, R}, std::move(out), {pa},
                         [pa, R, C](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(static_cast<size_t>(R * C));
                           for (int64_t r = 0; r < R; ++r)
                             for (int64_t c = 0; c < C; ++c)
                               ga[static_cast<size_t>(r * C + c)] = g[static_cast<size_t>(c * R + r)];
                           gs.accum(pa, ga);
                         });
}

// [T,Da],[T,Db] -> [T,Da+Db]
inline Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.size(0) != b.size(0))
    throw ShapeError("concat_lastdim " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t T = a.size(0), Da = a.size(1), Db = b.size(1);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<size_t>(T * (Da + Db)));
  for (int64_t t = 0; t < T; ++t) {
    std::memcpy(&out[static_cast<size_t>(t * (Da + Db))], &av[static_cast<size_t>(t * Da)],
                static_cast<size_t>(Da) * sizeof(double));
    std::memcpy(&out[static_cast<size_t>(t * (Da + Db) + Da)], &bv[static_cast<size_t>(t * Db)],
                static_cast<size_t>(Db) * sizeof(double));
  }
  auto pa = a.node(), pb = b.node();
  return detail::make_op({T, Da + Db}, std::move(out), {pa, pb},
                         [pa, pb, T, Da, Db](const std::vector<double>& g, GradStore& gs) {
                           if (pa->needs_grad) {
                             std::vector<double> ga(static_cast<size_t>(T * Da));
                             for (int64_t t = 0; t < T; ++t)
                               std::memcpy(&ga[static_cast<size_t>(t * Da)],
                                           &g[static_cast<size_t>(t * (Da + Db))],
                                           static_cast<size_t>(Da) * sizeof(double));
                             gs.accum(pa, ga);
                           }
                           if (pb->needs_grad) {
                             std::vector<double> gb(static_cast<size_t>(T * Db));
                             for (int64_t t = 0; t < T; ++t)
                               std::memcpy(&gb[static_cast<size_t>(t * Db)],
                                           &g[static_cast<size_t>(t * (Da + Db) + Da)],
                                           static_cast<size_t>(Db) * sizeof(double));
                             gs.accum(pb, gb);
                           }
                         });
}

// list of [Ri,C] -> [sum Ri, C]; row-major makes this a plain append
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of empty list");
  int64_t C = parts[0].size(1);
  int64_t R = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.size(1) != C) throw ShapeError("concat_rows: column mismatch");
    R += p.size(0);
    parents.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(R * C));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto ps = parents;
  return detail::make_op({R, C}, std::move(out), std::move(parents),
                         [ps](const std::vector<double>& g, GradStore& gs) {
                           size_t off = 0;
                           for (const auto& p : ps) {
                             size_t n = static_cast<size_t>(p->numel());
                             if (p->needs_grad) {
                               std::vector<double> gp(g.begin() + static_cast<ptrdiff_t>(off),
                                                      g.begin() + static_cast<ptrdiff_t>(off + n));
                               gs.accum(p, gp);
                             }
                             off += n;
                           }
                         });
}

// [T,D] -> [T, hi-lo], columns [lo,hi)
inline Tensor slice_lastdim(const Tensor& a, int64_t lo, int64_t hi) {
  if (a.ndim() != 2 || lo < 0 || hi > a.size(1) || lo >= hi)
    throw ShapeError("slice_lastdim [" + std::to_string(lo) + "," + std::to_string(hi) + ") of " +
                     shape_str(a.shape()));
  int64_t T = a.size(0), D = a.size(1), W = hi - lo;
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(T * W));
  for (int64_t t = 0; t < T; ++t)
    std::memcpy(&out[static_cast<size_t>(t * W)], &av[static_cast<size_t>(t * D + lo)],
                static_cast<size_t>(W) * sizeof(double));
  auto pa = a.node();
  return detail::make_op({T, W}, std::move(out), {pa},
                         [pa, T, D, W, lo](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(static_cast<size_t>(T * D), 0.0);
                           for (int64_t t = 0; t < T; ++t)
                             std::memcpy(&ga[static_cast<size_t>(t * D + lo)],
                                         &g[static_cast<size_t>(t * W)],
                                         static_cast<size_t>(W) * sizeof(double));
                           gs.accum(pa, ga);
                         });
}

// [T,D] row t -> [D]
inline Tensor row(const Tensor& a, int64_t t) {
  if (a.ndim() != 2 || t < 0 || t >= a.size(0))
    throw ShapeError("row " + std::to_string(t) + " of " + shape_str(a.shape()));
  int64_t D = a.size(1);
  const auto& av = a.data();
  std::vector<double> out(av.begin() + static_cast<size_t>(t * D),
                          av.begin() + static_cast<size_t>((t + 1) * D));
  auto pa = a.node();
  int64_t T = a.size(0);
  return detail::make_op({D}, std::move(out), {pa},
                         [pa, t, T, D](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(static_cast<size_t>(T * D), 0.0);
                           std::memcpy(&ga[static_cast<size_t>(t * D)], g.data(),
                                       static_cast<size_t>(D) * sizeof(double));
                           gs.accum(pa, ga);
                         });
}

// list of [D] -> [T,D]
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows of empty list");
  int64_t D = rows[0].numel();
  int64_t T = static_cast<int64_t>(rows.size());
  std::vector<double> out(static_cast<size_t>(T * D));
  std::vector<NodePtr> parents;
  parents.reserve(rows.size());
  for (int64_t t = 0; t < T; ++t) {
    if (rows[static_cast<size_t>(t)].numel() != D) throw ShapeError("stack_rows: ragged rows");
    const auto& rv = rows[static_cast<size_t>(t)].data();
    std::memcpy(&out[static_cast<size_t>(t * D)], rv.data(), static_cast<size_t>(D) * sizeof(double));
    parents.push_back(rows[static_cast<size_t>(t)].node());
  }
  auto ps = parents;
  return detail::make_op({T, D}, std::move(out), std::move(parents),
                         [ps, D](const std::vector<double>& g, GradStore& gs) {
                           for (size_t t = 0; t < ps.size(); ++t) {
                             if (!ps[t]->needs_grad) continue;
                             std::vector<double> gr(g.begin() + static_cast<ptrdiff_t>(t * static_cast<size_t>(D)),
                                                    g.begin() + static_cast<ptrdiff_t>((t + 1) * static_cast<size_t>(D)));
                             gs.accum(ps[t], gr);
                           }
                         });
}

// [T,D] -> [2T,D], each row emitted twice
inline Tensor repeat_rows2(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("repeat_rows2 expects a matrix");
  int64_t T = a.size(0), D = a.size(1);
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(2 * T * D));
  for (int64_t t = 0; t < T; ++t) {
    std::memcpy(&out[static_cast<size_t>((2 * t) * D)], &av[static_cast<size_t>(t * D)],
                static_cast<size_t>(D) * sizeof(double));
    std::memcpy(&out[static_cast<size_t>((2 * t + 1) * D)], &av[static_cast<size_t>(t * D)],
                static_cast<size_t>(D) * sizeof(double));
  }
  auto pa = a.node();
  return detail::make_op({2 * T, D}, std::move(out), {pa},
                         [pa, T, D](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(static_cast<size_t>(T * D));
                           for (int64_t t = 0; t < T; ++t)
                             for (int64_t d = 0; d < D; ++d)
                               ga[static_cast<size_t>(t * D + d)] =
                                   g[static_cast<size_t>((2 * t) * D + d)] +
                                   g[static_cast<size_t>((2 * t + 1) * D + d)];
                           gs.accum(pa, ga);
                         });
}

// [D] -> [T,D], the same row T times
inline Tensor tile_rows(const Tensor& v, int64_t T) {
  if (v.ndim() != 1) throw ShapeError("tile_rows expects a vector");
  int64_t D = v.size(0);
  const auto& vv = v.data();
  std::vector<double> out(static_cast<size_t>(T * D));
  for (int64_t t = 0; t < T; ++t)
    std::memcpy(&out[static_cast<size_t>(t * D)], vv.data(), static_cast<size_t>(D) * sizeof(double));
  auto pv = v.node();
  return detail::make_op({T, D}, std::move(out), {pv},
                         [pv, T, D](const std::vector<double>& g, GradStore& gs) {
                           if (!pv->needs_grad) return;
                           std::vector<double> gv(static_cast<size_t>(D), 0.0);
                           for (int64_t t = 0; t < T; ++t)
                             for (int64_t d = 0; d < D; ++d)
                               gv[static_cast<size_t>(d)] += g[static_cast<size_t>(t * D + d)];
                           gs.accum(pv, gv);
                         });
}

// [T,D] with row index list -> [len(idx),D]; duplicate indices allowed and
// their gradients accumulate
inline Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx) {
  if (a.ndim() != 2) throw ShapeError("gather_rows expects a matrix");
  int64_t T = a.size(0), D = a.size(1);
  int64_t R = static_cast<int64_t>(idx.size());
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(R * D));
  for (int64_t r = 0; r < R; ++r) {
    int64_t t = idx[static_cast<size_t>(r)];
    if (t < 0 || t >= T)
      throw ShapeError("gather_rows: index " + std::to_string(t) + " out of " + std::to_string(T));
    std::memcpy(&out[static_cast<size_t>(r * D)], &av[static_cast<size_t>(t * D)],
                static_cast<size_t>(D) * sizeof(double));
  }
  auto pa = a.node();
  auto ix = idx;
  return detail::make_op({R, D}, std::move(out), {pa},
                         [pa, ix, T, D](const std::vector<double>& g, GradStore& gs) {
                           if (!pa->needs_grad) return;
                           std::vector<double> ga(static_cast<size_t>(T * D), 0.0);
                           for (size_t r = 0; r < ix.size(); ++r)
                             for (int64_t d = 0; d < D; ++d)
                               ga[static_cast<size_t>(ix[r] * D + d)] +=
                                   g[r * static_cast<size_t>(D) + static_cast<size_t>(d)];
                           gs.accum(pa, ga);
                         });
}

// ---- broadcast arithmetic on matrices ----

// [R,C] + [C] per row
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.size(1) != v.size(0))
    throw ShapeError("add_rowvec " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  int64_t R = m.size(0), C = m.size(1);
  const auto& mv = m.data();
  const auto& vv = v.data();
  std::vector<double> out(mv.size());
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c)
      out[static_cast<size_t>(r * C + c)] = mv[static_cast<size_t>(r * C + c)] + vv[static_cast<size_t>(c)];
  auto pm = m.node(), pv = v.node();
  return detail::make_op(m.shape(), std::move(out), {pm, pv},
                         [pm, pv, R, C](const std::vector<double>& g, GradStore& gs) {
                           gs.accum(pm, g);
                           if (pv->needs_grad) {
                             std::vector<double> gv(static_cast<size_t>(C), 0.0);
                             for (int64_t r = 0; r < R; ++r)
                               for (int64_t c = 0; c < C; ++c)
                                 gv[static_cast<size_t>(c)] += g[static_cast<size_t>(r * C + c)];
                             gs.accum(pv, gv);
                           }
                         });
}

// [R,C] * [C] per row
inline Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.size(1) != v.size(0))
    throw ShapeError("mul_rowvec " + shape_str(m.shape()) + " * " + shape_str(v.shape()));
  int64_t R = m.size(0), C = m.size(1);
  const auto& mv = m.data();
  const auto& vv = v.data();
  std::vector<double> out(mv.size());
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c)
      out[static_cast<size_t>(r * C + c)] = mv[static_cast<size_t>(r * C + c)] * vv[static_cast<size_t>(c)];
  auto pm = m.node(), pv = v.node();
  auto dm = m.node()->data, dv = v.node()->data;
  return detail::make_op(m.shape(), std::move(out), {pm, pv},
                         [pm, pv, dm, dv, R, C](const std::vector<double>& g, GradStore& gs) {
                           if (pm->needs_grad) {
                             std::vector<double> gm(g.size());
                             for (int64_t r = 0; r < R; ++r)
                               for (int64_t c = 0; c < C; ++c)
                                 gm[static_cast<size_t>(r * C + c)] =
                                     g[static_cast<size_t>(r * C + c)] * (*dv)[static_cast<size_t>(c)];
                             gs.accum(pm, gm);
                           }
                           if (pv->needs_grad) {
                             std::vector<double> gv(static_cast<size_t>(C), 0.0);
                             for (int64_t r = 0; r < R; ++r)
                               for (int64_t c = 0; c < C; ++c)
                                 gv[static_cast<size_t>(c)] += g[static_cast<size_t>(r * C + c)] *
                                                               (*dm)[static_cast<size_t>(r * C + c)];
                             gs.accum(pv, gv);
                           }
                         });
}

// [R,C] + [R] per column
inline Tensor add_colvec(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.size(0) != v.size(0))
    throw ShapeError("add_colvec " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  int64_t R = m.size(0), C = m.size(1);
  const auto& mv = m.data();
  const auto& vv = v.data();
  std::vector<double> out(mv.size());
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c)
      out[static_cast<size_t>(r * C + c)] = mv[static_cast<size_t>(r * C + c)] + vv[static_cast<size_t>(r)];
  auto pm = m.node(), pv = v.node();
  return detail::make_op(m.shape(), std::move(out), {pm, pv},
                         [pm, pv, R, C](const std::vector<double>& g, GradStore& gs) {
                           gs.accum(pm, g);
                           if (pv->needs_grad) {
                             std::vector<double> gv(static_cast<size_t>(R), 0.0);
                             for (int64_t r = 0; r < R; ++r)
                               for (int64_t c = 0; c < C; ++c)
                                 gv[static_cast<size_t>(r)] += g[static_cast<size_t>(r * C + c)];
                             gs.accum(pv, gv);
                           }
                         });
}

// [R,C] * [R] per column
inline Tensor mul_colvec(const Tensor& m, const Tensor& v) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.size(0) != v.size(0))
    throw ShapeError("mul_colvec " + shape_str(m.shape()) + " * " + shape_str(v.shape()));
  int64_t R = m.size(0), C = m.size(1);
  const auto& mv = m.data();
  const auto& vv = v.data();
  std::vector<double> out(mv.size());
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c)
      out[static_cast<size_t>(r * C + c)] = mv[static_cast<size_t>(r * C + c)] * vv[static_cast<size_t>(r)];
  auto pm = m.node(), pv = v.node();
  auto dm = m.node()->data, dv = v.node()->data;
  return detail::make_op(m.shape(), std::move(out), {pm, pv},
                         [pm, pv, dm, dv, R, C](const std::vector<double>& g, GradStore& gs) {
                           if (pm->needs_grad) {
                             std::vector<double> gm(g.size());
                             for (int64_t r = 0; r < R; ++r)
                               for (int64_t c = 0; c < C; ++c)
                                 gm[static_cast<size_t>(r * C + c)] =
                                     g[static_cast<size_t>(r * C + c)] * (*dv)[static_cast<size_t>(r)];
                             gs.accum(pm, gm);
                           }
                           if (pv->needs_grad) {
                             std::vector<double> gv(static_cast<size_t>(R), 0.0);
                             for (int64_t r = 0; r < R; ++r)
                               for (int64_t c = 0; c < C; ++c)
                                 gv[static_cast<size_t>(r)] += g[static_cast<size_t>(r * C + c)] *
                                                               (*dm)[static_cast<size_t>(r * C + c)];
                             gs.accum(pv, gv);
                           }
                         });
}

// ---- matmul ----

// C = op(A) * op(B); gemm runs on Eigen row-major maps
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
                     bool transpose_b = false) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul expects matrices");
  int64_t am = transpose_a ? a.size(1) : a.size(0);
  int64_t ak = transpose_a ? a.size(0) : a.size(1);
  int64_t bk = transpose_b ? b.size(1) : b.size(0);
  int64_t bn = transpose_b ? b.size(0) : b.size(1);
  if (ak != bk)
    throw ShapeError("matmul inner dim mismatch " + shape_str(a.shape()) + (transpose_a ? "^T" : "") +
                     " * " + shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  std::vector<double> out(static_cast<size_t>(am * bn));
  {
    detail::ConstMatMap A(a.data().data(), a.size(0), a.size(1));
    detail::ConstMatMap B(b.data().data(), b.size(0), b.size(1));
    detail::MatMap O(out.data(), am, bn);
    if (!transpose_a && !transpose_b)
      O.noalias() = A * B;
    else if (!transpose_a && transpose_b)
      O.noalias() = A * B.transpose();
    else if (transpose_a && !transpose_b)
      O.noalias() = A.transpose() * B;
    else
      O.noalias() = A.transpose() * B.transpose();
  }
  auto pa = a.node(), pb = b.node();
  auto da = a.node()->data, db = b.node()->data;
  auto ash = a.shape();
  auto bsh = b.shape();
  return detail::make_op(
      {am, bn}, std::move(out), {pa, pb},
      [pa, pb, da, db, ash, bsh, am, bn, transpose_a, transpose_b](const std::vector<double>& g,
                                                                   GradStore& gs) {
        detail::ConstMatMap A(da->data(), ash[0], ash[1]);
        detail::ConstMatMap B(db->data(), bsh[0], bsh[1]);
        detail::ConstMatMap G(g.data(), am, bn);
        if (pa->needs_grad) {
          std::vector<double> ga(da->size());
          detail::MatMap GA(ga.data(), ash[0], ash[1]);
          if (!transpose_a && !transpose_b)
            GA.noalias() = G * B.transpose();
          else if (!transpose_a && transpose_b)
            GA.noalias() = G * B;
          else if (transpose_a && !transpose_b)
            GA.noalias() = B * G.transpose();
          else
            GA.noalias() = B.transpose() * G.transpose();
          gs.accum(pa, ga);
        }
        if (pb->needs_grad) {
          std::vector<double> gb(db->size());
          detail::MatMap GB(gb.data(), bsh[0], bsh[1]);
          if (!transpose_a && !transpose_b)
            GB.noalias() = A.transpose() * G;
          else if (!transpose_a && transpose_b)
            GB.noalias() = G.transpose() * A;
          else if (transpose_a && !transpose_b)
            GB.noalias() = A * G;
          else
            GB.noalias() = G.transpose() * A.transpose();
          gs.accum(pb, gb);
        }
      });
}

// matrix-vector: [R,C] * [C] -> [R]
inline Tensor matvec(const Tensor& m, const Tensor& v) {
  if (v.ndim() != 1) throw ShapeError("matvec expects a vector rhs");
  Tensor v2 = reshape(v, {v.size(0), 1});
  return reshape(matmul(m, v2), {m.size(0)});
}

// ---- im2col for convolutions ----

// [C,T] -> [C*k, T_out] with zero padding; column t holds the receptive field
// of output step t, laid out channel-major then tap
inline Tensor im2col1d(const Tensor& x, int64_t k, int64_t stride, int64_t pad_l, int64_t pad_r) {
  if (x.ndim() != 2) throw ShapeError("im2col1d expects [C,T]");
  int64_t C = x.size(0), T = x.size(1);
  int64_t T_out = (T + pad_l + pad_r - k) / stride + 1;
  if (T_out <= 0) throw ShapeError("im2col1d: empty output for T=" + std::to_string(T));
  const auto& xv = x.data();
  std::vector<double> out(static_cast<size_t>(C * k * T_out), 0.0);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t j = 0; j < k; ++j) {
      int64_t orow = c * k + j;
      for (int64_t t = 0; t < T_out; ++t) {
        int64_t src = t * stride + j - pad_l;
        if (src >= 0 && src < T)
          out[static_cast<size_t>(orow * T_out + t)] = xv[static_cast<size_t>(c * T + src)];
      }
    }
  auto px = x.node();
  return detail::make_op(
      {C * k, T_out}, std::move(out), {px},
      [px, C, T, k, stride, pad_l, T_out](const std::vector<double>& g, GradStore& gs) {
        if (!px->needs_grad) return;
        std::vector<double> gx(static_cast<size_t>(C * T), 0.0);
        for (int64_t c = 0; c < C; ++c)
          for (int64_t j = 0; j < k; ++j) {
            int64_t orow = c * k + j;
            for (int64_t t = 0; t < T_out; ++t) {
              int64_t src = t * stride + j - pad_l;
              if (src >= 0 && src < T)
                gx[static_cast<size_t>(c * T + src)] += g[static_cast<size_t>(orow * T_out + t)];
            }
          }
        gs.accum(px, gx);
      });
}

// [C,H,W] -> [C*kh*kw, Ho*Wo], same layout idea as im2col1d
inline Tensor im2col2d(const Tensor& x, int64_t kh, int64_t kw, int64_t sh, int64_t sw,
                       int64_t pad_t, int64_t pad_b, int64_t pad_l, int64_t pad_r) {
  if (x.ndim() != 3) throw ShapeError("im2col2d expects [C,H,W]");
  int64_t C = x.size(0), H = x.size(1), W = x.size(2);
  int64_t Ho = (H + pad_t + pad_b - kh) / sh + 1;
  int64_t Wo = (W + pad_l + pad_r - kw) / sw + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("im2col2d: empty output");
  const auto& xv = x.data();
  std::vector<double> out(static_cast<size_t>(C * kh * kw * Ho * Wo), 0.0);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        int64_t orow = (c * kh + i) * kw + j;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          int64_t hs = ho * sh + i - pad_t;
          if (hs < 0 || hs >= H) continue;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            int64_t ws = wo * sw + j - pad_l;
            if (ws >= 0 && ws < W)
              out[static_cast<size_t>(orow * (Ho * Wo) + ho * Wo + wo)] =
                  xv[static_cast<size_t>((c * H + hs) * W + ws)];
          }
        }
      }
  auto px = x.node();
  return detail::make_op(
      {C * kh * kw, Ho * Wo}, std::move(out), {px},
      [px, C, H, W, kh, kw, sh, sw, pad_t, pad_l, Ho, Wo](const std::vector<double>& g,
                                                          GradStore& gs) {
        if (!px->needs_grad) return;
        std::vector<double> gx(static_cast<size_t>(C * H * W), 0.0);
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < kh; ++i)
            for (int64_t j = 0; j < kw; ++j) {
              int64_t orow = (c * kh + i) * kw + j;
              for (int64_t ho = 0; ho < Ho; ++ho) {
                int64_t hs = ho * sh + i - pad_t;
                if (hs < 0 || hs >= H) continue;
                for (int64_t wo = 0; wo < Wo; ++wo) {
                  int64_t ws = wo * sw + j - pad_l;
                  if (ws >= 0 && ws < W)
                    gx[static_cast<size_t>((c * H + hs) * W + ws)] +=
                        g[static_cast<size_t>(orow * (Ho * Wo) + ho * Wo + wo)];
                }
              }
            }
        gs.accum(px, gx);
      });
}

// [C,H,W] -> [W, C*H]; turns a conv2d stack into a time-major sequence
inline Tensor time_major(const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError("time_major expects [C,H,W]");
  int64_t C = x.size(0), H = x.size(1), W = x.size(2);
  const auto& xv = x.data();
  std::vector<double> out(static_cast<size_t>(W * C * H));
  for (int64_t c = 0; c < C; ++c)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w)
        out[static_cast<size_t>(w * (C * H) + c * H + h)] = xv[static_cast<size_t>((c * H + h) * W + w)];
  auto px = x.node();
  return detail::make_op({W, C * H}, std::move(out), {px},
                         [px, C, H, W](const std::vector<double>& g, GradStore& gs) {
                           if (!px->needs_grad) return;
                           std::vector<double> gx(static_cast<size_t>(C * H * W));
                           for (int64_t c = 0; c < C; ++c)
                             for (int64_t h = 0; h < H; ++h)
                               for (int64_t w = 0; w < W; ++w)
                                 gx[static_cast<size_t>((c * H + h) * W + w)] =
                                     g[static_cast<size_t>(w * (C * H) + c * H + h)];
                           gs.accum(px, gx);
                         });
}

// ---- backward ----

using GradMap = std::unordered_map<const Node*, std::vector<double>>;

namespace detail {

// the stack holds pointers to NodePtrs that live in parents vectors (or the
// root), all kept alive by the graph itself, so traversal copies nothing
inline void collect_reachable(const NodePtr& root, std::vector<NodePtr>& nodes, uint64_t visit) {
  std::vector<const NodePtr*> stack{&root};
  while (!stack.empty()) {
    const NodePtr& n = *stack.back();
    stack.pop_back();
    if (!n->needs_grad || n->visit == visit) continue;
    n->visit = visit;
    nodes.push_back(n);
    for (const auto& p : n->parents) stack.push_back(&p);
  }
}

}  // namespace detail

// Reverse sweep from multiple seeded roots in one pass. Returns gradients of
// every reachable leaf. Frees the traversed graph unless keep_graph is set,
// so a graph is swept once.
inline GradMap backward_multi(const std::vector<std::pair<Tensor, std::vector<double>>>& roots,
                              bool keep_graph = false) {
  std::vector<NodePtr> nodes;
  GradStore gs;
  uint64_t visit = next_pass_id();
  for (const auto& [t, seed] : roots) {
    if (static_cast<int64_t>(seed.size()) != t.numel())
      throw ShapeError("backward seed size mismatch for shape " + shape_str(t.shape()));
    if (!t.node()->needs_grad) continue;
    gs.accum(t.node(), seed);
    detail::collect_reachable(t.node(), nodes, visit);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });

  GradMap leaf_grads;
  for (const auto& n : nodes) {
    const std::vector<double>* g = gs.find(n.get());
    if (g == nullptr) continue;  // no gradient flowed here
    if (n->is_leaf) {
      auto& dst = leaf_grads[n.get()];
      if (dst.empty())
        dst = *g;
      else
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += (*g)[i];
    }
    if (n->backward) n->backward(*g, gs);
    gs.erase(n.get());  // consumers all ran already; buffer is final
  }
  if (!keep_graph) {
    for (auto& n : nodes) {
      n->parents.clear();
      n->backward = nullptr;
    }
  }
  return leaf_grads;
}

inline GradMap backward(const Tensor& root, bool keep_graph = false) {
  if (root.numel() != 1)
    throw ShapeError("backward() without seed needs a scalar root, got " + shape_str(root.shape()));
  return backward_multi({{root, {1.0}}}, keep_graph);
}

inline const std::vector<double>* grad_of(const GradMap& grads, const Tensor& t) {
  auto it = grads.find(t.node().get());
  return it == grads.end() ? nullptr : &it->second;
}

}  // namespace dvc
