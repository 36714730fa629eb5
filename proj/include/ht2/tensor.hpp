#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ht2/rng.hpp"

// Dense tensors with reverse-mode autodiff. Values are computed eagerly;
// a Tape records backward closures when gradients are required. The tape is
// single-threaded; data-parallel training uses one tape per shard and merges
// gradients in a fixed shard order. All reductions run in sequential
// row-major order, so a fixed seed gives bitwise-identical runs.
//
// Precision: instantiate with float for training, double for oracle tests.

namespace ht2::ag {

/// 64-byte-aligned storage for all tensor values and gradients. Eigen's
/// vectorized kernels peel loops based on pointer alignment; pinning the
/// alignment makes elementwise transcendentals bitwise-reproducible across
/// runs regardless of heap layout.
template <class T, size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <class S>
using Vec = std::vector<S, AlignedAllocator<S>>;

using Shape = std::vector<int>;

inline int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

template <class S>
struct Node {
  Shape shape;
  Vec<S> value;
  bool requires_grad = false;
};

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_size(t.node_->shape), S(0));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, Vec<S> data, bool requires_grad = false) {
    if (int64_t(data.size()) != shape_size(shape))
      throw std::invalid_argument("Tensor::from: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, const std::vector<S>& data, bool requires_grad = false) {
    Vec<S> v(data.begin(), data.end());
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from(Shape shape, std::initializer_list<S> data, bool requires_grad = false) {
    Vec<S> v(data.begin(), data.end());
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, S std_dev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = S(rng.gaussian()) * std_dev;
    return t;
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.node_->value) x = v;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  int rank() const { return int(node_->shape.size()); }
  int64_t size() const { return int64_t(node_->value.size()); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const S* data() const { return node_->value.data(); }
  S* data() { return node_->value.data(); }
  const Vec<S>& values() const { return node_->value; }
  Vec<S>& values() { return node_->value; }

  S item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not a scalar");
    return node_->value[0];
  }
  S at(int64_t i) const { return node_->value[size_t(i)]; }

  Node<S>* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node<S>> node_;
};

// ---------------------------------------------------------------------------
// Tape

template <class S>
class Tape {
 public:
  bool grad_enabled = true;

  /// backward() consumes the recorded graph: closures are dropped afterwards
  /// and a second call requires re-recording the computation. Gradients stay
  /// available on the tape until clear().
  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw std::invalid_argument(
          "backward: loss is detached from the recorded graph (no tracked inputs)");
    grad_buffer(loss.node())[0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  /// Gradient of a tensor after backward(), or nullptr if none flowed to it.
  const Vec<S>* grad(const Tensor<S>& t) const {
    auto it = grads_.find(t.node());
    return it == grads_.end() ? nullptr : &it->second;
  }

  void clear() {
    ops_.clear();
    grads_.clear();
    keepalive_.clear();
  }

  // --- internal: used by op implementations ---
  bool tracking(const Tensor<S>& t) const { return grad_enabled && t.requires_grad(); }

  Vec<S>& grad_buffer(Node<S>* n) {
    auto it = grads_.find(n);
    if (it == grads_.end()) it = grads_.emplace(n, Vec<S>(shape_size(n->shape), S(0))).first;
    return it->second;
  }
  const Vec<S>* grad_of(Node<S>* n) const {
    auto it = grads_.find(n);
    return it == grads_.end() ? nullptr : &it->second;
  }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  void keep(Tensor<S> t) { keepalive_.push_back(std::move(t)); }

  size_t op_count() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
  std::unordered_map<Node<S>*, Vec<S>> grads_;
  std::vector<Tensor<S>> keepalive_;
};

// ---------------------------------------------------------------------------
// GEMM helper (Eigen row-major maps). alpha applies to the product.

template <class S>
void gemm(S* c, const S* a, const S* b, int m, int n, int k, bool ta, bool tb,
          bool accumulate, S alpha = S(1)) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  Eigen::Map<Mat> C(c, m, n);
  CMap A(a, ta ? k : m, ta ? m : k);
  CMap B(b, tb ? n : k, tb ? k : n);
  auto run = [&](const auto& prod) {
    if (accumulate)
      C.noalias() += alpha * prod;
    else
      C.noalias() = alpha * prod;
  };
  if (!ta && !tb) run(A * B);
  else if (ta && !tb) run(A.transpose() * B);
  else if (!ta && tb) run(A * B.transpose());
  else run(A.transpose() * B.transpose());
}

// ---------------------------------------------------------------------------
// Broadcasting for add/sub/mul:
//   - identical shapes
//   - b a suffix of a's shape (repeated over leading dims), incl. scalar b
//   - b equal to a's shape with last dim 1 (broadcast along last dim)

enum class Bcast { Same, Suffix, Last1 };

template <class S>
Bcast bcast_kind(const Tensor<S>& a, const Tensor<S>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return Bcast::Same;
  if (sb.size() == sa.size()) {
    bool last1 = sb.back() == 1;
    for (size_t i = 0; i + 1 < sa.size(); ++i) last1 = last1 && sa[i] == sb[i];
    if (last1 && sa.back() != 1) return Bcast::Last1;
  }
  if (sb.size() <= sa.size()) {
    bool suffix = true;
    for (size_t i = 0; i < sb.size(); ++i)
      suffix = suffix && sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
    if (suffix || b.size() == 1) return Bcast::Suffix;
  }
  throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(sa) + " vs " +
                              shape_str(sb));
}

namespace detail {

/// Applies fn(offset_a, offset_b, run_length) over contiguous runs that share
/// one b element-block; avoids per-element index arithmetic in the hot loops.
template <class F>
void for_bcast_runs(Bcast kind, int64_t n, int64_t bn, int64_t last, F fn) {
  switch (kind) {
    case Bcast::Same:
      fn(int64_t(0), int64_t(0), n, /*b_contig=*/true);
      break;
    case Bcast::Suffix:
      if (bn == 1) {
        fn(int64_t(0), int64_t(0), n, false);
      } else {
        for (int64_t r = 0; r < n / bn; ++r) fn(r * bn, int64_t(0), bn, true);
      }
      break;
    case Bcast::Last1:
      for (int64_t r = 0; r < n / last; ++r) fn(r * last, r, last, false);
      break;
  }
}

template <class S, class FwdAB, class BackA, class BackB>
Tensor<S> binary_op(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& b, FwdAB fwd,
                    BackA back_a, BackB back_b) {
  const Bcast kind = bcast_kind(a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const int64_t n = a.size();
  const int64_t bn = b.size();
  const int64_t last = int64_t(a.shape().back());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for_bcast_runs(kind, n, bn, last, [&](int64_t oa, int64_t ob, int64_t len, bool bc) {
    if (bc)
      for (int64_t j = 0; j < len; ++j) po[oa + j] = fwd(pa[oa + j], pb[ob + j]);
    else {
      const S bv = pb[ob];
      for (int64_t j = 0; j < len; ++j) po[oa + j] = fwd(pa[oa + j], bv);
    }
  });
  bool ga = tp.tracking(a), gb = tp.tracking(b);
  if (ga || gb) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(b); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* nb = b.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, nb, no, ga, gb, kind, n, bn, last, back_a, back_b] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      const S* pg = gout->data();
      const S* va = na->value.data();
      const S* vb = nb->value.data();
      if (ga) {
        S* gbuf = tp.grad_buffer(na).data();
        for_bcast_runs(kind, n, bn, last, [&](int64_t oa, int64_t ob, int64_t len, bool bc) {
          if (bc)
            for (int64_t j = 0; j < len; ++j)
              gbuf[oa + j] += back_a(pg[oa + j], va[oa + j], vb[ob + j]);
          else {
            const S bv = vb[ob];
            for (int64_t j = 0; j < len; ++j)
              gbuf[oa + j] += back_a(pg[oa + j], va[oa + j], bv);
          }
        });
      }
      if (gb) {
        S* gbuf = tp.grad_buffer(nb).data();
        for_bcast_runs(kind, n, bn, last, [&](int64_t oa, int64_t ob, int64_t len, bool bc) {
          if (bc)
            for (int64_t j = 0; j < len; ++j)
              gbuf[ob + j] += back_b(pg[oa + j], va[oa + j], vb[ob + j]);
          else {
            const S bv = vb[ob];
            S acc = S(0);
            for (int64_t j = 0; j < len; ++j) acc += back_b(pg[oa + j], va[oa + j], bv);
            gbuf[ob] += acc;
          }
        });
      }
    });
  }
  return out;
}

template <class S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using CArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

/// Vectorized unary op: Fwd(out_map, in_map), Back(gin_map, gout_map, in_map, out_map).
/// Back must express "gin += f(...)".
template <class S, class Fwd, class Back>
Tensor<S> unary_vec(Tape<S>& tp, const Tensor<S>& a, Fwd f, Back df) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const int64_t n = a.size();
  f(ArrMap<S>(out.data(), n), CArrMap<S>(a.data(), n));
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no, n, df] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      df(ArrMap<S>(tp.grad_buffer(na).data(), n), CArrMap<S>(gout->data(), n),
         CArrMap<S>(na->value.data(), n), CArrMap<S>(no->value.data(), n));
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <class S>
Tensor<S> add(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      tp, a, b, [](S x, S y) { return x + y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <class S>
Tensor<S> sub(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      tp, a, b, [](S x, S y) { return x - y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <class S>
Tensor<S> mul(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      tp, a, b, [](S x, S y) { return x * y; },
      [](S g, S, S y) { return g * y; }, [](S g, S x, S) { return g * x; });
}

template <class S>
Tensor<S> scale(Tape<S>& tp, const Tensor<S>& a, S c) {
  return detail::unary_vec(
      tp, a, [c](auto y, auto x) { y = c * x; },
      [c](auto gx, auto g, auto, auto) { gx += c * g; });
}

template <class S>
Tensor<S> exp_op(Tape<S>& tp, const Tensor<S>& a) {
  return detail::unary_vec(
      tp, a, [](auto y, auto x) { y = x.exp(); },
      [](auto gx, auto g, auto, auto y) { gx += g * y; });
}

template <class S>
Tensor<S> log_op(Tape<S>& tp, const Tensor<S>& a) {
  return detail::unary_vec(
      tp, a, [](auto y, auto x) { y = x.log(); },
      [](auto gx, auto g, auto x, auto) { gx += g / x; });
}

template <class S>
Tensor<S> tanh_op(Tape<S>& tp, const Tensor<S>& a) {
  return detail::unary_vec(
      tp, a, [](auto y, auto x) { y = x.tanh(); },
      [](auto gx, auto g, auto, auto y) { gx += g * (S(1) - y * y); });
}

template <class S>
Tensor<S> gelu(Tape<S>& tp, const Tensor<S>& a) {
  const S inv_sqrt2 = S(0.7071067811865475244);
  const S inv_sqrt2pi = S(0.3989422804014326779);
  return detail::unary_vec(
      tp, a,
      [=](auto y, auto x) { y = S(0.5) * x * ((x * inv_sqrt2).erf() + S(1)); },
      [=](auto gx, auto g, auto x, auto) {
        gx += g * (S(0.5) * ((x * inv_sqrt2).erf() + S(1)) +
                   x * (inv_sqrt2pi * (S(-0.5) * x * x).exp()));
      });
}

// ---------------------------------------------------------------------------
// Matrix products

/// a may have rank > 2 when ta is false; leading dims are treated as rows and
/// carried into the output shape ([..., k] x [k, n] -> [..., n]).
template <class S>
Tensor<S> matmul(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& b, bool ta = false,
                 bool tb = false) {
  if (a.rank() < 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expected [..,k] x rank-2");
  if (ta && a.rank() != 2)
    throw std::invalid_argument("matmul: transpose of rank>2 left operand unsupported");
  int last = a.shape().back();
  int lead = int(a.size() / last);
  int m = ta ? last : lead;
  int ka = ta ? lead : last;
  int kb = tb ? b.dim(1) : b.dim(0);
  int n = tb ? b.dim(0) : b.dim(1);
  if (ka != kb)
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  Shape oshape;
  if (!ta && a.rank() > 2) {
    oshape = a.shape();
    oshape.back() = n;
  } else {
    oshape = {m, n};
  }
  Tensor<S> out = Tensor<S>::zeros(std::move(oshape));
  gemm(out.data(), a.data(), b.data(), m, n, ka, ta, tb, false);
  bool ga = tp.tracking(a), gb = tp.tracking(b);
  if (ga || gb) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(b); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* nb = b.node();
    Node<S>* no = out.node();
    int k = ka;
    tp.record([&tp, na, nb, no, ga, gb, m, n, k, ta, tb] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      const S* gc = gout->data();
      if (ga) {
        S* gbuf = tp.grad_buffer(na).data();
        if (!ta) gemm(gbuf, gc, nb->value.data(), m, k, n, false, !tb, true);
        else gemm(gbuf, nb->value.data(), gc, k, m, n, tb, true, true);
      }
      if (gb) {
        S* gbuf = tp.grad_buffer(nb).data();
        if (!tb) gemm(gbuf, na->value.data(), gc, k, n, m, !ta, false, true);
        else gemm(gbuf, gc, na->value.data(), n, k, m, true, ta, true);
      }
    });
  }
  return out;
}

/// Batched matmul over the shared leading dimension: [B,m,k] x [B,k,n].
template <class S>
Tensor<S> bmm(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& b, bool ta = false,
              bool tb = false, S alpha = S(1)) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("bmm: expected [B,m,k] x [B,k,n] with equal B");
  int B = a.dim(0);
  int m = ta ? a.dim(2) : a.dim(1);
  int ka = ta ? a.dim(1) : a.dim(2);
  int kb = tb ? b.dim(2) : b.dim(1);
  int n = tb ? b.dim(1) : b.dim(2);
  if (ka != kb)
    throw std::invalid_argument("bmm: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros({B, m, n});
  const int64_t sa = int64_t(a.dim(1)) * a.dim(2);
  const int64_t sb = int64_t(b.dim(1)) * b.dim(2);
  const int64_t so = int64_t(m) * n;
  for (int i = 0; i < B; ++i)
    gemm(out.data() + i * so, a.data() + i * sa, b.data() + i * sb, m, n, ka, ta, tb, false,
         alpha);
  bool ga = tp.tracking(a), gb = tp.tracking(b);
  if (ga || gb) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(b); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* nb = b.node();
    Node<S>* no = out.node();
    int k = ka;
    tp.record([&tp, na, nb, no, ga, gb, B, m, n, k, ta, tb, sa, sb, so, alpha] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      for (int i = 0; i < B; ++i) {
        const S* gc = gout->data() + i * so;
        const S* va = na->value.data() + i * sa;
        const S* vb = nb->value.data() + i * sb;
        if (ga) {
          S* gbuf = tp.grad_buffer(na).data() + i * sa;
          if (!ta) gemm(gbuf, gc, vb, m, k, n, false, !tb, true, alpha);
          else gemm(gbuf, vb, gc, k, m, n, tb, true, true, alpha);
        }
        if (gb) {
          S* gbuf = tp.grad_buffer(nb).data() + i * sb;
          if (!tb) gemm(gbuf, va, gc, k, n, m, !ta, false, true, alpha);
          else gemm(gbuf, gc, va, n, k, m, true, ta, true, alpha);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last dim with an optional additive mask (not differentiated
// through). For a rank-3 input [Bt,R,C] the mask may be [Bm,R,C] with Bm
// dividing Bt: batch bt uses mask batch bt/(Bt/Bm). A [1,R,C] causal mask thus
// serves every sample, and per-sample masks repeat across consecutive heads.

template <class S>
Tensor<S> softmax_masked(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& mask) {
  int c = a.shape().back();
  int64_t rows = a.size() / c;
  int64_t rows_per_batch = 1;
  int64_t batch_rep = 1;
  if (mask.defined()) {
    if (mask.shape().back() != c || a.rank() != mask.rank())
      throw std::invalid_argument("softmax_masked: mask shape incompatible");
    for (int i = 1; i < a.rank(); ++i)
      if (a.dim(i) != mask.shape()[i])
        throw std::invalid_argument("softmax_masked: mask trailing dims must match");
    if (a.dim(0) % mask.shape()[0] != 0)
      throw std::invalid_argument("softmax_masked: mask batch must divide input batch");
    rows_per_batch = rows / a.dim(0);
    batch_rep = a.dim(0) / mask.shape()[0];
  }
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = pa + r * c;
    S* y = po + r * c;
    const S* mrow = nullptr;
    if (mask.defined()) {
      int64_t bt = r / rows_per_batch;
      int64_t i = r % rows_per_batch;
      mrow = mask.data() + ((bt / batch_rep) * rows_per_batch + i) * c;
    }
    detail::ArrMap<S> ym(y, c);
    if (mrow)
      ym = detail::CArrMap<S>(x, c) + detail::CArrMap<S>(mrow, c);
    else
      ym = detail::CArrMap<S>(x, c);
    S mx = ym.maxCoeff();
    ym = (ym - mx).exp();
    S sum = S(0);
    for (int j = 0; j < c; ++j) sum += y[j];
    ym *= S(1) / sum;
  }
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no, rows, c] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      Vec<S>& gbuf = tp.grad_buffer(na);
      const S* vy = no->value.data();
      const S* gy = gout->data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* y = vy + r * c;
        const S* g = gy + r * c;
        S dot = S(0);
        for (int j = 0; j < c; ++j) dot += g[j] * y[j];
        S* gx = gbuf.data() + r * c;
        for (int j = 0; j < c; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> softmax(Tape<S>& tp, const Tensor<S>& a) {
  return softmax_masked(tp, a, Tensor<S>{});
}

// ---------------------------------------------------------------------------
// Layer norm over the last dim with affine parameters.

template <class S>
Tensor<S> layer_norm(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-5)) {
  int d = a.shape().back();
  if (gamma.size() != d || beta.size() != d)
    throw std::invalid_argument("layer_norm: gamma/beta must have last-dim length");
  int64_t rows = a.size() / d;
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  auto xhat = std::make_shared<std::vector<S>>(size_t(a.size()));
  auto rstd = std::make_shared<std::vector<S>>(size_t(rows));
  const S* pa = a.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = pa + r * d;
    S mean = S(0);
    for (int j = 0; j < d; ++j) mean += x[j];
    mean /= S(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= S(d);
    S rs = S(1) / std::sqrt(var + eps);
    (*rstd)[size_t(r)] = rs;
    S* xh = xhat->data() + r * d;
    S* y = po + r * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (x[j] - mean) * rs;
      y[j] = xh[j] * pg[j] + pb[j];
    }
  }
  bool ga = tp.tracking(a), gg = tp.tracking(gamma), gb = tp.tracking(beta);
  if (ga || gg || gb) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(gamma); tp.keep(beta); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* ng = gamma.node();
    Node<S>* nb = beta.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, ng, nb, no, ga, gg, gb, rows, d, xhat, rstd] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      const S* gy = gout->data();
      const S* gam = ng->value.data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* g = gy + r * d;
        const S* xh = xhat->data() + r * d;
        if (ga) {
          S* gx = tp.grad_buffer(na).data() + r * d;
          S sum_g = S(0), sum_gx = S(0);
          for (int j = 0; j < d; ++j) {
            S dxh = g[j] * gam[j];
            sum_g += dxh;
            sum_gx += dxh * xh[j];
          }
          S rs = (*rstd)[size_t(r)];
          for (int j = 0; j < d; ++j) {
            S dxh = g[j] * gam[j];
            gx[j] += rs * (dxh - sum_g / S(d) - xh[j] * sum_gx / S(d));
          }
        }
        if (gg) {
          S* ggam = tp.grad_buffer(ng).data();
          for (int j = 0; j < d; ++j) ggam[j] += g[j] * xh[j];
        }
        if (gb) {
          S* gbet = tp.grad_buffer(nb).data();
          for (int j = 0; j < d; ++j) gbet[j] += g[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape and indexing ops

template <class S>
Tensor<S> reshape(Tape<S>& tp, const Tensor<S>& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) +
                                " -> " + shape_str(shape));
  Tensor<S> out = Tensor<S>::from(std::move(shape), a.values());
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      Vec<S>& gbuf = tp.grad_buffer(na);
      for (size_t i = 0; i < gbuf.size(); ++i) gbuf[i] += (*gout)[i];
    });
  }
  return out;
}

/// Slice along the last dim: [..., D] -> [..., len] starting at `start`.
template <class S>
Tensor<S> slice_last(Tape<S>& tp, const Tensor<S>& a, int start, int len) {
  int D = a.shape().back();
  if (start < 0 || len <= 0 || start + len > D)
    throw std::invalid_argument("slice_last: range out of bounds");
  Shape oshape = a.shape();
  oshape.back() = len;
  int64_t rows = a.size() / D;
  Tensor<S> out = Tensor<S>::zeros(oshape);
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < len; ++j) po[r * len + j] = pa[r * D + start + j];
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no, rows, D, start, len] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      Vec<S>& gbuf = tp.grad_buffer(na);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < len; ++j) gbuf[r * D + start + j] += (*gout)[r * len + j];
    });
  }
  return out;
}

/// Concatenate along the last dim.
template <class S>
Tensor<S> concat_last(Tape<S>& tp, const Tensor<S>& a, const Tensor<S>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size())
    throw std::invalid_argument("concat_last: rank mismatch");
  for (size_t i = 0; i + 1 < sa.size(); ++i)
    if (sa[i] != sb[i]) throw std::invalid_argument("concat_last: leading dims differ");
  int da = sa.back(), db = sb.back();
  Shape oshape = sa;
  oshape.back() = da + db;
  int64_t rows = a.size() / da;
  Tensor<S> out = Tensor<S>::zeros(oshape);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int j = 0; j < da; ++j) po[r * (da + db) + j] = pa[r * da + j];
    for (int j = 0; j < db; ++j) po[r * (da + db) + da + j] = pb[r * db + j];
  }
  bool ga = tp.tracking(a), gb = tp.tracking(b);
  if (ga || gb) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(b); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* nb = b.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, nb, no, ga, gb, rows, da, db] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      const S* pg = gout->data();
      if (ga) {
        Vec<S>& gbuf = tp.grad_buffer(na);
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < da; ++j) gbuf[r * da + j] += pg[r * (da + db) + j];
      }
      if (gb) {
        Vec<S>& gbuf = tp.grad_buffer(nb);
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < db; ++j) gbuf[r * db + j] += pg[r * (da + db) + da + j];
      }
    });
  }
  return out;
}

/// Select one index along dim 1 of a rank-3 tensor: [B,K,D] -> [B,D].
template <class S>
Tensor<S> select_dim1(Tape<S>& tp, const Tensor<S>& a, int idx) {
  if (a.rank() != 3) throw std::invalid_argument("select_dim1: expected rank-3");
  int B = a.dim(0), K = a.dim(1), D = a.dim(2);
  if (idx < 0 || idx >= K) throw std::invalid_argument("select_dim1: index out of range");
  Tensor<S> out = Tensor<S>::zeros({B, D});
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < D; ++j) out.data()[b * D + j] = a.data()[(int64_t(b) * K + idx) * D + j];
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no, B, K, D, idx] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      Vec<S>& gbuf = tp.grad_buffer(na);
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < D; ++j)
          gbuf[(int64_t(b) * K + idx) * D + j] += (*gout)[b * D + j];
    });
  }
  return out;
}

namespace detail {

/// Copy/accumulate between [B,K,H*dh] (packed) and [B*H,K,dh] (head-major).
template <class S, bool ToHeads, bool Accumulate>
void head_shuffle(S* dst, const S* src, int B, int H, int K, int dh) {
  const int D = H * dh;
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < K; ++t) {
        int64_t packed = (int64_t(b) * K + t) * D + h * dh;
        int64_t heads = ((int64_t(b) * H + h) * K + t) * dh;
        S* d = dst + (ToHeads ? heads : packed);
        const S* s = src + (ToHeads ? packed : heads);
        if constexpr (Accumulate)
          for (int j = 0; j < dh; ++j) d[j] += s[j];
        else
          for (int j = 0; j < dh; ++j) d[j] = s[j];
      }
}

}  // namespace detail

/// [B,K,H*dh] -> [B*H,K,dh] (head-major layout for batched attention).
template <class S>
Tensor<S> split_heads(Tape<S>& tp, const Tensor<S>& a, int H) {
  if (a.rank() != 3 || a.dim(2) % H != 0)
    throw std::invalid_argument("split_heads: bad shape/head count");
  int B = a.dim(0), K = a.dim(1), D = a.dim(2), dh = D / H;
  Tensor<S> out = Tensor<S>::zeros({B * H, K, dh});
  detail::head_shuffle<S, true, false>(out.data(), a.data(), B, H, K, dh);
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no, B, H, K, dh] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      detail::head_shuffle<S, false, true>(tp.grad_buffer(na).data(), gout->data(), B, H, K,
                                           dh);
    });
  }
  return out;
}

/// Inverse of split_heads: [B*H,K,dh] -> [B,K,H*dh].
template <class S>
Tensor<S> merge_heads(Tape<S>& tp, const Tensor<S>& a, int H) {
  if (a.rank() != 3 || a.dim(0) % H != 0)
    throw std::invalid_argument("merge_heads: bad shape/head count");
  int B = a.dim(0) / H, K = a.dim(1), dh = a.dim(2), D = H * dh;
  Tensor<S> out = Tensor<S>::zeros({B, K, D});
  detail::head_shuffle<S, false, false>(out.data(), a.data(), B, H, K, dh);
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no, B, H, K, dh] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      detail::head_shuffle<S, true, true>(tp.grad_buffer(na).data(), gout->data(), B, H, K,
                                          dh);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (sequential row-major accumulation)

template <class S>
Tensor<S> sum(Tape<S>& tp, const Tensor<S>& a) {
  S acc = S(0);
  const S* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += pa[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (tp.tracking(a)) {
    out.node()->requires_grad = true;
    tp.keep(a); tp.keep(out);
    Node<S>* na = a.node();
    Node<S>* no = out.node();
    tp.record([&tp, na, no] {
      const Vec<S>* gout = tp.grad_of(no);
      if (!gout) return;
      Vec<S>& gbuf = tp.grad_buffer(na);
      S g = (*gout)[0];
      for (auto& v : gbuf) v += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> mean(Tape<S>& tp, const Tensor<S>& a) {
  return scale(tp, sum(tp, a), S(1) / S(a.size()));
}

/// y = x @ W^T + b with W stored [out,in]; the usual linear-layer layout.
template <class S>
Tensor<S> linear(Tape<S>& tp, const Tensor<S>& x, const Tensor<S>& W, const Tensor<S>& b) {
  Tensor<S> y = matmul(tp, x, W, false, true);
  return add(tp, y, b);
}

// ---------------------------------------------------------------------------
// Named parameters and gradient collection

template <class S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

/// Runs backward and returns the per-parameter gradient map. Parameters that
/// received no gradient map to zero tensors.
template <class S>
std::unordered_map<std::string, Tensor<S>> backward_grads(
    Tape<S>& tp, const Tensor<S>& loss, const std::vector<NamedParam<S>>& params) {
  tp.backward(loss);
  std::unordered_map<std::string, Tensor<S>> out;
  for (const auto& p : params) {
    const Vec<S>* g = tp.grad(p.tensor);
    out.emplace(p.name,
                g ? Tensor<S>::from(p.tensor.shape(), *g) : Tensor<S>::zeros(p.tensor.shape()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay (bias-corrected moments).

template <class S>
struct AdamWConfig {
  S beta1 = S(0.9);
  S beta2 = S(0.95);
  S eps = S(1e-8);
  S weight_decay = S(0.01);
};

template <class S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig<S> cfg = {}) : cfg_(cfg) {}

  /// One update over a parameter list with matching gradients; lr >= 0.
  /// With weight_decay = 0 this is exactly Adam.
  void step(std::vector<Tensor<S>>& params, const std::vector<Vec<S>>& grads, S lr) {
    if (lr < S(0)) throw std::invalid_argument("adamw: negative learning rate");
    if (params.size() != grads.size())
      throw std::invalid_argument("adamw: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), S(0));
        v_.emplace_back(p.size(), S(0));
      }
    }
    ++t_;
    const S bc1 = S(1) - std::pow(cfg_.beta1, S(t_));
    const S bc2 = S(1) - std::pow(cfg_.beta2, S(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      if (int64_t(grads[i].size()) != params[i].size())
        throw std::invalid_argument("adamw: gradient shape mismatch for parameter " +
                                    std::to_string(i));
      S* p = params[i].data();
      const S* g = grads[i].data();
      S* m = m_[i].data();
      S* v = v_[i].data();
      const int64_t n = params[i].size();
      for (int64_t j = 0; j < n; ++j) {
        m[j] = cfg_.beta1 * m[j] + (S(1) - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (S(1) - cfg_.beta2) * g[j] * g[j];
        S mhat = m[j] / bc1;
        S vhat = v[j] / bc2;
        p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[j]);
      }
    }
  }

  int64_t step_count() const { return t_; }
  const AdamWConfig<S>& config() const { return cfg_; }
  const std::vector<Vec<S>>& first_moments() const { return m_; }
  const std::vector<Vec<S>>& second_moments() const { return v_; }

 private:
  AdamWConfig<S> cfg_;
  int64_t t_ = 0;
  std::vector<Vec<S>> m_;
  std::vector<Vec<S>> v_;
};

}  // namespace ht2::ag
