#pragma once

// Dense n-d tensor with reverse-mode automatic differentiation.
//
// Every primitive builds the value eagerly; when any input requires grad it
// also records a backprop closure on the output node. backward(loss) replays
// the recorded graph in reverse topological order, accumulating (+=) into
// grad buffers, and then consumes the graph: a second backward on the same
// graph throws.
//
// Template parameter T is the scalar type: float for training, double for
// gradient verification.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "ibot/rng.hpp"

namespace ibot {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& prim, const Shape& a, const Shape& b) {
  throw std::invalid_argument(prim + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily; same length as value when present
  bool requires_grad = false;
  bool back_done = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() : n_(std::make_shared<Node>()) {}
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not match data length " +
                                  std::to_string(data.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return full({}, v, requires_grad); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node()->value) v = static_cast<T>(rng.gaussian()) * stddev;
    return t;
  }

  // truncated normal in [-2 std, 2 std], the ViT weight init
  static Tensor trunc_normal(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node()->value) {
      double g;
      do {
        g = rng.gaussian();
      } while (std::abs(g) > 2.0);
      v = static_cast<T>(g) * stddev;
    }
    return t;
  }

  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->value.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  std::vector<T>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    const_cast<Node*>(n_.get())->ensure_grad();
    return n_->grad;
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    n_->requires_grad = b;
    if (b) n_->ensure_grad();
    return *this;
  }

  void zero_grad() {
    n_->ensure_grad();
    std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  T& operator[](std::size_t i) { return n_->value[i]; }
  const T& operator[](std::size_t i) const { return n_->value[i]; }

  // Same storage, no graph attachment: gradients never flow through.
  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->value = n_->value;  // copy; detached views are immutable-after-construction
    return Tensor(std::move(n));
  }

  Tensor clone() const { return from(n_->shape, n_->value, n_->requires_grad); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> d(n_->value.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(n_->value[i]);
    return Tensor<U>::from(n_->shape, std::move(d), n_->requires_grad);
  }

  std::shared_ptr<Node>& node() { return n_; }
  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> make_result(Shape shape, std::vector<T> value,
                                           std::vector<std::shared_ptr<TensorNode<T>>> parents,
                                           std::function<void(TensorNode<T>&)> backprop) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (auto& p : parents)
    if (p->requires_grad) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// numpy-style broadcast of two shapes; throws on mismatch
inline Shape broadcast_shape(const std::string& prim, const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    std::size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(prim, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// strides of `s` aligned to broadcast shape `out` (0 where broadcast)
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  auto st = contiguous_strides(s);
  std::vector<std::size_t> r(out.size(), 0);
  std::size_t off = out.size() - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) r[off + i] = (s[i] == 1) ? 0 : st[i];
  return r;
}

// Apply fn(out_index, a_offset, b_offset) over the broadcast iteration space.
template <typename F>
void broadcast_iterate(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                       F&& fn) {
  std::size_t total = shape_numel(out);
  std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, oa, ob);
    for (std::size_t d = r; d-- > 0;) {
      idx[d]++;
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary primitives with broadcasting
// ---------------------------------------------------------------------------

template <typename T, typename FwdF, typename BwdF>
Tensor<T> binary_op(const std::string& name, const Tensor<T>& a, const Tensor<T>& b, FwdF fwd, BwdF bwd) {
  const Shape out_shape = detail::broadcast_shape(name, a.shape(), b.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(shape_numel(out_shape));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    auto sa = detail::broadcast_strides(a.shape(), out_shape);
    auto sb = detail::broadcast_strides(b.shape(), out_shape);
    detail::broadcast_iterate(out_shape, sa, sb,
                              [&](std::size_t i, std::size_t oa, std::size_t ob) { out[i] = fwd(av[oa], bv[ob]); });
  }
  auto an = a.node();
  auto bn = b.node();
  Shape ash = a.shape(), bsh = b.shape(), osh = out_shape;
  auto back = [an, bn, ash, bsh, osh, bwd](TensorNode<T>& o) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    auto apply = [&](std::size_t i, std::size_t oa, std::size_t ob) {
      T ga, gb;
      bwd(an->value[oa], bn->value[ob], o.value[i], o.grad[i], ga, gb);
      if (an->requires_grad) an->grad[oa] += ga;
      if (bn->requires_grad) bn->grad[ob] += gb;
    };
    if (ash == bsh) {
      for (std::size_t i = 0; i < o.value.size(); ++i) apply(i, i, i);
    } else {
      auto sa = detail::broadcast_strides(ash, osh);
      auto sb = detail::broadcast_strides(bsh, osh);
      detail::broadcast_iterate(osh, sa, sb, apply);
    }
  };
  return Tensor<T>(detail::make_result<T>(out_shape, std::move(out), {an, bn}, back));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T g, T& ga, T& gb) {
        ga = g;
        gb = g;
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T g, T& ga, T& gb) {
        ga = g;
        gb = -g;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T, T g, T& ga, T& gb) {
        ga = g * y;
        gb = g * x;
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T, T g, T& ga, T& gb) {
        ga = g / y;
        gb = -g * x / (y * y);
      });
}

// ---------------------------------------------------------------------------
// elementwise unary primitives
// ---------------------------------------------------------------------------

template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const Tensor<T>& a, FwdF fwd, BwdF bwd) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  auto back = [an, bwd](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.value.size(); ++i) an->grad[i] += o.grad[i] * bwd(an->value[i], o.value[i]);
  };
  return Tensor<T>(detail::make_result<T>(a.shape(), std::move(out), {an}, back));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

// tanh-approximated GELU
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T c = static_cast<T>(std::sqrt(2.0 / 3.14159265358979323846));
  const T k = static_cast<T>(0.044715);
  return unary_op(
      a,
      [c, k](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [c, k](T x, T) {
        T t = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      });
}

// ---------------------------------------------------------------------------
// shape primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  auto an = a.node();
  auto back = [an](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.value.size(); ++i) an->grad[i] += o.grad[i];
  };
  return Tensor<T>(detail::make_result<T>(std::move(shape), a.data(), {an}, back));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::vector<std::size_t> perm) {
  if (perm.size() != a.rank()) throw std::invalid_argument("transpose: permutation rank mismatch");
  Shape out_shape(a.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
  auto in_strides = detail::contiguous_strides(a.shape());
  std::vector<std::size_t> src_strides(a.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) src_strides[i] = in_strides[perm[i]];

  std::vector<T> out(a.numel());
  const auto& av = a.data();
  std::vector<std::size_t> idx(a.rank(), 0);
  std::size_t src = 0;
  std::vector<std::size_t> src_map(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[src];
    src_map[i] = src;
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      idx[d]++;
      src += src_strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  auto an = a.node();
  auto back = [an, src_map = std::move(src_map)](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.value.size(); ++i) an->grad[src_map[i]] += o.grad[i];
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an}, back));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) shape_error("concat", parts[0].shape(), p.shape());
    for (std::size_t d = 0; d < out_shape.size(); ++d)
      if (d != axis && p.dim(d) != out_shape[d]) shape_error("concat", parts[0].shape(), p.shape());
    total_axis += p.dim(axis);
  }
  out_shape[axis] = total_axis;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
  for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];

  std::vector<T> out(shape_numel(out_shape));
  std::size_t axis_off = 0;
  for (const auto& p : parts) {
    std::size_t pa = p.dim(axis);
    const auto& pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pv.begin() + o * pa * inner, pv.begin() + (o + 1) * pa * inner,
                out.begin() + (o * total_axis + axis_off) * inner);
    axis_off += pa;
  }
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  std::vector<std::size_t> axis_sizes;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    axis_sizes.push_back(p.dim(axis));
  }
  auto back = [nodes, axis_sizes, outer, inner, total_axis](TensorNode<T>& o) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
      auto& n = nodes[pi];
      std::size_t pa = axis_sizes[pi];
      if (n->requires_grad) {
        n->ensure_grad();
        for (std::size_t ou = 0; ou < outer; ++ou)
          for (std::size_t j = 0; j < pa * inner; ++j)
            n->grad[ou * pa * inner + j] += o.grad[(ou * total_axis + off) * inner + j];
      }
      off += pa;
    }
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), std::move(nodes), back));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank() || start + len > a.dim(axis))
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  std::size_t full_axis = a.dim(axis);

  std::vector<T> out(shape_numel(out_shape));
  const auto& av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(av.begin() + (o * full_axis + start) * inner, av.begin() + (o * full_axis + start + len) * inner,
              out.begin() + o * len * inner);
  auto an = a.node();
  auto back = [an, outer, inner, full_axis, start, len](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t j = 0; j < len * inner; ++j)
        an->grad[(ou * full_axis + start) * inner + j] += o.grad[ou * len * inner + j];
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an}, back));
}

// Row lookup on axis 0 (also the embedding primitive). Backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() < 1) throw std::invalid_argument("gather: table must have rank >= 1");
  std::size_t rows = table.dim(0);
  std::size_t rowlen = table.numel() / std::max<std::size_t>(rows, 1);
  for (auto id : ids)
    if (id >= rows)
      throw std::invalid_argument("gather: index " + std::to_string(id) + " out of range [0," + std::to_string(rows) +
                                  ")");
  Shape out_shape = table.shape();
  out_shape[0] = ids.size();
  std::vector<T> out(ids.size() * rowlen);
  const auto& tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + ids[i] * rowlen, tv.begin() + (ids[i] + 1) * rowlen, out.begin() + i * rowlen);
  auto tn = table.node();
  auto back = [tn, ids, rowlen](TensorNode<T>& o) {
    tn->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < rowlen; ++j) tn->grad[ids[i] * rowlen + j] += o.grad[i * rowlen + j];
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {tn}, back));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_axes(const Tensor<T>& a, std::vector<std::size_t> axes, bool keepdim = false) {
  std::vector<bool> reduce(a.rank(), false);
  for (auto ax : axes) {
    if (ax >= a.rank()) throw std::invalid_argument("sum: axis out of range");
    reduce[ax] = true;
  }
  Shape kept_shape = a.shape();
  for (std::size_t d = 0; d < a.rank(); ++d)
    if (reduce[d]) kept_shape[d] = 1;
  Shape out_shape;
  for (std::size_t d = 0; d < a.rank(); ++d)
    if (keepdim)
      out_shape.push_back(kept_shape[d]);
    else if (!reduce[d])
      out_shape.push_back(a.dim(d));

  auto out_strides_full = detail::contiguous_strides(kept_shape);
  for (std::size_t d = 0; d < a.rank(); ++d)
    if (reduce[d]) out_strides_full[d] = 0;

  std::vector<T> out(shape_numel(kept_shape), T(0));
  const auto& av = a.data();
  const Shape& ish = a.shape();
  std::vector<std::size_t> idx(a.rank(), 0);
  std::size_t oi = 0;
  std::vector<std::size_t> out_map(a.numel());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[oi] += av[i];
    out_map[i] = oi;
    for (std::size_t d = ish.size(); d-- > 0;) {
      idx[d]++;
      oi += out_strides_full[d];
      if (idx[d] < ish[d]) break;
      oi -= out_strides_full[d] * ish[d];
      idx[d] = 0;
    }
  }
  auto an = a.node();
  auto back = [an, out_map = std::move(out_map)](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += o.grad[out_map[i]];
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an}, back));
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& a, std::vector<std::size_t> axes, bool keepdim = false) {
  std::size_t count = 1;
  for (auto ax : axes) count *= a.dim(ax);
  return mul_scalar(sum_axes(a, std::move(axes), keepdim), T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum_axes(a, axes, false);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// matmul (batched over leading dims; rank-2 rhs/lhs broadcasts over batch)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a.shape(), b.shape());
  std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2) shape_error("matmul", a.shape(), b.shape());
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  bool a_bcast = abatch.empty() && !bbatch.empty();
  bool b_bcast = bbatch.empty() && !abatch.empty();
  if (!a_bcast && !b_bcast && abatch != bbatch) shape_error("matmul", a.shape(), b.shape());
  Shape batch = a_bcast ? bbatch : abatch;
  std::size_t nb = shape_numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<T> out(nb * m * n);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t i = 0; i < nb; ++i) {
    CMap A(ap + (a_bcast ? 0 : i * m * k), m, k);
    CMap B(bp + (b_bcast ? 0 : i * k * n), k, n);
    MMap C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  auto back = [an, bn, nb, m, n, k, a_bcast, b_bcast](TensorNode<T>& o) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t i = 0; i < nb; ++i) {
      CMap G(o.grad.data() + i * m * n, m, n);
      if (an->requires_grad) {
        CMap B(bn->value.data() + (b_bcast ? 0 : i * k * n), k, n);
        MMap dA(an->grad.data() + (a_bcast ? 0 : i * m * k), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (bn->requires_grad) {
        CMap A(an->value.data() + (a_bcast ? 0 : i * m * k), m, k);
        MMap dB(bn->grad.data() + (b_bcast ? 0 : i * k * n), k, n);
        dB.noalias() += A.transpose() * G;
      }
    }
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an, bn}, back));
}

// ---------------------------------------------------------------------------
// row-structured primitives over the last axis
// ---------------------------------------------------------------------------

// softmax over the last axis, max-subtracted for stability
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("softmax: rank-0 input");
  std::size_t n = a.dim(a.rank() - 1);
  std::size_t rows = a.numel() / n;
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * n;
    T* y = out.data() + r * n;
    T mx = *std::max_element(x, x + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  auto an = a.node();
  auto back = [an, rows, n](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* g = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      T* dx = an->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  };
  return Tensor<T>(detail::make_result<T>(a.shape(), std::move(out), {an}, back));
}

template <typename T>
Tensor<T> log_softmax_last(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("log_softmax: rank-0 input");
  std::size_t n = a.dim(a.rank() - 1);
  std::size_t rows = a.numel() / n;
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * n;
    T* y = out.data() + r * n;
    T mx = *std::max_element(x, x + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    T lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  auto an = a.node();
  auto back = [an, rows, n](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* g = o.grad.data() + r * n;
      T gsum = 0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[j];
      T* dx = an->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += g[j] - std::exp(y[j]) * gsum;
    }
  };
  return Tensor<T>(detail::make_result<T>(a.shape(), std::move(out), {an}, back));
}

// layer normalization over the last axis with affine gain/bias
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-6)) {
  std::size_t n = a.dim(a.rank() - 1);
  if (gain.numel() != n || bias.numel() != n) shape_error("layer_norm", a.shape(), gain.shape());
  std::size_t rows = a.numel() / n;
  std::vector<T> out(a.numel());
  std::vector<T> xhat(a.numel());
  std::vector<T> inv_sigma(rows);
  const auto& av = a.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<T>(n);
    T is = T(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (x[j] - mu) * is;
      out[r * n + j] = gv[j] * xhat[r * n + j] + bv[j];
    }
  }
  auto an = a.node();
  auto gn = gain.node();
  auto bn = bias.node();
  auto back = [an, gn, bn, rows, n, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](TensorNode<T>& o) {
    if (an->requires_grad) an->ensure_grad();
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = o.grad.data() + r * n;
      const T* xh = xhat.data() + r * n;
      if (gn->requires_grad)
        for (std::size_t j = 0; j < n; ++j) gn->grad[j] += g[j] * xh[j];
      if (bn->requires_grad)
        for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[j];
      if (an->requires_grad) {
        T sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::size_t j = 0; j < n; ++j) {
          T dxh = g[j] * gn->value[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[j];
        }
        T* dx = an->grad.data() + r * n;
        T invn = T(1) / static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
          T dxh = g[j] * gn->value[j];
          dx[j] += inv_sigma[r] * (dxh - invn * sum_dxhat - xh[j] * invn * sum_dxhat_xhat);
        }
      }
    }
  };
  return Tensor<T>(detail::make_result<T>(a.shape(), std::move(out), {an, gn, bn}, back));
}

// l2-normalization over the last axis: y = x / max(||x||, eps)
template <typename T>
Tensor<T> l2_normalize_last(const Tensor<T>& a, T eps = T(1e-12)) {
  std::size_t n = a.dim(a.rank() - 1);
  std::size_t rows = a.numel() / n;
  std::vector<T> out(a.numel());
  std::vector<T> norms(rows);
  const auto& av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * n;
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += x[j] * x[j];
    T nm = std::max(std::sqrt(s), eps);
    norms[r] = nm;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[j] / nm;
  }
  auto an = a.node();
  auto back = [an, rows, n, norms = std::move(norms)](TensorNode<T>& o) {
    an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * n;
      const T* g = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      T* dx = an->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += (g[j] - y[j] * dot) / norms[r];
    }
  };
  return Tensor<T>(detail::make_result<T>(a.shape(), std::move(out), {an}, back));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(Tensor<T> loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto root = loss.node();
  if (root->back_done) throw std::logic_error("backward: tape already consumed for this graph");
  if (!root->requires_grad) {
    root->back_done = true;
    return;  // nothing on the tape depends on a grad-requiring tensor
  }

  // iterative post-order topological sort over parents
  std::vector<std::shared_ptr<TensorNode<T>>> topo;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      auto p = node->parents[child++];
      if (p->requires_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    auto& n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
  // consume the tape: free closures and graph edges, keep leaf grads
  for (auto& n : topo) {
    if (n->backprop) {
      n->backprop = nullptr;
      n->parents.clear();
      n->back_done = true;
    }
  }
  root->back_done = true;
}

// ---------------------------------------------------------------------------
// gradient verification harness
// ---------------------------------------------------------------------------

// max over coordinates of |analytic - central difference| / max(1, |central difference|)
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> point, T step) {
  Tensor<T> x = point.clone();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> loss = f(x);
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: function must return a scalar");
  backward(loss);
  std::vector<T> analytic = x.grad();

  T max_err = 0;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    Tensor<T> xp = point.clone();
    Tensor<T> xm = point.clone();
    xp[i] += step;
    xm[i] -= step;
    T fp = f(xp).item();
    T fm = f(xm).item();
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[i]))
      throw std::runtime_error("grad_check: non-finite value at coordinate " + std::to_string(i));
    T fd = (fp - fm) / (T(2) * step);
    T err = std::abs(analytic[i] - fd) / std::max(T(1), std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace ibot
