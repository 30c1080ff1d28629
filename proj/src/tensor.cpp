#include "mted/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mted/error.hpp"
#include "mted/rng.hpp"
#include "tensor_kernels.hpp"

namespace mted {

using detail::GradFn;
using detail::Storage;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using Inputs = std::vector<ImplPtr>;

namespace {

thread_local bool g_grad_enabled = true;

template <class F>
decltype(auto) dispatch(DType d, F&& f) {
  if (d == DType::kF32) return f.template operator()<float>();
  return f.template operator()<double>();
}

ImplPtr make_impl(const Shape& shape, DType dtype) {
  for (int64_t e : shape) {
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  const auto n = static_cast<size_t>(shape_numel(shape));
  if (dtype == DType::kF32) {
    impl->data = std::vector<float>(n, 0.0f);
  } else {
    impl->data = std::vector<double>(n, 0.0);
  }
  return impl;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw UsageError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                     " vs " + dtype_name(b.dtype()) + ")");
  }
}

using BackwardFn = std::function<void(TensorImpl&, const Inputs&)>;

Tensor finish(ImplPtr out, const char* name, std::initializer_list<Tensor> inputs,
              BackwardFn backward) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) {
      if (t.defined() && t.requires_grad()) needs = true;
    }
  }
  if (needs) {
    auto fn = std::make_shared<GradFn>();
    fn->name = name;
    for (const Tensor& t : inputs) fn->inputs.push_back(t.impl_ptr());
    fn->backward = std::move(backward);
    out->requires_grad = true;
    out->grad_fn = std::move(fn);
  }
  return Tensor(std::move(out));
}

Tensor finish_many(ImplPtr out, const char* name, const std::vector<Tensor>& inputs,
                   BackwardFn backward) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    auto fn = std::make_shared<GradFn>();
    fn->name = name;
    for (const Tensor& t : inputs) fn->inputs.push_back(t.impl_ptr());
    fn->backward = std::move(backward);
    out->requires_grad = true;
    out->grad_fn = std::move(fn);
  }
  return Tensor(std::move(out));
}

bool wants_grad(const ImplPtr& p) { return p && p->requires_grad; }

// Broadcast iteration plan: strides of each operand aligned to the output rank,
// zero along broadcast axes.
struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> sa, sb;
};

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * s[i + 1];
  }
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shape(a, b);
  const size_t r = p.out.size();
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  auto fill = [r](const Shape& s, std::vector<int64_t>& dst) {
    auto st = contiguous_strides(s);
    const size_t off = r - s.size();
    for (size_t i = 0; i < s.size(); ++i) dst[off + i] = s[i] == 1 ? 0 : st[i];
  };
  fill(a, p.sa);
  fill(b, p.sb);
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const int64_t n = shape_numel(p.out);
  const auto r = static_cast<int64_t>(p.out.size());
  if (n == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  const int64_t inner = p.out[r - 1];
  const int64_t ia_step = p.sa[r - 1], ib_step = p.sb[r - 1];
  for (int64_t i = 0; i < n; i += inner) {
    for (int64_t j = 0; j < inner; ++j) f(i + j, ia + j * ia_step, ib + j * ib_step);
    for (int64_t d = r - 2; d >= 0; --d) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

const char* binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::kAdd: return "add";
    case BinaryKind::kSub: return "sub";
    case BinaryKind::kMul: return "mul";
    case BinaryKind::kDiv: return "div";
  }
  return "?";
}

Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  require_defined(a, binary_name(kind));
  require_defined(b, binary_name(kind));
  require_same_dtype(a, b, binary_name(kind));
  BroadcastPlan plan;
  try {
    plan = plan_broadcast(a.shape(), b.shape());
  } catch (const DimensionError&) {
    throw DimensionError(std::string(binary_name(kind)) + ": shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not broadcast-compatible");
  }
  auto out = make_impl(plan.out, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out->values<T>().data();
    switch (kind) {
      case BinaryKind::kAdd:
        for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] + pb[ib]; });
        break;
      case BinaryKind::kSub:
        for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] - pb[ib]; });
        break;
      case BinaryKind::kMul:
        for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] * pb[ib]; });
        break;
      case BinaryKind::kDiv:
        for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] / pb[ib]; });
        break;
    }
  });
  return finish(out, binary_name(kind), {a, b},
                [kind, plan](TensorImpl& o, const Inputs& in) {
    dispatch(o.dtype(), [&]<class T>() {
      const T* g = o.grad_values<T>().data();
      const T* pa = in[0]->values<T>().data();
      const T* pb = in[1]->values<T>().data();
      const bool need_a = wants_grad(in[0]);
      const bool need_b = wants_grad(in[1]);
      T* ga = need_a ? in[0]->grad_values<T>().data() : nullptr;
      T* gb = need_b ? in[1]->grad_values<T>().data() : nullptr;
      for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) {
        const T gi = g[i];
        switch (kind) {
          case BinaryKind::kAdd:
            if (ga) ga[ia] += gi;
            if (gb) gb[ib] += gi;
            break;
          case BinaryKind::kSub:
            if (ga) ga[ia] += gi;
            if (gb) gb[ib] -= gi;
            break;
          case BinaryKind::kMul:
            if (ga) ga[ia] += gi * pb[ib];
            if (gb) gb[ib] += gi * pa[ia];
            break;
          case BinaryKind::kDiv:
            if (ga) ga[ia] += gi / pb[ib];
            if (gb) gb[ib] -= gi * pa[ia] / (pb[ib] * pb[ib]);
            break;
        }
      });
    });
  });
}

enum class UnaryKind { kExp, kLog, kTanh, kSigmoid, kSilu, kRelu, kAbs, kSquare, kSqrt };

template <class T>
T sigmoid_value(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

Tensor unary(UnaryKind kind, const char* name, const Tensor& x) {
  require_defined(x, name);
  auto out = make_impl(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto& dst = out->values<T>();
    const auto n = static_cast<int64_t>(src.size());
    for (int64_t i = 0; i < n; ++i) {
      const T v = src[i];
      T r{};
      switch (kind) {
        case UnaryKind::kExp: r = std::exp(v); break;
        case UnaryKind::kLog: r = std::log(v); break;
        case UnaryKind::kTanh: r = std::tanh(v); break;
        case UnaryKind::kSigmoid: r = sigmoid_value(v); break;
        case UnaryKind::kSilu: r = v * sigmoid_value(v); break;
        case UnaryKind::kRelu: r = v > T(0) ? v : T(0); break;
        case UnaryKind::kAbs: r = std::abs(v); break;
        case UnaryKind::kSquare: r = v * v; break;
        case UnaryKind::kSqrt: r = std::sqrt(v); break;
      }
      dst[i] = r;
    }
  });
  return finish(out, name, {x}, [kind](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      const auto& y = o.values<T>();
      const auto& xv = in[0]->values<T>();
      auto& gx = in[0]->grad_values<T>();
      const auto n = static_cast<int64_t>(g.size());
      for (int64_t i = 0; i < n; ++i) {
        T d{};
        switch (kind) {
          case UnaryKind::kExp: d = y[i]; break;
          case UnaryKind::kLog: d = T(1) / xv[i]; break;
          case UnaryKind::kTanh: d = T(1) - y[i] * y[i]; break;
          case UnaryKind::kSigmoid: d = y[i] * (T(1) - y[i]); break;
          case UnaryKind::kSilu: {
            const T s = sigmoid_value(xv[i]);
            d = s + xv[i] * s * (T(1) - s);
            break;
          }
          case UnaryKind::kRelu: d = xv[i] > T(0) ? T(1) : T(0); break;
          case UnaryKind::kAbs: d = xv[i] > T(0) ? T(1) : (xv[i] < T(0) ? T(-1) : T(0)); break;
          case UnaryKind::kSquare: d = T(2) * xv[i]; break;
          case UnaryKind::kSqrt: d = T(0.5) / y[i]; break;
        }
        gx[i] += g[i] * d;
      }
    });
  });
}

void axis_split(const Shape& s, int64_t axis, int64_t& outer, int64_t& len, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

int64_t normalize_axis(int64_t axis, int64_t rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range for rank " +
                         std::to_string(rank));
  }
  return axis;
}

}  // namespace

// ---------------------------------------------------------------------------

const char* dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return Tensor(make_impl(shape, dtype)); }

Tensor Tensor::ones(const Shape& shape, DType dtype) { return full(shape, 1.0, dtype); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  auto impl = make_impl(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto& v = impl->values<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
  return Tensor(impl);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from_vector(const Shape& shape, std::span<const double> values, DType dtype) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_vector: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = make_impl(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto& v = impl->values<T>();
    for (size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  });
  return Tensor(impl);
}

Tensor Tensor::from_vector(const Shape& shape, std::initializer_list<double> values,
                           DType dtype) {
  return from_vector(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::from_floats(const Shape& shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_floats: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  return Tensor(impl);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, DType dtype) {
  auto impl = make_impl(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    for (auto& v : impl->values<T>()) v = static_cast<T>(rng.normal());
  });
  return Tensor(impl);
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double lo, double hi, DType dtype) {
  auto impl = make_impl(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    for (auto& v : impl->values<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  return Tensor(impl);
}

const Shape& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::size(int64_t axis) const {
  return impl_->shape[normalize_axis(axis, dim(), "size")];
}

int64_t Tensor::numel() const { return impl_->numel(); }
DType Tensor::dtype() const { return impl_->dtype(); }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (impl_->grad_fn) throw UsageError("set_requires_grad: only leaf tensors may be toggled");
  impl_->requires_grad = value;
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return at(0);
}

double Tensor::at(int64_t i) const {
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[i]); });
}

void Tensor::set(int64_t i, double value) {
  dispatch(dtype(), [&]<class T>() { data<T>()[i] = static_cast<T>(value); });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    auto s = data<T>();
    return std::vector<double>(s.begin(), s.end());
  });
}

std::vector<float> Tensor::to_floats() const {
  return dispatch(dtype(), [&]<class T>() {
    auto s = data<T>();
    std::vector<float> out(s.size());
    for (size_t i = 0; i < s.size(); ++i) out[i] = static_cast<float>(s[i]);
    return out;
  });
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

Tensor Tensor::grad() const {
  auto out = make_impl(shape(), dtype());
  if (impl_->grad) out->data = *impl_->grad;
  return Tensor(out);
}

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const {
  auto out = std::make_shared<TensorImpl>();
  out->shape = impl_->shape;
  out->data = impl_->data;
  return Tensor(out);
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  out.impl_->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return out;
}

Tensor Tensor::to(DType target) const {
  auto out = make_impl(shape(), target);
  dispatch(dtype(), [&]<class S>() {
    auto src = data<S>();
    dispatch(target, [&]<class D>() {
      auto& dst = out->values<D>();
      for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return Tensor(out);
}

void Tensor::copy_(const Tensor& src) {
  if (src.shape() != shape()) {
    throw DimensionError("copy_: shape " + shape_str(src.shape()) + " into " + shape_str(shape()));
  }
  if (src.dtype() != dtype()) throw UsageError("copy_: dtype mismatch");
  impl_->data = src.impl_->data;
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) throw UsageError("backward: loss does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  if (impl_->grad_fn) stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& ins = node->grad_fn->inputs;
    if (next < ins.size()) {
      TensorImpl* child = ins[next++].get();
      if (child && child->grad_fn && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  dispatch(dtype(), [&]<class T>() {
    for (TensorImpl* node : order) {
      node->grad.reset();
      node->grad_values<T>();
    }
    impl_->grad_values<T>()[0] += T(1);
  });
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    node->grad_fn->backward(*node, node->grad_fn->inputs);
  }
  for (TensorImpl* node : order) {
    if (node != impl_.get()) node->grad.reset();
  }
}

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryKind::kDiv, a, b); }

Tensor add(const Tensor& a, double s) {
  require_defined(a, "add");
  auto out = make_impl(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto src = a.data<T>();
    auto& dst = out->values<T>();
    const T v = static_cast<T>(s);
    for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] + v;
  });
  return finish(out, "add_scalar", {a}, [](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      auto& gx = in[0]->grad_values<T>();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  });
}

Tensor mul(const Tensor& a, double s) {
  require_defined(a, "mul");
  auto out = make_impl(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto src = a.data<T>();
    auto& dst = out->values<T>();
    const T v = static_cast<T>(s);
    for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * v;
  });
  return finish(out, "mul_scalar", {a}, [s](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      auto& gx = in[0]->grad_values<T>();
      const T v = static_cast<T>(s);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * v;
    });
  });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor exp(const Tensor& x) { return unary(UnaryKind::kExp, "exp", x); }
Tensor log(const Tensor& x) { return unary(UnaryKind::kLog, "log", x); }
Tensor tanh(const Tensor& x) { return unary(UnaryKind::kTanh, "tanh", x); }
Tensor sigmoid(const Tensor& x) { return unary(UnaryKind::kSigmoid, "sigmoid", x); }
Tensor silu(const Tensor& x) { return unary(UnaryKind::kSilu, "silu", x); }
Tensor relu(const Tensor& x) { return unary(UnaryKind::kRelu, "relu", x); }
Tensor abs(const Tensor& x) { return unary(UnaryKind::kAbs, "abs", x); }
Tensor square(const Tensor& x) { return unary(UnaryKind::kSquare, "square", x); }
Tensor sqrt(const Tensor& x) { return unary(UnaryKind::kSqrt, "sqrt", x); }

// --- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  auto out = make_impl({}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    out->values<T>()[0] = acc;
  });
  return finish(out, "sum", {x}, [](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const T g = o.grad_values<T>()[0];
      for (auto& v : in[0]->grad_values<T>()) v += g;
    });
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return mul(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// --- shape ---------------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto out = std::make_shared<TensorImpl>();
  out->shape = shape;
  out->data = x.impl()->data;
  return finish(out, "reshape", {x}, [](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      auto& gx = in[0]->grad_values<T>();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  });
}

Tensor permute(const Tensor& x, const std::vector<int64_t>& order) {
  require_defined(x, "permute");
  const auto r = x.dim();
  if (static_cast<int64_t>(order.size()) != r) {
    throw DimensionError("permute: order has " + std::to_string(order.size()) +
                         " axes for rank " + std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (int64_t i = 0; i < r; ++i) {
    if (order[i] < 0 || order[i] >= r || seen[order[i]]) throw DimensionError("permute: invalid order");
    seen[order[i]] = true;
    out_shape[i] = x.shape()[order[i]];
  }
  const auto in_strides = contiguous_strides(x.shape());
  std::vector<int64_t> gather_strides(r);
  for (int64_t i = 0; i < r; ++i) gather_strides[i] = in_strides[order[i]];

  // Source offset for each output element, shared by forward and backward.
  auto offsets = std::make_shared<std::vector<int64_t>>(x.numel());
  {
    std::vector<int64_t> idx(r, 0);
    int64_t off = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
      (*offsets)[i] = off;
      for (int64_t d = r - 1; d >= 0; --d) {
        ++idx[d];
        off += gather_strides[d];
        if (idx[d] < out_shape[d]) break;
        off -= gather_strides[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  auto out = make_impl(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto& dst = out->values<T>();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = src[(*offsets)[i]];
  });
  return finish(out, "permute", {x}, [offsets](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      auto& gx = in[0]->grad_values<T>();
      for (size_t i = 0; i < g.size(); ++i) gx[(*offsets)[i]] += g[i];
    });
  });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.dim() < 2) throw DimensionError("transpose: rank must be >= 2");
  std::vector<int64_t> order(x.dim());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.dim() - 1], order[x.dim() - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Tensor& first = parts.front();
  require_defined(first, "concat");
  axis = normalize_axis(axis, first.dim(), "concat");
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    require_defined(p, "concat");
    require_same_dtype(first, p, "concat");
    if (p.dim() != first.dim()) throw DimensionError("concat: rank mismatch");
    for (int64_t d = 0; d < first.dim(); ++d) {
      if (d != axis && p.shape()[d] != first.shape()[d]) {
        throw DimensionError("concat: shapes " + shape_str(first.shape()) + " and " +
                             shape_str(p.shape()) + " differ off the concat axis");
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  int64_t outer, len, inner;
  axis_split(out_shape, axis, outer, len, inner);
  auto out = make_impl(out_shape, first.dtype());
  std::vector<int64_t> lens;
  for (const Tensor& p : parts) lens.push_back(p.shape()[axis]);
  dispatch(first.dtype(), [&]<class T>() {
    auto& dst = out->values<T>();
    int64_t base = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
      auto src = parts[k].data<T>();
      const int64_t block = lens[k] * inner;
      for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(src.begin() + o * block, block, dst.begin() + o * len * inner + base);
      }
      base += block;
    }
  });
  return finish_many(out, "concat", parts, [lens, outer, len, inner](TensorImpl& o, const Inputs& in) {
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      int64_t base = 0;
      for (size_t k = 0; k < in.size(); ++k) {
        const int64_t block = lens[k] * inner;
        if (wants_grad(in[k])) {
          auto& gx = in[k]->grad_values<T>();
          for (int64_t oo = 0; oo < outer; ++oo) {
            for (int64_t i = 0; i < block; ++i) gx[oo * block + i] += g[oo * len * inner + base + i];
          }
        }
        base += block;
      }
    });
  });
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length) {
  require_defined(x, "slice");
  axis = normalize_axis(axis, x.dim(), "slice");
  if (start < 0 || length < 0 || start + length > x.shape()[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of bounds for " +
                         shape_str(x.shape()));
  }
  int64_t outer, len, inner;
  axis_split(x.shape(), axis, outer, len, inner);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  auto out = make_impl(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto& dst = out->values<T>();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + (o * len + start) * inner, length * inner,
                  dst.begin() + o * length * inner);
    }
  });
  return finish(out, "slice", {x}, [outer, len, inner, start, length](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      auto& gx = in[0]->grad_values<T>();
      for (int64_t oo = 0; oo < outer; ++oo) {
        for (int64_t i = 0; i < length * inner; ++i) {
          gx[(oo * len + start) * inner + i] += g[oo * length * inner + i];
        }
      }
    });
  });
}

// --- matmul ----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_same_dtype(a, b, "matmul");
  if (a.dim() < 2 || b.dim() < 2) throw DimensionError("matmul: operands must have rank >= 2");
  const int64_t m = a.size(-2), k = a.size(-1);
  const int64_t kb = b.size(-2), n = b.size(-1);
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = b.dim() == 2;
  if (!shared_b && batch_a != batch_b) {
    throw DimensionError("matmul: batch extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const int64_t batch = shape_numel(batch_a);
  Shape out_shape = batch_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = make_impl(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out->values<T>().data();
    for (int64_t i = 0; i < batch; ++i) {
      kernels::gemm<T>(m, n, k, pa + i * m * k, pb + (shared_b ? 0 : i * k * n), po + i * m * n);
    }
  });
  return finish(out, "matmul", {a, b}, [m, n, k, batch, shared_b](TensorImpl& o, const Inputs& in) {
    dispatch(o.dtype(), [&]<class T>() {
      const T* g = o.grad_values<T>().data();
      const T* pa = in[0]->values<T>().data();
      const T* pb = in[1]->values<T>().data();
      std::vector<T> tmp;
      if (wants_grad(in[0])) {
        T* ga = in[0]->grad_values<T>().data();
        for (int64_t i = 0; i < batch; ++i) {
          kernels::transpose<T>(k, n, pb + (shared_b ? 0 : i * k * n), tmp);  // [n, k]
          kernels::gemm<T>(m, k, n, g + i * m * n, tmp.data(), ga + i * m * k);
        }
      }
      if (wants_grad(in[1])) {
        T* gb = in[1]->grad_values<T>().data();
        for (int64_t i = 0; i < batch; ++i) {
          kernels::transpose<T>(m, k, pa + i * m * k, tmp);  // [k, m]
          kernels::gemm<T>(k, n, m, tmp.data(), g + i * m * n, gb + (shared_b ? 0 : i * k * n));
        }
      }
    });
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, transpose(w));
  return b.defined() ? add(y, b) : y;
}

// --- conv ------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride, int64_t pad) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  require_same_dtype(x, w, "conv2d");
  if (x.dim() != 4 || w.dim() != 4) {
    throw DimensionError("conv2d: expected x [B,C,H,W] and w [O,C,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const int64_t O = w.size(0), kh = w.size(2), kw = w.size(3);
  if (w.size(1) != C) {
    throw DimensionError("conv2d: input has " + std::to_string(C) + " channels, kernel expects " +
                         std::to_string(w.size(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d: kernel extents must be odd");
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: stride must be >= 1 and pad >= 0");
  if (bias.defined()) {
    require_same_dtype(x, bias, "conv2d");
    if (bias.shape() != Shape{O}) throw DimensionError("conv2d: bias must have shape [O]");
  }
  const int64_t Ho = H + 2 * pad - kh >= 0 ? (H + 2 * pad - kh) / stride + 1 : 0;
  const int64_t Wo = W + 2 * pad - kw >= 0 ? (W + 2 * pad - kw) / stride + 1 : 0;
  if (Ho <= 0 || Wo <= 0) {
    throw DimensionError("conv2d: non-positive output extent for input " + shape_str(x.shape()) +
                         " and kernel " + shape_str(w.shape()));
  }
  const kernels::ConvGeom geom{C, H, W, kh, kw, stride, pad, Ho, Wo};
  auto out = make_impl({B, O, Ho, Wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = x.data<T>().data();
    const T* pw = w.data<T>().data();
    T* po = out->values<T>().data();
    std::vector<T> col;
    const int64_t ckk = C * kh * kw, hw = Ho * Wo;
    for (int64_t bi = 0; bi < B; ++bi) {
      kernels::im2col<T>(geom, px + bi * C * H * W, col);
      T* ob = po + bi * O * hw;
      if (bias.defined()) {
        auto pb = bias.data<T>();
        for (int64_t o = 0; o < O; ++o) std::fill_n(ob + o * hw, hw, pb[o]);
      }
      kernels::gemm<T>(O, hw, ckk, pw, col.data(), ob);
    }
  });
  return finish(out, "conv2d", {x, w, bias}, [geom, B, O](TensorImpl& o, const Inputs& in) {
    dispatch(o.dtype(), [&]<class T>() {
      const int64_t C = geom.c, H = geom.h, W = geom.w;
      const int64_t ckk = C * geom.kh * geom.kw, hw = geom.ho * geom.wo;
      const T* g = o.grad_values<T>().data();
      const T* px = in[0]->values<T>().data();
      const T* pw = in[1]->values<T>().data();
      const bool need_x = wants_grad(in[0]);
      const bool need_w = wants_grad(in[1]);
      const bool need_b = in.size() > 2 && wants_grad(in[2]);
      std::vector<T> col, colt, wt, dcol;
      if (need_x) kernels::transpose<T>(O, ckk, pw, wt);  // [ckk, O]
      for (int64_t bi = 0; bi < B; ++bi) {
        const T* gb = g + bi * O * hw;
        if (need_w) {
          kernels::im2col<T>(geom, px + bi * C * H * W, col);
          kernels::transpose<T>(ckk, hw, col.data(), colt);  // [hw, ckk]
          kernels::gemm<T>(O, ckk, hw, gb, colt.data(), in[1]->grad_values<T>().data());
        }
        if (need_x) {
          dcol.assign(static_cast<size_t>(ckk * hw), T(0));
          kernels::gemm<T>(ckk, hw, O, wt.data(), gb, dcol.data());
          kernels::col2im<T>(geom, dcol.data(), in[0]->grad_values<T>().data() + bi * C * H * W);
        }
        if (need_b) {
          auto& gbias = in[2]->grad_values<T>();
          for (int64_t oo = 0; oo < O; ++oo) {
            T acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += gb[oo * hw + i];
            gbias[oo] += acc;
          }
        }
      }
    });
  });
}

Tensor upsample2x(const Tensor& x) {
  require_defined(x, "upsample2x");
  if (x.dim() != 4) throw DimensionError("upsample2x: expected [B,C,H,W], got " + shape_str(x.shape()));
  const int64_t planes = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  auto out = make_impl({x.size(0), x.size(1), 2 * H, 2 * W}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto& dst = out->values<T>();
    for (int64_t p = 0; p < planes; ++p) {
      for (int64_t i = 0; i < 2 * H; ++i) {
        for (int64_t j = 0; j < 2 * W; ++j) {
          dst[(p * 2 * H + i) * 2 * W + j] = src[(p * H + i / 2) * W + j / 2];
        }
      }
    }
  });
  return finish(out, "upsample2x", {x}, [planes, H, W](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      auto& gx = in[0]->grad_values<T>();
      for (int64_t p = 0; p < planes; ++p) {
        for (int64_t i = 0; i < 2 * H; ++i) {
          for (int64_t j = 0; j < 2 * W; ++j) {
            gx[(p * H + i / 2) * W + j / 2] += g[(p * 2 * H + i) * 2 * W + j];
          }
        }
      }
    });
  });
}

// --- softmax -------------------------------------------------------------------

Tensor softmax(const Tensor& x, int64_t axis) {
  require_defined(x, "softmax");
  axis = normalize_axis(axis, x.dim(), "softmax");
  int64_t outer, len, inner;
  axis_split(x.shape(), axis, outer, len, inner);
  auto out = make_impl(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto& dst = out->values<T>();
    for (T v : src) {
      if (std::isnan(v)) throw NumericError("softmax: NaN input");
    }
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * len * inner + i;
        T mx = src[base];
        for (int64_t k = 1; k < len; ++k) mx = std::max(mx, src[base + k * inner]);
        T total = 0;
        for (int64_t k = 0; k < len; ++k) {
          const T e = std::exp(src[base + k * inner] - mx);
          dst[base + k * inner] = e;
          total += e;
        }
        for (int64_t k = 0; k < len; ++k) dst[base + k * inner] /= total;
      }
    }
  });
  return finish(out, "softmax", {x}, [outer, len, inner](TensorImpl& o, const Inputs& in) {
    if (!wants_grad(in[0])) return;
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      const auto& y = o.values<T>();
      auto& gx = in[0]->grad_values<T>();
      for (int64_t oo = 0; oo < outer; ++oo) {
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = oo * len * inner + i;
          T dot = 0;
          for (int64_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (int64_t k = 0; k < len; ++k) {
            const int64_t idx = base + k * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  });
}

// --- sampling ------------------------------------------------------------------

namespace {

// Bilinear stencil at (px, py). Corners outside the map contribute zero.
struct Stencil {
  bool usable = false;
  int64_t x0 = 0, y0 = 0;
  double fx = 0, fy = 0;
};

Stencil make_stencil(double px, double py) {
  Stencil s;
  if (!std::isfinite(px) || !std::isfinite(py) || std::abs(px) > 1e9 || std::abs(py) > 1e9) {
    return s;
  }
  const double fx0 = std::floor(px), fy0 = std::floor(py);
  s.usable = true;
  s.x0 = static_cast<int64_t>(fx0);
  s.y0 = static_cast<int64_t>(fy0);
  s.fx = px - fx0;
  s.fy = py - fy0;
  return s;
}

}  // namespace

Tensor bilinear_sample(const Tensor& featmap, const Tensor& points) {
  require_defined(featmap, "bilinear_sample");
  require_defined(points, "bilinear_sample");
  require_same_dtype(featmap, points, "bilinear_sample");
  if (featmap.dim() != 3) throw DimensionError("bilinear_sample: featmap must be [C,H,W], got " + shape_str(featmap.shape()));
  if (points.dim() != 2 || points.size(1) != 2) {
    throw DimensionError("bilinear_sample: points must be [N,2], got " + shape_str(points.shape()));
  }
  const int64_t C = featmap.size(0), H = featmap.size(1), W = featmap.size(2), N = points.size(0);
  auto out = make_impl({N, C}, featmap.dtype());
  dispatch(featmap.dtype(), [&]<class T>() {
    auto f = featmap.data<T>();
    auto p = points.data<T>();
    auto& dst = out->values<T>();
    for (int64_t n = 0; n < N; ++n) {
      const Stencil s = make_stencil(p[2 * n], p[2 * n + 1]);
      if (!s.usable) continue;
      const T fx = static_cast<T>(s.fx), fy = static_cast<T>(s.fy);
      const T w[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
      const int64_t xs[4] = {s.x0, s.x0 + 1, s.x0, s.x0 + 1};
      const int64_t ys[4] = {s.y0, s.y0, s.y0 + 1, s.y0 + 1};
      for (int64_t c = 0; c < C; ++c) {
        T v[4];
        for (int k = 0; k < 4; ++k) {
          const bool in = xs[k] >= 0 && xs[k] < W && ys[k] >= 0 && ys[k] < H;
          v[k] = in ? f[(c * H + ys[k]) * W + xs[k]] : T(0);
        }
        dst[n * C + c] = w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3];
      }
    }
  });
  return finish(out, "bilinear_sample", {featmap, points}, [C, H, W, N](TensorImpl& o, const Inputs& in) {
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      const auto& f = in[0]->values<T>();
      const auto& p = in[1]->values<T>();
      T* gf = wants_grad(in[0]) ? in[0]->grad_values<T>().data() : nullptr;
      T* gp = wants_grad(in[1]) ? in[1]->grad_values<T>().data() : nullptr;
      for (int64_t n = 0; n < N; ++n) {
        const Stencil s = make_stencil(p[2 * n], p[2 * n + 1]);
        if (!s.usable) continue;
        const T fx = static_cast<T>(s.fx), fy = static_cast<T>(s.fy);
        const T w[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
        const int64_t xs[4] = {s.x0, s.x0 + 1, s.x0, s.x0 + 1};
        const int64_t ys[4] = {s.y0, s.y0, s.y0 + 1, s.y0 + 1};
        bool inside[4];
        for (int k = 0; k < 4; ++k) inside[k] = xs[k] >= 0 && xs[k] < W && ys[k] >= 0 && ys[k] < H;
        T gx_acc = 0, gy_acc = 0;
        for (int64_t c = 0; c < C; ++c) {
          const T gc = g[n * C + c];
          T v[4];
          for (int k = 0; k < 4; ++k) {
            const int64_t idx = (c * H + ys[k]) * W + xs[k];
            v[k] = inside[k] ? f[idx] : T(0);
            if (gf && inside[k]) gf[idx] += gc * w[k];
          }
          gx_acc += gc * ((T(1) - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]));
          gy_acc += gc * ((T(1) - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]));
        }
        if (gp) {
          gp[2 * n] += gx_acc;
          gp[2 * n + 1] += gy_acc;
        }
      }
    });
  });
}

Tensor weighted_sum(const Tensor& weights, const Tensor& values) {
  require_defined(weights, "weighted_sum");
  require_defined(values, "weighted_sum");
  require_same_dtype(weights, values, "weighted_sum");
  if (weights.dim() != 2 || values.dim() != 3 || values.size(0) != weights.size(0) ||
      values.size(1) != weights.size(1)) {
    throw DimensionError("weighted_sum: expected weights [N,K] and values [N,K,C], got " +
                         shape_str(weights.shape()) + " and " + shape_str(values.shape()));
  }
  const int64_t N = values.size(0), K = values.size(1), C = values.size(2);
  auto out = make_impl({N, C}, values.dtype());
  dispatch(values.dtype(), [&]<class T>() {
    auto w = weights.data<T>();
    auto v = values.data<T>();
    auto& dst = out->values<T>();
    std::vector<T> terms(K);
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t c = 0; c < C; ++c) {
        for (int64_t k = 0; k < K; ++k) terms[k] = w[n * K + k] * v[(n * K + k) * C + c];
        for (int64_t step = 1; step < K; step *= 2) {
          for (int64_t k = 0; k + step < K; k += 2 * step) terms[k] += terms[k + step];
        }
        dst[n * C + c] = K > 0 ? terms[0] : T(0);
      }
    }
  });
  return finish(out, "weighted_sum", {weights, values}, [N, K, C](TensorImpl& o, const Inputs& in) {
    dispatch(o.dtype(), [&]<class T>() {
      const auto& g = o.grad_values<T>();
      const auto& w = in[0]->values<T>();
      const auto& v = in[1]->values<T>();
      T* gw = wants_grad(in[0]) ? in[0]->grad_values<T>().data() : nullptr;
      T* gv = wants_grad(in[1]) ? in[1]->grad_values<T>().data() : nullptr;
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t k = 0; k < K; ++k) {
          T acc = 0;
          for (int64_t c = 0; c < C; ++c) {
            const T gc = g[n * C + c];
            acc += gc * v[(n * K + k) * C + c];
            if (gv) gv[(n * K + k) * C + c] += gc * w[n * K + k];
          }
          if (gw) gw[n * K + k] += acc;
        }
      }
    });
  });
}

}  // namespace mted
