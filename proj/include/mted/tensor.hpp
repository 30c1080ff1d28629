#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to shared storage. Operations on tensors that
// require gradients record a node holding the backward rule; calling
// backward() on a scalar result walks the recorded graph in reverse
// topological order and accumulates gradients into every reachable leaf.
// Interior gradients are scratch and are reset at the start of each backward
// pass, so running backward twice on the same graph doubles leaf gradients.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mted {

class Rng;

enum class DType : uint8_t { kF32 = 0, kF64 = 1 };

const char* dtype_name(DType d);

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

namespace detail {

using Storage = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl;

struct GradFn {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs' gradients.
  std::function<void(TensorImpl& out,
                     const std::vector<std::shared_ptr<TensorImpl>>& inputs)>
      backward;
};

struct TensorImpl {
  Shape shape;
  Storage data;
  std::unique_ptr<Storage> grad;
  bool requires_grad = false;
  std::shared_ptr<GradFn> grad_fn;

  DType dtype() const {
    return data.index() == 0 ? DType::kF32 : DType::kF64;
  }
  int64_t numel() const {
    return static_cast<int64_t>(std::visit([](auto& v) { return v.size(); }, data));
  }
  template <class T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(data);
  }
  template <class T>
  const std::vector<T>& values() const {
    return std::get<std::vector<T>>(data);
  }
  // Gradient buffer, allocated zero-filled on first access.
  template <class T>
  std::vector<T>& grad_values() {
    if (!grad) grad = std::make_unique<Storage>(std::vector<T>(numel(), T(0)));
    return std::get<std::vector<T>>(*grad);
  }
};

}  // namespace detail

// Graph recording is disabled while a NoGradGuard is alive on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool grad_enabled();

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, DType dtype = DType::kF32);
  static Tensor ones(const Shape& shape, DType dtype = DType::kF32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::kF32);
  static Tensor scalar(double value, DType dtype = DType::kF32);
  static Tensor from_vector(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::kF32);
  static Tensor from_vector(const Shape& shape, std::initializer_list<double> values,
                            DType dtype = DType::kF32);
  static Tensor from_floats(const Shape& shape, std::vector<float> values);
  static Tensor randn(const Shape& shape, Rng& rng, DType dtype = DType::kF32);
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi,
                        DType dtype = DType::kF32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim() const { return static_cast<int64_t>(shape().size()); }
  int64_t size(int64_t axis) const;
  int64_t numel() const;
  DType dtype() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  template <class T>
  std::span<T> data() {
    return impl_->values<T>();
  }
  template <class T>
  std::span<const T> data() const {
    return impl_->values<T>();
  }

  double item() const;
  double at(int64_t flat_index) const;
  void set(int64_t flat_index, double value);
  std::vector<double> to_vector() const;
  std::vector<float> to_floats() const;

  bool has_grad() const;
  // Accumulated gradient as a detached tensor (zeros if none yet).
  Tensor grad() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  // Overwrites values in place from another tensor of the same shape/dtype.
  // Never recorded in the graph.
  void copy_(const Tensor& src);

  void backward() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Elementwise binary ops with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, double b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Shape broadcast_shape(const Shape& a, const Shape& b);

// Elementwise unary ops.
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

// Full reductions to a scalar tensor of shape {}.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Shape manipulation. All of these copy.
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int64_t>& order);
Tensor transpose(const Tensor& x);  // swaps the last two axes
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length);

// Batched matrix product [..., m, k] x [..., k, n]; batch extents must match
// exactly (a 2-D right operand is shared across the batch).
Tensor matmul(const Tensor& a, const Tensor& b);
// x [N, in] * w[out, in]^T + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x [B, C, H, W], w [O, C, kh, kw], optional bias [O].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride,
              int64_t pad);
// Nearest-neighbour 2x upsampling of [B, C, H, W].
Tensor upsample2x(const Tensor& x);

Tensor softmax(const Tensor& x, int64_t axis);

// Samples featmap [C, H, W] at continuous points [N, 2] given as (x, y) pixel
// coordinates. Locations outside [0, W-1] x [0, H-1] read zeros.
Tensor bilinear_sample(const Tensor& featmap, const Tensor& points);

// out[n, :] = sum_k weights[n, k] * values[n, k, :], summed as a balanced
// pairwise tree over k.
Tensor weighted_sum(const Tensor& weights, const Tensor& values);

}  // namespace mted
