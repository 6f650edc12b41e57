#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cimt/errors.hpp"
#include "cimt/rng.hpp"

namespace cimt {

// Dense N-d tensor with optional reverse-mode autodiff history.
// float is the training dtype; double exists for gradient checking.
//
// Recording model: ops push their backward rule onto a thread-local tape in
// execution order, so the tape is topologically sorted by construction.
// backward(loss) walks it once in reverse and then clears it. A tensor and
// the tape it participates in belong to one thread; detach() produces a
// history-free copy that may cross threads.

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Runtime switch for the NaN/Inf guard after forward ops.
// Defaults on in debug builds, off under NDEBUG; tests flip it on.
bool& finite_checks_enabled();

template <typename T>
struct TensorImplT {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool on_tape = false;  // produced by a recorded op

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class TensorT {
public:
    using value_type = T;

    TensorT() = default;

    static TensorT zeros(Shape s);
    static TensorT full(Shape s, T v);
    static TensorT from(Shape s, std::vector<T> v);
    static TensorT scalar(T v);
    static TensorT randn(Shape s, Rng& rng, T stddev = T(1));
    static TensorT uniform(Shape s, Rng& rng, T lo, T hi);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int extent(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::span<T> values() { return impl_->data; }
    std::span<const T> values() const { return impl_->data; }

    T item() const;
    T at(std::initializer_list<int> idx) const;

    TensorT& set_requires_grad(bool f = true) {
        impl_->requires_grad = f;
        return *this;
    }
    bool requires_grad() const { return impl_->requires_grad; }
    bool on_tape() const { return impl_->on_tape; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const T> grad_values() const;
    TensorT grad() const;  // copies grad into a plain tensor
    void zero_grad() {
        if (impl_) impl_->grad.clear();
    }

    TensorT detach() const;  // deep copy, no history, requires_grad off
    TensorT clone() const { return detach(); }

    std::shared_ptr<TensorImplT<T>>& impl() { return impl_; }
    const std::shared_ptr<TensorImplT<T>>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImplT<T>> impl_;
};

template <typename T>
class TapeT {
public:
    static TapeT& current();  // thread-local

    bool recording = true;

    void push(std::function<void()> bw) { ops_.push_back(std::move(bw)); }
    size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    // reverse walk; each rule runs exactly once
    void run_backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> ops_;
};

// Disables recording on this thread's float and double tapes while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_f_;
    bool prev_d_;
};

enum class PoolKind { kMax, kAvg };

// ---- elementwise ----
template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> scale(const TensorT<T>& a, T s);
template <typename T> TensorT<T> add_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> neg(const TensorT<T>& a);
template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> gelu(const TensorT<T>& a);  // tanh approximation
template <typename T> TensorT<T> exp(const TensorT<T>& a);
template <typename T> TensorT<T> log(const TensorT<T>& a);
template <typename T> TensorT<T> clamp(const TensorT<T>& a, T lo, T hi);

// ---- linear algebra ----
template <typename T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> transpose2(const TensorT<T>& a);
// y = x W^T + b for W[out x in]; x may be [in] or [n x in]
template <typename T> TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b);

// ---- normalization / softmax ----
template <typename T> TensorT<T> softmax_axis(const TensorT<T>& a, int axis);
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& a, int axis, const TensorT<T>& gain, const TensorT<T>& bias,
                      T eps = T(1e-5));
// mean over columns of -sum(target * log softmax(logits)) along `axis`
template <typename T>
TensorT<T> softmax_xent_mean(const TensorT<T>& logits, const TensorT<T>& target_onehot, int axis);

// ---- convolution / pooling / resizing, layouts [c, D, H, W] ----
template <typename T>
TensorT<T> conv3(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride, int pad);
template <typename T>
TensorT<T> pool3(const TensorT<T>& x, PoolKind kind, const std::array<int, 3>& window,
                 const std::array<int, 3>& stride);
template <typename T> TensorT<T> global_pool3(const TensorT<T>& x, PoolKind kind);  // -> [c]
template <typename T>
TensorT<T> interpolate_nearest(const TensorT<T>& x, const std::array<int, 3>& target);

// ---- reductions / reshaping ----
template <typename T> TensorT<T> reduce_max(const TensorT<T>& a, int axis);
template <typename T> TensorT<T> reduce_mean(const TensorT<T>& a, int axis);
template <typename T> TensorT<T> reduce_sum(const TensorT<T>& a, int axis);
template <typename T> TensorT<T> sum(const TensorT<T>& a);   // -> scalar
template <typename T> TensorT<T> mean(const TensorT<T>& a);  // -> scalar
template <typename T> TensorT<T> reshape(const TensorT<T>& a, Shape s);
template <typename T> TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis);
template <typename T> TensorT<T> slice(const TensorT<T>& a, int axis, int start, int len);

// One-hot of the per-slot argmax along `axis`; ties pick the lowest index.
// Not differentiable: output never joins the tape.
template <typename T> TensorT<T> onehot_argmax_axis(const TensorT<T>& a, int axis);

// ---- autodiff entry points ----
template <typename T> void backward(const TensorT<T>& loss);

// Max over coordinates of |analytic - central difference| / max(|a|, |cd|, 1e-8).
// f must map x to a scalar tensor and be deterministic.
template <typename T>
double grad_check(const std::function<TensorT<T>(const TensorT<T>&)>& f, TensorT<T> x, T eps);

// Same comparison scored against the gradient's overall magnitude instead of
// coordinate by coordinate: max_i |a_i - cd_i| / max(max_j |a_j|, max_j |cd_j|,
// 1e-8). Use for composite models where some coordinates have vanishing
// derivatives that finite-difference roundoff would otherwise dominate.
template <typename T>
double grad_check_scaled(const std::function<TensorT<T>(const TensorT<T>&)>& f, TensorT<T> x,
                         T eps);

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

#define CIMT_DECLARE_FOR(T)                                                                        \
    extern template struct TensorImplT<T>;                                                         \
    extern template class TensorT<T>;                                                              \
    extern template class TapeT<T>;                                                                \
    extern template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                          \
    extern template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                          \
    extern template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                          \
    extern template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);                          \
    extern template TensorT<T> scale(const TensorT<T>&, T);                                        \
    extern template TensorT<T> add_scalar(const TensorT<T>&, T);                                   \
    extern template TensorT<T> neg(const TensorT<T>&);                                             \
    extern template TensorT<T> relu(const TensorT<T>&);                                            \
    extern template TensorT<T> gelu(const TensorT<T>&);                                            \
    extern template TensorT<T> exp(const TensorT<T>&);                                             \
    extern template TensorT<T> log(const TensorT<T>&);                                             \
    extern template TensorT<T> clamp(const TensorT<T>&, T, T);                                     \
    extern template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);                       \
    extern template TensorT<T> transpose2(const TensorT<T>&);                                      \
    extern template TensorT<T> linear(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);    \
    extern template TensorT<T> softmax_axis(const TensorT<T>&, int);                               \
    extern template TensorT<T> layer_norm(const TensorT<T>&, int, const TensorT<T>&,               \
                                          const TensorT<T>&, T);                                   \
    extern template TensorT<T> softmax_xent_mean(const TensorT<T>&, const TensorT<T>&, int);       \
    extern template TensorT<T> conv3(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, \
                                     int);                                                         \
    extern template TensorT<T> pool3(const TensorT<T>&, PoolKind, const std::array<int, 3>&,       \
                                     const std::array<int, 3>&);                                   \
    extern template TensorT<T> global_pool3(const TensorT<T>&, PoolKind);                          \
    extern template TensorT<T> interpolate_nearest(const TensorT<T>&, const std::array<int, 3>&);  \
    extern template TensorT<T> reduce_max(const TensorT<T>&, int);                                 \
    extern template TensorT<T> reduce_mean(const TensorT<T>&, int);                                \
    extern template TensorT<T> reduce_sum(const TensorT<T>&, int);                                 \
    extern template TensorT<T> sum(const TensorT<T>&);                                             \
    extern template TensorT<T> mean(const TensorT<T>&);                                            \
    extern template TensorT<T> reshape(const TensorT<T>&, Shape);                                  \
    extern template TensorT<T> concat(const std::vector<TensorT<T>>&, int);                        \
    extern template TensorT<T> slice(const TensorT<T>&, int, int, int);                            \
    extern template TensorT<T> onehot_argmax_axis(const TensorT<T>&, int);                         \
    extern template void backward(const TensorT<T>&);                                              \
    extern template double grad_check(const std::function<TensorT<T>(const TensorT<T>&)>&,         \
                                      TensorT<T>, T);                                               \
    extern template double grad_check_scaled(const std::function<TensorT<T>(const TensorT<T>&)>&,  \
                                             TensorT<T>, T);

CIMT_DECLARE_FOR(float)
CIMT_DECLARE_FOR(double)
#undef CIMT_DECLARE_FOR

}  // namespace cimt
