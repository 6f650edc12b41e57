#include "cimt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace cimt {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

bool& finite_checks_enabled() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

namespace {

template <typename T>
void check_finite(const TensorT<T>& t, const char* op) {
    if (!finite_checks_enabled()) return;
    for (T v : t.values()) {
        if (!std::isfinite(v))
            throw ContractError(std::string(op) + ": non-finite value in forward output");
    }
}

template <typename T>
bool tracked(const TensorT<T>& t) {
    return t.defined() && (t.requires_grad() || t.on_tape());
}

// Pushes `bw` if recording is on and any input participates in the graph.
template <typename T>
void record(TensorT<T>& out, std::initializer_list<const TensorT<T>*> inputs,
            std::function<void()> bw) {
    auto& tape = TapeT<T>::current();
    if (!tape.recording) return;
    bool need = false;
    for (const TensorT<T>* in : inputs)
        if (tracked(*in)) need = true;
    if (!need) return;
    out.impl()->on_tape = true;
    tape.push(std::move(bw));
}

template <typename T>
std::span<const T> out_grad(const std::shared_ptr<TensorImplT<T>>& o) {
    return o->grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// TensorT basics
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape s) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = std::move(s);
    t.impl_->data.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), T(0));
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape s, T v) {
    TensorT t = zeros(std::move(s));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), v);
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::from(Shape s, std::vector<T> v) {
    if (shape_numel(s) != static_cast<int64_t>(v.size()))
        throw ShapeError("from: shape " + shape_str(s) + " does not match " +
                         std::to_string(v.size()) + " values");
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = std::move(s);
    t.impl_->data = std::move(v);
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T v) {
    return from({1}, {v});
}

template <typename T>
TensorT<T> TensorT<T>::randn(Shape s, Rng& rng, T stddev) {
    TensorT t = zeros(std::move(s));
    for (T& v : t.impl_->data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::uniform(Shape s, Rng& rng, T lo, T hi) {
    TensorT t = zeros(std::move(s));
    for (T& v : t.impl_->data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
T TensorT<T>::item() const {
    if (numel() != 1) throw ContractError("item: tensor has shape " + shape_str(shape()));
    return impl_->data[0];
}

template <typename T>
T TensorT<T>::at(std::initializer_list<int> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) throw ShapeError("at: index rank mismatch");
    int64_t lin = 0;
    size_t d = 0;
    for (int i : idx) {
        lin = lin * s[d] + i;
        ++d;
    }
    return impl_->data[static_cast<size_t>(lin)];
}

template <typename T>
std::span<const T> TensorT<T>::grad_values() const {
    if (!has_grad()) throw ContractError("grad_values: no gradient present");
    return impl_->grad;
}

template <typename T>
TensorT<T> TensorT<T>::grad() const {
    if (!has_grad()) throw ContractError("grad: no gradient present");
    return TensorT::from(impl_->shape, impl_->grad);
}

template <typename T>
TensorT<T> TensorT<T>::detach() const {
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
}

template <typename T>
TapeT<T>& TapeT<T>::current() {
    thread_local TapeT tape;
    return tape;
}

NoGradGuard::NoGradGuard()
    : prev_f_(TapeT<float>::current().recording), prev_d_(TapeT<double>::current().recording) {
    TapeT<float>::current().recording = false;
    TapeT<double>::current().recording = false;
}

NoGradGuard::~NoGradGuard() {
    TapeT<float>::current().recording = prev_f_;
    TapeT<double>::current().recording = prev_d_;
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (size_t i = 0; i < r; ++i) {
        int ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Row-major strides of `s` aligned into rank `r`, with 0 for broadcast dims.
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    size_t r = out.size();
    std::vector<int64_t> st(r, 0);
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        size_t oi = i + (r - s.size());
        st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

// Sums `full` (shaped like `out`) into a tensor shaped like `target`,
// collapsing broadcast dims. Used by binary-op backward rules.
template <typename T>
void reduce_into(const std::vector<T>& full, const Shape& out, const Shape& target,
                 std::vector<T>& acc) {
    auto tstrides = broadcast_strides(target, out);
    size_t r = out.size();
    std::vector<int> idx(r, 0);
    int64_t toff = 0;
    for (size_t lin = 0; lin < full.size(); ++lin) {
        acc[static_cast<size_t>(toff)] += full[lin];
        for (size_t d = r; d-- > 0;) {
            toff += tstrides[d];
            if (++idx[d] < out[d]) break;
            idx[d] = 0;
            toff -= tstrides[d] * out[d];
        }
    }
}

template <typename T, typename FwdFn, typename DaFn, typename DbFn>
TensorT<T> binary_op(const char* name, const TensorT<T>& a, const TensorT<T>& b, FwdFn f, DaFn da,
                     DbFn db) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    TensorT<T> out;
    if (sa == sb) {
        out = TensorT<T>::zeros(sa);
        const T* pa = a.values().data();
        const T* pb = b.values().data();
        T* po = out.values().data();
        int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    } else {
        Shape so = broadcast_shape(sa, sb, name);
        out = TensorT<T>::zeros(so);
        auto stA = broadcast_strides(sa, so);
        auto stB = broadcast_strides(sb, so);
        size_t r = so.size();
        std::vector<int> idx(r, 0);
        int64_t offA = 0, offB = 0;
        const T* pa = a.values().data();
        const T* pb = b.values().data();
        T* po = out.values().data();
        int64_t n = out.numel();
        for (int64_t lin = 0; lin < n; ++lin) {
            po[lin] = f(pa[offA], pb[offB]);
            for (size_t d = r; d-- > 0;) {
                offA += stA[d];
                offB += stB[d];
                if (++idx[d] < so[d]) break;
                idx[d] = 0;
                offA -= stA[d] * so[d];
                offB -= stB[d] * so[d];
            }
        }
    }
    check_finite(out, name);
    record(out, {&a, &b}, [ia = a.impl(), ib = b.impl(), io = out.impl(), da, db]() {
        if (io->grad.empty()) return;
        const Shape& so = io->shape;
        auto apply = [&](const std::shared_ptr<TensorImplT<T>>& it,
                         const std::shared_ptr<TensorImplT<T>>& other, auto dfn, bool a_side) {
            if (!it->requires_grad && !it->on_tape) return;
            it->ensure_grad();
            // full-shape gradient, then collapse to the input's shape
            std::vector<T> full(io->grad.size());
            auto stA = broadcast_strides(a_side ? it->shape : other->shape, so);
            auto stB = broadcast_strides(a_side ? other->shape : it->shape, so);
            size_t r = so.size();
            std::vector<int> idx(r, 0);
            int64_t offA = 0, offB = 0;
            const T* pa = (a_side ? it : other)->data.data();
            const T* pb = (a_side ? other : it)->data.data();
            for (size_t lin = 0; lin < full.size(); ++lin) {
                full[lin] = io->grad[lin] * dfn(pa[offA], pb[offB]);
                for (size_t d = r; d-- > 0;) {
                    offA += stA[d];
                    offB += stB[d];
                    if (++idx[d] < so[d]) break;
                    idx[d] = 0;
                    offA -= stA[d] * so[d];
                    offB -= stB[d] * so[d];
                }
            }
            if (it->shape == so) {
                for (size_t i = 0; i < full.size(); ++i) it->grad[i] += full[i];
            } else {
                reduce_into(full, so, it->shape, it->grad);
            }
        };
        apply(ia, ib, da, true);
        apply(ib, ia, db, false);
    });
    return out;
}

template <typename T, typename FwdFn, typename DFn>
TensorT<T> unary_op(const char* name, const TensorT<T>& a, FwdFn f, DFn dfdx) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    check_finite(out, name);
    record(out, {&a}, [ia = a.impl(), io = out.impl(), dfdx]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        for (size_t i = 0; i < io->grad.size(); ++i)
            ia->grad[i] += io->grad[i] * dfdx(ia->data[i], io->data[i]);
    });
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    return unary_op(
        "scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
    return unary_op(
        "add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    return unary_op(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
    static constexpr double kC = 0.7978845608028653559;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    return unary_op(
        "gelu", a,
        [](T x) {
            double xd = static_cast<double>(x);
            double u = kC * (xd + kA * xd * xd * xd);
            return static_cast<T>(0.5 * xd * (1.0 + std::tanh(u)));
        },
        [](T x, T) {
            double xd = static_cast<double>(x);
            double u = kC * (xd + kA * xd * xd * xd);
            double th = std::tanh(u);
            double sech2 = 1.0 - th * th;
            double du = kC * (1.0 + 3.0 * kA * xd * xd);
            return static_cast<T>(0.5 * (1.0 + th) + 0.5 * xd * sech2 * du);
        });
}

template <typename T>
TensorT<T> exp(const TensorT<T>& a) {
    return unary_op(
        "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
TensorT<T> log(const TensorT<T>& a) {
    return unary_op(
        "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
    return unary_op(
        "clamp", a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// GEMM kernels (row-major, accumulate into c)
// ---------------------------------------------------------------------------

namespace {

// c[MxN] += a[MxK] * b[KxN]
template <typename T>
void gemm_nn(int m, int k, int n, const T* a, const T* b, T* c) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<size_t>(i) * n;
        const T* arow = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            if (aik == T(0)) continue;
            const T* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[MxN] += a[MxK] * b[NxK]^T  (rows of a dot rows of b)
template <typename T>
void gemm_nt(int m, int k, int n, const T* a, const T* b, T* c) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// c[MxN] += a[KxM]^T * b[KxN]
template <typename T>
void gemm_tn(int m, int k, int n, const T* a, const T* b, T* c) {
    for (int kk = 0; kk < k; ++kk) {
        const T* arow = a + static_cast<size_t>(kk) * m;
        const T* brow = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const T aik = arow[i];
            if (aik == T(0)) continue;
            T* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int m = a.extent(0), k = a.extent(1);
    int k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    TensorT<T> out = TensorT<T>::zeros({m, n});
    gemm_nn(m, k, n, a.values().data(), b.values().data(), out.values().data());
    check_finite(out, "matmul");
    record(out, {&a, &b}, [ia = a.impl(), ib = b.impl(), io = out.impl(), m, k, n]() {
        if (io->grad.empty()) return;
        const T* g = io->grad.data();
        if (ia->requires_grad || ia->on_tape) {
            ia->ensure_grad();
            // dA = G * B^T
            gemm_nt(m, n, k, g, ib->data.data(), ia->grad.data());
        }
        if (ib->requires_grad || ib->on_tape) {
            ib->ensure_grad();
            // dB = A^T * G
            gemm_tn(k, m, n, ia->data.data(), g, ib->grad.data());
        }
    });
    return out;
}

template <typename T>
TensorT<T> transpose2(const TensorT<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose2: expects rank-2, got " + shape_str(a.shape()));
    int m = a.extent(0), n = a.extent(1);
    TensorT<T> out = TensorT<T>::zeros({n, m});
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[static_cast<size_t>(j) * m + i] = pa[static_cast<size_t>(i) * n + j];
    record(out, {&a}, [ia = a.impl(), io = out.impl(), m, n]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                ia->grad[static_cast<size_t>(i) * n + j] += io->grad[static_cast<size_t>(j) * m + i];
    });
    return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    bool vec = x.rank() == 1;
    TensorT<T> x2 = vec ? reshape(x, {1, x.extent(0)}) : x;
    TensorT<T> y = matmul(x2, transpose2(w));
    if (b.defined()) y = add(y, b);
    if (vec) y = reshape(y, {w.extent(0)});
    return y;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm / cross entropy
// ---------------------------------------------------------------------------

namespace {

// Views a tensor as [outer, axis extent, inner] around `axis`.
struct AxisView {
    int64_t outer = 1;
    int64_t n = 1;
    int64_t inner = 1;
};

AxisView axis_view(const Shape& s, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ContractError(std::string(op) + ": axis " + std::to_string(axis) +
                            " out of range for " + shape_str(s));
    AxisView v;
    for (int i = 0; i < axis; ++i) v.outer *= s[i];
    v.n = s[axis];
    for (size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

}  // namespace

template <typename T>
TensorT<T> softmax_axis(const TensorT<T>& a, int axis) {
    AxisView v = axis_view(a.shape(), axis, "softmax_axis");
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t in = 0; in < v.inner; ++in) {
            const int64_t base = o * v.n * v.inner + in;
            T mx = pa[base];
            for (int64_t i = 1; i < v.n; ++i) mx = std::max(mx, pa[base + i * v.inner]);
            T denom = T(0);
            for (int64_t i = 0; i < v.n; ++i) {
                T e = std::exp(pa[base + i * v.inner] - mx);
                po[base + i * v.inner] = e;
                denom += e;
            }
            for (int64_t i = 0; i < v.n; ++i) po[base + i * v.inner] /= denom;
        }
    }
    check_finite(out, "softmax_axis");
    record(out, {&a}, [ia = a.impl(), io = out.impl(), v]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        const T* y = io->data.data();
        const T* g = io->grad.data();
        for (int64_t o = 0; o < v.outer; ++o) {
            for (int64_t in = 0; in < v.inner; ++in) {
                const int64_t base = o * v.n * v.inner + in;
                T dot = T(0);
                for (int64_t i = 0; i < v.n; ++i) dot += g[base + i * v.inner] * y[base + i * v.inner];
                for (int64_t i = 0; i < v.n; ++i) {
                    int64_t p = base + i * v.inner;
                    ia->grad[p] += y[p] * (g[p] - dot);
                }
            }
        }
    });
    return out;
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& a, int axis, const TensorT<T>& gain, const TensorT<T>& bias,
                      T eps) {
    AxisView v = axis_view(a.shape(), axis, "layer_norm");
    if (gain.numel() != v.n || bias.numel() != v.n)
        throw ShapeError("layer_norm: gain/bias must have extent " + std::to_string(v.n));
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    // xhat retained for backward
    auto xhat = std::make_shared<std::vector<T>>(a.values().size());
    auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(v.outer * v.inner));
    const T* pa = a.values().data();
    const T* pg = gain.values().data();
    const T* pb = bias.values().data();
    T* po = out.values().data();
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t in = 0; in < v.inner; ++in) {
            const int64_t base = o * v.n * v.inner + in;
            T mu = T(0);
            for (int64_t i = 0; i < v.n; ++i) mu += pa[base + i * v.inner];
            mu /= static_cast<T>(v.n);
            T var = T(0);
            for (int64_t i = 0; i < v.n; ++i) {
                T d = pa[base + i * v.inner] - mu;
                var += d * d;
            }
            var /= static_cast<T>(v.n);
            T rs = T(1) / std::sqrt(var + eps);
            (*rstd)[static_cast<size_t>(o * v.inner + in)] = rs;
            for (int64_t i = 0; i < v.n; ++i) {
                int64_t p = base + i * v.inner;
                T xh = (pa[p] - mu) * rs;
                (*xhat)[static_cast<size_t>(p)] = xh;
                po[p] = pg[i] * xh + pb[i];
            }
        }
    }
    check_finite(out, "layer_norm");
    record(out, {&a, &gain, &bias},
           [ia = a.impl(), ig = gain.impl(), ib = bias.impl(), io = out.impl(), v, xhat, rstd]() {
               if (io->grad.empty()) return;
               const T* g = io->grad.data();
               const T* xh = xhat->data();
               bool need_a = ia->requires_grad || ia->on_tape;
               bool need_g = ig->requires_grad || ig->on_tape;
               bool need_b = ib->requires_grad || ib->on_tape;
               if (need_a) ia->ensure_grad();
               if (need_g) ig->ensure_grad();
               if (need_b) ib->ensure_grad();
               for (int64_t o = 0; o < v.outer; ++o) {
                   for (int64_t in = 0; in < v.inner; ++in) {
                       const int64_t base = o * v.n * v.inner + in;
                       const T rs = (*rstd)[static_cast<size_t>(o * v.inner + in)];
                       T sum_dxh = T(0), sum_dxh_xh = T(0);
                       for (int64_t i = 0; i < v.n; ++i) {
                           int64_t p = base + i * v.inner;
                           T dxh = g[p] * ig->data[static_cast<size_t>(i)];
                           sum_dxh += dxh;
                           sum_dxh_xh += dxh * xh[p];
                           if (need_g) ig->grad[static_cast<size_t>(i)] += g[p] * xh[p];
                           if (need_b) ib->grad[static_cast<size_t>(i)] += g[p];
                       }
                       if (need_a) {
                           const T inv_n = T(1) / static_cast<T>(v.n);
                           for (int64_t i = 0; i < v.n; ++i) {
                               int64_t p = base + i * v.inner;
                               T dxh = g[p] * ig->data[static_cast<size_t>(i)];
                               ia->grad[p] += rs * (dxh - inv_n * sum_dxh - xh[p] * inv_n * sum_dxh_xh);
                           }
                       }
                   }
               }
           });
    return out;
}

template <typename T>
TensorT<T> softmax_xent_mean(const TensorT<T>& logits, const TensorT<T>& target_onehot, int axis) {
    if (logits.shape() != target_onehot.shape())
        throw ShapeError("softmax_xent_mean: logits " + shape_str(logits.shape()) +
                         " vs target " + shape_str(target_onehot.shape()));
    AxisView v = axis_view(logits.shape(), axis, "softmax_xent_mean");
    const int64_t cols = v.outer * v.inner;
    const T* px = logits.values().data();
    const T* py = target_onehot.values().data();
    double total = 0.0;
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t in = 0; in < v.inner; ++in) {
            const int64_t base = o * v.n * v.inner + in;
            T mx = px[base];
            for (int64_t i = 1; i < v.n; ++i) mx = std::max(mx, px[base + i * v.inner]);
            double denom = 0.0;
            double dot = 0.0;
            for (int64_t i = 0; i < v.n; ++i) {
                int64_t p = base + i * v.inner;
                denom += std::exp(static_cast<double>(px[p] - mx));
                dot += static_cast<double>(py[p]) * static_cast<double>(px[p] - mx);
            }
            total += std::log(denom) - dot;
        }
    }
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(total / static_cast<double>(cols)));
    check_finite(out, "softmax_xent_mean");
    record(out, {&logits}, [ix = logits.impl(), iy = target_onehot.impl(), io = out.impl(), v, cols]() {
        if (io->grad.empty() || !(ix->requires_grad || ix->on_tape)) return;
        ix->ensure_grad();
        const T g = io->grad[0] / static_cast<T>(cols);
        const T* px = ix->data.data();
        const T* py = iy->data.data();
        for (int64_t o = 0; o < v.outer; ++o) {
            for (int64_t in = 0; in < v.inner; ++in) {
                const int64_t base = o * v.n * v.inner + in;
                T mx = px[base];
                for (int64_t i = 1; i < v.n; ++i) mx = std::max(mx, px[base + i * v.inner]);
                T denom = T(0);
                for (int64_t i = 0; i < v.n; ++i)
                    denom += std::exp(px[base + i * v.inner] - mx);
                for (int64_t i = 0; i < v.n; ++i) {
                    int64_t p = base + i * v.inner;
                    T soft = std::exp(px[p] - mx) / denom;
                    ix->grad[p] += g * (soft - py[p]);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// conv3 via im2col
// ---------------------------------------------------------------------------

namespace {

struct Conv3Dims {
    int cin, cout, k, stride, pad;
    int id, ih, iw;
    int od, oh, ow;
    int64_t vout() const { return static_cast<int64_t>(od) * oh * ow; }
    int64_t krows() const { return static_cast<int64_t>(cin) * k * k * k; }
};

// col[krows x vout]
template <typename T>
void im2col(const Conv3Dims& d, const T* x, T* col) {
    const int64_t vout = d.vout();
    int64_t r = 0;
    for (int ci = 0; ci < d.cin; ++ci) {
        const T* xc = x + static_cast<size_t>(ci) * d.id * d.ih * d.iw;
        for (int kz = 0; kz < d.k; ++kz)
            for (int ky = 0; ky < d.k; ++ky)
                for (int kx = 0; kx < d.k; ++kx, ++r) {
                    T* crow = col + static_cast<size_t>(r) * vout;
                    int64_t v = 0;
                    for (int oz = 0; oz < d.od; ++oz) {
                        const int iz = oz * d.stride + kz - d.pad;
                        const bool zok = iz >= 0 && iz < d.id;
                        for (int oy = 0; oy < d.oh; ++oy) {
                            const int iy = oy * d.stride + ky - d.pad;
                            const bool yok = iy >= 0 && iy < d.ih;
                            const int ix0 = kx - d.pad;
                            if (!zok || !yok) {
                                for (int ox = 0; ox < d.ow; ++ox, ++v) crow[v] = T(0);
                                continue;
                            }
                            const T* xrow = xc + (static_cast<size_t>(iz) * d.ih + iy) * d.iw;
                            for (int ox = 0; ox < d.ow; ++ox, ++v) {
                                const int ix = ox * d.stride + ix0;
                                crow[v] = (ix >= 0 && ix < d.iw) ? xrow[ix] : T(0);
                            }
                        }
                    }
                }
    }
}

// scatter-add of col layout back into x gradient
template <typename T>
void col2im_add(const Conv3Dims& d, const T* col, T* gx) {
    const int64_t vout = d.vout();
    int64_t r = 0;
    for (int ci = 0; ci < d.cin; ++ci) {
        T* xc = gx + static_cast<size_t>(ci) * d.id * d.ih * d.iw;
        for (int kz = 0; kz < d.k; ++kz)
            for (int ky = 0; ky < d.k; ++ky)
                for (int kx = 0; kx < d.k; ++kx, ++r) {
                    const T* crow = col + static_cast<size_t>(r) * vout;
                    int64_t v = 0;
                    for (int oz = 0; oz < d.od; ++oz) {
                        const int iz = oz * d.stride + kz - d.pad;
                        const bool zok = iz >= 0 && iz < d.id;
                        for (int oy = 0; oy < d.oh; ++oy) {
                            const int iy = oy * d.stride + ky - d.pad;
                            if (!zok || iy < 0 || iy >= d.ih) {
                                v += d.ow;
                                continue;
                            }
                            T* xrow = xc + (static_cast<size_t>(iz) * d.ih + iy) * d.iw;
                            for (int ox = 0; ox < d.ow; ++ox, ++v) {
                                const int ix = ox * d.stride + kx - d.pad;
                                if (ix >= 0 && ix < d.iw) xrow[ix] += crow[v];
                            }
                        }
                    }
                }
    }
}

}  // namespace

template <typename T>
TensorT<T> conv3(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                 int pad) {
    if (x.rank() != 4) throw ShapeError("conv3: input must be [c,D,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 5) throw ShapeError("conv3: kernel must be [co,ci,k,k,k], got " + shape_str(w.shape()));
    if (w.extent(2) != w.extent(3) || w.extent(3) != w.extent(4))
        throw ShapeError("conv3: kernel must be cubic, got " + shape_str(w.shape()));
    if (x.extent(0) != w.extent(1))
        throw ShapeError("conv3: input channels " + shape_str(x.shape()) + " vs kernel " +
                         shape_str(w.shape()));
    Conv3Dims d;
    d.cin = x.extent(0);
    d.cout = w.extent(0);
    d.k = w.extent(2);
    d.stride = stride;
    d.pad = pad;
    d.id = x.extent(1);
    d.ih = x.extent(2);
    d.iw = x.extent(3);
    auto osz = [&](int in) { return (in + 2 * pad - d.k) / stride + 1; };
    d.od = osz(d.id);
    d.oh = osz(d.ih);
    d.ow = osz(d.iw);
    if (d.od <= 0 || d.oh <= 0 || d.ow <= 0)
        throw ShapeError("conv3: non-positive output extent for input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(w.shape()) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
    if (b.defined() && b.numel() != d.cout)
        throw ShapeError("conv3: bias extent must equal output channels");

    TensorT<T> out = TensorT<T>::zeros({d.cout, d.od, d.oh, d.ow});
    {
        std::vector<T> col(static_cast<size_t>(d.krows() * d.vout()));
        im2col(d, x.values().data(), col.data());
        gemm_nn(d.cout, static_cast<int>(d.krows()), static_cast<int>(d.vout()),
                w.values().data(), col.data(), out.values().data());
    }
    if (b.defined()) {
        T* po = out.values().data();
        const T* pb = b.values().data();
        const int64_t vout = d.vout();
        for (int co = 0; co < d.cout; ++co) {
            T* row = po + static_cast<size_t>(co) * vout;
            for (int64_t v = 0; v < vout; ++v) row[v] += pb[co];
        }
    }
    check_finite(out, "conv3");
    const TensorT<T>* bias_in = b.defined() ? &b : &x;  // x as placeholder when no bias
    record(out, {&x, &w, bias_in},
           [ix = x.impl(), iw = w.impl(), ib = b.defined() ? b.impl() : nullptr, io = out.impl(), d]() {
               if (io->grad.empty()) return;
               const T* g = io->grad.data();
               const int kr = static_cast<int>(d.krows());
               const int vo = static_cast<int>(d.vout());
               const bool need_x = ix->requires_grad || ix->on_tape;
               const bool need_w = iw->requires_grad || iw->on_tape;
               if (need_x || need_w) {
                   // col recomputed; activations are cheaper to rebuild than retain
                   std::vector<T> col(static_cast<size_t>(kr) * vo);
                   im2col(d, ix->data.data(), col.data());
                   if (need_w) {
                       iw->ensure_grad();
                       gemm_nt(d.cout, vo, kr, g, col.data(), iw->grad.data());
                   }
                   if (need_x) {
                       ix->ensure_grad();
                       std::vector<T>& dcol = col;  // reuse buffer
                       std::fill(dcol.begin(), dcol.end(), T(0));
                       gemm_tn(kr, d.cout, vo, iw->data.data(), g, dcol.data());
                       col2im_add(d, dcol.data(), ix->grad.data());
                   }
               }
               if (ib && (ib->requires_grad || ib->on_tape)) {
                   ib->ensure_grad();
                   for (int co = 0; co < d.cout; ++co) {
                       T acc = T(0);
                       const T* row = g + static_cast<size_t>(co) * vo;
                       for (int v = 0; v < vo; ++v) acc += row[v];
                       ib->grad[static_cast<size_t>(co)] += acc;
                   }
               }
           });
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resize
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> pool3(const TensorT<T>& x, PoolKind kind, const std::array<int, 3>& window,
                 const std::array<int, 3>& stride) {
    if (x.rank() != 4) throw ShapeError("pool3: input must be [c,D,H,W], got " + shape_str(x.shape()));
    const int c = x.extent(0), id = x.extent(1), ih = x.extent(2), iw = x.extent(3);
    const int wd = window[0], wh = window[1], ww = window[2];
    if (wd > id || wh > ih || ww > iw)
        throw ShapeError("pool3: window " + std::to_string(wd) + "x" + std::to_string(wh) + "x" +
                         std::to_string(ww) + " larger than input " + shape_str(x.shape()));
    const int od = (id - wd) / stride[0] + 1;
    const int oh = (ih - wh) / stride[1] + 1;
    const int ow = (iw - ww) / stride[2] + 1;
    TensorT<T> out = TensorT<T>::zeros({c, od, oh, ow});
    const T* px = x.values().data();
    T* po = out.values().data();
    // argmax indices kept for max backward; first max wins on ties
    auto argmax = std::make_shared<std::vector<int64_t>>();
    if (kind == PoolKind::kMax) argmax->resize(out.values().size());
    const T inv_w = T(1) / static_cast<T>(static_cast<int64_t>(wd) * wh * ww);
    int64_t o = 0;
    for (int ci = 0; ci < c; ++ci) {
        const T* xc = px + static_cast<size_t>(ci) * id * ih * iw;
        for (int oz = 0; oz < od; ++oz)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++o) {
                    const int z0 = oz * stride[0], y0 = oy * stride[1], x0 = ox * stride[2];
                    if (kind == PoolKind::kMax) {
                        // seed from the first element so an all-NaN window still
                        // records a valid index for the backward scatter
                        int64_t besti = (static_cast<int64_t>(z0) * ih + y0) * iw + x0;
                        T best = xc[besti];
                        for (int dz = 0; dz < wd; ++dz)
                            for (int dy = 0; dy < wh; ++dy)
                                for (int dx = 0; dx < ww; ++dx) {
                                    int64_t p = (static_cast<int64_t>(z0 + dz) * ih + (y0 + dy)) * iw +
                                                (x0 + dx);
                                    if (xc[p] > best) {
                                        best = xc[p];
                                        besti = p;
                                    }
                                }
                        po[o] = best;
                        (*argmax)[static_cast<size_t>(o)] =
                            besti + static_cast<int64_t>(ci) * id * ih * iw;
                    } else {
                        T acc = T(0);
                        for (int dz = 0; dz < wd; ++dz)
                            for (int dy = 0; dy < wh; ++dy)
                                for (int dx = 0; dx < ww; ++dx)
                                    acc += xc[(static_cast<int64_t>(z0 + dz) * ih + (y0 + dy)) * iw +
                                              (x0 + dx)];
                        po[o] = acc * inv_w;
                    }
                }
    }
    check_finite(out, "pool3");
    record(out, {&x},
           [ix = x.impl(), io = out.impl(), kind, argmax, window, stride, c, id, ih, iw, od, oh, ow,
            inv_w]() {
               if (io->grad.empty() || !(ix->requires_grad || ix->on_tape)) return;
               ix->ensure_grad();
               const T* g = io->grad.data();
               if (kind == PoolKind::kMax) {
                   for (size_t o = 0; o < io->grad.size(); ++o)
                       ix->grad[static_cast<size_t>((*argmax)[o])] += g[o];
                   return;
               }
               int64_t o = 0;
               for (int ci = 0; ci < c; ++ci) {
                   T* xc = ix->grad.data() + static_cast<size_t>(ci) * id * ih * iw;
                   for (int oz = 0; oz < od; ++oz)
                       for (int oy = 0; oy < oh; ++oy)
                           for (int ox = 0; ox < ow; ++ox, ++o) {
                               const T go = g[o] * inv_w;
                               for (int dz = 0; dz < window[0]; ++dz)
                                   for (int dy = 0; dy < window[1]; ++dy)
                                       for (int dx = 0; dx < window[2]; ++dx)
                                           xc[(static_cast<int64_t>(oz * stride[0] + dz) * ih +
                                               (oy * stride[1] + dy)) *
                                                  iw +
                                              (ox * stride[2] + dx)] += go;
                           }
               }
           });
    return out;
}

template <typename T>
TensorT<T> global_pool3(const TensorT<T>& x, PoolKind kind) {
    TensorT<T> pooled = pool3(x, kind, {x.extent(1), x.extent(2), x.extent(3)},
                              {x.extent(1), x.extent(2), x.extent(3)});
    return reshape(pooled, {x.extent(0)});
}

template <typename T>
TensorT<T> interpolate_nearest(const TensorT<T>& x, const std::array<int, 3>& target) {
    if (x.rank() != 4)
        throw ShapeError("interpolate_nearest: input must be [c,D,H,W], got " + shape_str(x.shape()));
    for (int e : target)
        if (e <= 0) throw ShapeError("interpolate_nearest: non-positive target extent");
    const int c = x.extent(0), id = x.extent(1), ih = x.extent(2), iw = x.extent(3);
    const int od = target[0], oh = target[1], ow = target[2];
    TensorT<T> out = TensorT<T>::zeros({c, od, oh, ow});
    // src = floor(dst * in / out); exact inverse for integer factors
    std::vector<int> mz(od), my(oh), mx(ow);
    for (int i = 0; i < od; ++i) mz[i] = static_cast<int>(static_cast<int64_t>(i) * id / od);
    for (int i = 0; i < oh; ++i) my[i] = static_cast<int>(static_cast<int64_t>(i) * ih / oh);
    for (int i = 0; i < ow; ++i) mx[i] = static_cast<int>(static_cast<int64_t>(i) * iw / ow);
    const T* px = x.values().data();
    T* po = out.values().data();
    int64_t o = 0;
    for (int ci = 0; ci < c; ++ci) {
        const T* xc = px + static_cast<size_t>(ci) * id * ih * iw;
        for (int oz = 0; oz < od; ++oz)
            for (int oy = 0; oy < oh; ++oy) {
                const T* xrow = xc + (static_cast<int64_t>(mz[oz]) * ih + my[oy]) * iw;
                for (int ox = 0; ox < ow; ++ox, ++o) po[o] = xrow[mx[ox]];
            }
    }
    record(out, {&x}, [ix = x.impl(), io = out.impl(), mz, my, mx, c, id, ih, iw, od, oh, ow]() {
        if (io->grad.empty() || !(ix->requires_grad || ix->on_tape)) return;
        ix->ensure_grad();
        const T* g = io->grad.data();
        int64_t o = 0;
        for (int ci = 0; ci < c; ++ci) {
            T* xc = ix->grad.data() + static_cast<size_t>(ci) * id * ih * iw;
            for (int oz = 0; oz < od; ++oz)
                for (int oy = 0; oy < oh; ++oy) {
                    T* xrow = xc + (static_cast<int64_t>(mz[oz]) * ih + my[oy]) * iw;
                    for (int ox = 0; ox < ow; ++ox, ++o) xrow[mx[ox]] += g[o];
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions / reshaping
// ---------------------------------------------------------------------------

namespace {

template <typename T>
TensorT<T> reduce_axis_op(const char* name, const TensorT<T>& a, int axis, bool is_mean) {
    AxisView v = axis_view(a.shape(), axis, name);
    Shape os;
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis) os.push_back(a.extent(i));
    if (os.empty()) os = {1};
    TensorT<T> out = TensorT<T>::zeros(os);
    const T* pa = a.values().data();
    T* po = out.values().data();
    const T invn = T(1) / static_cast<T>(v.n);
    for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t in = 0; in < v.inner; ++in) {
            T acc = T(0);
            for (int64_t i = 0; i < v.n; ++i) acc += pa[o * v.n * v.inner + i * v.inner + in];
            po[o * v.inner + in] = is_mean ? acc * invn : acc;
        }
    record(out, {&a}, [ia = a.impl(), io = out.impl(), v, is_mean, invn]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        const T* g = io->grad.data();
        for (int64_t o = 0; o < v.outer; ++o)
            for (int64_t in = 0; in < v.inner; ++in) {
                const T gv = is_mean ? g[o * v.inner + in] * invn : g[o * v.inner + in];
                for (int64_t i = 0; i < v.n; ++i)
                    ia->grad[o * v.n * v.inner + i * v.inner + in] += gv;
            }
    });
    return out;
}

}  // namespace

template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& a, int axis) {
    return reduce_axis_op("reduce_sum", a, axis, false);
}

template <typename T>
TensorT<T> reduce_mean(const TensorT<T>& a, int axis) {
    return reduce_axis_op("reduce_mean", a, axis, true);
}

template <typename T>
TensorT<T> reduce_max(const TensorT<T>& a, int axis) {
    AxisView v = axis_view(a.shape(), axis, "reduce_max");
    Shape os;
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis) os.push_back(a.extent(i));
    if (os.empty()) os = {1};
    TensorT<T> out = TensorT<T>::zeros(os);
    auto argmax = std::make_shared<std::vector<int64_t>>(out.values().size());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t in = 0; in < v.inner; ++in) {
            T best = pa[o * v.n * v.inner + in];
            int64_t besti = o * v.n * v.inner + in;
            for (int64_t i = 1; i < v.n; ++i) {
                int64_t p = o * v.n * v.inner + i * v.inner + in;
                if (pa[p] > best) {
                    best = pa[p];
                    besti = p;
                }
            }
            po[o * v.inner + in] = best;
            (*argmax)[static_cast<size_t>(o * v.inner + in)] = besti;
        }
    record(out, {&a}, [ia = a.impl(), io = out.impl(), argmax]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        for (size_t o = 0; o < io->grad.size(); ++o)
            ia->grad[static_cast<size_t>((*argmax)[o])] += io->grad[o];
    });
    return out;
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    TensorT<T> out = TensorT<T>::zeros({1});
    T acc = T(0);
    for (T x : a.values()) acc += x;
    out.values()[0] = acc;
    record(out, {&a}, [ia = a.impl(), io = out.impl()]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        const T g = io->grad[0];
        for (T& v : ia->grad) v += g;
    });
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape s) {
    if (shape_numel(s) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(s) +
                         " changes element count");
    TensorT<T> out = TensorT<T>::from(std::move(s), {a.values().begin(), a.values().end()});
    record(out, {&a}, [ia = a.impl(), io = out.impl()]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        for (size_t i = 0; i < io->grad.size(); ++i) ia->grad[i] += io->grad[i];
    });
    return out;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: empty part list");
    const Shape& s0 = parts[0].shape();
    Shape os = s0;
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(s0.size()))
            throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis && p.extent(i) != s0[static_cast<size_t>(i)])
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(i));
        total += p.extent(axis);
    }
    os[static_cast<size_t>(axis)] = total;
    AxisView vo = axis_view(os, axis, "concat");
    TensorT<T> out = TensorT<T>::zeros(os);
    T* po = out.values().data();
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t pn = p.extent(axis);
        const T* pp = p.values().data();
        for (int64_t o = 0; o < vo.outer; ++o)
            std::memcpy(po + (o * vo.n + off) * vo.inner, pp + o * pn * vo.inner,
                        static_cast<size_t>(pn * vo.inner) * sizeof(T));
        off += pn;
    }
    std::vector<std::shared_ptr<TensorImplT<T>>> impls;
    bool any_tracked = false;
    for (const auto& p : parts) {
        impls.push_back(p.impl());
        if (tracked(p)) any_tracked = true;
    }
    if (TapeT<T>::current().recording && any_tracked) {
        out.impl()->on_tape = true;
        TapeT<T>::current().push([impls, io = out.impl(), vo]() {
            if (io->grad.empty()) return;
            const T* g = io->grad.data();
            int64_t off = 0;
            for (const auto& ip : impls) {
                int64_t pn = static_cast<int64_t>(ip->data.size()) / (vo.outer * vo.inner);
                if (ip->requires_grad || ip->on_tape) {
                    ip->ensure_grad();
                    for (int64_t o = 0; o < vo.outer; ++o) {
                        const T* gsrc = g + (o * vo.n + off) * vo.inner;
                        T* gdst = ip->grad.data() + o * pn * vo.inner;
                        for (int64_t i = 0; i < pn * vo.inner; ++i) gdst[i] += gsrc[i];
                    }
                }
                off += pn;
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, int axis, int start, int len) {
    AxisView v = axis_view(a.shape(), axis, "slice");
    if (start < 0 || len <= 0 || start + len > v.n)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for extent " +
                         std::to_string(v.n));
    Shape os = a.shape();
    os[static_cast<size_t>(axis)] = len;
    TensorT<T> out = TensorT<T>::zeros(os);
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t o = 0; o < v.outer; ++o)
        std::memcpy(po + o * len * v.inner, pa + (o * v.n + start) * v.inner,
                    static_cast<size_t>(len * v.inner) * sizeof(T));
    record(out, {&a}, [ia = a.impl(), io = out.impl(), v, start, len]() {
        if (io->grad.empty() || !(ia->requires_grad || ia->on_tape)) return;
        ia->ensure_grad();
        const T* g = io->grad.data();
        for (int64_t o = 0; o < v.outer; ++o) {
            T* dst = ia->grad.data() + (o * v.n + start) * v.inner;
            const T* src = g + o * len * v.inner;
            for (int64_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

template <typename T>
TensorT<T> onehot_argmax_axis(const TensorT<T>& a, int axis) {
    AxisView v = axis_view(a.shape(), axis, "onehot_argmax_axis");
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t in = 0; in < v.inner; ++in) {
            int64_t best = 0;
            T bv = pa[o * v.n * v.inner + in];
            for (int64_t i = 1; i < v.n; ++i) {
                T x = pa[o * v.n * v.inner + i * v.inner + in];
                if (x > bv) {  // strict: lowest index wins ties
                    bv = x;
                    best = i;
                }
            }
            po[o * v.n * v.inner + best * v.inner + in] = T(1);
        }
    return out;  // never recorded
}

// ---------------------------------------------------------------------------
// backward / grad_check
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto& tape = TapeT<T>::current();
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += T(1);
    tape.run_backward();
    tape.clear();
}

// analytic gradient and central differences for every coordinate of x
template <typename T>
static std::pair<std::vector<double>, std::vector<double>> grad_check_collect(
    const std::function<TensorT<T>(const TensorT<T>&)>& f, TensorT<T>& x, T eps) {
    x.set_requires_grad(true);
    x.zero_grad();
    TensorT<T> y = f(x);
    if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(y.item())))
        throw ContractError("grad_check: non-finite output at base point");
    backward(y);
    std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
    if (x.has_grad()) {
        auto g = x.grad_values();
        analytic.assign(g.begin(), g.end());
    }
    x.set_requires_grad(false);
    std::vector<double> central(analytic.size());
    NoGradGuard ng;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T keep = x.values()[static_cast<size_t>(i)];
        x.values()[static_cast<size_t>(i)] = keep + eps;
        const double f_hi = static_cast<double>(f(x).item());
        x.values()[static_cast<size_t>(i)] = keep - eps;
        const double f_lo = static_cast<double>(f(x).item());
        x.values()[static_cast<size_t>(i)] = keep;
        if (!std::isfinite(f_hi) || !std::isfinite(f_lo))
            throw ContractError("grad_check: non-finite output during finite differences");
        central[static_cast<size_t>(i)] = (f_hi - f_lo) / (2.0 * static_cast<double>(eps));
    }
    return {std::move(analytic), std::move(central)};
}

template <typename T>
double grad_check(const std::function<TensorT<T>(const TensorT<T>&)>& f, TensorT<T> x, T eps) {
    auto [analytic, central] = grad_check_collect(f, x, eps);
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(central[i]), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - central[i]) / denom);
    }
    return worst;
}

template <typename T>
double grad_check_scaled(const std::function<TensorT<T>(const TensorT<T>&)>& f, TensorT<T> x,
                         T eps) {
    auto [analytic, central] = grad_check_collect(f, x, eps);
    double scale = 1e-8, worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i)
        scale = std::max({scale, std::abs(analytic[i]), std::abs(central[i])});
    for (size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, std::abs(analytic[i] - central[i]) / scale);
    return worst;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define CIMT_INSTANTIATE_FOR(T)                                                                  \
    template struct TensorImplT<T>;                                                              \
    template class TensorT<T>;                                                                   \
    template class TapeT<T>;                                                                     \
    template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                               \
    template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                               \
    template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                               \
    template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);                               \
    template TensorT<T> scale(const TensorT<T>&, T);                                             \
    template TensorT<T> add_scalar(const TensorT<T>&, T);                                        \
    template TensorT<T> neg(const TensorT<T>&);                                                  \
    template TensorT<T> relu(const TensorT<T>&);                                                 \
    template TensorT<T> gelu(const TensorT<T>&);                                                 \
    template TensorT<T> exp(const TensorT<T>&);                                                  \
    template TensorT<T> log(const TensorT<T>&);                                                  \
    template TensorT<T> clamp(const TensorT<T>&, T, T);                                          \
    template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);                            \
    template TensorT<T> transpose2(const TensorT<T>&);                                           \
    template TensorT<T> linear(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);         \
    template TensorT<T> softmax_axis(const TensorT<T>&, int);                                    \
    template TensorT<T> layer_norm(const TensorT<T>&, int, const TensorT<T>&, const TensorT<T>&, \
                                   T);                                                           \
    template TensorT<T> softmax_xent_mean(const TensorT<T>&, const TensorT<T>&, int);            \
    template TensorT<T> conv3(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int, int);\
    template TensorT<T> pool3(const TensorT<T>&, PoolKind, const std::array<int, 3>&,            \
                              const std::array<int, 3>&);                                        \
    template TensorT<T> global_pool3(const TensorT<T>&, PoolKind);                               \
    template TensorT<T> interpolate_nearest(const TensorT<T>&, const std::array<int, 3>&);       \
    template TensorT<T> reduce_max(const TensorT<T>&, int);                                      \
    template TensorT<T> reduce_mean(const TensorT<T>&, int);                                     \
    template TensorT<T> reduce_sum(const TensorT<T>&, int);                                      \
    template TensorT<T> sum(const TensorT<T>&);                                                  \
    template TensorT<T> mean(const TensorT<T>&);                                                 \
    template TensorT<T> reshape(const TensorT<T>&, Shape);                                       \
    template TensorT<T> concat(const std::vector<TensorT<T>>&, int);                             \
    template TensorT<T> slice(const TensorT<T>&, int, int, int);                                 \
    template TensorT<T> onehot_argmax_axis(const TensorT<T>&, int);                              \
    template void backward(const TensorT<T>&);                                                   \
    template double grad_check(const std::function<TensorT<T>(const TensorT<T>&)>&, TensorT<T>,  \
                               T);                                                               \
    template double grad_check_scaled(const std::function<TensorT<T>(const TensorT<T>&)>&,       \
                                      TensorT<T>, T);

CIMT_INSTANTIATE_FOR(float)
CIMT_INSTANTIATE_FOR(double)
#undef CIMT_INSTANTIATE_FOR

}  // namespace cimt
