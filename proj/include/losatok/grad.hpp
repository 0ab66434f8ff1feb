#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape owns a growing list of nodes; every primitive appends one node with
// a backward closure. backward() walks the list in reverse creation order
// (which is a topological order for define-by-run graphs) and is single-shot:
// a second call on the same tape is an error.
//
// Shape rules (R = rows, C = cols):
//   add/sub/mul(a,b)            same shape -> same shape
//   scalar_mul/add_scalar(a,c)  any -> same shape
//   matmul(a[M,K], b[K,N])      -> [M,N]
//   transpose(a[R,C])           -> [C,R]
//   reshape(a, s)               numel preserved
//   add_rows/mul_rows(m[R,C], v[C])  -> [R,C]
//   sum/mean(a)                 any -> scalar [1]
//   sum_axis1(a[R,C])           -> [R]
//   norm_axis1(a[R,C])          -> [R] (row L2 norms)
//   unary maps                  any -> same shape
//   layer_norm_rows(a[R,C])     -> [R,C]
//   normalize_rows(a[R,C])      -> [R,C] (row L2 normalization, eps-stabilized)
//   slice_rows(a[R,C], r0, r1)  -> [r1-r0, C]
//   slice_cols(a[R,C], c0, c1)  -> [R, c1-c0]
//   concat_rows(a[Ra,C], b[Rb,C]) -> [Ra+Rb, C]
//   repeat_rows(a[R,C], k)      -> [k*R, C]
//   conv2d(x[C,H,W], k[O,C,kh,kw], b[O], sh, sw, ph, pw) -> [O,OH,OW]
//   conv1d(x[T,C], k[O,C,K], b[O], pad)                  -> [T,O] (stride 1)
//   conv1d_depthwise(x[T,C], k[C,K], b[C], pad)          -> [T,C]
//   stft_power(x[N], win, hop)            -> [N/hop + 1, win/2+1]
//   apply_filterbank(p[F,bins], fb)       -> [F, mel]
//   istft_synth(logmag[F,B], phase[F,B], win, hop=win/2) -> [(F-1)*hop]

#include <cmath>
#include <complex>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "losatok/common.hpp"
#include "losatok/dsp.hpp"
#include "losatok/fft.hpp"

namespace losatok::grad {

template <class T>
struct Array {
    std::vector<int> shape;
    std::vector<T> v;

    Array() = default;
    Array(std::vector<int> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {}

    static Array zeros(std::vector<int> s) {
        Array a;
        a.shape = std::move(s);
        a.v.assign(numel_of(a.shape), T(0));
        return a;
    }
    static Array full(std::vector<int> s, T val) {
        Array a = zeros(std::move(s));
        std::fill(a.v.begin(), a.v.end(), val);
        return a;
    }
    static Array scalar(T val) { return Array({1}, {val}); }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) n *= std::size_t(d);
        return n;
    }
    std::size_t numel() const { return numel_of(shape); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

template <class T>
std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <class T, class U>
Array<T> cast_array(const Array<U>& a) {
    Array<T> out;
    out.shape = a.shape;
    out.v.resize(a.v.size());
    for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = T(a.v[i]);
    return out;
}

namespace detail {
// FFT plans are reused across steps; keyed by size, one cache per thread.
template <class T>
const fftx::Rfft<T>& rfft_plan(int n) {
    thread_local std::map<int, std::unique_ptr<fftx::Rfft<T>>> cache;
    auto& slot = cache[n];
    if (!slot) slot = std::make_unique<fftx::Rfft<T>>(n);
    return *slot;
}

template <class T>
const std::vector<T>& hann_window(int n) {
    thread_local std::map<int, std::vector<T>> cache;
    auto& w = cache[n];
    if (w.empty()) {
        w.resize(std::size_t(n));
        for (int i = 0; i < n; ++i) w[std::size_t(i)] = T(0.5 - 0.5 * std::cos(2.0 * kPi * i / n));
    }
    return w;
}
} // namespace detail

template <class T>
class Tape {
public:
    struct Var {
        int i = -1;
        bool valid() const { return i >= 0; }
    };

    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;

    Var leaf(Array<T> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
        return Var{int(nodes_.size()) - 1};
    }
    Var constant(Array<T> value) { return leaf(std::move(value), false); }
    Var scalar(T v) { return constant(Array<T>::scalar(v)); }

    const Array<T>& val(Var x) const { return node(x).value; }
    T scalar_val(Var x) const {
        check(node(x).value.numel() == 1, "scalar_val", x, x);
        return node(x).value.v[0];
    }

    // Zero-filled if the loss never touched this leaf.
    const Array<T>& grad_of(Var x) {
        Node& n = node(x);
        require(n.requires_grad, Errc::state, "grad: node does not require gradients");
        if (n.grad.v.empty()) n.grad = Array<T>::zeros(n.value.shape);
        return n.grad;
    }

    // ---- elementwise ----

    Var add(Var a, Var b) { return binary("add", a, b, [](T x, T y) { return x + y; },
                                          [](T) { return T(1); }, [](T) { return T(1); }); }
    Var sub(Var a, Var b) { return binary("sub", a, b, [](T x, T y) { return x - y; },
                                          [](T) { return T(1); }, [](T) { return T(-1); }); }

    Var mul(Var a, Var b) {
        check(node(a).value.shape == node(b).value.shape, "mul", a, b);
        const auto& av = node(a).value.v;
        const auto& bv = node(b).value.v;
        Array<T> out = Array<T>::zeros(node(a).value.shape);
        for (std::size_t i = 0; i < av.size(); ++i) out.v[i] = av[i] * bv[i];
        return make(std::move(out), {a, b}, [this, a, b](Node& n) {
            const auto& g = n.grad.v;
            if (wants(a)) {
                auto& ga = grad_buf(a).v;
                const auto& bv2 = node(b).value.v;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (wants(b)) {
                auto& gb = grad_buf(b).v;
                const auto& av2 = node(a).value.v;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }

    Var scalar_mul(Var a, T c) {
        Array<T> out = node(a).value;
        for (auto& x : out.v) x *= c;
        return make(std::move(out), {a}, [this, a, c](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga[i] += n.grad.v[i] * c;
        });
    }

    Var add_scalar(Var a, T c) {
        Array<T> out = node(a).value;
        for (auto& x : out.v) x += c;
        return make(std::move(out), {a}, [this, a](Node& n) { pass_through(a, n); });
    }

    Var tanh_(Var a) { return unary("tanh", a, [](T x) { return std::tanh(x); },
                                    [](T x, T y) { (void)x; return T(1) - y * y; }); }
    Var exp_(Var a) { return unary("exp", a, [](T x) { return std::exp(x); },
                                   [](T, T y) { return y; }); }
    Var log_(Var a) { return unary("log", a, [](T x) { return std::log(x); },
                                   [](T x, T) { return T(1) / x; }); }
    Var sqrt_(Var a) { return unary("sqrt", a, [](T x) { return std::sqrt(x); },
                                    [](T, T y) { return T(0.5) / y; }); }
    Var abs_(Var a) { return unary("abs", a, [](T x) { return std::abs(x); },
                                   [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); }); }
    Var sin_(Var a) { return unary("sin", a, [](T x) { return std::sin(x); },
                                   [](T x, T) { return std::cos(x); }); }
    Var cos_(Var a) { return unary("cos", a, [](T x) { return std::cos(x); },
                                   [](T x, T) { return -std::sin(x); }); }

    Var gelu(Var a) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        return unary("gelu", a,
                     [&](T x) { return T(0.5) * x * (T(1) + T(std::erf(double(x) * inv_sqrt2))); },
                     [&](T x, T) {
                         T cdf = T(0.5) * (T(1) + T(std::erf(double(x) * inv_sqrt2)));
                         T pdf = T(inv_sqrt2pi * std::exp(-0.5 * double(x) * double(x)));
                         return cdf + x * pdf;
                     });
    }

    Var leaky_relu(Var a, T slope) {
        return unary("leaky_relu", a, [slope](T x) { return x >= 0 ? x : slope * x; },
                     [slope](T x, T) { return x >= 0 ? T(1) : slope; });
    }

    Var clamp(Var a, T lo, T hi) {
        return unary("clamp", a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
                     [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
    }

    Var stop_gradient(Var a) {
        Array<T> out = node(a).value;
        return make(std::move(out), {}, nullptr); // no parents: gradient wall
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        const auto& A = node(a).value;
        const auto& B = node(b).value;
        check(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0], "matmul", a, b);
        const int m = A.shape[0], k = A.shape[1], nn = B.shape[1];
        Array<T> out = Array<T>::zeros({m, nn});
        MMap(out.v.data(), m, nn).noalias() = CMap(A.v.data(), m, k) * CMap(B.v.data(), k, nn);
        return make(std::move(out), {a, b}, [this, a, b, m, k, nn](Node& n) {
            CMap G(n.grad.v.data(), m, nn);
            if (wants(a)) {
                MMap GA(grad_buf(a).v.data(), m, k);
                GA.noalias() += G * CMap(node(b).value.v.data(), k, nn).transpose();
            }
            if (wants(b)) {
                MMap GB(grad_buf(b).v.data(), k, nn);
                GB.noalias() += CMap(node(a).value.v.data(), m, k).transpose() * G;
            }
        });
    }

    Var transpose(Var a) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2, "transpose", a, a);
        const int r = A.shape[0], c = A.shape[1];
        Array<T> out = Array<T>::zeros({c, r});
        MMap(out.v.data(), c, r).noalias() = CMap(A.v.data(), r, c).transpose();
        return make(std::move(out), {a}, [this, a, r, c](Node& n) {
            if (!wants(a)) return;
            MMap GA(grad_buf(a).v.data(), r, c);
            GA.noalias() += CMap(n.grad.v.data(), c, r).transpose();
        });
    }

    Var reshape(Var a, std::vector<int> shape) {
        const auto& A = node(a).value;
        require(Array<T>::numel_of(shape) == A.numel(), Errc::shape,
                "reshape: numel mismatch " + shape_str<T>(A.shape) + " -> " + shape_str<T>(shape));
        Array<T> out(std::move(shape), A.v);
        return make(std::move(out), {a}, [this, a](Node& n) { pass_through(a, n); });
    }

    Var add_rows(Var m, Var v) { return rows_broadcast("add_rows", m, v, true); }
    Var mul_rows(Var m, Var v) { return rows_broadcast("mul_rows", m, v, false); }

    // ---- reductions ----

    Var sum(Var a) {
        T acc = 0;
        for (T x : node(a).value.v) acc += x;
        return make(Array<T>::scalar(acc), {a}, [this, a](Node& n) {
            if (!wants(a)) return;
            const T g = n.grad.v[0];
            for (auto& x : grad_buf(a).v) x += g;
        });
    }

    Var mean(Var a) {
        const std::size_t n_el = node(a).value.numel();
        require(n_el > 0, Errc::shape, "mean: empty tensor");
        return scalar_mul(sum(a), T(1) / T(n_el));
    }

    Var sum_axis1(Var a) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2, "sum_axis1", a, a);
        const int r = A.shape[0], c = A.shape[1];
        Array<T> out = Array<T>::zeros({r});
        for (int i = 0; i < r; ++i) {
            T acc = 0;
            for (int j = 0; j < c; ++j) acc += A.v[std::size_t(i) * c + j];
            out.v[std::size_t(i)] = acc;
        }
        return make(std::move(out), {a}, [this, a, r, c](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) ga[std::size_t(i) * c + j] += n.grad.v[std::size_t(i)];
        });
    }

    Var norm_axis1(Var a) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2, "norm_axis1", a, a);
        const int r = A.shape[0], c = A.shape[1];
        Array<T> out = Array<T>::zeros({r});
        for (int i = 0; i < r; ++i) {
            T acc = 0;
            for (int j = 0; j < c; ++j) {
                T x = A.v[std::size_t(i) * c + j];
                acc += x * x;
            }
            out.v[std::size_t(i)] = std::sqrt(acc);
        }
        auto norms = std::make_shared<std::vector<T>>(out.v);
        return make(std::move(out), {a}, [this, a, r, c, norms](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (int i = 0; i < r; ++i) {
                T d = std::max((*norms)[std::size_t(i)], T(1e-30));
                T g = n.grad.v[std::size_t(i)] / d;
                for (int j = 0; j < c; ++j)
                    ga[std::size_t(i) * c + j] += g * node(a).value.v[std::size_t(i) * c + j];
            }
        });
    }

    // ---- row-wise normalizations ----

    Var normalize_rows(Var a, T eps) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2, "normalize_rows", a, a);
        const int r = A.shape[0], c = A.shape[1];
        Array<T> out = Array<T>::zeros({r, c});
        auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(r));
        for (int i = 0; i < r; ++i) {
            T acc = 0;
            for (int j = 0; j < c; ++j) {
                T x = A.v[std::size_t(i) * c + j];
                acc += x * x;
            }
            T rn = std::sqrt(acc);
            (*norms)[std::size_t(i)] = rn;
            T s = T(1) / (rn + eps);
            for (int j = 0; j < c; ++j) out.v[std::size_t(i) * c + j] = A.v[std::size_t(i) * c + j] * s;
        }
        return make(std::move(out), {a}, [this, a, r, c, eps, norms](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            const auto& av = node(a).value.v;
            for (int i = 0; i < r; ++i) {
                const T rn = (*norms)[std::size_t(i)];
                const T s = T(1) / (rn + eps);
                T dot = 0;
                for (int j = 0; j < c; ++j) dot += av[std::size_t(i) * c + j] * n.grad.v[std::size_t(i) * c + j];
                const T coef = (rn > T(1e-30)) ? dot / (rn * (rn + eps) * (rn + eps)) : T(0);
                for (int j = 0; j < c; ++j)
                    ga[std::size_t(i) * c + j] += n.grad.v[std::size_t(i) * c + j] * s - av[std::size_t(i) * c + j] * coef;
            }
        });
    }

    Var layer_norm_rows(Var a, T eps) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2, "layer_norm_rows", a, a);
        const int r = A.shape[0], c = A.shape[1];
        Array<T> out = Array<T>::zeros({r, c});
        auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<std::size_t>(r));
        for (int i = 0; i < r; ++i) {
            T mu = 0;
            for (int j = 0; j < c; ++j) mu += A.v[std::size_t(i) * c + j];
            mu /= T(c);
            T var = 0;
            for (int j = 0; j < c; ++j) {
                T d = A.v[std::size_t(i) * c + j] - mu;
                var += d * d;
            }
            var /= T(c);
            T is = T(1) / std::sqrt(var + eps);
            (*inv_sigma)[std::size_t(i)] = is;
            for (int j = 0; j < c; ++j) out.v[std::size_t(i) * c + j] = (A.v[std::size_t(i) * c + j] - mu) * is;
        }
        auto y = std::make_shared<std::vector<T>>(out.v);
        return make(std::move(out), {a}, [this, a, r, c, inv_sigma, y](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (int i = 0; i < r; ++i) {
                T gmean = 0, gymean = 0;
                for (int j = 0; j < c; ++j) {
                    const std::size_t p = std::size_t(i) * c + j;
                    gmean += n.grad.v[p];
                    gymean += n.grad.v[p] * (*y)[p];
                }
                gmean /= T(c);
                gymean /= T(c);
                const T is = (*inv_sigma)[std::size_t(i)];
                for (int j = 0; j < c; ++j) {
                    const std::size_t p = std::size_t(i) * c + j;
                    ga[p] += is * (n.grad.v[p] - gmean - (*y)[p] * gymean);
                }
            }
        });
    }

    // ---- structural ----

    Var slice_rows(Var a, int r0, int r1) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2 && 0 <= r0 && r0 <= r1 && r1 <= A.shape[0], "slice_rows", a, a);
        const int c = A.shape[1];
        Array<T> out = Array<T>::zeros({r1 - r0, c});
        std::copy(A.v.begin() + std::size_t(r0) * c, A.v.begin() + std::size_t(r1) * c, out.v.begin());
        return make(std::move(out), {a}, [this, a, r0, c](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga[std::size_t(r0) * c + i] += n.grad.v[i];
        });
    }

    Var slice_cols(Var a, int c0, int c1) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2 && 0 <= c0 && c0 <= c1 && c1 <= A.shape[1], "slice_cols", a, a);
        const int r = A.shape[0], c = A.shape[1], w = c1 - c0;
        Array<T> out = Array<T>::zeros({r, w});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j) out.v[std::size_t(i) * w + j] = A.v[std::size_t(i) * c + c0 + j];
        return make(std::move(out), {a}, [this, a, r, c, c0, w](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j) ga[std::size_t(i) * c + c0 + j] += n.grad.v[std::size_t(i) * w + j];
        });
    }

    Var concat_rows(Var a, Var b) {
        const auto& A = node(a).value;
        const auto& B = node(b).value;
        check(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[1], "concat_rows", a, b);
        const int c = A.shape[1];
        Array<T> out = Array<T>::zeros({A.shape[0] + B.shape[0], c});
        std::copy(A.v.begin(), A.v.end(), out.v.begin());
        std::copy(B.v.begin(), B.v.end(), out.v.begin() + A.v.size());
        const std::size_t na = A.v.size();
        return make(std::move(out), {a, b}, [this, a, b, na](Node& n) {
            if (wants(a)) {
                auto& ga = grad_buf(a).v;
                for (std::size_t i = 0; i < na; ++i) ga[i] += n.grad.v[i];
            }
            if (wants(b)) {
                auto& gb = grad_buf(b).v;
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad.v[na + i];
            }
        });
    }

    Var repeat_rows(Var a, int k) {
        const auto& A = node(a).value;
        check(A.shape.size() == 2 && k >= 1, "repeat_rows", a, a);
        const int r = A.shape[0], c = A.shape[1];
        Array<T> out = Array<T>::zeros({r * k, c});
        for (int i = 0; i < r * k; ++i)
            std::copy(A.v.begin() + std::size_t(i / k) * c, A.v.begin() + std::size_t(i / k + 1) * c,
                      out.v.begin() + std::size_t(i) * c);
        return make(std::move(out), {a}, [this, a, r, c, k](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (int i = 0; i < r * k; ++i)
                for (int j = 0; j < c; ++j) ga[std::size_t(i / k) * c + j] += n.grad.v[std::size_t(i) * c + j];
        });
    }

    // ---- convolutions ----

    Var conv2d(Var x, Var k, Var bias, int sh, int sw, int ph, int pw) {
        const auto& X = node(x).value;
        const auto& K = node(k).value;
        check(X.shape.size() == 3 && K.shape.size() == 4 && X.shape[0] == K.shape[1], "conv2d", x, k);
        const int C = X.shape[0], H = X.shape[1], W = X.shape[2];
        const int O = K.shape[0], kh = K.shape[2], kw = K.shape[3];
        const int OH = (H + 2 * ph - kh) / sh + 1;
        const int OW = (W + 2 * pw - kw) / sw + 1;
        require(OH >= 1 && OW >= 1, Errc::shape, "conv2d: kernel larger than padded input");

        const int patch = C * kh * kw;
        auto cols = std::make_shared<Array<T>>(Array<T>::zeros({patch, OH * OW}));
        im2col(X, kh, kw, sh, sw, ph, pw, OH, OW, cols->v);

        Array<T> out = Array<T>::zeros({O, OH, OW});
        MMap(out.v.data(), O, OH * OW).noalias() =
            CMap(K.v.data(), O, patch) * CMap(cols->v.data(), patch, OH * OW);
        if (bias.valid()) {
            const auto& Bv = node(bias).value;
            check(Bv.shape.size() == 1 && Bv.shape[0] == O, "conv2d(bias)", bias, k);
            for (int o = 0; o < O; ++o)
                for (int p = 0; p < OH * OW; ++p) out.v[std::size_t(o) * OH * OW + p] += Bv.v[std::size_t(o)];
        }

        std::vector<Var> parents = bias.valid() ? std::vector<Var>{x, k, bias} : std::vector<Var>{x, k};
        return make(std::move(out), parents,
                    [this, x, k, bias, cols, C, H, W, O, kh, kw, sh, sw, ph, pw, OH, OW, patch](Node& n) {
                        CMap G(n.grad.v.data(), O, OH * OW);
                        if (wants(k)) {
                            MMap GK(grad_buf(k).v.data(), O, patch);
                            GK.noalias() += G * CMap(cols->v.data(), patch, OH * OW).transpose();
                        }
                        if (bias.valid() && wants(bias)) {
                            auto& gb = grad_buf(bias).v;
                            for (int o = 0; o < O; ++o)
                                for (int p = 0; p < OH * OW; ++p) gb[std::size_t(o)] += n.grad.v[std::size_t(o) * OH * OW + p];
                        }
                        if (wants(x)) {
                            Array<T> gcols = Array<T>::zeros({patch, OH * OW});
                            MMap(gcols.v.data(), patch, OH * OW).noalias() =
                                CMap(node(k).value.v.data(), O, patch).transpose() * G;
                            col2im(gcols.v, C, H, W, kh, kw, sh, sw, ph, pw, OH, OW, grad_buf(x).v);
                        }
                    });
    }

    Var conv1d(Var x, Var k, Var bias, int pad) {
        const auto& X = node(x).value;
        const auto& K = node(k).value;
        check(X.shape.size() == 2 && K.shape.size() == 3 && X.shape[1] == K.shape[1], "conv1d", x, k);
        const int Tn = X.shape[0], C = X.shape[1], O = K.shape[0], KK = K.shape[2];
        const int OT = Tn + 2 * pad - KK + 1;
        require(OT >= 1, Errc::shape, "conv1d: kernel larger than padded input");

        Array<T> out = Array<T>::zeros({OT, O});
        for (int t = 0; t < OT; ++t)
            for (int o = 0; o < O; ++o) {
                T acc = bias.valid() ? node(bias).value.v[std::size_t(o)] : T(0);
                for (int j = 0; j < KK; ++j) {
                    const int src = t - pad + j;
                    if (src < 0 || src >= Tn) continue;
                    for (int c = 0; c < C; ++c)
                        acc += X.v[std::size_t(src) * C + c] * K.v[(std::size_t(o) * C + c) * KK + j];
                }
                out.v[std::size_t(t) * O + o] = acc;
            }
        std::vector<Var> parents = bias.valid() ? std::vector<Var>{x, k, bias} : std::vector<Var>{x, k};
        return make(std::move(out), parents, [this, x, k, bias, Tn, C, O, KK, pad, OT](Node& n) {
            for (int t = 0; t < OT; ++t)
                for (int o = 0; o < O; ++o) {
                    const T g = n.grad.v[std::size_t(t) * O + o];
                    if (g == T(0)) continue;
                    if (bias.valid() && wants(bias)) grad_buf(bias).v[std::size_t(o)] += g;
                    for (int j = 0; j < KK; ++j) {
                        const int src = t - pad + j;
                        if (src < 0 || src >= Tn) continue;
                        for (int c = 0; c < C; ++c) {
                            if (wants(k))
                                grad_buf(k).v[(std::size_t(o) * C + c) * KK + j] += g * node(x).value.v[std::size_t(src) * C + c];
                            if (wants(x))
                                grad_buf(x).v[std::size_t(src) * C + c] += g * node(k).value.v[(std::size_t(o) * C + c) * KK + j];
                        }
                    }
                }
        });
    }

    Var conv1d_depthwise(Var x, Var k, Var bias, int pad) {
        const auto& X = node(x).value;
        const auto& K = node(k).value;
        check(X.shape.size() == 2 && K.shape.size() == 2 && X.shape[1] == K.shape[0], "conv1d_depthwise", x, k);
        const int Tn = X.shape[0], C = X.shape[1], KK = K.shape[1];
        const int OT = Tn + 2 * pad - KK + 1;
        require(OT >= 1, Errc::shape, "conv1d_depthwise: kernel larger than padded input");

        Array<T> out = Array<T>::zeros({OT, C});
        for (int t = 0; t < OT; ++t)
            for (int c = 0; c < C; ++c) {
                T acc = bias.valid() ? node(bias).value.v[std::size_t(c)] : T(0);
                for (int j = 0; j < KK; ++j) {
                    const int src = t - pad + j;
                    if (src >= 0 && src < Tn) acc += X.v[std::size_t(src) * C + c] * K.v[std::size_t(c) * KK + j];
                }
                out.v[std::size_t(t) * C + c] = acc;
            }
        std::vector<Var> parents = bias.valid() ? std::vector<Var>{x, k, bias} : std::vector<Var>{x, k};
        return make(std::move(out), parents, [this, x, k, bias, Tn, C, KK, pad, OT](Node& n) {
            for (int t = 0; t < OT; ++t)
                for (int c = 0; c < C; ++c) {
                    const T g = n.grad.v[std::size_t(t) * C + c];
                    if (g == T(0)) continue;
                    if (bias.valid() && wants(bias)) grad_buf(bias).v[std::size_t(c)] += g;
                    for (int j = 0; j < KK; ++j) {
                        const int src = t - pad + j;
                        if (src < 0 || src >= Tn) continue;
                        if (wants(k)) grad_buf(k).v[std::size_t(c) * KK + j] += g * node(x).value.v[std::size_t(src) * C + c];
                        if (wants(x)) grad_buf(x).v[std::size_t(src) * C + c] += g * node(k).value.v[std::size_t(c) * KK + j];
                    }
                }
        });
    }

    // ---- spectral ----

    // Center-padded (reflection) power spectrogram with a periodic Hann
    // window; mirrors dsp::stft framing so both paths share one convention.
    Var stft_power(Var x, int window, int hop) {
        const auto& X = node(x).value;
        check(X.shape.size() == 1 && X.shape[0] >= 1, "stft_power", x, x);
        require(hop >= 1 && hop <= window, Errc::config, "stft_power: need 1 <= hop <= window");
        const int N = X.shape[0];
        const int pad = window / 2;
        const int frames = N / hop + 1;
        const int bins = window / 2 + 1;
        const auto& plan = detail::rfft_plan<T>(window);
        const auto& win = detail::hann_window<T>(window);

        auto re = std::make_shared<std::vector<T>>(std::size_t(frames) * bins);
        auto im = std::make_shared<std::vector<T>>(std::size_t(frames) * bins);
        Array<T> out = Array<T>::zeros({frames, bins});
        std::vector<T> frame(static_cast<std::size_t>(window));
        for (int t = 0; t < frames; ++t) {
            for (int i = 0; i < window; ++i)
                frame[std::size_t(i)] = X.v[std::size_t(dsp::reflect_index(t * hop - pad + i, N))] * win[std::size_t(i)];
            plan.forward(frame.data(), re->data() + std::size_t(t) * bins, im->data() + std::size_t(t) * bins);
            for (int k = 0; k < bins; ++k) {
                const std::size_t p = std::size_t(t) * bins + k;
                out.v[p] = (*re)[p] * (*re)[p] + (*im)[p] * (*im)[p];
            }
        }
        return make(std::move(out), {x}, [this, x, window, hop, N, frames, bins, pad, re, im](Node& n) {
            if (!wants(x)) return;
            const auto& plan2 = detail::rfft_plan<T>(window);
            const auto& win2 = detail::hann_window<T>(window);
            auto& gx = grad_buf(x).v;
            std::vector<T> gre(static_cast<std::size_t>(bins)), gim(static_cast<std::size_t>(bins)), gframe(static_cast<std::size_t>(window));
            for (int t = 0; t < frames; ++t) {
                for (int k = 0; k < bins; ++k) {
                    const std::size_t p = std::size_t(t) * bins + k;
                    gre[std::size_t(k)] = T(2) * (*re)[p] * n.grad.v[p];
                    gim[std::size_t(k)] = T(2) * (*im)[p] * n.grad.v[p];
                }
                plan2.adjoint_forward(gre.data(), gim.data(), gframe.data());
                for (int i = 0; i < window; ++i)
                    gx[std::size_t(dsp::reflect_index(t * hop - pad + i, N))] += gframe[std::size_t(i)] * win2[std::size_t(i)];
            }
        });
    }

    Var apply_filterbank(Var p, const dsp::SparseFilterbank& fb) {
        const auto& P = node(p).value;
        check(P.shape.size() == 2, "apply_filterbank", p, p);
        const int frames = P.shape[0], bins = P.shape[1], mel = int(fb.size());
        Array<T> out = Array<T>::zeros({frames, mel});
        for (int t = 0; t < frames; ++t)
            for (int m = 0; m < mel; ++m) {
                T acc = 0;
                for (const auto& [k, w] : fb[std::size_t(m)]) acc += T(w) * P.v[std::size_t(t) * bins + k];
                out.v[std::size_t(t) * mel + m] = acc;
            }
        return make(std::move(out), {p}, [this, p, &fb, frames, bins, mel](Node& n) {
            if (!wants(p)) return;
            auto& gp = grad_buf(p).v;
            for (int t = 0; t < frames; ++t)
                for (int m = 0; m < mel; ++m) {
                    const T g = n.grad.v[std::size_t(t) * mel + m];
                    if (g == T(0)) continue;
                    for (const auto& [k, w] : fb[std::size_t(m)]) gp[std::size_t(t) * bins + k] += T(w) * g;
                }
        });
    }

    // Synthesis ISTFT head: spectra (log-magnitude, phase) per frame at
    // hop = window/2 -> windowed overlap-add. Periodic Hann at 50% overlap
    // sums to exactly 1, so no normalization envelope is needed. Half a
    // window is trimmed at each edge; output length is (frames-1)*hop.
    Var istft_synth(Var logmag, Var phase, int window, int hop) {
        const auto& LM = node(logmag).value;
        const auto& PH = node(phase).value;
        check(LM.shape == PH.shape && LM.shape.size() == 2, "istft_synth", logmag, phase);
        require(hop * 2 == window, Errc::config, "istft_synth: requires hop == window/2");
        const int frames = LM.shape[0], bins = LM.shape[1];
        require(bins == window / 2 + 1, Errc::shape, "istft_synth: bins must be window/2+1");
        require(frames >= 2, Errc::shape, "istft_synth: need at least 2 frames");
        const auto& plan = detail::rfft_plan<T>(window);
        const auto& win = detail::hann_window<T>(window);
        const T max_logmag = T(std::log(100.0)); // magnitude clip, keeps early training finite

        const int total = (frames - 1) * hop + window;
        const int out_n = (frames - 1) * hop;
        auto mag = std::make_shared<std::vector<T>>(std::size_t(frames) * bins);
        auto cph = std::make_shared<std::vector<T>>(std::size_t(frames) * bins);
        auto sph = std::make_shared<std::vector<T>>(std::size_t(frames) * bins);

        std::vector<T> acc(std::size_t(total), T(0));
        std::vector<T> re(static_cast<std::size_t>(bins)), im(static_cast<std::size_t>(bins)), time(static_cast<std::size_t>(window));
        for (int t = 0; t < frames; ++t) {
            for (int k = 0; k < bins; ++k) {
                const std::size_t p = std::size_t(t) * bins + k;
                const T m = std::exp(std::min(LM.v[p], max_logmag));
                (*mag)[p] = m;
                (*cph)[p] = std::cos(PH.v[p]);
                (*sph)[p] = std::sin(PH.v[p]);
                re[std::size_t(k)] = m * (*cph)[p];
                im[std::size_t(k)] = m * (*sph)[p];
            }
            plan.inverse(re.data(), im.data(), time.data());
            for (int i = 0; i < window; ++i) acc[std::size_t(t * hop + i)] += time[std::size_t(i)] * win[std::size_t(i)];
        }
        Array<T> out = Array<T>::zeros({out_n});
        std::copy(acc.begin() + hop, acc.begin() + hop + out_n, out.v.begin());

        return make(std::move(out), {logmag, phase},
                    [this, logmag, phase, window, hop, frames, bins, out_n, mag, cph, sph, max_logmag](Node& n) {
                        const auto& plan2 = detail::rfft_plan<T>(window);
                        const auto& win2 = detail::hann_window<T>(window);
                        const int total2 = (frames - 1) * hop + window;
                        std::vector<T> gacc(std::size_t(total2), T(0));
                        std::copy(n.grad.v.begin(), n.grad.v.end(), gacc.begin() + hop);
                        std::vector<T> gtime(static_cast<std::size_t>(window));
                        std::vector<T> gre(static_cast<std::size_t>(bins));
                        std::vector<T> gim(static_cast<std::size_t>(bins));
                        const auto& LM2 = node(logmag).value;
                        for (int t = 0; t < frames; ++t) {
                            for (int i = 0; i < window; ++i)
                                gtime[std::size_t(i)] = gacc[std::size_t(t * hop + i)] * win2[std::size_t(i)];
                            plan2.adjoint_inverse(gtime.data(), gre.data(), gim.data());
                            for (int k = 0; k < bins; ++k) {
                                const std::size_t p = std::size_t(t) * bins + k;
                                const T gm = gre[std::size_t(k)] * (*cph)[p] + gim[std::size_t(k)] * (*sph)[p];
                                if (wants(logmag)) {
                                    const T dm = (LM2.v[p] < max_logmag) ? (*mag)[p] : T(0);
                                    grad_buf(logmag).v[p] += gm * dm;
                                }
                                if (wants(phase))
                                    grad_buf(phase).v[p] += (*mag)[p] * (-gre[std::size_t(k)] * (*sph)[p] + gim[std::size_t(k)] * (*cph)[p]);
                            }
                        }
                    });
    }

    // ---- backward ----

    void backward(Var loss) {
        require(!consumed_, Errc::state, "backward: tape exhausted (already run)");
        require(node(loss).value.numel() == 1, Errc::state, "backward: loss must be scalar");
        consumed_ = true;
        node(loss).grad = Array<T>::scalar(T(1));
        for (int i = loss.i; i >= 0; --i) {
            Node& n = nodes_[std::size_t(i)];
            if (n.back && !n.grad.v.empty()) n.back(n);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Array<T> value;
        Array<T> grad;
        bool requires_grad = false;
        std::function<void(Node&)> back;
    };

    Node& node(Var x) { return nodes_.at(std::size_t(x.i)); }
    const Node& node(Var x) const { return nodes_.at(std::size_t(x.i)); }

    bool wants(Var x) const { return node(x).requires_grad; }

    Array<T>& grad_buf(Var x) {
        Node& n = node(x);
        if (n.grad.v.empty()) n.grad = Array<T>::zeros(n.value.shape);
        return n.grad;
    }

    void pass_through(Var a, Node& n) {
        if (!wants(a)) return;
        auto& ga = grad_buf(a).v;
        for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga[i] += n.grad.v[i];
    }

    void check(bool ok, const char* op, Var a, Var b) const {
        if (ok) return;
        fail(Errc::shape, std::string(op) + ": shape mismatch " + shape_str<T>(node(a).value.shape) +
                              " vs " + shape_str<T>(node(b).value.shape));
    }

    Var make(Array<T> value, const std::vector<Var>& parents, std::function<void(Node&)> back) {
        bool req = false;
        for (Var p : parents) req = req || node(p).requires_grad;
        nodes_.push_back(Node{std::move(value), {}, req, req ? std::move(back) : nullptr});
        return Var{int(nodes_.size()) - 1};
    }

    template <class F, class DA, class DB>
    Var binary(const char* op, Var a, Var b, F f, DA da, DB db) {
        check(node(a).value.shape == node(b).value.shape, op, a, b);
        const auto& av = node(a).value.v;
        const auto& bv = node(b).value.v;
        Array<T> out = Array<T>::zeros(node(a).value.shape);
        for (std::size_t i = 0; i < av.size(); ++i) out.v[i] = f(av[i], bv[i]);
        return make(std::move(out), {a, b}, [this, a, b, da, db](Node& n) {
            if (wants(a)) {
                auto& ga = grad_buf(a).v;
                for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga[i] += n.grad.v[i] * da(node(a).value.v[i]);
            }
            if (wants(b)) {
                auto& gb = grad_buf(b).v;
                for (std::size_t i = 0; i < n.grad.v.size(); ++i) gb[i] += n.grad.v[i] * db(node(b).value.v[i]);
            }
        });
    }

    template <class F, class D>
    Var unary(const char* op, Var a, F f, D dfdx) {
        (void)op;
        const auto& av = node(a).value.v;
        Array<T> out = Array<T>::zeros(node(a).value.shape);
        for (std::size_t i = 0; i < av.size(); ++i) out.v[i] = f(av[i]);
        auto y = std::make_shared<std::vector<T>>(out.v);
        return make(std::move(out), {a}, [this, a, dfdx, y](Node& n) {
            if (!wants(a)) return;
            auto& ga = grad_buf(a).v;
            for (std::size_t i = 0; i < n.grad.v.size(); ++i)
                ga[i] += n.grad.v[i] * dfdx(node(a).value.v[i], (*y)[i]);
        });
    }

    Var rows_broadcast(const char* op, Var m, Var v, bool is_add) {
        const auto& M = node(m).value;
        const auto& V = node(v).value;
        check(M.shape.size() == 2 && V.shape.size() == 1 && V.shape[0] == M.shape[1], op, m, v);
        const int r = M.shape[0], c = M.shape[1];
        Array<T> out = Array<T>::zeros({r, c});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                const std::size_t p = std::size_t(i) * c + j;
                out.v[p] = is_add ? M.v[p] + V.v[std::size_t(j)] : M.v[p] * V.v[std::size_t(j)];
            }
        return make(std::move(out), {m, v}, [this, m, v, r, c, is_add](Node& n) {
            if (wants(m)) {
                auto& gm = grad_buf(m).v;
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) {
                        const std::size_t p = std::size_t(i) * c + j;
                        gm[p] += is_add ? n.grad.v[p] : n.grad.v[p] * node(v).value.v[std::size_t(j)];
                    }
            }
            if (wants(v)) {
                auto& gv = grad_buf(v).v;
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) {
                        const std::size_t p = std::size_t(i) * c + j;
                        gv[std::size_t(j)] += is_add ? n.grad.v[p] : n.grad.v[p] * node(m).value.v[p];
                    }
            }
        });
    }

    static void im2col(const Array<T>& X, int kh, int kw, int sh, int sw, int ph, int pw, int OH,
                       int OW, std::vector<T>& cols) {
        const int C = X.shape[0], H = X.shape[1], W = X.shape[2];
        std::size_t idx = 0;
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j)
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow, ++idx) {
                            const int y = oh * sh - ph + i;
                            const int x = ow * sw - pw + j;
                            cols[idx] = (y >= 0 && y < H && x >= 0 && x < W)
                                            ? X.v[(std::size_t(c) * H + y) * W + x]
                                            : T(0);
                        }
    }

    static void col2im(const std::vector<T>& cols, int C, int H, int W, int kh, int kw, int sh,
                       int sw, int ph, int pw, int OH, int OW, std::vector<T>& gx) {
        std::size_t idx = 0;
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j)
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow, ++idx) {
                            const int y = oh * sh - ph + i;
                            const int x = ow * sw - pw + j;
                            if (y >= 0 && y < H && x >= 0 && x < W)
                                gx[(std::size_t(c) * H + y) * W + x] += cols[idx];
                        }
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

template <class T>
using Var = typename Tape<T>::Var;

// RMS of a residual tensor: sqrt(mean(r^2) + delta). This is the one matrix
// norm used by every feature/Gram alignment loss; the tiny delta keeps the
// gradient finite when the residual hits zero exactly.
template <class T>
typename Tape<T>::Var rms_norm(Tape<T>& tape, typename Tape<T>::Var residual, T delta = T(1e-16)) {
    auto sq = tape.mul(residual, residual);
    return tape.sqrt_(tape.add_scalar(tape.mean(sq), delta));
}

// Central finite-difference verification of reverse-mode gradients.
// Returns max over coordinates of |analytic - fd| / (|analytic| + |fd| + 1e-12).
// Step per coordinate: h_scale * (1 + |x_i|).
template <class T, class F>
double grad_check(F&& f, const Array<T>& point, double h_scale = 1e-5) {
    Tape<T> tape;
    auto x = tape.leaf(point, true);
    auto loss = f(tape, x);
    tape.backward(loss);
    const Array<T> analytic = tape.grad_of(x);

    double worst = 0.0;
    Array<T> probe = point;
    for (std::size_t i = 0; i < point.v.size(); ++i) {
        const double h = h_scale * (1.0 + std::abs(double(point.v[i])));
        probe.v[i] = point.v[i] + T(h);
        Tape<T> tp;
        double fp = double(tp.scalar_val(f(tp, tp.leaf(probe, false))));
        probe.v[i] = point.v[i] - T(h);
        Tape<T> tm;
        double fm = double(tm.scalar_val(f(tm, tm.leaf(probe, false))));
        probe.v[i] = point.v[i];
        const double fd = (fp - fm) / (2.0 * h);
        const double an = double(analytic.v[i]);
        const double rel = std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace losatok::grad
