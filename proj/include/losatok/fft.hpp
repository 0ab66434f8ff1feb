#pragma once

#include <complex>
#include <vector>

#include "losatok/common.hpp"

namespace losatok::fftx {

// Iterative radix-2 Cooley–Tukey; n must be a power of two.
template <class T>
void fft_pow2(std::complex<T>* a, int n, bool inverse) {
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * kPi / len;
        const std::complex<T> wl(T(std::cos(ang)), T(std::sin(ang)));
        for (int i = 0; i < n; i += len) {
            std::complex<T> w(T(1), T(0));
            for (int j = 0; j < len / 2; ++j) {
                std::complex<T> u = a[i + j];
                std::complex<T> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    // no 1/n scaling here; callers scale as needed
}

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Complex DFT of arbitrary size. Powers of two go straight to radix-2;
// everything else through Bluestein's chirp-z reduction onto a padded
// power-of-two convolution.
template <class T>
class Cfft {
public:
    explicit Cfft(int n) : n_(n) {
        require(n >= 1, Errc::config, "fft: size must be >= 1");
        if (is_pow2(n_) || n_ == 1) return;
        m_ = next_pow2(2 * n_ - 1);
        chirp_.resize(n_);
        for (int k = 0; k < n_; ++k) {
            // exp(-i*pi*k^2/n); k^2 mod 2n keeps the angle argument small
            long long k2 = (1LL * k * k) % (2LL * n_);
            double ang = -kPi * double(k2) / double(n_);
            chirp_[k] = std::complex<T>(T(std::cos(ang)), T(std::sin(ang)));
        }
        bfft_.assign(m_, std::complex<T>(0, 0));
        bfft_[0] = std::conj(chirp_[0]);
        for (int k = 1; k < n_; ++k) bfft_[k] = bfft_[m_ - k] = std::conj(chirp_[k]);
        fft_pow2(bfft_.data(), m_, false);
    }

    void forward(std::complex<T>* a) const { run(a, false); }
    void inverse_unscaled(std::complex<T>* a) const { run(a, true); }
    int size() const { return n_; }

private:
    void run(std::complex<T>* a, bool inverse) const {
        if (n_ == 1) return;
        if (is_pow2(n_)) {
            fft_pow2(a, n_, inverse);
            return;
        }
        // Bluestein: X_k = conj(chirp_k) * sum_n a_n chirp_n chirp_k ... via convolution
        std::vector<std::complex<T>> x(m_, std::complex<T>(0, 0));
        for (int k = 0; k < n_; ++k) {
            std::complex<T> v = inverse ? std::conj(a[k]) : a[k];
            x[k] = v * chirp_[k];
        }
        fft_pow2(x.data(), m_, false);
        for (int i = 0; i < m_; ++i) x[i] *= bfft_[i];
        fft_pow2(x.data(), m_, true);
        const T scale = T(1) / T(m_);
        for (int k = 0; k < n_; ++k) {
            std::complex<T> v = x[k] * scale * chirp_[k];
            a[k] = inverse ? std::conj(v) : v;
        }
    }

    int n_;
    int m_ = 0;
    std::vector<std::complex<T>> chirp_;
    std::vector<std::complex<T>> bfft_;
};

// Real-input FFT plan exposing the four linear maps the autodiff engine
// needs: forward, scaled inverse, and the adjoint of each.
//
// forward:  re[k] =  sum_n x[n] cos(2*pi*k*n/N)
//           im[k] = -sum_n x[n] sin(2*pi*k*n/N),     k = 0..N/2
// inverse:  x[n]  = (1/N) * sum_{k=0}^{N-1} X[k] e^{+i 2 pi k n / N}
//           with X hermitian-extended from (re, im).
template <class T>
class Rfft {
public:
    explicit Rfft(int n) : n_(n), bins_(n / 2 + 1), plan_(n) {
        require(n >= 2 && n % 2 == 0, Errc::config, "rfft: size must be even and >= 2");
    }

    int size() const { return n_; }
    int bins() const { return bins_; }

    void forward(const T* x, T* re, T* im) const {
        scratch_.assign(n_, std::complex<T>(0, 0));
        for (int i = 0; i < n_; ++i) scratch_[i] = std::complex<T>(x[i], 0);
        plan_.forward(scratch_.data());
        for (int k = 0; k < bins_; ++k) {
            re[k] = scratch_[k].real();
            im[k] = scratch_[k].imag();
        }
    }

    void inverse(const T* re, const T* im, T* x) const {
        scratch_.assign(n_, std::complex<T>(0, 0));
        scratch_[0] = std::complex<T>(re[0], 0);
        scratch_[n_ / 2] = std::complex<T>(re[n_ / 2], 0);
        for (int k = 1; k < n_ / 2; ++k) {
            scratch_[k] = std::complex<T>(re[k], im[k]);
            scratch_[n_ - k] = std::conj(scratch_[k]);
        }
        plan_.inverse_unscaled(scratch_.data());
        const T s = T(1) / T(n_);
        for (int i = 0; i < n_; ++i) x[i] = scratch_[i].real() * s;
    }

    // x_bar[n] = sum_k (re_bar[k] cos - im_bar[k] sin): one unscaled inverse
    // transform of the half spectrum, upper bins zero.
    void adjoint_forward(const T* re_bar, const T* im_bar, T* x_bar) const {
        scratch_.assign(n_, std::complex<T>(0, 0));
        for (int k = 0; k < bins_; ++k) scratch_[k] = std::complex<T>(re_bar[k], im_bar[k]);
        plan_.inverse_unscaled(scratch_.data());
        for (int i = 0; i < n_; ++i) x_bar[i] = scratch_[i].real();
    }

    // Adjoint of `inverse`: a forward-style transform of x_bar with the
    // hermitian doubling weights folded in. im_bar at DC/Nyquist is zero by
    // structure (those bins never affect the inverse output).
    void adjoint_inverse(const T* x_bar, T* re_bar, T* im_bar) const {
        scratch_.assign(n_, std::complex<T>(0, 0));
        for (int i = 0; i < n_; ++i) scratch_[i] = std::complex<T>(x_bar[i], 0);
        plan_.forward(scratch_.data());
        const T s = T(1) / T(n_);
        for (int k = 0; k < bins_; ++k) {
            const T w = (k == 0 || k == n_ / 2) ? T(1) : T(2);
            re_bar[k] = scratch_[k].real() * w * s;
            im_bar[k] = scratch_[k].imag() * w * s;
        }
        im_bar[0] = T(0);
        im_bar[n_ / 2] = T(0);
    }

private:
    int n_;
    int bins_;
    Cfft<T> plan_;
    mutable std::vector<std::complex<T>> scratch_;
};

} // namespace losatok::fftx
