#include "losatok/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace losatok::spectral {

// ---------------------------------------------------------------------------
// Covariance
// ---------------------------------------------------------------------------

CovarianceAccumulator::CovarianceAccumulator(int dim) : dim_(dim) {
    require(dim >= 1, Errc::config, "covariance: dim must be >= 1");
    sum_.assign(std::size_t(dim), 0.0);
    outer_.assign(std::size_t(dim) * dim, 0.0);
}

void CovarianceAccumulator::add(const FeatureSequence& frames) {
    require(frames.dim == dim_, Errc::shape, "covariance: feature dim mismatch");
    for (int t = 0; t < frames.frames; ++t) {
        const double* x = frames.row(t);
        for (int i = 0; i < dim_; ++i) {
            sum_[std::size_t(i)] += x[i];
            double* row = outer_.data() + std::size_t(i) * dim_;
            for (int j = i; j < dim_; ++j) row[j] += x[i] * x[j];
        }
    }
    count_ += frames.frames;
}

void CovarianceAccumulator::merge(const CovarianceAccumulator& other) {
    require(other.dim_ == dim_, Errc::shape, "covariance: merge dim mismatch");
    count_ += other.count_;
    for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += other.sum_[i];
    for (std::size_t i = 0; i < outer_.size(); ++i) outer_[i] += other.outer_[i];
}

std::vector<double> CovarianceAccumulator::mean() const {
    require(count_ >= 1, Errc::state, "covariance: no frames accumulated");
    std::vector<double> m(sum_);
    for (auto& x : m) x /= double(count_);
    return m;
}

std::vector<double> CovarianceAccumulator::covariance() const {
    require(count_ >= 2, Errc::state, "covariance: need at least 2 frames");
    const std::vector<double> m = mean();
    std::vector<double> c(std::size_t(dim_) * dim_, 0.0);
    const double n = double(count_);
    for (int i = 0; i < dim_; ++i)
        for (int j = i; j < dim_; ++j) {
            const double v = (outer_[std::size_t(i) * dim_ + j] - n * m[std::size_t(i)] * m[std::size_t(j)]) / (n - 1.0);
            c[std::size_t(i) * dim_ + j] = v;
            c[std::size_t(j) * dim_ + i] = v;
        }
    return c;
}

std::vector<double> covariance(const std::vector<FeatureSequence>& set) {
    require(!set.empty(), Errc::state, "covariance: empty set");
    CovarianceAccumulator acc(set.front().dim);
    for (const auto& f : set) acc.add(f);
    return acc.covariance();
}

// ---------------------------------------------------------------------------
// Cyclic Jacobi eigendecomposition
// ---------------------------------------------------------------------------

EigResult eig_sym(const std::vector<double>& matrix, int dim) {
    require(int(matrix.size()) == dim * dim, Errc::shape, "eig_sym: matrix size mismatch");
    double scale = 0.0;
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) {
            scale = std::max(scale, std::abs(matrix[std::size_t(i) * dim + j]));
            require(std::abs(matrix[std::size_t(i) * dim + j] - matrix[std::size_t(j) * dim + i]) <=
                        1e-8 * std::max(1.0, scale),
                    Errc::format, "eig_sym: matrix is not symmetric");
        }

    std::vector<double> a(matrix);
    std::vector<double> q(std::size_t(dim) * dim, 0.0);
    for (int i = 0; i < dim; ++i) q[std::size_t(i) * dim + i] = 1.0;

    double norm_a = 0.0;
    for (double x : a) norm_a += x * x;
    norm_a = std::sqrt(norm_a);
    const double tol = 1e-10 * std::max(norm_a, 1e-300);

    auto off_norm = [&]() {
        double s = 0.0;
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j)
                if (i != j) s += a[std::size_t(i) * dim + j] * a[std::size_t(i) * dim + j];
        return std::sqrt(s);
    };

    int sweep = 0;
    while (off_norm() > tol) {
        require(sweep++ < kJacobiMaxSweeps, Errc::numeric, "eig_sym: no convergence in 100 sweeps");
        for (int p = 0; p < dim - 1; ++p)
            for (int r = p + 1; r < dim; ++r) {
                const double apr = a[std::size_t(p) * dim + r];
                if (std::abs(apr) <= 1e-300) continue;
                const double app = a[std::size_t(p) * dim + p];
                const double arr = a[std::size_t(r) * dim + r];
                const double theta = (arr - app) / (2.0 * apr);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < dim; ++k) {
                    const double akp = a[std::size_t(k) * dim + p];
                    const double akr = a[std::size_t(k) * dim + r];
                    a[std::size_t(k) * dim + p] = c * akp - s * akr;
                    a[std::size_t(k) * dim + r] = s * akp + c * akr;
                }
                for (int k = 0; k < dim; ++k) {
                    const double apk = a[std::size_t(p) * dim + k];
                    const double ark = a[std::size_t(r) * dim + k];
                    a[std::size_t(p) * dim + k] = c * apk - s * ark;
                    a[std::size_t(r) * dim + k] = s * apk + c * ark;
                }
                for (int k = 0; k < dim; ++k) {
                    const double qpk = q[std::size_t(p) * dim + k];
                    const double qrk = q[std::size_t(r) * dim + k];
                    q[std::size_t(p) * dim + k] = c * qpk - s * qrk;
                    q[std::size_t(r) * dim + k] = s * qpk + c * qrk;
                }
            }
    }

    std::vector<int> order(static_cast<std::size_t>(dim));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
        return a[std::size_t(i) * dim + i] > a[std::size_t(j) * dim + j];
    });

    EigResult out;
    out.eigenvalues.resize(std::size_t(dim));
    out.eigenvectors.resize(std::size_t(dim) * dim);
    double lmax = 0.0;
    for (int i = 0; i < dim; ++i) lmax = std::max(lmax, a[std::size_t(order[std::size_t(i)]) * dim + order[std::size_t(i)]]);
    for (int i = 0; i < dim; ++i) {
        double lambda = a[std::size_t(order[std::size_t(i)]) * dim + order[std::size_t(i)]];
        require(lambda >= -1e-8 * std::max(lmax, 1.0), Errc::numeric,
                "eig_sym: significantly negative eigenvalue (matrix not PSD)");
        out.eigenvalues[std::size_t(i)] = std::max(lambda, 0.0);
        for (int k = 0; k < dim; ++k)
            out.eigenvectors[std::size_t(i) * dim + k] = q[std::size_t(order[std::size_t(i)]) * dim + k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spectrum statistics
// ---------------------------------------------------------------------------

double effective_rank(const std::vector<double>& eigenvalues) {
    double total = 0.0;
    for (double l : eigenvalues) {
        require(l >= 0.0, Errc::format, "effective_rank: negative eigenvalue");
        total += l;
    }
    require(total > 0.0, Errc::format, "effective_rank: all-zero spectrum");
    double entropy = 0.0;
    for (double l : eigenvalues) {
        const double p = l / total;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

int variance_components(const std::vector<double>& eigenvalues, double alpha) {
    require(alpha > 0.0 && alpha <= 1.0, Errc::config, "variance_components: need 0 < alpha <= 1");
    double total = 0.0;
    for (double l : eigenvalues) total += l;
    double acc = 0.0;
    for (std::size_t k = 0; k < eigenvalues.size(); ++k) {
        acc += eigenvalues[k];
        if (acc >= alpha * total) return int(k) + 1;
    }
    return int(eigenvalues.size());
}

SpectrumStats analyze_spectrum(const std::vector<double>& cov, int dim,
                               const std::vector<double>& alphas) {
    SpectrumStats stats;
    stats.eigenvalues = eig_sym(cov, dim).eigenvalues;
    double total = 0.0;
    for (double l : stats.eigenvalues) total += l;
    stats.probabilities.resize(stats.eigenvalues.size());
    for (std::size_t i = 0; i < stats.eigenvalues.size(); ++i)
        stats.probabilities[i] = total > 0 ? stats.eigenvalues[i] / total : 0.0;
    stats.effective_rank = effective_rank(stats.eigenvalues);
    for (double a : alphas) stats.k_alpha[a] = variance_components(stats.eigenvalues, a);
    return stats;
}

// ---------------------------------------------------------------------------
// Training-free reductions
// ---------------------------------------------------------------------------

FeatureSequence channel_merge(const FeatureSequence& frames, int group) {
    require(group >= 1 && frames.dim % group == 0, Errc::shape,
            "channel_merge: dim not divisible by group");
    FeatureSequence out = FeatureSequence::zeros(frames.frames, frames.dim / group, frames.frame_rate);
    for (int t = 0; t < frames.frames; ++t)
        for (int j = 0; j < out.dim; ++j) {
            double acc = 0.0;
            for (int g = 0; g < group; ++g) acc += frames.at(t, j * group + g);
            out.at(t, j) = acc / group;
        }
    return out;
}

PcaProjection pca_fit(const std::vector<FeatureSequence>& set, int retained, std::uint64_t seed,
                      long long frame_cap) {
    require(!set.empty(), Errc::state, "pca_fit: empty set");
    const int dim = set.front().dim;
    require(retained >= 1 && retained <= dim, Errc::config, "pca_fit: retained must be in [1, D]");

    // Reservoir-sample up to frame_cap frames for bounded memory.
    Rng rng(mix_key(seed, 0x9ca5));
    std::vector<double> pool;
    pool.reserve(std::size_t(std::min<long long>(frame_cap, 4096)) * std::size_t(dim));
    long long seen = 0;
    for (const auto& f : set) {
        require(f.dim == dim, Errc::shape, "pca_fit: feature dim mismatch");
        for (int t = 0; t < f.frames; ++t) {
            ++seen;
            if (seen <= frame_cap) {
                pool.insert(pool.end(), f.row(t), f.row(t) + dim);
            } else {
                const long long j = rng.uniform_int(0, seen - 1);
                if (j < frame_cap)
                    std::copy(f.row(t), f.row(t) + dim, pool.begin() + std::size_t(j) * dim);
            }
        }
    }
    const long long n = std::min(seen, frame_cap);
    require(n > retained, Errc::state, "pca_fit: need more frames than retained components");

    CovarianceAccumulator acc(dim);
    FeatureSequence pooled;
    pooled.frames = int(n);
    pooled.dim = dim;
    pooled.values = std::move(pool);
    acc.add(pooled);

    const EigResult eig = eig_sym(acc.covariance(), dim);
    PcaProjection proj;
    proj.dim = dim;
    proj.retained = retained;
    proj.mean = acc.mean();
    proj.components.assign(eig.eigenvectors.begin(),
                           eig.eigenvectors.begin() + std::size_t(retained) * dim);
    return proj;
}

FeatureSequence pca_project(const PcaProjection& proj, const FeatureSequence& frames) {
    require(frames.dim == proj.dim, Errc::shape, "pca_project: feature dim mismatch");
    FeatureSequence out = FeatureSequence::zeros(frames.frames, proj.retained, frames.frame_rate);
    std::vector<double> centered(static_cast<std::size_t>(proj.dim));
    for (int t = 0; t < frames.frames; ++t) {
        for (int i = 0; i < proj.dim; ++i) centered[std::size_t(i)] = frames.at(t, i) - proj.mean[std::size_t(i)];
        for (int r = 0; r < proj.retained; ++r) {
            double acc = 0.0;
            const double* row = proj.components.data() + std::size_t(r) * proj.dim;
            for (int i = 0; i < proj.dim; ++i) acc += row[i] * centered[std::size_t(i)];
            out.at(t, r) = acc;
        }
    }
    return out;
}

} // namespace losatok::spectral
