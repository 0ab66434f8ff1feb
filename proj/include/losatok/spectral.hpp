#pragma once

#include <map>
#include <vector>

#include "losatok/common.hpp"
#include "losatok/feature.hpp"

namespace losatok::spectral {

struct SpectrumStats {
    std::vector<double> eigenvalues;   // sorted descending, non-negative
    std::vector<double> probabilities; // eigenvalues / sum
    double effective_rank = 0.0;
    std::map<double, int> k_alpha;     // variance fraction -> component count
};

struct PcaProjection {
    std::vector<double> mean;       // D
    std::vector<double> components; // retained x D, orthonormal rows
    int retained = 0;
    int dim = 0;
};

// Streaming covariance accumulator: files can be accumulated independently
// and merged in a deterministic order.
class CovarianceAccumulator {
public:
    explicit CovarianceAccumulator(int dim);
    void add(const FeatureSequence& frames);
    void merge(const CovarianceAccumulator& other);
    // Unbiased covariance over all pooled frames (divide by N-1). N >= 2.
    std::vector<double> covariance() const;
    std::vector<double> mean() const;
    long long count() const { return count_; }
    int dim() const { return dim_; }

private:
    int dim_;
    long long count_ = 0;
    std::vector<double> sum_;   // D
    std::vector<double> outer_; // D x D, sum of x x^T
};

std::vector<double> covariance(const std::vector<FeatureSequence>& set);

// Cyclic Jacobi eigendecomposition for symmetric matrices.
// Sweeps until off-diagonal Frobenius norm < 1e-10 * ||A||_F, capped at
// kJacobiMaxSweeps. Eigenvalues sorted descending; eigenvectors[i*D..] is the
// row eigenvector for eigenvalues[i]. Tiny negative eigenvalues (above
// -1e-8 * lambda_max) clamp to zero; anything lower is rejected.
constexpr int kJacobiMaxSweeps = 100;
struct EigResult {
    std::vector<double> eigenvalues;
    std::vector<double> eigenvectors; // D x D, rows
};
EigResult eig_sym(const std::vector<double>& matrix, int dim);

// exp(-sum p_i log p_i) with p_i = lambda_i / sum(lambda).
double effective_rank(const std::vector<double>& eigenvalues);

// Smallest k with cumulative eigenvalue fraction >= alpha; 0 < alpha <= 1.
int variance_components(const std::vector<double>& eigenvalues, double alpha);

SpectrumStats analyze_spectrum(const std::vector<double>& cov, int dim,
                               const std::vector<double>& alphas);

// Average every `group` consecutive channels; D must be divisible by group.
FeatureSequence channel_merge(const FeatureSequence& frames, int group);

// Frame cap for PCA fitting; frames beyond the cap are reservoir-sampled.
constexpr long long kPcaFrameCap = 1000000;

PcaProjection pca_fit(const std::vector<FeatureSequence>& set, int retained,
                      std::uint64_t seed = 0, long long frame_cap = kPcaFrameCap);
FeatureSequence pca_project(const PcaProjection& proj, const FeatureSequence& frames);

} // namespace losatok::spectral
