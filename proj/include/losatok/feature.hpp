#pragma once

#include <vector>

#include "losatok/common.hpp"

namespace losatok {

// Frame-indexed feature matrix (frames x dim, row-major) with a frame rate.
template <class T = double>
struct FeatureSeq {
    int frames = 0;
    int dim = 0;
    double frame_rate = 0.0; // Hz
    std::vector<T> values;   // frames * dim

    static FeatureSeq zeros(int frames, int dim, double rate) {
        FeatureSeq f;
        f.frames = frames;
        f.dim = dim;
        f.frame_rate = rate;
        f.values.assign(std::size_t(frames) * std::size_t(dim), T(0));
        return f;
    }

    T& at(int t, int d) { return values[std::size_t(t) * dim + d]; }
    T at(int t, int d) const { return values[std::size_t(t) * dim + d]; }
    const T* row(int t) const { return values.data() + std::size_t(t) * dim; }
};

using FeatureSequence = FeatureSeq<double>;

} // namespace losatok
