#pragma once

// Semantic bottleneck: a 2-layer MLP compressor and restorer trained with a
// frame-normalized reconstruction loss plus a Gram-matrix time-relation loss
// against frozen high-dimensional teacher features.

#include <cmath>
#include <string>
#include <vector>

#include "losatok/common.hpp"
#include "losatok/feature.hpp"
#include "losatok/grad.hpp"
#include "losatok/optim.hpp"

namespace losatok::sembo {

constexpr double kNormEps = 1e-8; // frame-normalization stabilizer

struct SemboConfig {
    int d_high = 64;
    int d_low = 16;
    int hidden = 64; // = d_high unless overridden
    double lambda_recon = 1000.0;
    long long steps = 2000;
    int batch = 8;
    int crop_frames = 32;
    double beta1 = 0.8;
    double beta2 = 0.99;
    double weight_decay = 0.01;
    optim::LrSchedule lr{1e-4, 1e-5, 1000, 2000};
};

template <class T>
struct SemboModel {
    int d_high = 0;
    int d_low = 0;
    int hidden = 0;
    optim::ParamSet<T> params; // c.w1 c.b1 c.w2 c.b2 r.w1 r.b1 r.w2 r.b2

    static SemboModel init(int d_high, int d_low, int hidden, Rng& rng) {
        require(d_low < d_high, Errc::config, "sembo: d_low must be < d_high");
        SemboModel m;
        m.d_high = d_high;
        m.d_low = d_low;
        m.hidden = hidden;
        m.params.add("c.w1", optim::kaiming_uniform<T>({d_high, hidden}, d_high, rng, 0.5));
        m.params.add("c.b1", grad::Array<T>::zeros({hidden}));
        m.params.add("c.w2", optim::kaiming_uniform<T>({hidden, d_low}, hidden, rng, 0.5));
        m.params.add("c.b2", grad::Array<T>::zeros({d_low}));
        m.params.add("r.w1", optim::kaiming_uniform<T>({d_low, hidden}, d_low, rng, 0.5));
        m.params.add("r.b1", grad::Array<T>::zeros({hidden}));
        m.params.add("r.w2", optim::kaiming_uniform<T>({hidden, d_high}, hidden, rng, 0.5));
        m.params.add("r.b2", grad::Array<T>::zeros({d_high}));
        return m;
    }
};

// Tape handles for one insertion of the parameters.
template <class T>
struct SemboVars {
    typename grad::Tape<T>::Var c_w1, c_b1, c_w2, c_b2, r_w1, r_b1, r_w2, r_b2;
};

template <class T>
SemboVars<T> insert_params(grad::Tape<T>& tape, const SemboModel<T>& m, bool requires_grad,
                           std::vector<typename grad::Tape<T>::Var>* order = nullptr) {
    SemboVars<T> v;
    auto put = [&](const char* name) {
        auto var = tape.leaf(m.params.at(name), requires_grad);
        if (order) order->push_back(var);
        return var;
    };
    v.c_w1 = put("c.w1");
    v.c_b1 = put("c.b1");
    v.c_w2 = put("c.w2");
    v.c_b2 = put("c.b2");
    v.r_w1 = put("r.w1");
    v.r_b1 = put("r.b1");
    v.r_w2 = put("r.w2");
    v.r_b2 = put("r.b2");
    return v;
}

template <class T>
typename grad::Tape<T>::Var compress_graph(grad::Tape<T>& tape, const SemboVars<T>& v,
                                           typename grad::Tape<T>::Var z_high) {
    auto h = tape.tanh_(tape.add_rows(tape.matmul(z_high, v.c_w1), v.c_b1));
    return tape.add_rows(tape.matmul(h, v.c_w2), v.c_b2);
}

template <class T>
typename grad::Tape<T>::Var restore_graph(grad::Tape<T>& tape, const SemboVars<T>& v,
                                          typename grad::Tape<T>::Var z_low) {
    auto h = tape.tanh_(tape.add_rows(tape.matmul(z_low, v.r_w1), v.r_b1));
    return tape.add_rows(tape.matmul(h, v.r_w2), v.r_b2);
}

namespace detail {
template <class T>
grad::Array<T> to_array(const FeatureSeq<T>& f) {
    grad::Array<T> a;
    a.shape = {f.frames, f.dim};
    a.v = f.values;
    return a;
}
template <class T>
FeatureSeq<T> to_features(const grad::Array<T>& a, double frame_rate) {
    FeatureSeq<T> f;
    f.frames = a.shape.at(0);
    f.dim = a.shape.size() > 1 ? a.shape.at(1) : 1;
    f.frame_rate = frame_rate;
    f.values = a.v;
    return f;
}
} // namespace detail

// Frozen (inference) application; frame-wise, frame count preserved.
template <class T>
FeatureSeq<T> compress(const SemboModel<T>& m, const FeatureSeq<T>& z_high) {
    require(z_high.dim == m.d_high, Errc::shape,
            "sembo compress: feature dim " + std::to_string(z_high.dim) + " != d_high " +
                std::to_string(m.d_high));
    grad::Tape<T> tape;
    auto vars = insert_params(tape, m, false);
    auto out = compress_graph(tape, vars, tape.constant(detail::to_array(z_high)));
    return detail::to_features(tape.val(out), z_high.frame_rate);
}

template <class T>
FeatureSeq<T> restore(const SemboModel<T>& m, const FeatureSeq<T>& z_low) {
    require(z_low.dim == m.d_low, Errc::shape,
            "sembo restore: feature dim " + std::to_string(z_low.dim) + " != d_low " +
                std::to_string(m.d_low));
    grad::Tape<T> tape;
    auto vars = insert_params(tape, m, false);
    auto out = restore_graph(tape, vars, tape.constant(detail::to_array(z_low)));
    return detail::to_features(tape.val(out), z_low.frame_rate);
}

// ||norm(z_hat) - sg(norm(z_target))||, RMS over the T x D residual; the
// target side never receives gradients.
template <class T>
typename grad::Tape<T>::Var loss_recon(grad::Tape<T>& tape, typename grad::Tape<T>::Var z_hat,
                                       typename grad::Tape<T>::Var z_target) {
    auto a = tape.normalize_rows(z_hat, T(kNormEps));
    auto b = tape.stop_gradient(tape.normalize_rows(z_target, T(kNormEps)));
    return grad::rms_norm(tape, tape.sub(a, b));
}

// Frame-normalized Gram matrix G = Z Z^T.
template <class T>
typename grad::Tape<T>::Var gram(grad::Tape<T>& tape, typename grad::Tape<T>::Var z) {
    auto zn = tape.normalize_rows(z, T(kNormEps));
    return tape.matmul(zn, tape.transpose(zn));
}

// ||G_low - sg(G_high)||_F / T; gradient flows only into z_low.
template <class T>
typename grad::Tape<T>::Var loss_time_relation(grad::Tape<T>& tape,
                                               typename grad::Tape<T>::Var z_low,
                                               typename grad::Tape<T>::Var z_high) {
    const auto& a = tape.val(z_low);
    const auto& b = tape.val(z_high);
    require(a.rows() == b.rows(), Errc::shape, "loss_time_relation: frame count mismatch");
    auto gl = gram(tape, z_low);
    auto gh = tape.stop_gradient(gram(tape, z_high));
    return grad::rms_norm(tape, tape.sub(gl, gh));
}

template <class T>
struct ObjectiveParts {
    typename grad::Tape<T>::Var total, recon, tr;
};

template <class T>
ObjectiveParts<T> objective_graph(grad::Tape<T>& tape, const SemboVars<T>& v,
                                  typename grad::Tape<T>::Var z_high, double lambda_recon) {
    auto z_low = compress_graph(tape, v, z_high);
    auto z_hat = restore_graph(tape, v, z_low);
    ObjectiveParts<T> parts;
    parts.recon = loss_recon(tape, z_hat, z_high);
    parts.tr = loss_time_relation(tape, z_low, z_high);
    parts.total = tape.add(tape.scalar_mul(parts.recon, T(lambda_recon)), parts.tr);
    return parts;
}

struct TrainRecord {
    long long step = 0;
    double loss_recon = 0.0;
    double loss_tr = 0.0;
    double total = 0.0;
    double lr = 0.0;
};

// Minibatch AdamW training on frozen teacher feature sequences. Fully
// deterministic for a fixed seed: initialization and batch assembly are
// keyed off (seed, step) counters only.
template <class T>
SemboModel<T> train(const std::vector<FeatureSeq<T>>& corpus, const SemboConfig& cfg,
                    std::uint64_t seed, std::vector<TrainRecord>* history = nullptr) {
    require(!corpus.empty(), Errc::state, "train_sembo: empty corpus");
    for (const auto& f : corpus)
        require(f.dim == cfg.d_high, Errc::shape, "train_sembo: corpus dim != d_high");

    Rng init_rng(mix_key(seed, 0x5e3b0));
    SemboModel<T> model = SemboModel<T>::init(cfg.d_high, cfg.d_low, cfg.hidden, init_rng);
    optim::AdamW<T> opt(cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.lr);
    opt.attach(model.params);

    for (long long step = 0; step < cfg.steps; ++step) {
        Rng batch_rng(mix_key(seed, 0xba7c4, std::uint64_t(step)));
        grad::Tape<T> tape;
        std::vector<typename grad::Tape<T>::Var> order;
        auto vars = insert_params(tape, model, true, &order);

        typename grad::Tape<T>::Var total{}, recon{}, tr{};
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& seq = corpus[std::size_t(batch_rng.uniform_int(0, int(corpus.size()) - 1))];
            const int crop = std::min(cfg.crop_frames, seq.frames);
            require(crop >= 1, Errc::state, "train_sembo: empty feature sequence");
            const int start = seq.frames > crop ? int(batch_rng.uniform_int(0, seq.frames - crop)) : 0;
            grad::Array<T> z = grad::Array<T>::zeros({crop, cfg.d_high});
            std::copy(seq.values.begin() + std::size_t(start) * cfg.d_high,
                      seq.values.begin() + std::size_t(start + crop) * cfg.d_high, z.v.begin());
            auto parts = objective_graph(tape, vars, tape.constant(std::move(z)), cfg.lambda_recon);
            total = b == 0 ? parts.total : tape.add(total, parts.total);
            recon = b == 0 ? parts.recon : tape.add(recon, parts.recon);
            tr = b == 0 ? parts.tr : tape.add(tr, parts.tr);
        }
        total = tape.scalar_mul(total, T(1) / T(cfg.batch));

        const double loss_val = double(tape.scalar_val(total));
        require(std::isfinite(loss_val), Errc::numeric,
                "train_sembo: NaN loss at step " + std::to_string(step));
        tape.backward(total);

        std::vector<const grad::Array<T>*> grads;
        for (auto vvar : order) grads.push_back(&tape.grad_of(vvar));
        const double lr = opt.step(model.params, grads);

        if (history)
            history->push_back({step, double(tape.scalar_val(recon)) / cfg.batch,
                                double(tape.scalar_val(tr)) / cfg.batch, loss_val, lr});
    }
    return model;
}

} // namespace losatok::sembo
