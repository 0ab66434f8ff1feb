#pragma once

// The tokenizer: frozen synthetic teacher, patch-embed acoustic encoder,
// channel compression, unified latent (acoustic + semantic), KL bottleneck,
// Vocos-style decoder with an ISTFT head, a multi-resolution STFT
// discriminator, and the combined training objective
//   L = l_mel*L_mel + l_sem*(L_H + L_L) + l_kl*L_KL + l_fm*L_fm + l_adv*L_adv
// trained with alternating discriminator/generator AdamW steps.

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "losatok/common.hpp"
#include "losatok/dsp.hpp"
#include "losatok/feature.hpp"
#include "losatok/grad.hpp"
#include "losatok/optim.hpp"
#include "losatok/sembo.hpp"

namespace losatok::tok {

struct LossWeights {
    double mel = 45.0;
    double sem = 45.0;
    double kl = 1e-2;
    double fm = 1.0;
    double adv = 1.0;
};

// The KL-weight sweep grid the config accepts.
inline const std::vector<double>& kl_sweep_grid() {
    static const std::vector<double> grid{0.0, 1e-4, 1e-3, 1e-2};
    return grid;
}

struct DiscConfig {
    std::vector<int> resolutions{256, 512, 1024};
    int channels = 8; // first conv width; doubles twice up the stack
    static constexpr int kLayers = 4; // feature maps exposed per resolution
};

struct TokConfig {
    int sample_rate = dsp::kSampleRate;
    int mel_window = 1024;
    int mel_hop = 160; // 100 Hz mel frames
    int mel_bins = 64;
    int pool = 4;      // mel frames per latent frame -> 25 Hz
    int d_high = 64;   // acoustic/teacher feature width
    int d = 16;        // unified latent width (= sembo d_low)
    int decoder_dim = 128;
    int decoder_blocks = 4;
    LossWeights lambda;
    bool kl_sampled = true; // false: deterministic latents (AE topology)
    long long steps = 5000;
    int batch = 2;
    double crop_seconds = 1.0;
    double beta1 = 0.8;
    double beta2 = 0.99;
    double weight_decay = 0.01;
    optim::LrSchedule lr{1e-4, 1e-5, 1000, 5000};
    long long checkpoint_interval = 1000;
    DiscConfig disc;

    int latent_rate() const { return sample_rate / (mel_hop * pool); }          // 25 Hz
    int synth_hop() const { return sample_rate / (2 * latent_rate()); }         // 320
    int synth_window() const { return 2 * synth_hop(); }                        // 640
    int samples_per_latent() const { return mel_hop * pool; }                   // 640
    int crop_samples() const { return int(crop_seconds * sample_rate); }
};

// ---------------------------------------------------------------------------
// Frozen teacher: seeded affine-tanh-affine over mel frames, mean-pooled x4
// to the latent rate. Never receives gradients; deterministic per (seed, x).
// ---------------------------------------------------------------------------

template <class T>
struct Teacher {
    std::uint64_t seed = 0;
    int mel_bins = 0;
    int d_high = 0;
    grad::Array<T> w1, b1, w2, b2;

    static Teacher make(std::uint64_t seed, int mel_bins, int d_high) {
        Teacher t;
        t.seed = seed;
        t.mel_bins = mel_bins;
        t.d_high = d_high;
        Rng rng(mix_key(seed, 0x7eacf));
        t.w1 = optim::kaiming_uniform<T>({mel_bins, d_high}, mel_bins, rng);
        t.b1 = grad::Array<T>::zeros({d_high});
        for (auto& x : t.b1.v) x = T(rng.uniform(-0.1, 0.1));
        t.w2 = optim::kaiming_uniform<T>({d_high, d_high}, d_high, rng);
        t.b2 = grad::Array<T>::zeros({d_high});
        return t;
    }
};

// Mel frames padded with log-floor frames to a multiple of `pool`.
inline dsp::MelFrames pad_mel(const dsp::MelFrames& mel, int pool) {
    if (mel.frames % pool == 0) return mel;
    dsp::MelFrames out = mel;
    const int target = ((mel.frames + pool - 1) / pool) * pool;
    out.values.resize(std::size_t(target) * mel.mel_bins, std::log(dsp::kLogFloor));
    out.frames = target;
    return out;
}

template <class T>
FeatureSeq<T> teacher_encode(const Teacher<T>& teacher, const dsp::MelFrames& mel, int pool,
                             double expected_mel_rate) {
    require(std::abs(mel.frame_rate - expected_mel_rate) < 1e-9, Errc::config,
            "teacher_encode: mel frame rate mismatch");
    require(mel.mel_bins == teacher.mel_bins, Errc::shape, "teacher_encode: mel bin mismatch");
    const dsp::MelFrames padded = pad_mel(mel, pool);
    const int frames = padded.frames / pool;

    grad::Tape<T> tape;
    grad::Array<T> x = grad::Array<T>::zeros({padded.frames, padded.mel_bins});
    for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] = T(padded.values[i]);
    auto h = tape.tanh_(tape.add_rows(tape.matmul(tape.constant(std::move(x)), tape.constant(teacher.w1)),
                                      tape.constant(teacher.b1)));
    auto y = tape.add_rows(tape.matmul(h, tape.constant(teacher.w2)), tape.constant(teacher.b2));
    const auto& yv = tape.val(y);

    FeatureSeq<T> out = FeatureSeq<T>::zeros(frames, teacher.d_high, mel.frame_rate / pool);
    for (int t = 0; t < frames; ++t)
        for (int d = 0; d < teacher.d_high; ++d) {
            T acc = 0;
            for (int p = 0; p < pool; ++p) acc += yv.v[std::size_t(t * pool + p) * teacher.d_high + d];
            out.at(t, d) = acc / T(pool);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class T>
struct TokenizerModel {
    TokConfig cfg;
    optim::ParamSet<T> gen;
    optim::ParamSet<T> disc;
    Teacher<T> teacher;
    sembo::SemboModel<T> bottleneck; // frozen SemBo

    static TokenizerModel init(const TokConfig& cfg, const Teacher<T>& teacher,
                               const sembo::SemboModel<T>& bottleneck, std::uint64_t seed) {
        require(bottleneck.d_high == cfg.d_high && bottleneck.d_low == cfg.d, Errc::config,
                "tokenizer: sembo dims incompatible with config");
        TokenizerModel m;
        m.cfg = cfg;
        m.teacher = teacher;
        m.bottleneck = bottleneck;
        Rng rng(mix_key(seed, 0x70c1));

        const int F = cfg.mel_bins, H = cfg.d_high, D = cfg.d, DD = cfg.decoder_dim;
        const int bins = cfg.synth_window() / 2 + 1;
        auto& g = m.gen;
        g.add("enc.conv_w", optim::kaiming_uniform<T>({H, 1, F, cfg.pool}, F * cfg.pool, rng));
        g.add("enc.conv_b", grad::Array<T>::zeros({H}));
        g.add("fc.w", optim::kaiming_uniform<T>({H, D}, H, rng));
        g.add("fc.b", grad::Array<T>::zeros({D}));
        g.add("kl.mu_w", optim::kaiming_uniform<T>({D, D}, D, rng, 0.5));
        g.add("kl.mu_b", grad::Array<T>::zeros({D}));
        g.add("kl.lv_w", optim::kaiming_uniform<T>({D, D}, D, rng, 0.1));
        g.add("kl.lv_b", grad::Array<T>::zeros({D}));
        g.add("dec.in_w", optim::kaiming_uniform<T>({D, DD}, D, rng));
        g.add("dec.in_b", grad::Array<T>::zeros({DD}));
        g.add("dec.up_w", optim::kaiming_uniform<T>({DD, DD, 3}, DD * 3, rng));
        g.add("dec.up_b", grad::Array<T>::zeros({DD}));
        for (int i = 0; i < cfg.decoder_blocks; ++i) {
            const std::string p = "dec.bk" + std::to_string(i) + ".";
            g.add(p + "dw_w", optim::kaiming_uniform<T>({DD, 7}, 7, rng));
            g.add(p + "dw_b", grad::Array<T>::zeros({DD}));
            g.add(p + "ln_g", grad::Array<T>::full({DD}, T(1)));
            g.add(p + "ln_b", grad::Array<T>::zeros({DD}));
            g.add(p + "p1_w", optim::kaiming_uniform<T>({DD, 3 * DD}, DD, rng));
            g.add(p + "p1_b", grad::Array<T>::zeros({3 * DD}));
            g.add(p + "p2_w", optim::kaiming_uniform<T>({3 * DD, DD}, 3 * DD, rng));
            g.add(p + "p2_b", grad::Array<T>::zeros({DD}));
            g.add(p + "gamma", grad::Array<T>::full({DD}, T(0.1)));
        }
        g.add("dec.out_ln_g", grad::Array<T>::full({DD}, T(1)));
        g.add("dec.out_ln_b", grad::Array<T>::zeros({DD}));
        g.add("dec.head_w", optim::kaiming_uniform<T>({DD, 2 * bins}, DD, rng, 0.5));
        g.add("dec.head_b", grad::Array<T>::zeros({2 * bins}));

        auto& d = m.disc;
        const int ch = cfg.disc.channels;
        const int widths[DiscConfig::kLayers + 1] = {1, ch, 2 * ch, 4 * ch, 4 * ch};
        for (int r : cfg.disc.resolutions) {
            const std::string p = "disc.r" + std::to_string(r) + ".";
            for (int l = 0; l < DiscConfig::kLayers; ++l) {
                d.add(p + "w" + std::to_string(l),
                      optim::kaiming_uniform<T>({widths[l + 1], widths[l], 3, 3}, widths[l] * 9, rng));
                d.add(p + "b" + std::to_string(l), grad::Array<T>::zeros({widths[l + 1]}));
            }
            d.add(p + "logit_w", optim::kaiming_uniform<T>({1, widths[DiscConfig::kLayers], 3, 3},
                                                           widths[DiscConfig::kLayers] * 9, rng));
            d.add(p + "logit_b", grad::Array<T>::zeros({1}));
        }
        return m;
    }
};

// Tape handles bound to one insertion of a ParamSet, in creation order.
template <class T>
struct BoundParams {
    std::vector<typename grad::Tape<T>::Var> order;
    const optim::ParamSet<T>* params = nullptr;

    typename grad::Tape<T>::Var at(const std::string& name) const {
        for (std::size_t i = 0; i < params->names.size(); ++i)
            if (params->names[i] == name) return order[i];
        fail(Errc::state, "bound params: unknown name '" + name + "'");
    }
};

template <class T>
BoundParams<T> bind(grad::Tape<T>& tape, const optim::ParamSet<T>& params, bool requires_grad) {
    BoundParams<T> b;
    b.params = &params;
    for (const auto& v : params.values) b.order.push_back(tape.leaf(v, requires_grad));
    return b;
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

// Mel frames as a [1, F, T] conv input constant.
template <class T>
grad::Array<T> mel_as_image(const dsp::MelFrames& mel) {
    grad::Array<T> x = grad::Array<T>::zeros({1, mel.mel_bins, mel.frames});
    for (int f = 0; f < mel.mel_bins; ++f)
        for (int t = 0; t < mel.frames; ++t) x.v[std::size_t(f) * mel.frames + t] = T(mel.at(t, f));
    return x;
}

template <class T>
struct EncodeVars {
    typename grad::Tape<T>::Var ac_high; // T x d_high
    typename grad::Tape<T>::Var ac_low;  // T x d
    int frames = 0;
};

// 2D patch embedding: frequency axis collapsed to 1, time downsampled by
// `pool`, then an affine channel compression.
template <class T>
EncodeVars<T> acoustic_encode_graph(grad::Tape<T>& tape, const BoundParams<T>& g,
                                    const dsp::MelFrames& padded_mel, const TokConfig& cfg) {
    require(padded_mel.frames % cfg.pool == 0, Errc::shape, "acoustic_encode: frames not padded");
    const int frames = padded_mel.frames / cfg.pool;
    auto x = tape.constant(mel_as_image<T>(padded_mel));
    auto conv = tape.conv2d(x, g.at("enc.conv_w"), g.at("enc.conv_b"), cfg.mel_bins, cfg.pool, 0, 0);
    auto high = tape.transpose(tape.reshape(conv, {cfg.d_high, frames}));
    EncodeVars<T> out;
    out.ac_high = high;
    out.ac_low = tape.add_rows(tape.matmul(high, g.at("fc.w")), g.at("fc.b"));
    out.frames = frames;
    return out;
}

template <class T>
struct KlVars {
    typename grad::Tape<T>::Var mu, logvar, z, kl;
};

constexpr double kLogvarClamp = 14.0;

// Per-frame heads on z_uni; logvar clamped to [-14, 14]. KL reduced as mean
// over frames, sum over latent dims. eta, when given, is the seeded standard
// normal draw; otherwise z = mu (deterministic mode).
template <class T>
KlVars<T> kl_bottleneck_graph(grad::Tape<T>& tape, const BoundParams<T>& g,
                              typename grad::Tape<T>::Var z_uni,
                              std::type_identity_t<const grad::Array<T>*> eta) {
    KlVars<T> out;
    out.mu = tape.add_rows(tape.matmul(z_uni, g.at("kl.mu_w")), g.at("kl.mu_b"));
    out.logvar = tape.clamp(tape.add_rows(tape.matmul(z_uni, g.at("kl.lv_w")), g.at("kl.lv_b")),
                            T(-kLogvarClamp), T(kLogvarClamp));
    const int frames = tape.val(out.mu).rows();
    auto var = tape.exp_(out.logvar);
    auto term = tape.sub(tape.sub(tape.add_scalar(out.logvar, T(1)), tape.mul(out.mu, out.mu)), var);
    out.kl = tape.scalar_mul(tape.sum(term), T(-0.5) / T(std::max(frames, 1)));
    if (eta) {
        auto sigma = tape.exp_(tape.scalar_mul(out.logvar, T(0.5)));
        out.z = tape.add(out.mu, tape.mul(sigma, tape.constant(*eta)));
    } else {
        out.z = out.mu;
    }
    return out;
}

// Latents -> waveform. Nearest-neighbor x2 upsample with a smoothing conv,
// Vocos-style blocks (depthwise conv + LN + pointwise MLP, residual), linear
// head to log-magnitude and phase, overlap-add ISTFT. Output length is
// exactly frames * samples_per_latent (the last 50 Hz frame is repeated once
// so the overlap-add covers the tail).
template <class T>
typename grad::Tape<T>::Var decode_graph(grad::Tape<T>& tape, const BoundParams<T>& g,
                                         typename grad::Tape<T>::Var z, const TokConfig& cfg) {
    auto x = tape.add_rows(tape.matmul(z, g.at("dec.in_w")), g.at("dec.in_b"));
    x = tape.repeat_rows(x, 2);
    x = tape.conv1d(x, g.at("dec.up_w"), g.at("dec.up_b"), 1);
    for (int i = 0; i < cfg.decoder_blocks; ++i) {
        const std::string p = "dec.bk" + std::to_string(i) + ".";
        auto h = tape.conv1d_depthwise(x, g.at(p + "dw_w"), g.at(p + "dw_b"), 3);
        h = tape.add_rows(tape.mul_rows(tape.layer_norm_rows(h, T(1e-5)), g.at(p + "ln_g")), g.at(p + "ln_b"));
        h = tape.gelu(tape.add_rows(tape.matmul(h, g.at(p + "p1_w")), g.at(p + "p1_b")));
        h = tape.add_rows(tape.matmul(h, g.at(p + "p2_w")), g.at(p + "p2_b"));
        x = tape.add(x, tape.mul_rows(h, g.at(p + "gamma")));
    }
    x = tape.add_rows(tape.mul_rows(tape.layer_norm_rows(x, T(1e-5)), g.at("dec.out_ln_g")),
                      g.at("dec.out_ln_b"));
    auto head = tape.add_rows(tape.matmul(x, g.at("dec.head_w")), g.at("dec.head_b"));
    const int rows = tape.val(head).rows();
    head = tape.concat_rows(head, tape.slice_rows(head, rows - 1, rows));
    const int bins = cfg.synth_window() / 2 + 1;
    auto logmag = tape.slice_cols(head, 0, bins);
    auto phase = tape.slice_cols(head, bins, 2 * bins);
    return tape.istft_synth(logmag, phase, cfg.synth_window(), cfg.synth_hop());
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// L_H = ||ac_high - sg(sem_high)||, L_L = ||ac_low - sg(sem_low)||, both RMS
// over entries; gradients reach only the acoustic branch.
template <class T>
std::pair<typename grad::Tape<T>::Var, typename grad::Tape<T>::Var>
loss_semantic(grad::Tape<T>& tape, typename grad::Tape<T>::Var ac_high,
              typename grad::Tape<T>::Var ac_low, typename grad::Tape<T>::Var sem_high,
              typename grad::Tape<T>::Var sem_low) {
    auto lh = grad::rms_norm(tape, tape.sub(ac_high, tape.stop_gradient(sem_high)));
    auto ll = grad::rms_norm(tape, tape.sub(ac_low, tape.stop_gradient(sem_low)));
    return {lh, ll};
}

inline const std::vector<std::pair<int, int>>& mel_scales() {
    static const std::vector<std::pair<int, int>> scales{
        {32, 5}, {64, 10}, {128, 20}, {256, 40}, {512, 80}, {1024, 160}, {2048, 320}};
    return scales;
}

// Mean over the 7 (window, mel-bins) pairs of the entrywise-mean L1 distance
// between log-mel spectrograms; hop = window/4.
template <class T>
typename grad::Tape<T>::Var loss_mel_multiscale(grad::Tape<T>& tape, typename grad::Tape<T>::Var a,
                                                typename grad::Tape<T>::Var b, int sample_rate) {
    require(tape.val(a).shape == tape.val(b).shape, Errc::shape,
            "loss_mel_multiscale: length mismatch (pad the shorter signal)");
    typename grad::Tape<T>::Var total{};
    for (const auto& [win, bins] : mel_scales()) {
        thread_local std::map<std::pair<int, int>, dsp::SparseFilterbank> fbs;
        auto key = std::make_pair(win, bins);
        auto it = fbs.find(key);
        if (it == fbs.end()) it = fbs.emplace(key, dsp::mel_filterbank(sample_rate, win, bins)).first;
        auto log_mel = [&](typename grad::Tape<T>::Var x) {
            auto p = tape.stft_power(x, win, win / 4);
            return tape.log_(tape.add_scalar(tape.apply_filterbank(p, it->second), T(dsp::kLogFloor)));
        };
        auto term = tape.mean(tape.abs_(tape.sub(log_mel(a), log_mel(b))));
        total = total.valid() ? tape.add(total, term) : term;
    }
    return tape.scalar_mul(total, T(1) / T(mel_scales().size()));
}

template <class T>
struct DiscOut {
    std::vector<typename grad::Tape<T>::Var> logits; // one map per resolution
    std::vector<std::vector<typename grad::Tape<T>::Var>> features;
};

// Multi-resolution STFT discriminator: per resolution a small strided 2D
// conv stack over log1p-magnitude spectrograms.
template <class T>
DiscOut<T> discriminate_graph(grad::Tape<T>& tape, const BoundParams<T>& d,
                              typename grad::Tape<T>::Var audio, const DiscConfig& cfg) {
    DiscOut<T> out;
    for (int r : cfg.resolutions) {
        const std::string p = "disc.r" + std::to_string(r) + ".";
        auto power = tape.stft_power(audio, r, r / 4);
        auto mag = tape.sqrt_(tape.add_scalar(power, T(1e-9)));
        auto x2 = tape.log_(tape.add_scalar(mag, T(1)));
        const auto& sh = tape.val(x2).shape; // [frames, bins]
        auto x = tape.reshape(tape.transpose(x2), {1, sh[1], sh[0]});
        std::vector<typename grad::Tape<T>::Var> feats;
        for (int l = 0; l < DiscConfig::kLayers; ++l) {
            const int stride = l < DiscConfig::kLayers - 1 ? 2 : 1;
            x = tape.leaky_relu(tape.conv2d(x, d.at(p + "w" + std::to_string(l)),
                                            d.at(p + "b" + std::to_string(l)), stride, stride, 1, 1),
                                T(0.1));
            feats.push_back(x);
        }
        out.logits.push_back(tape.conv2d(x, d.at(p + "logit_w"), d.at(p + "logit_b"), 1, 1, 1, 1));
        out.features.push_back(std::move(feats));
    }
    return out;
}

// Hinge objectives averaged over resolutions:
//   d = mean(relu(1 - D(x))) + mean(relu(1 + D(x_hat))), g = -mean(D(x_hat)).
template <class T>
typename grad::Tape<T>::Var loss_adversarial_d(grad::Tape<T>& tape,
                                               const std::vector<typename grad::Tape<T>::Var>& real,
                                               const std::vector<typename grad::Tape<T>::Var>& fake) {
    require(real.size() == fake.size() && !real.empty(), Errc::shape, "loss_adversarial: logit sets");
    typename grad::Tape<T>::Var acc{};
    for (std::size_t i = 0; i < real.size(); ++i) {
        auto hr = tape.mean(tape.leaky_relu(tape.scalar_mul(tape.add_scalar(tape.scalar_mul(real[i], T(-1)), T(1)), T(1)), T(0)));
        auto hf = tape.mean(tape.leaky_relu(tape.add_scalar(fake[i], T(1)), T(0)));
        auto term = tape.add(hr, hf);
        acc = acc.valid() ? tape.add(acc, term) : term;
    }
    return tape.scalar_mul(acc, T(1) / T(real.size()));
}

template <class T>
typename grad::Tape<T>::Var loss_adversarial_g(grad::Tape<T>& tape,
                                               const std::vector<typename grad::Tape<T>::Var>& fake) {
    require(!fake.empty(), Errc::shape, "loss_adversarial: empty logit set");
    typename grad::Tape<T>::Var acc{};
    for (auto f : fake) {
        auto term = tape.scalar_mul(tape.mean(f), T(-1));
        acc = acc.valid() ? tape.add(acc, term) : term;
    }
    return tape.scalar_mul(acc, T(1) / T(fake.size()));
}

constexpr double kFmEps = 1e-8;

// Mean over resolutions and layers of L1 distance, each layer normalized by
// its element count (the mean) and by the mean absolute real activation.
template <class T>
typename grad::Tape<T>::Var
loss_feature_matching(grad::Tape<T>& tape,
                      const std::vector<std::vector<typename grad::Tape<T>::Var>>& real,
                      const std::vector<std::vector<typename grad::Tape<T>::Var>>& fake) {
    require(real.size() == fake.size() && !real.empty(), Errc::shape, "loss_feature_matching: structure");
    typename grad::Tape<T>::Var acc{};
    int layers = 0;
    for (std::size_t r = 0; r < real.size(); ++r) {
        require(real[r].size() == fake[r].size(), Errc::shape, "loss_feature_matching: layer counts");
        for (std::size_t l = 0; l < real[r].size(); ++l) {
            require(tape.val(real[r][l]).shape == tape.val(fake[r][l]).shape, Errc::shape,
                    "loss_feature_matching: feature shapes");
            const auto& rv = tape.val(real[r][l]).v;
            double mean_abs = 0.0;
            for (T x : rv) mean_abs += std::abs(double(x));
            mean_abs /= double(rv.size());
            auto dist = tape.mean(tape.abs_(tape.sub(fake[r][l], tape.stop_gradient(real[r][l]))));
            auto term = tape.scalar_mul(dist, T(1.0 / (mean_abs + kFmEps)));
            acc = acc.valid() ? tape.add(acc, term) : term;
            ++layers;
        }
    }
    return tape.scalar_mul(acc, T(1) / T(layers));
}

// ---------------------------------------------------------------------------
// Full objective on one crop
// ---------------------------------------------------------------------------

template <class T>
struct SemanticTargets {
    FeatureSeq<T> high; // teacher features, latent rate
    FeatureSeq<T> low;  // frozen sembo compression of high
};

template <class T>
SemanticTargets<T> semantic_targets(const TokenizerModel<T>& m, const dsp::MelFrames& mel) {
    SemanticTargets<T> out;
    out.high = teacher_encode(m.teacher, mel, m.cfg.pool, double(m.cfg.sample_rate) / m.cfg.mel_hop);
    out.low = sembo::compress(m.bottleneck, out.high);
    return out;
}

template <class T>
struct CropGraph {
    EncodeVars<T> enc;
    typename grad::Tape<T>::Var z_uni, x_hat;
    KlVars<T> kl;
    typename grad::Tape<T>::Var mel, sem_h, sem_l, fm, adv_g; // unweighted terms
};

// Builds the generator path for one crop: encode, unify with frozen semantic
// features, KL bottleneck, decode. `eta` null in deterministic mode.
template <class T>
CropGraph<T> crop_forward(grad::Tape<T>& tape, const BoundParams<T>& g, const TokenizerModel<T>& m,
                          const dsp::MelFrames& padded_mel, const SemanticTargets<T>& targets,
                          std::type_identity_t<const grad::Array<T>*> eta) {
    CropGraph<T> out;
    out.enc = acoustic_encode_graph(tape, g, padded_mel, m.cfg);
    require(out.enc.frames == targets.low.frames, Errc::shape, "crop_forward: semantic frame mismatch");
    auto sem_low = tape.constant(sembo::detail::to_array(targets.low));
    out.z_uni = tape.add(out.enc.ac_low, sem_low);
    out.kl = kl_bottleneck_graph(tape, g, out.z_uni, eta);
    out.x_hat = decode_graph(tape, g, out.kl.z, m.cfg);
    return out;
}

template <class T>
grad::Array<T> audio_to_array(const std::vector<T>& samples) {
    grad::Array<T> a;
    a.shape = {int(samples.size())};
    a.v = samples;
    return a;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainRecord {
    long long step = 0;
    double mel = 0, sem_h = 0, sem_l = 0, kl = 0, fm = 0, adv_g = 0, gen_total = 0, disc = 0, lr = 0;
};

template <class T>
struct TrainerState {
    TokenizerModel<T> model;
    optim::AdamW<T> opt_g;
    optim::AdamW<T> opt_d;
    long long step = 0;
    std::uint64_t seed = 0;

    static TrainerState fresh(const TokConfig& cfg, const Teacher<T>& teacher,
                              const sembo::SemboModel<T>& bottleneck, std::uint64_t seed) {
        TrainerState s;
        s.model = TokenizerModel<T>::init(cfg, teacher, bottleneck, seed);
        s.opt_g = optim::AdamW<T>(cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.lr);
        s.opt_d = optim::AdamW<T>(cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.lr);
        s.opt_g.attach(s.model.gen);
        s.opt_d.attach(s.model.disc);
        s.seed = seed;
        return s;
    }
};

// One corpus crop: audio samples at the canonical rate.
template <class T>
struct Crop {
    std::vector<T> samples;
    dsp::MelFrames padded_mel;
    SemanticTargets<T> targets;
};

template <class T>
Crop<T> prepare_crop(const TokenizerModel<T>& m, const std::vector<T>& samples) {
    Crop<T> crop;
    crop.samples = samples;
    dsp::AudioBuffer buf;
    buf.sample_rate = m.cfg.sample_rate;
    buf.samples.assign(samples.begin(), samples.end());
    crop.padded_mel =
        pad_mel(dsp::mel_spectrogram(buf, m.cfg.mel_window, m.cfg.mel_hop, m.cfg.mel_bins), m.cfg.pool);
    crop.targets = semantic_targets(m, crop.padded_mel);
    return crop;
}

namespace detail {

template <class T>
void check_finite(grad::Tape<T>& tape, typename grad::Tape<T>::Var v, const char* name,
                  long long step) {
    const double x = double(tape.scalar_val(v));
    require(std::isfinite(x), Errc::numeric,
            std::string("train_tokenizer: non-finite ") + name + " at step " + std::to_string(step));
}

} // namespace detail

// Runs `steps` alternating D/G updates. Batch crops and reparameterization
// noise are keyed by (seed, step) only, so a resumed run replays the exact
// step sequence.
template <class T>
void train_steps(TrainerState<T>& state, const std::vector<std::vector<T>>& corpus, long long steps,
                 std::vector<TrainRecord>* history = nullptr) {
    require(!corpus.empty(), Errc::state, "train_tokenizer: empty corpus");
    TokenizerModel<T>& m = state.model;
    const TokConfig& cfg = m.cfg;
    const int crop_n = cfg.crop_samples();
    for (const auto& f : corpus)
        require(int(f.size()) >= crop_n, Errc::state, "train_tokenizer: corpus file shorter than crop");

    for (long long done = 0; done < steps; ++done) {
        const long long step = state.step;
        Rng batch_rng(mix_key(state.seed, 0xc09, std::uint64_t(step)));

        std::vector<Crop<T>> crops;
        std::vector<grad::Array<T>> etas;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& file = corpus[std::size_t(batch_rng.uniform_int(0, int(corpus.size()) - 1))];
            const int start = int(batch_rng.uniform_int(0, int(file.size()) - crop_n));
            crops.push_back(
                prepare_crop(m, std::vector<T>(file.begin() + start, file.begin() + start + crop_n)));
            if (cfg.kl_sampled) {
                Rng noise_rng(mix_key(state.seed, 0xe7a, std::uint64_t(step) * 1000 + std::uint64_t(b)));
                auto eta = grad::Array<T>::zeros({crops.back().targets.low.frames, cfg.d});
                for (auto& x : eta.v) x = T(noise_rng.normal());
                etas.push_back(std::move(eta));
            }
        }

        // reference audio padded to the decoder output length
        const int out_n = crops[0].padded_mel.frames / cfg.pool * cfg.samples_per_latent();
        auto ref_audio = [&](int b) {
            std::vector<T> padded(crops[std::size_t(b)].samples);
            padded.resize(std::size_t(out_n), T(0));
            return audio_to_array<T>(padded);
        };

        // ---- discriminator step (generator frozen) ----
        std::vector<std::vector<T>> fakes;
        {
            grad::Tape<T> tape;
            auto g = bind(tape, m.gen, false);
            auto d = bind(tape, m.disc, true);
            typename grad::Tape<T>::Var d_total{};
            for (int b = 0; b < cfg.batch; ++b) {
                auto fwd = crop_forward(tape, g, m, crops[std::size_t(b)].padded_mel,
                                        crops[std::size_t(b)].targets,
                                        cfg.kl_sampled ? &etas[std::size_t(b)] : nullptr);
                fakes.push_back(tape.val(fwd.x_hat).v);
                auto real_out = discriminate_graph(tape, d, tape.constant(ref_audio(b)), cfg.disc);
                auto fake_out = discriminate_graph(tape, d, tape.stop_gradient(fwd.x_hat), cfg.disc);
                auto term = loss_adversarial_d(tape, real_out.logits, fake_out.logits);
                d_total = d_total.valid() ? tape.add(d_total, term) : term;
            }
            d_total = tape.scalar_mul(d_total, T(1) / T(cfg.batch));
            detail::check_finite(tape, d_total, "discriminator loss", step);
            const double d_val = double(tape.scalar_val(d_total));
            tape.backward(d_total);
            std::vector<const grad::Array<T>*> grads;
            for (auto v : d.order) grads.push_back(&tape.grad_of(v));
            state.opt_d.step(m.disc, grads);
            if (history) {
                TrainRecord rec;
                rec.step = step;
                rec.disc = d_val;
                history->push_back(rec);
            }
        }

        // ---- generator step (updated discriminator frozen) ----
        {
            grad::Tape<T> tape;
            auto g = bind(tape, m.gen, true);
            auto d = bind(tape, m.disc, false);
            typename grad::Tape<T>::Var total{}, mel{}, semh{}, seml{}, kl{}, fm{}, advg{};
            auto add_to = [&tape](typename grad::Tape<T>::Var& acc, typename grad::Tape<T>::Var v) {
                acc = acc.valid() ? tape.add(acc, v) : v;
            };
            for (int b = 0; b < cfg.batch; ++b) {
                auto fwd = crop_forward(tape, g, m, crops[std::size_t(b)].padded_mel,
                                        crops[std::size_t(b)].targets,
                                        cfg.kl_sampled ? &etas[std::size_t(b)] : nullptr);
                auto ref = tape.constant(ref_audio(b));
                auto sem_high_c = tape.constant(sembo::detail::to_array(crops[std::size_t(b)].targets.high));
                auto sem_low_c = tape.constant(sembo::detail::to_array(crops[std::size_t(b)].targets.low));
                auto [lh, ll] = loss_semantic(tape, fwd.enc.ac_high, fwd.enc.ac_low, sem_high_c, sem_low_c);
                auto lmel = loss_mel_multiscale(tape, fwd.x_hat, ref, cfg.sample_rate);
                auto real_out = discriminate_graph(tape, d, ref, cfg.disc);
                auto fake_out = discriminate_graph(tape, d, fwd.x_hat, cfg.disc);
                auto lfm = loss_feature_matching(tape, real_out.features, fake_out.features);
                auto ladv = loss_adversarial_g(tape, fake_out.logits);

                add_to(mel, lmel);
                add_to(semh, lh);
                add_to(seml, ll);
                add_to(kl, fwd.kl.kl);
                add_to(fm, lfm);
                add_to(advg, ladv);
            }
            const T inv_b = T(1) / T(cfg.batch);
            mel = tape.scalar_mul(mel, inv_b);
            semh = tape.scalar_mul(semh, inv_b);
            seml = tape.scalar_mul(seml, inv_b);
            kl = tape.scalar_mul(kl, inv_b);
            fm = tape.scalar_mul(fm, inv_b);
            advg = tape.scalar_mul(advg, inv_b);
            detail::check_finite(tape, mel, "L_mel", step);
            detail::check_finite(tape, semh, "L_H", step);
            detail::check_finite(tape, seml, "L_L", step);
            detail::check_finite(tape, kl, "L_KL", step);
            detail::check_finite(tape, fm, "L_fm", step);
            detail::check_finite(tape, advg, "L_adv", step);
            total = tape.scalar_mul(mel, T(cfg.lambda.mel));
            total = tape.add(total, tape.scalar_mul(tape.add(semh, seml), T(cfg.lambda.sem)));
            total = tape.add(total, tape.scalar_mul(kl, T(cfg.lambda.kl)));
            total = tape.add(total, tape.scalar_mul(fm, T(cfg.lambda.fm)));
            total = tape.add(total, tape.scalar_mul(advg, T(cfg.lambda.adv)));
            detail::check_finite(tape, total, "generator loss", step);

            const double total_val = double(tape.scalar_val(total));
            tape.backward(total);
            std::vector<const grad::Array<T>*> grads;
            for (auto v : g.order) grads.push_back(&tape.grad_of(v));
            const double lr = state.opt_g.step(m.gen, grads);

            if (history) {
                TrainRecord& rec = history->back();
                rec.mel = double(tape.scalar_val(mel));
                rec.sem_h = double(tape.scalar_val(semh));
                rec.sem_l = double(tape.scalar_val(seml));
                rec.kl = double(tape.scalar_val(kl));
                rec.fm = double(tape.scalar_val(fm));
                rec.adv_g = double(tape.scalar_val(advg));
                rec.gen_total = total_val;
                rec.lr = lr;
            }
        }
        ++state.step;
    }
}

// ---------------------------------------------------------------------------
// Inference (pure, deterministic)
// ---------------------------------------------------------------------------

template <class T>
struct EncodedFeatures {
    FeatureSeq<T> ac_high, ac_low, sem_high, sem_low, unified, mu, logvar;
};

template <class T>
EncodedFeatures<T> encode_features(const TokenizerModel<T>& m, const dsp::AudioBuffer& audio) {
    require(audio.sample_rate == m.cfg.sample_rate, Errc::config, "encode: wrong sample rate");
    const dsp::MelFrames mel =
        pad_mel(dsp::mel_spectrogram(audio, m.cfg.mel_window, m.cfg.mel_hop, m.cfg.mel_bins), m.cfg.pool);
    const SemanticTargets<T> targets = semantic_targets(m, mel);

    grad::Tape<T> tape;
    auto g = bind(tape, m.gen, false);
    auto enc = acoustic_encode_graph(tape, g, mel, m.cfg);
    auto z_uni = tape.add(enc.ac_low, tape.constant(sembo::detail::to_array(targets.low)));
    auto klv = kl_bottleneck_graph(tape, g, z_uni, nullptr);

    const double rate = m.cfg.latent_rate();
    EncodedFeatures<T> out;
    out.ac_high = sembo::detail::to_features(tape.val(enc.ac_high), rate);
    out.ac_low = sembo::detail::to_features(tape.val(enc.ac_low), rate);
    out.sem_high = targets.high;
    out.sem_low = targets.low;
    out.unified = sembo::detail::to_features(tape.val(z_uni), rate);
    out.mu = sembo::detail::to_features(tape.val(klv.mu), rate);
    out.logvar = sembo::detail::to_features(tape.val(klv.logvar), rate);
    return out;
}

template <class T>
dsp::AudioBuffer decode_audio(const TokenizerModel<T>& m, const FeatureSeq<T>& z) {
    require(z.dim == m.cfg.d, Errc::shape, "decode: latent dim mismatch");
    dsp::AudioBuffer out;
    out.sample_rate = m.cfg.sample_rate;
    if (z.frames == 0) return out;
    grad::Tape<T> tape;
    auto g = bind(tape, m.gen, false);
    auto audio = decode_graph(tape, g, tape.constant(sembo::detail::to_array(z)), m.cfg);
    const auto& v = tape.val(audio).v;
    out.samples.assign(v.begin(), v.end());
    return out;
}

// Deterministic round trip: encode (mu latents) then decode, trimmed to the
// input length.
template <class T>
dsp::AudioBuffer reconstruct(const TokenizerModel<T>& m, const dsp::AudioBuffer& audio) {
    auto feats = encode_features(m, audio);
    dsp::AudioBuffer out = decode_audio(m, feats.mu);
    if (out.samples.size() > audio.samples.size()) out.samples.resize(audio.samples.size());
    return out;
}

} // namespace losatok::tok
