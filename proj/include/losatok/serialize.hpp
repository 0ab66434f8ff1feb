#pragma once

// Model <-> container glue. Parameters, frozen teacher/bottleneck weights and
// optimizer moments all live in the float32 payload; step counts and the
// config echo live in the JSON header.

#include <string>

#include "losatok/checkpoint.hpp"
#include "losatok/optim.hpp"
#include "losatok/sembo.hpp"
#include "losatok/tok.hpp"

namespace losatok::ser {

template <class T>
ckpt::NamedArray to_named(const std::string& name, const grad::Array<T>& a) {
    ckpt::NamedArray out;
    out.name = name;
    out.shape = a.shape;
    out.data.resize(a.v.size());
    for (std::size_t i = 0; i < a.v.size(); ++i) out.data[i] = float(a.v[i]);
    return out;
}

template <class T>
grad::Array<T> from_named(const ckpt::NamedArray& a) {
    grad::Array<T> out;
    out.shape = a.shape;
    out.v.resize(a.data.size());
    for (std::size_t i = 0; i < a.data.size(); ++i) out.v[i] = T(a.data[i]);
    return out;
}

template <class T>
void append_params(ckpt::Container& c, const std::string& prefix, const optim::ParamSet<T>& p) {
    for (std::size_t i = 0; i < p.size(); ++i)
        c.arrays.push_back(to_named(prefix + p.names[i], p.values[i]));
}

template <class T>
void read_params(const ckpt::Container& c, const std::string& prefix, optim::ParamSet<T>& p) {
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto& a = c.at(prefix + p.names[i]);
        require(a.shape == p.values[i].shape, Errc::format,
                "checkpoint: shape mismatch for '" + prefix + p.names[i] + "' (incompatible config)");
        p.values[i] = from_named<T>(a);
    }
}

template <class T>
void append_moments(ckpt::Container& c, const std::string& prefix, const optim::AdamW<T>& opt,
                    const optim::ParamSet<T>& p) {
    const auto& m = opt.first_moments();
    const auto& v = opt.second_moments();
    for (std::size_t i = 0; i < p.size(); ++i) {
        c.arrays.push_back(to_named(prefix + "m." + p.names[i],
                                    grad::Array<T>(p.values[i].shape, m[i])));
        c.arrays.push_back(to_named(prefix + "v." + p.names[i],
                                    grad::Array<T>(p.values[i].shape, v[i])));
    }
}

template <class T>
void read_moments(const ckpt::Container& c, const std::string& prefix, optim::AdamW<T>& opt,
                  const optim::ParamSet<T>& p) {
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = from_named<T>(c.at(prefix + "m." + p.names[i])).v;
        v[i] = from_named<T>(c.at(prefix + "v." + p.names[i])).v;
    }
}

// ---- sembo ----

template <class T>
void save_sembo(const std::string& path, const sembo::SemboModel<T>& m,
                nlohmann::ordered_json config_echo) {
    ckpt::Container c;
    c.header["kind"] = "sembo";
    c.header["d_high"] = m.d_high;
    c.header["d_low"] = m.d_low;
    c.header["hidden"] = m.hidden;
    c.header["config"] = std::move(config_echo);
    append_params(c, "sembo.", m.params);
    ckpt::save(path, c);
}

template <class T>
sembo::SemboModel<T> load_sembo(const std::string& path) {
    const ckpt::Container c = ckpt::load(path);
    require(c.header.value("kind", "") == "sembo", Errc::format,
            "checkpoint: '" + path + "' is not a sembo checkpoint");
    Rng rng(0);
    auto m = sembo::SemboModel<T>::init(c.header.at("d_high"), c.header.at("d_low"),
                                        c.header.at("hidden"), rng);
    read_params(c, "sembo.", m.params);
    return m;
}

// ---- tokenizer trainer state ----

nlohmann::ordered_json tok_config_to_json(const tok::TokConfig& cfg);
tok::TokConfig tok_config_from_json(const nlohmann::json& j);

template <class T>
void save_tokenizer(const std::string& path, const tok::TrainerState<T>& state,
                    nlohmann::ordered_json config_echo) {
    ckpt::Container c;
    c.header["kind"] = "tokenizer";
    c.header["step"] = state.step;
    c.header["seed"] = state.seed;
    c.header["teacher_seed"] = state.model.teacher.seed;
    c.header["tok_config"] = tok_config_to_json(state.model.cfg);
    c.header["config"] = std::move(config_echo);
    append_params(c, "gen.", state.model.gen);
    append_params(c, "disc.", state.model.disc);
    append_params(c, "sembo.", state.model.bottleneck.params);
    c.arrays.push_back(to_named("teacher.w1", state.model.teacher.w1));
    c.arrays.push_back(to_named("teacher.b1", state.model.teacher.b1));
    c.arrays.push_back(to_named("teacher.w2", state.model.teacher.w2));
    c.arrays.push_back(to_named("teacher.b2", state.model.teacher.b2));
    append_moments(c, "opt_g.", state.opt_g, state.model.gen);
    append_moments(c, "opt_d.", state.opt_d, state.model.disc);
    c.header["opt_g_step"] = state.opt_g.step_count();
    c.header["opt_d_step"] = state.opt_d.step_count();
    ckpt::save(path, c);
}

template <class T>
tok::TrainerState<T> load_tokenizer(const std::string& path) {
    const ckpt::Container c = ckpt::load(path);
    require(c.header.value("kind", "") == "tokenizer", Errc::format,
            "checkpoint: '" + path + "' is not a tokenizer checkpoint");
    const tok::TokConfig cfg = tok_config_from_json(c.header.at("tok_config"));

    auto teacher = tok::Teacher<T>::make(c.header.at("teacher_seed"), cfg.mel_bins, cfg.d_high);
    teacher.w1 = from_named<T>(c.at("teacher.w1"));
    teacher.b1 = from_named<T>(c.at("teacher.b1"));
    teacher.w2 = from_named<T>(c.at("teacher.w2"));
    teacher.b2 = from_named<T>(c.at("teacher.b2"));

    Rng rng(0);
    auto bn = sembo::SemboModel<T>::init(cfg.d_high, cfg.d, cfg.d_high, rng);

    auto state = tok::TrainerState<T>::fresh(cfg, teacher, bn, c.header.at("seed"));
    read_params(c, "gen.", state.model.gen);
    read_params(c, "disc.", state.model.disc);
    read_params(c, "sembo.", state.model.bottleneck.params);
    read_moments(c, "opt_g.", state.opt_g, state.model.gen);
    read_moments(c, "opt_d.", state.opt_d, state.model.disc);
    state.opt_g.set_step_count(c.header.at("opt_g_step"));
    state.opt_d.set_step_count(c.header.at("opt_d_step"));
    state.step = c.header.at("step");
    return state;
}

// ---- latent files ----

template <class T>
void save_latents(const std::string& path, const FeatureSeq<T>& z, const std::string& which) {
    ckpt::Container c;
    c.header["kind"] = "latents";
    c.header["latent"] = which; // "mu" or "uni"
    c.header["frame_rate"] = z.frame_rate;
    grad::Array<T> a;
    a.shape = {z.frames, z.dim};
    a.v = z.values;
    c.arrays.push_back(to_named("z", a));
    ckpt::save(path, c);
}

template <class T>
FeatureSeq<T> load_latents(const std::string& path) {
    const ckpt::Container c = ckpt::load(path);
    require(c.header.value("kind", "") == "latents", Errc::format,
            "container: '" + path + "' is not a latent file");
    const auto a = from_named<T>(c.at("z"));
    FeatureSeq<T> z;
    z.frames = a.shape.at(0);
    z.dim = a.shape.at(1);
    z.frame_rate = c.header.at("frame_rate");
    z.values = a.v;
    return z;
}

} // namespace losatok::ser
