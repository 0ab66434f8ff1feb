#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "losatok/common.hpp"
#include "losatok/grad.hpp"

namespace losatok::optim {

// Linear warmup to base_lr, then cosine decay to min_lr at max_steps.
// lr(0) = 0, lr(warmup_steps) = base_lr, lr(max_steps) = min_lr.
struct LrSchedule {
    double base_lr = 1e-4;
    double min_lr = 1e-5;
    long long warmup_steps = 1000;
    long long max_steps = 100000;

    double at(long long step) const {
        if (warmup_steps > 0 && step < warmup_steps) return base_lr * double(step) / double(warmup_steps);
        if (step >= max_steps) return min_lr;
        const long long span = std::max<long long>(1, max_steps - warmup_steps);
        const double progress = double(step - warmup_steps) / double(span);
        return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(kPi * progress));
    }
};

// Ordered, named parameter arrays. Order is creation order and defines the
// checkpoint manifest order.
template <class T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<grad::Array<T>> values;

    grad::Array<T>& add(const std::string& name, grad::Array<T> value) {
        names.push_back(name);
        values.push_back(std::move(value));
        return values.back();
    }
    grad::Array<T>& at(const std::string& name) {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return values[i];
        fail(Errc::state, "params: unknown name '" + name + "'");
    }
    const grad::Array<T>& at(const std::string& name) const {
        return const_cast<ParamSet*>(this)->at(name);
    }
    std::size_t size() const { return names.size(); }
};

// AdamW with decoupled weight decay.
template <class T>
class AdamW {
public:
    AdamW() = default;
    AdamW(double beta1, double beta2, double eps, double weight_decay, LrSchedule schedule)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), schedule_(schedule) {}

    void attach(const ParamSet<T>& params) {
        m_.clear();
        v_.clear();
        for (const auto& p : params.values) {
            m_.push_back(std::vector<T>(p.v.size(), T(0)));
            v_.push_back(std::vector<T>(p.v.size(), T(0)));
        }
        step_ = 0;
    }

    // grads[i] aligned with params.values[i]. Missing gradient = hard error.
    double step(ParamSet<T>& params, const std::vector<const grad::Array<T>*>& grads) {
        require(m_.size() == params.size(), Errc::state, "adamw: attach() before step()");
        require(grads.size() == params.size(), Errc::state, "adamw: gradient count mismatch");
        const double lr = schedule_.at(step_);
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, double(step_));
        const double bc2 = 1.0 - std::pow(beta2_, double(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            require(grads[i] != nullptr && grads[i]->v.size() == params.values[i].v.size(), Errc::state,
                    "adamw: missing gradient for '" + params.names[i] + "'");
            auto& w = params.values[i].v;
            auto& m = m_[i];
            auto& v = v_[i];
            const auto& g = grads[i]->v;
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = T(beta1_) * m[j] + T(1.0 - beta1_) * g[j];
                v[j] = T(beta2_) * v[j] + T(1.0 - beta2_) * g[j] * g[j];
                const double mhat = double(m[j]) / bc1;
                const double vhat = double(v[j]) / bc2;
                w[j] -= T(lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * double(w[j])));
            }
        }
        return lr;
    }

    long long step_count() const { return step_; }
    const LrSchedule& schedule() const { return schedule_; }

    // Flat views for checkpointing.
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }
    void set_step_count(long long s) { step_ = s; }

private:
    double beta1_ = 0.8;
    double beta2_ = 0.99;
    double eps_ = 1e-8;
    double weight_decay_ = 0.01;
    LrSchedule schedule_;
    long long step_ = 0;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
};

// Kaiming-style uniform init, U(-b, b) with b = sqrt(6 / fan_in).
template <class T>
grad::Array<T> kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng, double gain = 1.0) {
    grad::Array<T> a = grad::Array<T>::zeros(std::move(shape));
    const double bound = gain * std::sqrt(6.0 / std::max(1, fan_in));
    for (auto& x : a.v) x = T(rng.uniform(-bound, bound));
    return a;
}

} // namespace losatok::optim
