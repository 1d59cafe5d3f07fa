#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wpl/tensor.hpp"

namespace wpl {

// Named model weight. Frozen parameters never require grad and the optimizer
// skips them, which is what implements the base/adapter split.
template <typename S>
struct ParameterT {
    std::string name;
    TensorT<S> tensor;
    bool frozen = false;

    void set_frozen(bool f) {
        frozen = f;
        tensor.set_requires_grad(!f);
    }
};

template <typename S>
class ParamRegistry {
public:
    ParameterT<S>& add(const std::string& name, TensorT<S> t) {
        for (auto& p : params_)
            if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        params_.push_back(ParameterT<S>{name, std::move(t), false});
        return params_.back();
    }

    ParameterT<S>* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }
    const ParameterT<S>* find(const std::string& name) const {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    std::vector<ParameterT<S>>& all() { return params_; }
    const std::vector<ParameterT<S>>& all() const { return params_; }

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto& p : params_)
            if (!p.frozen) n += p.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<ParameterT<S>> params_;
};

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay: θ ← θ − lr·(m̂/(√v̂+eps) + wd·θ)
template <typename S>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }

    void step(ParamRegistry<S>& reg) {
        if (state_.size() < reg.all().size()) state_.resize(reg.all().size());
        for (size_t i = 0; i < reg.all().size(); ++i) {
            auto& p = reg.all()[i];
            if (p.frozen || !p.tensor.has_grad()) continue;
            auto& st = state_[i];
            const auto& g = p.tensor.grad();
            auto& w = p.tensor.mutable_data();
            if (g.size() != w.size())
                throw std::invalid_argument("adamw: grad shape mismatch for " + p.name);
            if (st.m.size() != w.size()) {
                st.m.assign(w.size(), S(0));
                st.v.assign(w.size(), S(0));
                st.step = 0;
            }
            st.step += 1;
            const S b1 = S(cfg_.beta1), b2 = S(cfg_.beta2);
            const S bc1 = S(1) - std::pow(b1, S(st.step));
            const S bc2 = S(1) - std::pow(b2, S(st.step));
            const S lr = S(cfg_.lr), eps = S(cfg_.eps), wd = S(cfg_.weight_decay);
            for (size_t j = 0; j < w.size(); ++j) {
                st.m[j] = b1 * st.m[j] + (S(1) - b1) * g[j];
                st.v[j] = b2 * st.v[j] + (S(1) - b2) * g[j] * g[j];
                S mhat = st.m[j] / bc1;
                S vhat = st.v[j] / bc2;
                w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[j]);
            }
        }
    }

private:
    struct State {
        std::vector<S> m, v;
        int64_t step = 0;
    };
    AdamWConfig cfg_;
    std::vector<State> state_;
};

} // namespace wpl
