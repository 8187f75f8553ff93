#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pqvae/tensor.hpp"

namespace pqvae {

struct AdamWHyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Per-parameter moment buffers. step counts applied updates.
struct AdamWState {
    std::vector<double> m;
    std::vector<double> v;
    long long step = 0;
};

/// One AdamW update with bias correction and decoupled weight decay.
/// Rejects non-finite gradients before touching any state.
inline void adamw_step(std::vector<double>& theta, const std::vector<double>& grad,
                       AdamWState& state, const AdamWHyper& h) {
    if (theta.size() != grad.size())
        throw std::invalid_argument("adamw_step: param/grad size mismatch");
    for (double g : grad)
        if (!std::isfinite(g))
            throw std::runtime_error("adamw_step: non-finite gradient, step aborted");
    if (state.m.size() != theta.size()) state.m.assign(theta.size(), 0.0);
    if (state.v.size() != theta.size()) state.v.assign(theta.size(), 0.0);

    state.step += 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        theta[i] -= h.lr * h.weight_decay * theta[i];
        theta[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
}

/// Optimizer over a fixed parameter list. Gradients are consumed from each
/// tensor's grad buffer and zeroed afterwards.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWHyper hyper) : h_(hyper) {}

    void attach(const std::vector<Tensor>& params) {
        params_ = params;
        states_.assign(params.size(), AdamWState{});
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            adamw_step(params_[i].data(), params_[i].grad(), states_[i], h_);
            params_[i].zero_grad();
        }
    }

    const AdamWHyper& hyper() const { return h_; }
    std::vector<AdamWState>& states() { return states_; }
    const std::vector<AdamWState>& states() const { return states_; }
    const std::vector<Tensor>& params() const { return params_; }

    long long step_count() const { return states_.empty() ? 0 : states_[0].step; }

    void set_step_count(long long s) {
        for (auto& st : states_) st.step = s;
    }

private:
    AdamWHyper h_;
    std::vector<Tensor> params_;
    std::vector<AdamWState> states_;
};

}  // namespace pqvae
