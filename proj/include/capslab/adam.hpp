#pragma once

#include <vector>

#include "capslab/nets.hpp"

namespace capslab {

struct AdamConfig {
    Real lr = 1e-3;
    Real beta1 = 0.9, beta2 = 0.999;
    Real eps = 1e-8;

    void validate() const {
        if (!(lr > 0)) throw std::invalid_argument("adam lr must be positive");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
            throw std::invalid_argument("adam betas must lie in [0, 1)");
        if (!(eps > 0)) throw std::invalid_argument("adam eps must be positive");
    }
};

/// Adam with bias correction. Parameters in a frozen set are skipped entirely:
/// no update and no moment decay, so a thawed layer would resume exactly where
/// it stopped.
class Adam {
public:
    Adam() = default;
    Adam(const AdamConfig& cfg, const ParamSet& params) : cfg_(cfg) {
        cfg_.validate();
        m_.reserve(params.values.size());
        v_.reserve(params.values.size());
        for (const auto& t : params.values) {
            m_.push_back(Tensor::zeros(t.shape()));
            v_.push_back(Tensor::zeros(t.shape()));
        }
    }

    void step(ParamSet& params, const std::vector<Tensor>& grads,
              const std::vector<bool>* trainable = nullptr) {
        if (grads.size() != params.values.size() || m_.size() != params.values.size())
            throw std::invalid_argument("adam step: parameter/gradient count mismatch");
        ++t_;
        const Real c1 = 1 - std::pow(cfg_.beta1, static_cast<Real>(t_));
        const Real c2 = 1 - std::pow(cfg_.beta2, static_cast<Real>(t_));
        for (std::size_t i = 0; i < params.values.size(); ++i) {
            if (trainable && !(*trainable)[i]) continue;
            Tensor& p = params.values[i];
            const Tensor& g = grads[i];
            if (!g.same_shape(p))
                throw ShapeError("adam step: gradient shape mismatch at index " + std::to_string(i));
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t k = 0; k < p.numel(); ++k) {
                m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g[k] * g[k];
                p[k] -= cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }
    long step_count() const { return t_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }

    /// Restore serialized state (checkpoint resume).
    void restore(long t, std::vector<Tensor> m, std::vector<Tensor> v) {
        if (m.size() != m_.size() || v.size() != v_.size())
            throw std::invalid_argument("adam restore: moment count mismatch");
        for (std::size_t i = 0; i < m.size(); ++i)
            if (!m[i].same_shape(m_[i]) || !v[i].same_shape(v_[i]))
                throw ShapeError("adam restore: moment shape mismatch at index " + std::to_string(i));
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

}  // namespace capslab
