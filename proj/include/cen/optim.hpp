#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "cen/tensor.hpp"

namespace cen {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created on first use; the update runs in double and is stored back in T.
template <typename T>
class Adam {
public:
    struct Slots {
        Tensor<T> m;
        Tensor<T> v;
    };

    explicit Adam(AdamHyper hyper = {}) : hyper_(hyper) {}

    [[nodiscard]] const AdamHyper& hyper() const noexcept { return hyper_; }
    [[nodiscard]] std::uint64_t steps() const noexcept { return step_; }
    [[nodiscard]] const std::map<std::string, Slots>& slots() const noexcept { return slots_; }

    /// Applies one update to every parameter and zeroes its gradient.
    void step(std::span<Parameter<T>> params, double lr) {
        if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
        for (const auto& p : params)
            if (!p.value.has_grad()) throw ContractError("parameter '" + p.name + "' has no gradient");
        ++step_;
        const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
        for (auto& p : params) {
            Slots& s = slot_for(p);
            auto value = p.value.data();
            auto grad = p.value.grad();
            auto m = s.m.data();
            auto v = s.v.data();
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = grad[i];
                const double mi = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g;
                const double vi = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g * g;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + hyper_.epsilon);
                value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
            }
            p.value.zero_grad();
        }
    }

    /// Replaces the optimizer state; used when restoring a checkpoint.
    void restore(std::uint64_t steps, std::map<std::string, Slots> slots) {
        for (const auto& [name, s] : slots)
            if (s.m.shape() != s.v.shape()) throw DimensionError("moment shapes differ for " + name);
        step_ = steps;
        slots_ = std::move(slots);
    }

private:
    Slots& slot_for(const Parameter<T>& p) {
        auto it = slots_.find(p.name);
        if (it == slots_.end()) {
            it = slots_.emplace(p.name, Slots{Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())}).first;
        } else if (it->second.m.shape() != p.value.shape()) {
            throw DimensionError("optimizer state for '" + p.name + "' has shape " + it->second.m.shape().str() +
                                 ", parameter has " + p.value.shape().str());
        }
        return it->second;
    }

    AdamHyper hyper_;
    std::uint64_t step_ = 0;
    std::map<std::string, Slots> slots_;
};

/// Piecewise-constant decay: initial_lr / decay_factor^floor(iter / decay_every).
struct StepDecaySchedule {
    double initial_lr = 1e-4;
    double decay_factor = 2.0;
    std::uint64_t decay_every = 128000;
    std::uint64_t total_iters = 640000;

    [[nodiscard]] double lr_at(std::uint64_t iter) const {
        const auto drops = static_cast<double>(iter / decay_every);
        return initial_lr / std::pow(decay_factor, drops);
    }

    void validate() const {
        if (!(initial_lr > 0.0)) throw std::invalid_argument("initial learning rate must be positive");
        if (!(decay_factor >= 1.0)) throw std::invalid_argument("decay factor must be at least 1");
        if (decay_every == 0) throw std::invalid_argument("decay interval must be positive");
    }
};

inline double lr_at(const StepDecaySchedule& schedule, std::uint64_t iter) { return schedule.lr_at(iter); }

}  // namespace cen
