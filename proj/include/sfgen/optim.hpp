#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace sfgen {

/// AdamW with decoupled weight decay. Holds one moment pair per registered
/// tensor; tensors are identified by registration order.
class AdamW {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    explicit AdamW(Options opt) : opt_(opt) {}

    /// Registers any dense Eigen tensor. `decay` selects whether weight decay
    /// applies to it (biases usually opt out).
    template <typename Derived>
    void add(Eigen::PlainObjectBase<Derived>& param, bool decay) {
        const auto n = param.size();
        slots_.push_back({param.data(), n, Eigen::ArrayXd::Zero(n), Eigen::ArrayXd::Zero(n), decay});
    }

    /// `grads[i]` points at the gradient of the i-th registered tensor, laid
    /// out like the tensor itself.
    void step(const std::vector<const double*>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        const double b1 = opt_.beta1, b2 = opt_.beta2;
        const double step_size = lr / bc1;
        const double inv_bc2 = 1.0 / bc2;
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            auto& s = slots_[i];
            const double shrink = s.decay ? 1.0 - lr * opt_.weight_decay : 1.0;
            Eigen::Map<Eigen::ArrayXd> p(s.data, s.size);
            Eigen::Map<const Eigen::ArrayXd> g(grads[i], s.size);
            s.m = b1 * s.m + (1.0 - b1) * g;
            s.v = b2 * s.v + (1.0 - b2) * g.square();
            p = p * shrink - step_size * s.m / ((s.v * inv_bc2).sqrt() + opt_.eps);
        }
    }

    std::size_t steps() const { return t_; }

private:
    struct Slot {
        double* data;
        Eigen::Index size;
        Eigen::ArrayXd m;
        Eigen::ArrayXd v;
        bool decay;
    };
    Options opt_;
    std::vector<Slot> slots_;
    std::size_t t_ = 0;
};

/// Linear warm-up to `base_lr`, then linear decay towards zero at `total`
/// steps.
inline double linear_schedule(double base_lr, std::size_t step, std::size_t warmup, std::size_t total) {
    if (warmup > 0 && step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup) return base_lr;
    const double frac = static_cast<double>(total - step) / static_cast<double>(total - warmup);
    return base_lr * std::max(0.0, frac);
}

}  // namespace sfgen
