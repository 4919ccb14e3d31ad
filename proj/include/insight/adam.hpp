#pragma once

#include "insight/common.hpp"

#include <cmath>
#include <vector>

namespace insight {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Decoupled (AdamW) decay; 0 gives plain Adam.
    double weight_decay = 0.0;
};

// Adam over a fixed list of parameter blocks. Blocks are registered once by
// size; each step receives (parameter, gradient) pairs in registration order.
class Adam {
public:
    explicit Adam(AdamConfig config) : config_(config) {}

    void add_block(Eigen::Index size) {
        m_.emplace_back(Vector::Zero(size));
        v_.emplace_back(Vector::Zero(size));
    }

    std::size_t steps() const { return t_; }

    void begin_step() { ++t_; }

    /// Updates block `index`. `decay` selects whether weight decay applies (biases usually skip it).
    template <typename Param, typename Grad>
    void update(std::size_t index, Param& param, const Grad& grad, bool decay = true) {
        auto p = param.reshaped();
        const auto g = grad.reshaped();
        auto& m = m_.at(index);
        auto& v = v_.at(index);
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double gi = g(i);
            m(i) = config_.beta1 * m(i) + (1.0 - config_.beta1) * gi;
            v(i) = config_.beta2 * v(i) + (1.0 - config_.beta2) * gi * gi;
            if (decay && config_.weight_decay != 0.0) {
                p(i) -= config_.lr * config_.weight_decay * p(i);
            }
            p(i) -= config_.lr * (m(i) / bc1) / (std::sqrt(v(i) / bc2) + config_.epsilon);
        }
    }

private:
    AdamConfig config_;
    std::size_t t_ = 0;
    std::vector<Vector> m_;
    std::vector<Vector> v_;
};

} // namespace insight
