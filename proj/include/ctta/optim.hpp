#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ctta/errors.hpp"

namespace ctta {

enum class OptimKind { Sgd, SgdNesterov, Adam };

struct OptimConfig {
    OptimKind kind = OptimKind::SgdNesterov;
    double lr = 1e-3;
    double momentum = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

// First-order steppers over flat parameter vectors. Nesterov follows the
// torch convention: buf = μ·buf + g, update = g + μ·buf. lr_scale carries
// schedule decay so one optimizer serves a whole run.
class Optimizer {
   public:
    Optimizer(OptimConfig cfg, std::size_t n) : cfg_(cfg), buf_(n, 0.0) {
        if (cfg.kind == OptimKind::Adam) second_.assign(n, 0.0);
    }

    void step(std::vector<double>& params, const std::vector<double>& grad, double lr_scale = 1.0) {
        if (params.size() != buf_.size() || grad.size() != buf_.size())
            throw ShapeMismatchError("optimizer: parameter/gradient size mismatch");
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) update_one(params, grad, i, lr_scale);
    }

    void step_masked(std::vector<double>& params, const std::vector<double>& grad,
                     const std::vector<std::size_t>& mask, double lr_scale = 1.0) {
        if (params.size() != buf_.size() || grad.size() != buf_.size())
            throw ShapeMismatchError("optimizer: parameter/gradient size mismatch");
        ++t_;
        for (std::size_t i : mask) update_one(params, grad, i, lr_scale);
    }

   private:
    void update_one(std::vector<double>& params, const std::vector<double>& grad, std::size_t i, double lr_scale) {
        const double lr = cfg_.lr * lr_scale;
        switch (cfg_.kind) {
            case OptimKind::Sgd: {
                if (cfg_.momentum != 0.0) {
                    buf_[i] = cfg_.momentum * buf_[i] + grad[i];
                    params[i] -= lr * buf_[i];
                } else {
                    params[i] -= lr * grad[i];
                }
                break;
            }
            case OptimKind::SgdNesterov: {
                buf_[i] = cfg_.momentum * buf_[i] + grad[i];
                params[i] -= lr * (grad[i] + cfg_.momentum * buf_[i]);
                break;
            }
            case OptimKind::Adam: {
                buf_[i] = cfg_.adam_beta1 * buf_[i] + (1.0 - cfg_.adam_beta1) * grad[i];
                second_[i] = cfg_.adam_beta2 * second_[i] + (1.0 - cfg_.adam_beta2) * grad[i] * grad[i];
                const double mhat = buf_[i] / (1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_)));
                const double vhat = second_[i] / (1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_)));
                params[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
                break;
            }
        }
    }

    OptimConfig cfg_;
    std::vector<double> buf_, second_;
    std::int64_t t_ = 0;
};

}  // namespace ctta
