#pragma once

#include "qnn/tensor.hpp"

namespace qnn {

// Classic SGD with decoupled-from-nothing weight decay and heavy-ball
// momentum. Buffer semantics, fixed:
//   v <- momentum * v + (g + wd * p)
//   p <- p - lr * v
// With momentum == 0 this is p <- p - lr * (g + wd * p).
struct SgdConfig {
    real lr = real(0.1);
    real weight_decay = real(5e-5);  // baseline setting used throughout
    real momentum = real(0.9);
};

inline void sgd_step(Tensor& param, const Tensor& grad, Tensor& momentum_buf,
                     const SgdConfig& cfg) {
    check_same_shape(param, grad, "sgd_step");
    if (!grad.all_finite()) throw NumericError("sgd_step: non-finite gradient, step aborted");
    if (momentum_buf.size() != param.size()) momentum_buf = Tensor(param.shape(), 0);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const real g = grad[i] + cfg.weight_decay * param[i];
        momentum_buf[i] = cfg.momentum * momentum_buf[i] + g;
        param[i] -= cfg.lr * momentum_buf[i];
    }
}

}  // namespace qnn
