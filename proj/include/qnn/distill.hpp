#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "qnn/autograd.hpp"
#include "qnn/nn_ops.hpp"

namespace qnn::distill {

struct DistillConfig {
    real tau = real(1);  // temperature, > 0
    real mu = real(0);   // balance between CE and the KD term
};

// softmax(o / tau), max-subtracted. tau = 1 is the ordinary softmax.
inline Tensor soften(const Tensor& logits, real tau) {
    if (tau <= 0) throw ConfigError("soften: temperature must be positive");
    Tensor scaled = logits.rank() == 1 ? logits.reshaped({1, logits.size()}) : logits;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] /= tau;
    Tensor p = softmax_rows(scaled);
    return logits.rank() == 1 ? p.reshaped(logits.shape()) : p;
}

namespace detail {
// log softmax(o/tau) per row, stable
inline Tensor log_soften(const Tensor& logits, real tau) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    Tensor lp = logits;
    for (std::size_t i = 0; i < n; ++i) {
        real mx = lp(i, 0) / tau;
        for (std::size_t j = 0; j < k; ++j) {
            lp(i, j) /= tau;
            mx = std::max(mx, lp(i, j));
        }
        real z = 0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(lp(i, j) - mx);
        const real log_z = mx + std::log(z);
        for (std::size_t j = 0; j < k; ++j) lp(i, j) -= log_z;
    }
    return lp;
}
}  // namespace detail

// L_KD = H(y, p_S) + mu * H(p_T^tau, p_S^tau), averaged over rows. No tau^2
// gradient rescaling: the loss is implemented exactly as written. y is
// one-hot; rank-1 inputs mean a single sample.
inline real kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    const Tensor& y_onehot, real tau, real mu) {
    Tensor os = student_logits.rank() == 1
                    ? student_logits.reshaped({1, student_logits.size()})
                    : student_logits;
    Tensor ot = teacher_logits.rank() == 1 ? teacher_logits.reshaped({1, teacher_logits.size()})
                                           : teacher_logits;
    Tensor y = y_onehot.rank() == 1 ? y_onehot.reshaped({1, y_onehot.size()}) : y_onehot;
    check_same_shape(os, ot, "kd_loss logits");
    check_same_shape(os, y, "kd_loss labels");
    const std::size_t n = os.dim(0), k = os.dim(1);
    const Tensor log_ps = detail::log_soften(os, real(1));
    const Tensor log_ps_tau = detail::log_soften(os, tau);
    const Tensor pt_tau = soften(ot, tau);
    real loss = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            loss -= y(i, j) * log_ps(i, j);
            loss -= mu * pt_tau(i, j) * log_ps_tau(i, j);
        }
    return loss / static_cast<real>(n);
}

// Autodiff form for training. The teacher enters as a plain tensor, so its
// gradient is identically zero by construction.
inline Var kd_loss_op(const Var& student_logits, const Tensor& teacher_logits,
                      const std::vector<int>& labels, real tau, real mu) {
    auto ps_node = student_logits.node();
    const Tensor& os = student_logits.value();
    const std::size_t n = os.dim(0), k = os.dim(1);
    if (labels.size() != n) throw ShapeError("kd_loss_op: label count mismatch");
    Tensor y({n, k}, 0);
    for (std::size_t i = 0; i < n; ++i) y(i, static_cast<std::size_t>(labels[i])) = 1;
    const real loss = kd_loss(os, teacher_logits, y, tau, mu);
    auto ps = std::make_shared<Tensor>(softmax_rows(os));
    auto ps_tau = std::make_shared<Tensor>(soften(os, tau));
    auto pt_tau = std::make_shared<Tensor>(soften(teacher_logits, tau));
    return Var::make(
        Tensor::scalar(loss), "kd_loss", ps_node->requires_grad, {ps_node},
        [ps_node, ps, ps_tau, pt_tau, labels, n, k, tau, mu](Node& nd) {
            if (!ps_node->requires_grad) return;
            Tensor& g = ps_node->ensure_grad();
            const real u = nd.grad[0] / static_cast<real>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                    real d = (*ps)(i, j);
                    if (static_cast<std::size_t>(labels[i]) == j) d -= real(1);
                    d += mu * ((*ps_tau)(i, j) - (*pt_tau)(i, j)) / tau;
                    g(i, j) += u * d;
                }
        });
}

// ---- cached teacher logits: u64 count, u64 classes, float64 rows ----

inline void save_logits(const std::string& path, const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("save_logits: need [N,K]");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    auto put_u64 = [&](std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os.write(reinterpret_cast<const char*>(b), 8);
    };
    put_u64(logits.dim(0));
    put_u64(logits.dim(1));
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double d = static_cast<double>(logits[i]);
        std::uint64_t u;
        std::memcpy(&u, &d, 8);
        put_u64(u);
    }
}

inline Tensor load_logits(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path);
    std::size_t offset = 0;
    auto get_u64 = [&](const char* what) {
        unsigned char b[8];
        is.read(reinterpret_cast<char*>(b), 8);
        if (is.gcount() != 8) throw ParseError(std::string("truncated logits ") + what, offset);
        offset += 8;
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
        return v;
    };
    const std::uint64_t n = get_u64("count"), k = get_u64("classes");
    Tensor t({static_cast<std::size_t>(n), static_cast<std::size_t>(k)});
    for (std::size_t i = 0; i < t.size(); ++i) {
        const std::uint64_t u = get_u64("row");
        double d;
        std::memcpy(&d, &u, 8);
        t[i] = static_cast<real>(d);
    }
    return t;
}

}  // namespace qnn::distill
