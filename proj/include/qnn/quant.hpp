#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "qnn/autograd.hpp"
#include "qnn/tensor.hpp"

namespace qnn::quant {

// sign(0) := +1 everywhere, including bit packing.
inline real sign_pm1(real v) { return v < real(0) ? real(-1) : real(1); }

// Rounding ties go away from zero (std::round semantics), fixed so any
// reimplementation can match bit-for-bit.
inline real round_ties_away(real v) { return std::round(v); }

enum class Granularity { PerFilter, WholeTensor };

struct QuantConfig {
    int weight_bits = 32;  // 32 means pass-through
    int act_bits = 32;
    Granularity weight_granularity = Granularity::PerFilter;

    void validate() const {
        if (weight_bits < 1 || act_bits < 1)
            throw ConfigError("QuantConfig: bit widths must be >= 1");
    }
};

struct BinarizeResult {
    std::vector<real> alpha;  // one per filter, or a single entry in whole-tensor mode
    Tensor codes;             // entries in {-1,+1}
};

namespace detail {
// Filters are slices along dim 0; a rank-1 tensor is a single filter.
inline void filter_dims(const Tensor& w, Granularity g, std::size_t& filters, std::size_t& len) {
    if (g == Granularity::WholeTensor || w.rank() <= 1) {
        filters = 1;
        len = w.size();
    } else {
        filters = w.dim(0);
        len = w.size() / filters;
    }
}
}  // namespace detail

// XNOR-net binarization: alpha = mean|W| (per filter by default), codes = sign(W).
inline BinarizeResult binarize_weights(const Tensor& w,
                                       Granularity g = Granularity::PerFilter) {
    if (w.empty()) throw ShapeError("binarize_weights: empty tensor");
    check_finite(w, "binarize_weights");
    std::size_t filters, len;
    detail::filter_dims(w, g, filters, len);
    BinarizeResult r;
    r.alpha.resize(filters);
    r.codes = Tensor(w.shape());
    for (std::size_t f = 0; f < filters; ++f) {
        const real* src = w.data() + f * len;
        real* dst = r.codes.data() + f * len;
        real acc = 0;
        for (std::size_t i = 0; i < len; ++i) {
            acc += std::abs(src[i]);
            dst[i] = sign_pm1(src[i]);
        }
        r.alpha[f] = acc / static_cast<real>(len);
    }
    return r;
}

// Three-step n-bit weight quantization (n >= 2):
//   1. w' = tanh(w) / (2 max|tanh(w)|) + 0.5
//   2. w'' = round(w' * scale) / scale,   scale = 2^n - 1
//   3. q = 2 w'' - 1
// Output values land on the grid {-1, -1 + 2/scale, ..., 1}. An all-zero
// tensor has a degenerate max; its quantization is defined as all zeros.
inline Tensor quantize_weights_nbit(const Tensor& w, int n,
                                    Granularity g = Granularity::WholeTensor) {
    if (n < 2) throw ConfigError("quantize_weights_nbit: need n >= 2, got " + std::to_string(n));
    check_finite(w, "quantize_weights_nbit");
    const real scale = static_cast<real>((1u << n) - 1);
    std::size_t filters, len;
    detail::filter_dims(w, g, filters, len);
    Tensor q(w.shape());
    for (std::size_t f = 0; f < filters; ++f) {
        const real* src = w.data() + f * len;
        real* dst = q.data() + f * len;
        real t_max = 0;
        for (std::size_t i = 0; i < len; ++i) t_max = std::max(t_max, std::abs(std::tanh(src[i])));
        if (t_max == real(0)) {
            for (std::size_t i = 0; i < len; ++i) dst[i] = 0;
            continue;
        }
        for (std::size_t i = 0; i < len; ++i) {
            const real w1 = std::tanh(src[i]) / (2 * t_max) + real(0.5);
            const real w2 = round_ties_away(w1 * scale) / scale;
            dst[i] = 2 * w2 - 1;
        }
    }
    return q;
}

// Activations: clamp to [0,1], then round onto the {0, 1/scale, ..., 1} grid.
inline Tensor quantize_activations_nbit(const Tensor& a, int n) {
    if (n < 1) throw ConfigError("quantize_activations_nbit: need n >= 1");
    const real scale = static_cast<real>((1u << n) - 1);
    Tensor q = a;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const real c = std::min(std::max(q[i], real(0)), real(1));
        q[i] = round_ties_away(c * scale) / scale;
    }
    return q;
}

// ---- straight-through estimator ----

enum class PassRegion { All, UnitInterval, AbsLeOne };

// Gradient passes where the input lies in the region, zero elsewhere. Round
// steps use All (round treated as identity); the activation clamp gates to
// [0,1]; binary sign gates to |x| <= 1.
inline Tensor ste_backward(const Tensor& upstream, const Tensor& input, PassRegion region) {
    check_same_shape(upstream, input, "ste_backward");
    Tensor g = upstream;
    switch (region) {
        case PassRegion::All:
            break;
        case PassRegion::UnitInterval:
            for (std::size_t i = 0; i < g.size(); ++i)
                if (input[i] < real(0) || input[i] > real(1)) g[i] = 0;
            break;
        case PassRegion::AbsLeOne:
            for (std::size_t i = 0; i < g.size(); ++i)
                if (std::abs(input[i]) > real(1)) g[i] = 0;
            break;
    }
    return g;
}

// ---- autodiff wrappers ----
//
// Forward emits the exact quantized values; backward is the exact gradient of
// a differentiable surrogate (round treated as identity):
//   1-bit weights:  mean|W| * clip(W,-1,1)        (mean path included)
//   n-bit weights:  tanh(W) / max|tanh(W)|        (argmax path included)
//   activations:    clamp(A, 0, 1)
// Mode::Surrogate makes the forward emit the surrogate values instead, so a
// whole quantized layer becomes differentiable end to end and its analytic
// gradient can be checked against finite differences.

enum class Mode { Quantized, Surrogate };

inline Var binarize_weights_ste(const Var& w, Granularity g = Granularity::PerFilter,
                                Mode mode = Mode::Quantized) {
    auto pw = w.node();
    BinarizeResult r = binarize_weights(w.value(), g);
    std::size_t filters, len;
    detail::filter_dims(w.value(), g, filters, len);
    Tensor out = r.codes;
    if (mode == Mode::Surrogate)
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = std::min(std::max(w.value()[i], real(-1)), real(1));
    for (std::size_t f = 0; f < filters; ++f)
        for (std::size_t i = 0; i < len; ++i) out[f * len + i] *= r.alpha[f];
    auto alpha = std::make_shared<std::vector<real>>(std::move(r.alpha));
    return Var::make(std::move(out), "binarize_weights", pw->requires_grad, {pw},
                     [pw, alpha, filters, len](Node& nd) {
                         if (!pw->requires_grad) return;
                         Tensor& g = pw->ensure_grad();
                         for (std::size_t f = 0; f < filters; ++f) {
                             const real* wv = pw->value.data() + f * len;
                             const real* up = nd.grad.data() + f * len;
                             real* dst = g.data() + f * len;
                             real dot_clip = 0;  // <upstream, clip(W)>
                             for (std::size_t i = 0; i < len; ++i)
                                 dot_clip += up[i] * std::min(std::max(wv[i], real(-1)), real(1));
                             const real mean_term = dot_clip / static_cast<real>(len);
                             for (std::size_t i = 0; i < len; ++i) {
                                 real d = sign_pm1(wv[i]) * mean_term;
                                 if (std::abs(wv[i]) <= real(1)) d += (*alpha)[f] * up[i];
                                 dst[i] += d;
                             }
                         }
                     });
}

inline Var quantize_weights_nbit_ste(const Var& w, int n,
                                     Granularity g = Granularity::WholeTensor,
                                     Mode mode = Mode::Quantized) {
    auto pw = w.node();
    Tensor q = quantize_weights_nbit(w.value(), n, g);
    std::size_t filters, len;
    detail::filter_dims(w.value(), g, filters, len);
    if (mode == Mode::Surrogate) {
        for (std::size_t f = 0; f < filters; ++f) {
            real t_max = 0;
            for (std::size_t i = 0; i < len; ++i)
                t_max = std::max(t_max, std::abs(std::tanh(w.value()[f * len + i])));
            for (std::size_t i = 0; i < len; ++i)
                q[f * len + i] = t_max == real(0)
                                     ? real(0)
                                     : std::tanh(w.value()[f * len + i]) / t_max;
        }
    }
    return Var::make(std::move(q), "quantize_weights_nbit", pw->requires_grad, {pw},
                     [pw, filters, len](Node& nd) {
                         if (!pw->requires_grad) return;
                         Tensor& g = pw->ensure_grad();
                         for (std::size_t f = 0; f < filters; ++f) {
                             const real* wv = pw->value.data() + f * len;
                             const real* up = nd.grad.data() + f * len;
                             real* dst = g.data() + f * len;
                             real t_max = 0;
                             std::size_t j_star = 0;
                             real dot_gt = 0;  // <upstream, tanh(W)>
                             for (std::size_t i = 0; i < len; ++i) {
                                 const real t = std::tanh(wv[i]);
                                 if (std::abs(t) > t_max) {
                                     t_max = std::abs(t);
                                     j_star = i;
                                 }
                                 dot_gt += up[i] * t;
                             }
                             if (t_max == real(0)) continue;  // degenerate all-zero filter
                             for (std::size_t i = 0; i < len; ++i) {
                                 const real t = std::tanh(wv[i]);
                                 dst[i] += up[i] * (1 - t * t) / t_max;
                             }
                             const real t_js = std::tanh(wv[j_star]);
                             dst[j_star] -=
                                 sign_pm1(t_js) * (1 - t_js * t_js) * dot_gt / (t_max * t_max);
                         }
                     });
}

// Weight-side quantizer selected by config. The per-filter scale granularity
// applies to the binary path; the n-bit normalization stays per-tensor (the
// op itself exposes the switch).
inline Var quantize_layer_weights(const Var& w, const QuantConfig& cfg,
                                  Mode mode = Mode::Quantized) {
    cfg.validate();
    if (cfg.weight_bits >= 32) return w;
    if (cfg.weight_bits == 1) return binarize_weights_ste(w, cfg.weight_granularity, mode);
    return quantize_weights_nbit_ste(w, cfg.weight_bits, Granularity::WholeTensor, mode);
}

inline Var quantize_activations_nbit_ste(const Var& a, int n, Mode mode = Mode::Quantized) {
    auto pa = a.node();
    Tensor q = quantize_activations_nbit(a.value(), n);
    if (mode == Mode::Surrogate) {
        q = a.value();
        for (std::size_t i = 0; i < q.size(); ++i)
            q[i] = std::min(std::max(q[i], real(0)), real(1));
    }
    return Var::make(std::move(q), "quantize_activations_nbit", pa->requires_grad, {pa},
                     [pa](Node& nd) {
                         if (!pa->requires_grad) return;
                         add_inplace(pa->ensure_grad(),
                                     ste_backward(nd.grad, pa->value, PassRegion::UnitInterval));
                     });
}

}  // namespace qnn::quant
