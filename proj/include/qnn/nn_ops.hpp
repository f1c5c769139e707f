#pragma once

#include <cmath>
#include <vector>

#include "qnn/autograd.hpp"
#include "qnn/im2col.hpp"

namespace qnn {

// y = x @ W + b with x [N,D], W [D,M], b [M]
inline Var linear(const Var& x, const Var& w, const Var& b) {
    auto px = x.node(), pw = w.node(), pb = b.node();
    if (x.value().rank() != 2 || w.value().rank() != 2 || x.value().dim(1) != w.value().dim(0))
        throw ShapeError("linear: x " + shape_str(x.value().shape()) + " vs W " +
                         shape_str(w.value().shape()));
    Tensor out = matmul(x.value(), w.value());
    const std::size_t n = out.dim(0), m = out.dim(1);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out(i, j) += b.value()[j];
    bool rg = px->requires_grad || pw->requires_grad || pb->requires_grad;
    return Var::make(std::move(out), "linear", rg, {px, pw, pb}, [px, pw, pb](Node& nd) {
        const Tensor& dy = nd.grad;
        if (px->requires_grad) add_inplace(px->ensure_grad(), matmul(dy, transpose(pw->value)));
        if (pw->requires_grad) add_inplace(pw->ensure_grad(), matmul(transpose(px->value), dy));
        if (pb->requires_grad) {
            Tensor& db = pb->ensure_grad();
            for (std::size_t i = 0; i < dy.dim(0); ++i)
                for (std::size_t j = 0; j < dy.dim(1); ++j) db[j] += dy(i, j);
        }
    });
}

// Convolution as im2col + GEMM. w is [out_c, in_c, k, k]; conv layers carry
// no bias (they are followed by batch norm).
inline Var conv2d(const Var& x, const Var& w, const ConvGeom& g) {
    auto px = x.node(), pw = w.node();
    const Tensor& wt = w.value();
    if (wt.rank() != 4 || wt.dim(1) != g.in_c || wt.dim(2) != g.kernel || wt.dim(3) != g.kernel)
        throw ShapeError("conv2d: weight " + shape_str(wt.shape()) + " does not match geometry");
    const std::size_t out_c = wt.dim(0), n = x.value().dim(0);
    const std::size_t oh = g.out_h(), ow = g.out_w(), p = g.patch_len();

    auto cols = std::make_shared<Tensor>(im2col(x.value(), g));
    Tensor f = wt.reshaped({out_c, p});
    Tensor out_cols = matmul(*cols, transpose(f));  // [n*oh*ow, out_c]

    Tensor y({n, out_c, oh, ow});
    std::size_t row = 0;
    for (std::size_t im = 0; im < n; ++im)
        for (std::size_t yy = 0; yy < oh; ++yy)
            for (std::size_t xx = 0; xx < ow; ++xx, ++row)
                for (std::size_t oc = 0; oc < out_c; ++oc) y(im, oc, yy, xx) = out_cols(row, oc);

    bool rg = px->requires_grad || pw->requires_grad;
    return Var::make(std::move(y), "conv2d", rg, {px, pw},
                     [px, pw, cols, g, n, out_c, oh, ow, p](Node& nd) {
                         Tensor d_cols_out({n * oh * ow, out_c});
                         std::size_t row = 0;
                         for (std::size_t im = 0; im < n; ++im)
                             for (std::size_t yy = 0; yy < oh; ++yy)
                                 for (std::size_t xx = 0; xx < ow; ++xx, ++row)
                                     for (std::size_t oc = 0; oc < out_c; ++oc)
                                         d_cols_out(row, oc) = nd.grad(im, oc, yy, xx);
                         if (pw->requires_grad) {
                             Tensor df = matmul(transpose(d_cols_out), *cols);  // [out_c, p]
                             add_inplace(pw->ensure_grad(), df.reshaped(pw->value.shape()));
                         }
                         if (px->requires_grad) {
                             Tensor f = pw->value.reshaped({out_c, p});
                             Tensor d_cols = matmul(d_cols_out, f);
                             add_inplace(px->ensure_grad(), col2im(d_cols, n, g));
                         }
                     });
}

// ---- batch norm ----

// Running statistics live outside the tape; the layer owns them.
struct BatchNormState {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    real momentum = real(0.9);
    real eps = real(1e-5);

    explicit BatchNormState(std::size_t channels = 0, real momentum_ = real(0.9),
                            real eps_ = real(1e-5))
        : running_mean({channels > 0 ? channels : 1}, 0),
          running_var({channels > 0 ? channels : 1}, 1),
          momentum(momentum_),
          eps(eps_) {
        if (channels == 0) {
            running_mean = Tensor();
            running_var = Tensor();
        }
    }
};

namespace detail {
// Views x as [N, C, S] with S the collapsed spatial extent (1 for [N,C]).
inline void bn_dims(const Tensor& x, std::size_t& n, std::size_t& c, std::size_t& s) {
    if (x.rank() == 2) {
        n = x.dim(0), c = x.dim(1), s = 1;
    } else if (x.rank() == 4) {
        n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
    } else {
        throw ShapeError("batchnorm: need [N,C] or [N,C,H,W], got " + shape_str(x.shape()));
    }
}
}  // namespace detail

// Train mode normalizes with batch statistics (biased variance) and updates
// the running stats; eval mode is a fixed affine map from the running stats.
inline Var batchnorm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
                     bool training) {
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    std::size_t n, c, s;
    detail::bn_dims(x.value(), n, c, s);
    if (gamma.value().size() != c || beta.value().size() != c)
        throw ShapeError("batchnorm: channel dim " + std::to_string(c) + " vs gamma " +
                         std::to_string(gamma.value().size()) + ", beta " +
                         std::to_string(beta.value().size()));
    if (state.running_mean.size() != c) {
        state.running_mean = Tensor({c}, 0);
        state.running_var = Tensor({c}, 1);
    }

    const std::size_t m = n * s;
    Tensor mean_t({c}, 0), var_t({c}, 0);
    const Tensor& xv = x.value();
    auto idx = [c, s](std::size_t in, std::size_t ic, std::size_t is) {
        return (in * c + ic) * s + is;
    };

    if (training) {
        for (std::size_t ic = 0; ic < c; ++ic) {
            real acc = 0;
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t is = 0; is < s; ++is) acc += xv[idx(in, ic, is)];
            mean_t[ic] = acc / static_cast<real>(m);
        }
        for (std::size_t ic = 0; ic < c; ++ic) {
            real acc = 0;
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t is = 0; is < s; ++is) {
                    const real d = xv[idx(in, ic, is)] - mean_t[ic];
                    acc += d * d;
                }
            var_t[ic] = acc / static_cast<real>(m);
        }
        for (std::size_t ic = 0; ic < c; ++ic) {
            state.running_mean[ic] =
                state.momentum * state.running_mean[ic] + (real(1) - state.momentum) * mean_t[ic];
            state.running_var[ic] =
                state.momentum * state.running_var[ic] + (real(1) - state.momentum) * var_t[ic];
        }
    } else {
        mean_t = state.running_mean;
        var_t = state.running_var;
    }

    auto xhat = std::make_shared<Tensor>(xv.shape());
    Tensor out(xv.shape());
    std::vector<real> inv_std(c);
    for (std::size_t ic = 0; ic < c; ++ic) inv_std[ic] = real(1) / std::sqrt(var_t[ic] + state.eps);
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t is = 0; is < s; ++is) {
                const std::size_t i = idx(in, ic, is);
                (*xhat)[i] = (xv[i] - mean_t[ic]) * inv_std[ic];
                out[i] = gamma.value()[ic] * (*xhat)[i] + beta.value()[ic];
            }

    bool rg = px->requires_grad || pg->requires_grad || pb->requires_grad;
    return Var::make(
        std::move(out), "batchnorm", rg, {px, pg, pb},
        [px, pg, pb, xhat, inv_std, n, c, s, m, training](Node& nd) {
            const Tensor& dy = nd.grad;
            auto idx = [c, s](std::size_t in, std::size_t ic, std::size_t is) {
                return (in * c + ic) * s + is;
            };
            std::vector<real> sum_dy(c, 0), sum_dy_xhat(c, 0);
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t ic = 0; ic < c; ++ic)
                    for (std::size_t is = 0; is < s; ++is) {
                        const std::size_t i = idx(in, ic, is);
                        sum_dy[ic] += dy[i];
                        sum_dy_xhat[ic] += dy[i] * (*xhat)[i];
                    }
            if (pg->requires_grad) {
                Tensor& g = pg->ensure_grad();
                for (std::size_t ic = 0; ic < c; ++ic) g[ic] += sum_dy_xhat[ic];
            }
            if (pb->requires_grad) {
                Tensor& g = pb->ensure_grad();
                for (std::size_t ic = 0; ic < c; ++ic) g[ic] += sum_dy[ic];
            }
            if (px->requires_grad) {
                Tensor& g = px->ensure_grad();
                const real inv_m = real(1) / static_cast<real>(m);
                for (std::size_t in = 0; in < n; ++in)
                    for (std::size_t ic = 0; ic < c; ++ic) {
                        const real k = pg->value[ic] * inv_std[ic];
                        for (std::size_t is = 0; is < s; ++is) {
                            const std::size_t i = idx(in, ic, is);
                            if (training)
                                g[i] += k * (dy[i] - inv_m * sum_dy[ic] -
                                             (*xhat)[i] * inv_m * sum_dy_xhat[ic]);
                            else
                                g[i] += k * dy[i];
                        }
                    }
            }
        });
}

// ---- pooling ----

inline Var global_avg_pool(const Var& x) {
    auto px = x.node();
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("global_avg_pool: need [N,C,H,W]");
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out({n, c}, 0);
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic) {
            real acc = 0;
            const real* base = xv.data() + (in * c + ic) * hw;
            for (std::size_t i = 0; i < hw; ++i) acc += base[i];
            out(in, ic) = acc / static_cast<real>(hw);
        }
    return Var::make(std::move(out), "global_avg_pool", px->requires_grad, {px},
                     [px, n, c, hw](Node& nd) {
                         if (!px->requires_grad) return;
                         Tensor& g = px->ensure_grad();
                         const real inv = real(1) / static_cast<real>(hw);
                         for (std::size_t in = 0; in < n; ++in)
                             for (std::size_t ic = 0; ic < c; ++ic) {
                                 const real u = nd.grad(in, ic) * inv;
                                 real* base = g.data() + (in * c + ic) * hw;
                                 for (std::size_t i = 0; i < hw; ++i) base[i] += u;
                             }
                     });
}

// Non-overlapping average pooling (kernel == stride), no padding.
inline Var avg_pool2d(const Var& x, std::size_t k) {
    auto px = x.node();
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("avg_pool2d: need [N,C,H,W]");
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (k == 0 || h % k || w % k)
        throw ShapeError("avg_pool2d: kernel " + std::to_string(k) + " does not tile " +
                         shape_str(xv.shape()));
    const std::size_t oh = h / k, ow = w / k;
    Tensor out({n, c, oh, ow}, 0);
    const real inv = real(1) / static_cast<real>(k * k);
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    real acc = 0;
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx)
                            acc += xv(in, ic, oy * k + dy, ox * k + dx);
                    out(in, ic, oy, ox) = acc * inv;
                }
    return Var::make(std::move(out), "avg_pool2d", px->requires_grad, {px},
                     [px, n, c, oh, ow, k, inv](Node& nd) {
                         if (!px->requires_grad) return;
                         Tensor& g = px->ensure_grad();
                         for (std::size_t in = 0; in < n; ++in)
                             for (std::size_t ic = 0; ic < c; ++ic)
                                 for (std::size_t oy = 0; oy < oh; ++oy)
                                     for (std::size_t ox = 0; ox < ow; ++ox) {
                                         const real u = nd.grad(in, ic, oy, ox) * inv;
                                         for (std::size_t dy = 0; dy < k; ++dy)
                                             for (std::size_t dx = 0; dx < k; ++dx)
                                                 g(in, ic, oy * k + dy, ox * k + dx) += u;
                                     }
                     });
}

// ---- losses ----

inline Tensor softmax_rows(const Tensor& logits) {
    Tensor p = logits;
    const std::size_t n = p.dim(0), k = p.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        real mx = p(i, 0);
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, p(i, j));
        real z = 0;
        for (std::size_t j = 0; j < k; ++j) {
            p(i, j) = std::exp(p(i, j) - mx);
            z += p(i, j);
        }
        for (std::size_t j = 0; j < k; ++j) p(i, j) /= z;
    }
    return p;
}

// Mean cross-entropy over the batch against integer labels.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    auto pl = logits.node();
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || lv.dim(0) != labels.size())
        throw ShapeError("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::size_t n = lv.dim(0), k = lv.dim(1);
    auto probs = std::make_shared<Tensor>(softmax_rows(lv));
    real loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw ShapeError("label " + std::to_string(y) + " out of range for " +
                             std::to_string(k) + " classes");
        loss -= std::log(std::max((*probs)(i, static_cast<std::size_t>(y)), real(1e-300)));
    }
    loss /= static_cast<real>(n);
    return Var::make(Tensor::scalar(loss), "softmax_cross_entropy", pl->requires_grad, {pl},
                     [pl, probs, labels, n, k](Node& nd) {
                         if (!pl->requires_grad) return;
                         Tensor& g = pl->ensure_grad();
                         const real u = nd.grad[0] / static_cast<real>(n);
                         for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < k; ++j) {
                                 real d = (*probs)(i, j);
                                 if (static_cast<std::size_t>(labels[i]) == j) d -= real(1);
                                 g(i, j) += u * d;
                             }
                     });
}

inline std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return correct;
}

}  // namespace qnn
