#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "qnn/rng.hpp"
#include "qnn/tensor.hpp"

namespace qnn::embed {

// Binary feature embedding: find projection P (m x n), codes B (S x m,
// +-1) and column mask M (length m, relaxed to [0,1] while optimizing) that
// minimize
//   J = 1/2 ||Y P^T - M.B||_F^2 + gamma/2 ||P^T P - I||_F^2 + beta ||M||_1
// where M.B scales column j of B by M_j. Alternating rounds: closed-form B,
// projected SGD on M, SGD on P. The mask reads out as {0,1} at threshold 0.5.
//
// The solver's SGD steps average the reconstruction term per matrix entry
// (divide by S*m). Summed as written, S*m reconstruction entries overwhelm
// any O(1) gamma and the relaxed mask lets P and M shrink jointly toward
// zero; per-entry averaging keeps gamma and beta comparable across problem
// sizes, so gamma = 1 genuinely holds P near orthogonal. The M step applies
// the same objective rescaled by m (its minimizer per column is then
// mean_i |Z_ij| - beta, independent of dimensions).

struct EmbedConfig {
    std::size_t m = 0;        // embedding width; 0 means 8*n
    real gamma = real(1.0);   // orthogonality weight
    real beta = real(1e-3);   // mask sparsity weight
    std::size_t rounds = 8;
    std::size_t m_epochs = 20;
    std::size_t p_epochs = 40;
    real lr_m = real(0.3);
    real lr_p = real(0.05);
    std::size_t batch = 0;    // minibatch rows; 0 means full batch
    std::uint64_t seed = 1;
    Tensor p_init;            // optional starting projection; empty = random orthonormal
};

struct EmbedState {
    Tensor Y;  // samples x n
    Tensor P;  // m x n
    Tensor B;  // samples x m, entries +-1
    Tensor M;  // length m, relaxed values in [0,1]
    real gamma = 0, beta = 0;
    std::size_t m = 0, n = 0;
    std::vector<real> objective_trace;  // full-dataset objective after each round

    std::vector<int> mask_readout() const {
        std::vector<int> keep(M.size());
        for (std::size_t j = 0; j < M.size(); ++j) keep[j] = M[j] >= real(0.5) ? 1 : 0;
        return keep;
    }

    std::size_t kept_count() const {
        std::size_t c = 0;
        for (std::size_t j = 0; j < M.size(); ++j)
            if (M[j] >= real(0.5)) ++c;
        return c;
    }
};

inline real sign_pm1(real v) { return v < real(0) ? real(-1) : real(1); }

// B = Sign(Y P^T); elementwise independent, the exact argmin of the
// reconstruction term for fixed P and M >= 0.
inline Tensor solve_B(const Tensor& Y, const Tensor& P) {
    Tensor Z = matmul(Y, transpose(P));
    for (std::size_t i = 0; i < Z.size(); ++i) Z[i] = sign_pm1(Z[i]);
    return Z;
}

// M.B: scale column j of B by M_j.
inline Tensor mask_scale(const Tensor& B, const Tensor& M) {
    Tensor out = B;
    const std::size_t s = B.dim(0), m = B.dim(1);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < m; ++j) out(i, j) *= M[j];
    return out;
}

inline real objective(const Tensor& Y, const Tensor& P, const Tensor& B, const Tensor& M,
                      real gamma, real beta) {
    Tensor R = matmul(Y, transpose(P)) - mask_scale(B, M);
    real obj = real(0.5) * frobenius_sq(R);
    Tensor G = matmul(transpose(P), P);
    for (std::size_t i = 0; i < G.dim(0); ++i) G(i, i) -= 1;
    obj += real(0.5) * gamma * frobenius_sq(G);
    for (std::size_t j = 0; j < M.size(); ++j) obj += beta * std::abs(M[j]);
    return obj;
}

// What the alternating solver actually descends: reconstruction averaged per
// entry, penalties as-is (the L1 weight applies per column).
inline real solver_objective(const Tensor& Y, const Tensor& P, const Tensor& B, const Tensor& M,
                             real gamma, real beta) {
    const real sm = static_cast<real>(Y.dim(0)) * static_cast<real>(M.size());
    Tensor R = matmul(Y, transpose(P)) - mask_scale(B, M);
    real obj = real(0.5) * frobenius_sq(R) / sm;
    Tensor G = matmul(transpose(P), P);
    for (std::size_t i = 0; i < G.dim(0); ++i) G(i, i) -= 1;
    obj += real(0.5) * gamma * frobenius_sq(G);
    for (std::size_t j = 0; j < M.size(); ++j)
        obj += beta * std::abs(M[j]) / static_cast<real>(M.size());
    return obj;
}

// L(M) = 1/2 ||Y P^T - M.B||^2 + beta ||M||_1, with the L1 subgradient
// taken as 0 at M_j == 0 (M lives in [0,1], so |M_j| = M_j).
struct MaskLoss {
    real loss;
    Tensor grad;  // dL/dM, length m
};

inline MaskLoss mask_loss_grad(const Tensor& Y, const Tensor& P, const Tensor& B, const Tensor& M,
                               real beta) {
    Tensor Z = matmul(Y, transpose(P));
    const std::size_t s = Z.dim(0), m = Z.dim(1);
    MaskLoss out{0, Tensor({m}, 0)};
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const real r = Z(i, j) - M[j] * B(i, j);
            out.loss += real(0.5) * r * r;
            out.grad[j] -= r * B(i, j);
        }
    for (std::size_t j = 0; j < m; ++j) {
        out.loss += beta * std::abs(M[j]);
        if (M[j] > 0)
            out.grad[j] += beta;
        else if (M[j] < 0)
            out.grad[j] -= beta;
    }
    return out;
}

// L(P) = 1/2 ||Y P^T - M.B||^2 + gamma/2 ||P^T P - I||^2
//   dL/dP = R^T Y + 2 gamma P (P^T P - I),   R = Y P^T - M.B
struct ProjectionLoss {
    real loss;
    Tensor grad;  // dL/dP, m x n
};

inline ProjectionLoss projection_loss_grad(const Tensor& Y, const Tensor& B, const Tensor& M,
                                           const Tensor& P, real gamma) {
    Tensor R = matmul(Y, transpose(P)) - mask_scale(B, M);
    ProjectionLoss out{0, Tensor()};
    out.loss = real(0.5) * frobenius_sq(R);
    Tensor G = matmul(transpose(P), P);
    for (std::size_t i = 0; i < G.dim(0); ++i) G(i, i) -= 1;
    out.loss += real(0.5) * gamma * frobenius_sq(G);
    out.grad = matmul(transpose(R), Y);
    Tensor PG = matmul(P, G);
    axpy(out.grad, 2 * gamma, PG);
    return out;
}

// Random matrix with orthonormal columns (modified Gram-Schmidt on a
// Gaussian draw); satisfies P^T P = I exactly up to float error when m >= n.
inline Tensor random_orthonormal(std::size_t m, std::size_t n, Rng& rng) {
    Tensor P({m, n});
    for (std::size_t i = 0; i < P.size(); ++i) P[i] = static_cast<real>(rng.normal());
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t prev = 0; prev < j && prev < m; ++prev) {
            real dot = 0;
            for (std::size_t i = 0; i < m; ++i) dot += P(i, j) * P(i, prev);
            for (std::size_t i = 0; i < m; ++i) P(i, j) -= dot * P(i, prev);
        }
        real norm = 0;
        for (std::size_t i = 0; i < m; ++i) norm += P(i, j) * P(i, j);
        norm = std::sqrt(norm);
        if (norm > 0)
            for (std::size_t i = 0; i < m; ++i) P(i, j) /= norm;
    }
    return P;
}

namespace detail {

inline Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
    const std::size_t c = t.dim(1);
    Tensor out({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) out(i, j) = t(rows[i], j);
    return out;
}

}  // namespace detail

inline EmbedState alternate(const Tensor& Y, const EmbedConfig& cfg) {
    if (Y.rank() != 2) throw ShapeError("alternate: Y must be samples x n");
    if (cfg.rounds < 1) throw ConfigError("alternate: rounds >= 1");
    const std::size_t s = Y.dim(0), n = Y.dim(1);
    const std::size_t m = cfg.m ? cfg.m : 8 * n;
    if (m < 1) throw ConfigError("alternate: m >= 1");

    Rng rng(derive_seed(cfg.seed, "embed"));
    EmbedState st;
    st.Y = Y;
    st.gamma = cfg.gamma;
    st.beta = cfg.beta;
    st.m = m;
    st.n = n;
    if (!cfg.p_init.empty()) {
        if (cfg.p_init.shape() != Shape{m, n})
            throw ShapeError("alternate: p_init must be " + std::to_string(m) + "x" +
                             std::to_string(n));
        st.P = cfg.p_init;
    } else {
        st.P = random_orthonormal(m, n, rng);
    }
    st.M = Tensor({m}, 1);
    st.B = solve_B(Y, st.P);

    const std::size_t batch = cfg.batch == 0 || cfg.batch > s ? s : cfg.batch;
    const real initial = solver_objective(Y, st.P, st.B, st.M, cfg.gamma, cfg.beta);

    std::vector<std::size_t> order(s);
    for (std::size_t i = 0; i < s; ++i) order[i] = i;

    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        st.B = solve_B(Y, st.P);

        // M-step: projected SGD onto [0,1] on the m-rescaled objective, so
        // the per-column target is mean_i |Z_ij| - beta.
        for (std::size_t ep = 0; ep < cfg.m_epochs; ++ep) {
            for (std::size_t i = s - 1; i > 0; --i)
                std::swap(order[i], order[rng.below(i + 1)]);
            for (std::size_t start = 0; start < s; start += batch) {
                const std::size_t stop = std::min(start + batch, s);
                std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                              order.begin() + static_cast<std::ptrdiff_t>(stop));
                Tensor Yb = detail::take_rows(Y, rows);
                Tensor Bb = detail::take_rows(st.B, rows);
                MaskLoss ml = mask_loss_grad(Yb, st.P, Bb, st.M, 0);
                const real inv_b = real(1) / static_cast<real>(rows.size());
                for (std::size_t j = 0; j < m; ++j) {
                    real g = ml.grad[j] * inv_b;
                    if (st.M[j] > 0) g += cfg.beta;  // subgradient at 0 is 0
                    st.M[j] = std::min(std::max(st.M[j] - cfg.lr_m * g, real(0)), real(1));
                }
            }
        }

        // P-step: minibatch SGD on the per-entry-averaged objective.
        for (std::size_t ep = 0; ep < cfg.p_epochs; ++ep) {
            for (std::size_t i = s - 1; i > 0; --i)
                std::swap(order[i], order[rng.below(i + 1)]);
            for (std::size_t start = 0; start < s; start += batch) {
                const std::size_t stop = std::min(start + batch, s);
                std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                              order.begin() + static_cast<std::ptrdiff_t>(stop));
                Tensor Yb = detail::take_rows(Y, rows);
                Tensor Bb = detail::take_rows(st.B, rows);
                ProjectionLoss recon = projection_loss_grad(Yb, Bb, st.M, st.P, 0);
                const real inv_bm =
                    real(1) / (static_cast<real>(rows.size()) * static_cast<real>(m));
                Tensor G = matmul(transpose(st.P), st.P);
                for (std::size_t i = 0; i < n; ++i) G(i, i) -= 1;
                Tensor step = matmul(st.P, G);
                for (std::size_t i = 0; i < step.size(); ++i)
                    step[i] = 2 * cfg.gamma * step[i] + recon.grad[i] * inv_bm;
                axpy(st.P, -cfg.lr_p, step);
            }
        }

        const real obj = solver_objective(Y, st.P, st.B, st.M, cfg.gamma, cfg.beta);
        st.objective_trace.push_back(obj);
        if (!std::isfinite(obj) || obj > 10 * initial)
            throw NumericError("embed solver diverged at round " + std::to_string(round) +
                               ": objective " + std::to_string(double(obj)) + " vs initial " +
                               std::to_string(double(initial)));
    }
    return st;
}

// Max over pairs of | ||Yi P^T - Yj P^T|| - ||Yi - Yj|| | / (||Yi - Yj|| + eps).
// Zero (to float precision) for exactly orthonormal P.
inline real distance_preservation_check(const Tensor& Y, const Tensor& P, real eps = real(1e-12)) {
    Tensor Z = matmul(Y, transpose(P));
    const std::size_t s = Y.dim(0), n = Y.dim(1), m = Z.dim(1);
    real worst = 0;
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = i + 1; j < s; ++j) {
            real d2 = 0, dz2 = 0;
            for (std::size_t k = 0; k < n; ++k) {
                const real d = Y(i, k) - Y(j, k);
                d2 += d * d;
            }
            for (std::size_t k = 0; k < m; ++k) {
                const real d = Z(i, k) - Z(j, k);
                dz2 += d * d;
            }
            const real dy = std::sqrt(d2);
            worst = std::max(worst, std::abs(std::sqrt(dz2) - dy) / (dy + eps));
        }
    return worst;
}

// ---- feature matrix file: u64 rows, u64 cols, float64 row-major body ----

inline void save_features(const std::string& path, const Tensor& Y) {
    if (Y.rank() != 2) throw ShapeError("save_features: need rows x cols");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    auto put_u64 = [&](std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os.write(reinterpret_cast<const char*>(b), 8);
    };
    put_u64(Y.dim(0));
    put_u64(Y.dim(1));
    for (std::size_t i = 0; i < Y.size(); ++i) {
        const double d = static_cast<double>(Y[i]);
        std::uint64_t u;
        std::memcpy(&u, &d, 8);
        put_u64(u);
    }
}

inline Tensor load_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path);
    std::size_t offset = 0;
    auto get_u64 = [&](const char* what) {
        unsigned char b[8];
        is.read(reinterpret_cast<char*>(b), 8);
        if (is.gcount() != 8)
            throw ParseError(std::string("truncated feature matrix ") + what, offset);
        offset += 8;
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
        return v;
    };
    const std::uint64_t rows = get_u64("rows"), cols = get_u64("cols");
    Tensor Y({static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)});
    for (std::size_t i = 0; i < Y.size(); ++i) {
        const std::uint64_t u = get_u64("body");
        double d;
        std::memcpy(&d, &u, 8);
        Y[i] = static_cast<real>(d);
    }
    return Y;
}

// EmbedState sidecar: magic "QEM1", u64 m, u64 n, f64 gamma, f64 beta, then
// P (m*n f64), M (m f64), and the {0,1} readout (m bytes).
inline void save_state(const std::string& path, const EmbedState& st) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    os.write("QEM1", 4);
    auto put_u64 = [&](std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os.write(reinterpret_cast<const char*>(b), 8);
    };
    auto put_f64 = [&](double d) {
        std::uint64_t u;
        std::memcpy(&u, &d, 8);
        put_u64(u);
    };
    put_u64(st.m);
    put_u64(st.n);
    put_f64(static_cast<double>(st.gamma));
    put_f64(static_cast<double>(st.beta));
    for (std::size_t i = 0; i < st.P.size(); ++i) put_f64(static_cast<double>(st.P[i]));
    for (std::size_t j = 0; j < st.M.size(); ++j) put_f64(static_cast<double>(st.M[j]));
    for (int k : st.mask_readout()) os.put(static_cast<char>(k));
}

}  // namespace qnn::embed
