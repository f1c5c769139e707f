#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "qnn/embed.hpp"
#include "qnn/rng.hpp"

using namespace qnn;
using namespace qnn::embed;

namespace {

template <typename F>
Tensor finite_diff(Tensor x, F f, double eps = 1e-5) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const real x0 = x[i];
        x[i] = x0 + static_cast<real>(eps);
        const double fp = f(x);
        x[i] = x0 - static_cast<real>(eps);
        const double fm = f(x);
        x[i] = x0;
        g[i] = static_cast<real>((fp - fm) / (2 * eps));
    }
    return g;
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(double(a[i]) - double(b[i]));
        worst = std::max(worst, d / std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1e-3}));
    }
    return worst;
}

// reconstruction cost of one row of B against one row of Z, masked
double row_cost(const Tensor& Z, const Tensor& M, const std::vector<int>& brow, std::size_t i) {
    double acc = 0;
    for (std::size_t j = 0; j < M.size(); ++j) {
        const double d = double(Z(i, j)) - double(M[j]) * brow[j];
        acc += 0.5 * d * d;
    }
    return acc;
}

}  // namespace

TEST_CASE("solve_B: identity projection gives signs; sign(0) is +1") {
    Tensor Y = Tensor::from({1, 2}, {2, -3});
    Tensor P = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor B = solve_B(Y, P);
    CHECK(B(0, 0) == 1);
    CHECK(B(0, 1) == -1);

    Tensor Y0 = Tensor::from({1, 1}, {0});
    Tensor P0 = Tensor::from({1, 1}, {1});
    CHECK(solve_B(Y0, P0)(0, 0) == 1);
}

TEST_CASE("solve_B is the exhaustive per-row argmin (enumeration oracle)") {
    Rng rng(5);
    const std::size_t s = 8, n = 4, m = 6;
    Tensor Y = Tensor::randn({s, n}, rng);
    Tensor P = Tensor::randn({m, n}, rng);
    Tensor M({m});
    for (std::size_t j = 0; j < m; ++j) M[j] = static_cast<real>(rng.uniform(0.2, 1.0));
    Tensor Z = matmul(Y, transpose(P));
    Tensor B = solve_B(Y, P);

    for (std::size_t i = 0; i < s; ++i) {
        double best = 1e300;
        for (unsigned mask = 0; mask < (1u << m); ++mask) {
            std::vector<int> row(m);
            for (std::size_t j = 0; j < m; ++j) row[j] = (mask >> j) & 1u ? 1 : -1;
            best = std::min(best, row_cost(Z, M, row, i));
        }
        std::vector<int> mine(m);
        for (std::size_t j = 0; j < m; ++j) mine[j] = B(i, j) > 0 ? 1 : -1;
        CHECK(row_cost(Z, M, mine, i) <= best + 1e-12);
    }
}

TEST_CASE("mask loss: all-ones mask with beta=0 reduces to the plain binarization objective") {
    Rng rng(7);
    Tensor Y = Tensor::randn({6, 3}, rng);
    Tensor P = Tensor::randn({5, 3}, rng);
    Tensor B = solve_B(Y, P);
    Tensor M({5}, 1);
    MaskLoss ml = mask_loss_grad(Y, P, B, M, 0);
    Tensor R = matmul(Y, transpose(P)) - B;
    CHECK(double(ml.loss) == doctest::Approx(0.5 * double(frobenius_sq(R))).epsilon(1e-12));
}

TEST_CASE("mask loss: a dead column is driven to zero by any positive beta") {
    // Z column 0 is identically zero, so only the penalty acts on M_0
    Tensor Y = Tensor::from({3, 1}, {1, -2, 0.5});
    Tensor P = Tensor::from({2, 1}, {0, 1});  // column 0 of Z = Y*P^T is zero
    Tensor B = solve_B(Y, P);                 // column 1 aligned with its Z column
    Tensor M = Tensor::from({2}, {0.8, 0.9});
    for (int step = 0; step < 200; ++step) {
        MaskLoss ml = mask_loss_grad(Y, P, B, M, 0.1);
        for (std::size_t j = 0; j < 2; ++j)
            M[j] = std::min(std::max(M[j] - real(0.05) * ml.grad[j], real(0)), real(1));
    }
    CHECK(M[0] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(M[1] > 0.5);
}

TEST_CASE("mask gradient matches finite differences") {
    Rng rng(11);
    Tensor Y = Tensor::randn({6, 5}, rng);
    Tensor P = Tensor::randn({5, 5}, rng);
    Tensor B = solve_B(Y, P);
    Tensor M({5});
    for (std::size_t j = 0; j < 5; ++j) M[j] = static_cast<real>(rng.uniform(0.1, 0.9));
    MaskLoss ml = mask_loss_grad(Y, P, B, M, 0.3);
    Tensor fd = finite_diff(M, [&](const Tensor& Mt) {
        return double(mask_loss_grad(Y, P, B, Mt, 0.3).loss);
    });
    CHECK(max_rel_err(ml.grad, fd) <= 1e-6);
}

TEST_CASE("projection loss: orthonormal P has zero penalty term") {
    Rng rng(13);
    Tensor P = random_orthonormal(7, 4, rng);
    Tensor G = matmul(transpose(P), P);
    for (std::size_t i = 0; i < 4; ++i) G(i, i) -= 1;
    CHECK(frobenius_sq(G) <= 1e-20);

    Tensor Y = Tensor::randn({6, 4}, rng);
    Tensor B = solve_B(Y, P);
    Tensor M({7}, 1);
    ProjectionLoss with = projection_loss_grad(Y, B, M, P, 5.0);
    ProjectionLoss without = projection_loss_grad(Y, B, M, P, 0.0);
    CHECK(double(with.loss) == doctest::Approx(double(without.loss)).epsilon(1e-10));
}

TEST_CASE("projection gradient matches finite differences") {
    Rng rng(17);
    Tensor Y = Tensor::randn({6, 5}, rng);
    Tensor P = Tensor::randn({7, 5}, rng);
    Tensor B = solve_B(Y, P);
    Tensor M({7});
    for (std::size_t j = 0; j < 7; ++j) M[j] = static_cast<real>(rng.uniform(0.1, 0.9));
    ProjectionLoss pl = projection_loss_grad(Y, B, M, P, 0.7);
    Tensor fd = finite_diff(P, [&](const Tensor& Pt) {
        return double(projection_loss_grad(Y, B, M, Pt, 0.7).loss);
    });
    CHECK(max_rel_err(pl.grad, fd) <= 1e-6);
}

TEST_CASE("large gamma drives a square P toward orthogonality from a random start") {
    Rng rng(19);
    const real gamma = real(1e5);
    Tensor Y = Tensor::randn({20, 5}, rng);
    Tensor P = Tensor::randn({5, 5}, rng, 0.5);
    Tensor B = solve_B(Y, P);
    Tensor M({5}, 1);
    for (int it = 0; it < 20000; ++it) {
        ProjectionLoss pl = projection_loss_grad(Y, B, M, P, gamma);
        axpy(P, real(-1e-6), pl.grad);
    }
    Tensor G = matmul(transpose(P), P);
    for (std::size_t i = 0; i < 5; ++i) G(i, i) -= 1;
    CHECK(std::sqrt(double(frobenius_sq(G))) <= 1e-3);
}

TEST_CASE("alternate: +-1 features with identity-like start converge immediately") {
    Rng rng(23);
    const std::size_t s = 12, n = 4;
    Tensor Y({s, n});
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = rng.coin() ? 1 : -1;
    EmbedConfig cfg;
    cfg.m = n;
    cfg.beta = 0;
    cfg.gamma = 1.0;
    cfg.rounds = 1;
    cfg.m_epochs = 0;
    cfg.p_epochs = 0;
    Tensor I({n, n}, 0);
    for (std::size_t i = 0; i < n; ++i) I(i, i) = 1;
    cfg.p_init = I;
    EmbedState st = alternate(Y, cfg);
    // B = sign(Y) = Y, mask stays exactly 1, reconstruction term is zero
    CHECK(st.objective_trace.back() == doctest::Approx(0.0).epsilon(1e-12));
    for (std::size_t j = 0; j < n; ++j) CHECK(st.M[j] == 1.0);
}

TEST_CASE("B-step never increases the objective") {
    Rng rng(29);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor Y = Tensor::randn({10, 4}, rng);
        Tensor P = Tensor::randn({8, 4}, rng);
        Tensor M({8});
        for (std::size_t j = 0; j < 8; ++j) M[j] = static_cast<real>(rng.uniform());
        Tensor B_old({10, 8});
        for (std::size_t i = 0; i < B_old.size(); ++i) B_old[i] = rng.coin() ? 1 : -1;
        const double before = objective(Y, P, B_old, M, 0.5, 0.01);
        Tensor B_new = solve_B(Y, P);
        const double after = objective(Y, P, B_new, M, 0.5, 0.01);
        CHECK(after <= before + 1e-8);
    }
}

TEST_CASE("after solve_B no single sign flip improves the objective") {
    Rng rng(31);
    Tensor Y = Tensor::randn({6, 3}, rng);
    Tensor P = Tensor::randn({5, 3}, rng);
    Tensor M({5});
    for (std::size_t j = 0; j < 5; ++j) M[j] = static_cast<real>(rng.uniform(0.2, 1.0));
    Tensor B = solve_B(Y, P);
    const double base = objective(Y, P, B, M, 0.5, 0.01);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            Tensor flipped = B;
            flipped(i, j) = -flipped(i, j);
            CHECK(objective(Y, P, flipped, M, 0.5, 0.01) >= base - 1e-8);
        }
}

TEST_CASE("objective invariant under simultaneous column permutation") {
    Rng rng(37);
    const std::size_t s = 7, n = 3, m = 5;
    Tensor Y = Tensor::randn({s, n}, rng);
    Tensor P = Tensor::randn({m, n}, rng);
    Tensor B = solve_B(Y, P);
    Tensor M({m});
    for (std::size_t j = 0; j < m; ++j) M[j] = static_cast<real>(rng.uniform());
    const double base = objective(Y, P, B, M, 0.9, 0.05);

    std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
    Tensor P2({m, n}), B2({s, m}), M2({m});
    for (std::size_t j = 0; j < m; ++j) {
        M2[j] = M[perm[j]];
        for (std::size_t k = 0; k < n; ++k) P2(j, k) = P(perm[j], k);
        for (std::size_t i = 0; i < s; ++i) B2(i, j) = B(i, perm[j]);
    }
    CHECK(objective(Y, P2, B2, M2, 0.9, 0.05) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("distance preservation: exact for orthonormal P, detects scaling") {
    Rng rng(41);
    Tensor Y = Tensor::randn({20, 6}, rng);
    Tensor P = random_orthonormal(12, 6, rng);
    CHECK(double(distance_preservation_check(Y, P)) <= 1e-10);

    Tensor P2 = P * real(2);
    const double err = distance_preservation_check(Y, P2);
    CHECK(err >= 0.5);  // distances double, relative error about 1
}

TEST_CASE("kept-channel count is non-increasing in beta on a toy instance") {
    Rng rng(43);
    Tensor Y = Tensor::randn({40, 6}, rng);
    std::vector<double> betas = {1e-3, 1e-1, 1.0};
    std::vector<std::size_t> kept;
    for (double b : betas) {
        EmbedConfig cfg;
        cfg.m = 12;
        cfg.beta = static_cast<real>(b);
        cfg.gamma = 1.0;
        cfg.rounds = 3;
        cfg.m_epochs = 40;
        cfg.p_epochs = 10;
        cfg.seed = 1;
        EmbedState st = alternate(Y, cfg);
        kept.push_back(st.kept_count());
    }
    CHECK(kept[0] >= kept[1]);
    CHECK(kept[1] >= kept[2]);
}

TEST_CASE("divergent solver aborts with diagnostics") {
    Rng rng(47);
    Tensor Y = Tensor::randn({10, 3}, rng, 10.0);
    EmbedConfig cfg;
    cfg.m = 6;
    cfg.gamma = 1000.0;
    cfg.lr_p = 10.0;  // absurd step size forces blow-up
    cfg.rounds = 5;
    cfg.m_epochs = 0;
    cfg.p_epochs = 5;
    CHECK_THROWS_AS(alternate(Y, cfg), NumericError);
}
