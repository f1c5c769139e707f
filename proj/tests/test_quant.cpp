#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "qnn/im2col.hpp"
#include "qnn/nn_ops.hpp"
#include "qnn/quant.hpp"
#include "qnn/rng.hpp"

using namespace qnn;

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

// Scalar-by-scalar reimplementation of the three-step weight quantization,
// independent of the tensor version.
double scalar_quant_w(double w, double t_max, int n) {
    const double scale = std::pow(2.0, n) - 1.0;
    const double w1 = std::tanh(w) / (2.0 * t_max) + 0.5;
    const double w2 = std::round(w1 * scale) / scale;
    return 2.0 * w2 - 1.0;
}

// 1-d golden-section search for argmin_a ||W - a*sign(W)||^2.
double golden_alpha(const Tensor& w) {
    auto cost = [&](double a) {
        double acc = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double s = w[i] < 0 ? -1.0 : 1.0;
            const double d = double(w[i]) - a * s;
            acc += d * d;
        }
        return acc;
    };
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = 0.0, hi = 10.0;
    double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
    for (int it = 0; it < 200; ++it) {
        if (cost(x1) < cost(x2)) {
            hi = x2;
            x2 = x1;
            x1 = hi - phi * (hi - lo);
        } else {
            lo = x1;
            x1 = x2;
            x2 = lo + phi * (hi - lo);
        }
    }
    return (lo + hi) / 2;
}

bool on_grid(double v, int n, bool weight) {
    const double scale = std::pow(2.0, n) - 1.0;
    const double t = weight ? (v + 1.0) / 2.0 * scale : v * scale;
    return std::abs(t - std::round(t)) < 1e-12 * scale && v >= (weight ? -1.0 : 0.0) - 1e-12 &&
           v <= 1.0 + 1e-12;
}

}  // namespace

TEST_CASE("binarize: whole-tensor alpha is mean|W|, codes are signs") {
    Tensor w = Tensor::from({4}, {0.5, -0.3, 0.2, -0.4});
    auto r = quant::binarize_weights(w, quant::Granularity::WholeTensor);
    CHECK(r.alpha.size() == 1);
    CHECK(r.alpha[0] == doctest::Approx(0.35).epsilon(1e-15));
    CHECK(r.codes[0] == 1);
    CHECK(r.codes[1] == -1);
    CHECK(r.codes[2] == 1);
    CHECK(r.codes[3] == -1);
}

TEST_CASE("binarize: all-zero weights give alpha 0; constant weights reconstruct exactly") {
    auto rz = quant::binarize_weights(Tensor({5}, 0), quant::Granularity::WholeTensor);
    CHECK(rz.alpha[0] == 0);
    for (std::size_t i = 0; i < 5; ++i) CHECK(rz.alpha[0] * rz.codes[i] == 0);

    for (double c : {0.7, -0.7}) {
        auto r = quant::binarize_weights(Tensor({6}, static_cast<real>(c)),
                                         quant::Granularity::WholeTensor);
        CHECK(r.alpha[0] == doctest::Approx(std::abs(c)).epsilon(1e-15));
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(r.alpha[0] * r.codes[i] == doctest::Approx(c).epsilon(1e-15));
    }
}

TEST_CASE("binarize: per-filter granularity computes one alpha per output filter") {
    Tensor w({2, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) w[i] = 0.5;
    for (std::size_t i = 4; i < 8; ++i) w[i] = -2.0;
    auto r = quant::binarize_weights(w, quant::Granularity::PerFilter);
    REQUIRE(r.alpha.size() == 2);
    CHECK(r.alpha[0] == doctest::Approx(0.5));
    CHECK(r.alpha[1] == doctest::Approx(2.0));
}

TEST_CASE("binarize: alpha = mean|W| beats any other scale (golden-section oracle)") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor w = Tensor::randn({17}, rng, 1.5);
        auto r = quant::binarize_weights(w, quant::Granularity::WholeTensor);
        CHECK(std::abs(double(r.alpha[0]) - golden_alpha(w)) <= 1e-6);
    }
}

TEST_CASE("n-bit weights: n=2 grid is {-1,-1/3,1/3,1} exactly") {
    Rng rng(11);
    Tensor w = Tensor::randn({64}, rng);
    Tensor q = quant::quantize_weights_nbit(w, 2);
    for (std::size_t i = 0; i < q.size(); ++i) {
        const double v = q[i];
        const bool ok = v == -1.0 || std::abs(v + 1.0 / 3) < 1e-15 ||
                        std::abs(v - 1.0 / 3) < 1e-15 || v == 1.0;
        CHECK(ok);
    }
}

TEST_CASE("n-bit weights: symmetric pair maps to +-1; scalar oracle agrees elementwise") {
    Tensor w = Tensor::from({2}, {0.8, -0.8});
    Tensor q = quant::quantize_weights_nbit(w, 2);
    CHECK(q[0] == 1.0);
    CHECK(q[1] == -1.0);

    Tensor w3 = Tensor::from({3}, {0.2, -0.7, 1.1});
    const double t_max = std::max({std::abs(std::tanh(0.2)), std::abs(std::tanh(-0.7)),
                                   std::abs(std::tanh(1.1))});
    Tensor q3 = quant::quantize_weights_nbit(w3, 2);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(double(q3[i]) == scalar_quant_w(double(w3[i]), t_max, 2));
}

TEST_CASE("n-bit weights: all-zero input quantizes to zeros; n<2 rejected") {
    Tensor q = quant::quantize_weights_nbit(Tensor({4}, 0), 3);
    for (std::size_t i = 0; i < 4; ++i) CHECK(q[i] == 0);
    CHECK_THROWS_AS(quant::quantize_weights_nbit(Tensor({4}, 1), 1), ConfigError);
}

TEST_CASE("activations: 1-bit clamp-and-round, idempotence, rounding bound") {
    Tensor a = Tensor::from({3}, {-0.5, 0.4, 2.0});
    Tensor q = quant::quantize_activations_nbit(a, 1);
    CHECK(q[0] == 0);
    CHECK(q[1] == 0);
    CHECK(q[2] == 1);

    Rng rng(13);
    Tensor r({100});
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<real>(rng.uniform(-2, 2));
    Tensor q4 = quant::quantize_activations_nbit(r, 4);
    Tensor q4q = quant::quantize_activations_nbit(q4, 4);
    for (std::size_t i = 0; i < r.size(); ++i) {
        CHECK(q4[i] == q4q[i]);  // idempotent
        const double clamped = std::min(std::max(double(r[i]), 0.0), 1.0);
        CHECK(std::abs(double(q4[i]) - clamped) <= 1.0 / 30 + 1e-15);
    }
}

TEST_CASE("grid membership for n in {1,2,3,4} over random inputs") {
    Rng rng(17);
    for (int n = 1; n <= 4; ++n) {
        Tensor w = Tensor::randn({512}, rng, 2.0);
        if (n == 1) {
            auto r = quant::binarize_weights(w, quant::Granularity::WholeTensor);
            for (std::size_t i = 0; i < r.codes.size(); ++i)
                CHECK((r.codes[i] == 1.0 || r.codes[i] == -1.0));
        } else {
            Tensor q = quant::quantize_weights_nbit(w, n);
            for (std::size_t i = 0; i < q.size(); ++i) CHECK(on_grid(double(q[i]), n, true));
        }
        Tensor a({512});
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<real>(rng.uniform(-2, 2));
        Tensor qa = quant::quantize_activations_nbit(a, n);
        for (std::size_t i = 0; i < qa.size(); ++i) CHECK(on_grid(double(qa[i]), n, false));
    }
}

TEST_CASE("activation quantizer is monotone and permutation-equivariant") {
    Rng rng(19);
    for (int trial = 0; trial < 50; ++trial) {
        const real a = static_cast<real>(rng.uniform(-2, 2));
        const real b = static_cast<real>(rng.uniform(-2, 2));
        Tensor qa = quant::quantize_activations_nbit(Tensor({1}, std::min(a, b)), 3);
        Tensor qb = quant::quantize_activations_nbit(Tensor({1}, std::max(a, b)), 3);
        CHECK(qa[0] <= qb[0]);
    }
    Tensor v = Tensor::from({4}, {0.1, 0.9, 0.4, 0.7});
    Tensor q = quant::quantize_activations_nbit(v, 2);
    Tensor vp = Tensor::from({4}, {0.7, 0.1, 0.9, 0.4});
    Tensor qp = quant::quantize_activations_nbit(vp, 2);
    CHECK(qp[0] == q[3]);
    CHECK(qp[1] == q[0]);
    CHECK(qp[2] == q[1]);
    CHECK(qp[3] == q[2]);
}

TEST_CASE("ste_backward pass regions") {
    Tensor up({1}, 2.0);
    CHECK(quant::ste_backward(up, Tensor({1}, 0.5), quant::PassRegion::UnitInterval)[0] == 2.0);
    CHECK(quant::ste_backward(up, Tensor({1}, 1.7), quant::PassRegion::UnitInterval)[0] == 0.0);
    CHECK(quant::ste_backward(up, Tensor({1}, 1.7), quant::PassRegion::All)[0] == 2.0);
    CHECK(quant::ste_backward(up, Tensor({1}, -1.2), quant::PassRegion::AbsLeOne)[0] == 0.0);
}

TEST_CASE("gradcheck: activation quantizer vs clamp surrogate") {
    Rng rng(23);
    Tensor a({40});
    // sample away from the clamp kinks at 0 and 1
    for (std::size_t i = 0; i < a.size(); ++i) {
        real v = static_cast<real>(rng.uniform(-1.5, 2.5));
        while (std::abs(v) < 0.05 || std::abs(v - 1) < 0.05)
            v = static_cast<real>(rng.uniform(-1.5, 2.5));
        a[i] = v;
    }
    Tensor probe = Tensor::randn(a.shape(), rng);
    auto surrogate = [&](const Tensor& at) {
        double acc = 0;
        for (std::size_t i = 0; i < at.size(); ++i)
            acc += double(probe[i]) * std::min(std::max(double(at[i]), 0.0), 1.0);
        return acc;
    };
    Var va(a, true);
    backward(weighted_sum(quant::quantize_activations_nbit_ste(va, 2), probe));
    CHECK(max_rel_err(va.grad(), finite_diff(a, surrogate)) <= 1e-6);
}

TEST_CASE("gradcheck: 1-bit weights vs mean|W|*clip(W) surrogate") {
    Rng rng(29);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor w({12});
        for (std::size_t i = 0; i < w.size(); ++i) {
            real v = static_cast<real>(rng.uniform(-2, 2));
            while (std::abs(std::abs(v) - 1) < 0.05 || std::abs(v) < 0.05)
                v = static_cast<real>(rng.uniform(-2, 2));
            w[i] = v;
        }
        Tensor probe = Tensor::randn(w.shape(), rng);
        auto surrogate = [&](const Tensor& wt) {
            double mean_abs = 0;
            for (std::size_t i = 0; i < wt.size(); ++i) mean_abs += std::abs(double(wt[i]));
            mean_abs /= wt.size();
            double acc = 0;
            for (std::size_t i = 0; i < wt.size(); ++i)
                acc += double(probe[i]) * mean_abs *
                       std::min(std::max(double(wt[i]), -1.0), 1.0);
            return acc;
        };
        Var vw(w, true);
        backward(weighted_sum(quant::binarize_weights_ste(vw, quant::Granularity::WholeTensor),
                              probe));
        CHECK(max_rel_err(vw.grad(), finite_diff(w, surrogate)) <= 1e-6);
    }
}

TEST_CASE("gradcheck: n-bit weights vs tanh/max surrogate including the argmax path") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor w = Tensor::randn({10}, rng);
        // keep a unique, well-separated argmax so the surrogate is smooth here
        w[0] = 2.5;
        Tensor probe = Tensor::randn(w.shape(), rng);
        auto surrogate = [&](const Tensor& wt) {
            double t_max = 0;
            for (std::size_t i = 0; i < wt.size(); ++i)
                t_max = std::max(t_max, std::abs(std::tanh(double(wt[i]))));
            double acc = 0;
            for (std::size_t i = 0; i < wt.size(); ++i)
                acc += double(probe[i]) * std::tanh(double(wt[i])) / t_max;
            return acc;
        };
        Var vw(w, true);
        backward(weighted_sum(quant::quantize_weights_nbit_ste(vw, 3), probe));
        CHECK(max_rel_err(vw.grad(), finite_diff(w, surrogate)) <= 1e-6);
    }
}

TEST_CASE("gradcheck: full quantized conv layer vs surrogate network finite differences") {
    Rng rng(37);
    Tensor x = Tensor::randn({1, 2, 4, 4}, rng, 0.4);
    for (std::size_t i = 0; i < x.size(); ++i) {
        while (std::abs(x[i]) < 0.05 || std::abs(x[i] - 1) < 0.05)
            x[i] = static_cast<real>(rng.uniform(-0.5, 1.5));
    }
    Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 0.5);
    ConvGeom g{2, 4, 4, 3, 1, 1};
    Tensor probe = Tensor::randn({1, 3, 4, 4}, rng);

    // surrogate: clamp activations, binarize weights via mean|W|*clip per filter,
    // then plain convolution; computed with independent loops
    auto surrogate = [&](const Tensor& wt, const Tensor& xt) {
        Tensor xa = xt;
        for (std::size_t i = 0; i < xa.size(); ++i)
            xa[i] = std::min(std::max(xa[i], real(0)), real(1));
        Tensor wq(wt.shape());
        const std::size_t plen = wt.size() / wt.dim(0);
        for (std::size_t f = 0; f < wt.dim(0); ++f) {
            double mean_abs = 0;
            for (std::size_t i = 0; i < plen; ++i) mean_abs += std::abs(double(wt[f * plen + i]));
            mean_abs /= plen;
            for (std::size_t i = 0; i < plen; ++i)
                wq[f * plen + i] = static_cast<real>(
                    mean_abs * std::min(std::max(double(wt[f * plen + i]), -1.0), 1.0));
        }
        double acc = 0;
        for (std::size_t oc = 0; oc < 3; ++oc)
            for (std::size_t oy = 0; oy < 4; ++oy)
                for (std::size_t ox = 0; ox < 4; ++ox) {
                    double conv = 0;
                    for (std::size_t ic = 0; ic < 2; ++ic)
                        for (std::size_t ky = 0; ky < 3; ++ky)
                            for (std::size_t kx = 0; kx < 3; ++kx) {
                                const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - 1;
                                const std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - 1;
                                if (iy < 0 || ix < 0 || iy >= 4 || ix >= 4) continue;
                                conv += xa(0, ic, std::size_t(iy), std::size_t(ix)) *
                                        wq(oc, ic, ky, kx);
                            }
                    acc += double(probe(0, oc, oy, ox)) * conv;
                }
        return acc;
    };

    Var vw(w, true), vx(x, true);
    Var q = conv2d(quant::quantize_activations_nbit_ste(vx, 1, quant::Mode::Surrogate),
                   quant::binarize_weights_ste(vw, quant::Granularity::PerFilter,
                                               quant::Mode::Surrogate),
                   g);
    backward(weighted_sum(q, probe));
    CHECK(max_rel_err(vw.grad(), finite_diff(w, [&](const Tensor& t) { return surrogate(t, x); })) <=
          1e-6);
    CHECK(max_rel_err(vx.grad(), finite_diff(x, [&](const Tensor& t) { return surrogate(w, t); })) <=
          1e-6);
}
