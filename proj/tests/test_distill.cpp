#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "qnn/distill.hpp"
#include "qnn/rng.hpp"

using namespace qnn;
using namespace qnn::distill;

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

// scalar-arithmetic KD loss oracle, one sample
double kd_oracle(const std::vector<double>& os, const std::vector<double>& ot, std::size_t label,
                 double tau, double mu) {
    auto softmax = [](std::vector<double> v, double t) {
        double mx = v[0] / t;
        for (double& x : v) {
            x /= t;
            mx = std::max(mx, x);
        }
        double z = 0;
        for (double& x : v) {
            x = std::exp(x - mx);
            z += x;
        }
        for (double& x : v) x /= z;
        return v;
    };
    const auto ps = softmax(os, 1.0);
    const auto ps_tau = softmax(os, tau);
    const auto pt_tau = softmax(ot, tau);
    double loss = -std::log(ps[label]);
    for (std::size_t j = 0; j < os.size(); ++j) loss -= mu * pt_tau[j] * std::log(ps_tau[j]);
    return loss;
}

}  // namespace

TEST_CASE("soften: tau=1 is softmax; huge tau approaches uniform; closed form") {
    Tensor o = Tensor::from({3}, {1, 2, 3});
    Tensor p = soften(o, 1);
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(double(p[0]) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
    CHECK(double(sum(p)) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor pu = soften(o, 1e6);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(double(pu[i]) - 1.0 / 3) <= 1e-5);

    Tensor o2 = Tensor::from({2}, {0, std::log(real(3))});
    Tensor p2 = soften(o2, 1);
    CHECK(double(p2[0]) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(double(p2[1]) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("soften is shift invariant") {
    Rng rng(3);
    Tensor o = Tensor::randn({5}, rng);
    Tensor o_shift = o;
    for (std::size_t i = 0; i < 5; ++i) o_shift[i] += 7.25;
    Tensor a = soften(o, 2.5), b = soften(o_shift, 2.5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(double(a[i]) - double(b[i])) <= 1e-12);
}

TEST_CASE("kd_loss: mu=0 is plain cross entropy with the ground truth") {
    Tensor os = Tensor::from({1, 3}, {0.2, -1.0, 0.7});
    Tensor ot = Tensor::from({1, 3}, {9, 9, 9});
    Tensor y = Tensor::from({1, 3}, {0, 0, 1});
    const double ce = -std::log(double(soften(os.reshaped({3}), 1)[2]));
    CHECK(double(kd_loss(os, ot, y, 5, 0)) == doctest::Approx(ce).epsilon(1e-12));
}

TEST_CASE("kd_loss: identical logits at tau=1, mu=1 add exactly the teacher entropy") {
    Rng rng(5);
    Tensor o = Tensor::randn({1, 4}, rng);
    Tensor y = Tensor::from({1, 4}, {1, 0, 0, 0});
    const double with_kd = kd_loss(o, o, y, 1, 1);
    const double ce = kd_loss(o, o, y, 1, 0);
    Tensor p = soften(o.reshaped({4}), 1);
    double entropy = 0;
    for (std::size_t j = 0; j < 4; ++j) entropy -= double(p[j]) * std::log(double(p[j]));
    CHECK(with_kd - ce == doctest::Approx(entropy).epsilon(1e-12));
}

TEST_CASE("kd_loss vs independent scalar oracle at tau=3, mu=0.2") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> os(5), ot(5);
        for (auto& v : os) v = rng.normal();
        for (auto& v : ot) v = rng.normal();
        const std::size_t label = rng.below(5);
        Tensor tos({1, 5}), tot({1, 5}), y({1, 5}, 0);
        for (std::size_t j = 0; j < 5; ++j) {
            tos(0, j) = static_cast<real>(os[j]);
            tot(0, j) = static_cast<real>(ot[j]);
        }
        y(0, label) = 1;
        CHECK(std::abs(double(kd_loss(tos, tot, y, 3, 0.2)) -
                       kd_oracle(os, ot, label, 3, 0.2)) <= 1e-10);
    }
}

TEST_CASE("kd_loss is nonnegative and monotone in mu when the KD term is positive") {
    Rng rng(11);
    Tensor os = Tensor::randn({1, 4}, rng);
    Tensor ot = Tensor::randn({1, 4}, rng);
    Tensor y = Tensor::from({1, 4}, {0, 1, 0, 0});
    double prev = -1;
    for (double mu : {0.0, 0.1, 0.5, 1.0, 2.0}) {
        const double l = kd_loss(os, ot, y, 3, static_cast<real>(mu));
        CHECK(l >= 0);
        CHECK(l >= prev);  // KD term (a cross entropy) is positive
        prev = l;
    }
}

TEST_CASE("kd_loss_op: teacher is detached by construction; gradient matches FD") {
    Rng rng(13);
    Tensor os = Tensor::randn({4, 3}, rng);
    Tensor ot = Tensor::randn({4, 3}, rng);
    std::vector<int> labels = {0, 2, 1, 0};

    Var vs(os, true);
    Var loss = kd_loss_op(vs, ot, labels, 3, 0.2);
    CHECK(loss.node()->parents.size() == 1);  // only the student feeds the loss
    backward(loss);

    Tensor y({4, 3}, 0);
    for (std::size_t i = 0; i < 4; ++i) y(i, static_cast<std::size_t>(labels[i])) = 1;
    Tensor fd = finite_diff(os, [&](const Tensor& t) {
        return double(kd_loss(t, ot, y, 3, 0.2));
    });
    for (std::size_t i = 0; i < fd.size(); ++i)
        CHECK(std::abs(double(vs.grad()[i]) - double(fd[i])) <=
              1e-6 * std::max(1.0, std::abs(double(fd[i]))));
}

TEST_CASE("cached logits round trip") {
    Rng rng(17);
    Tensor logits = Tensor::randn({6, 4}, rng);
    const std::string path = (std::filesystem::temp_directory_path() / "qnn_logits.bin").string();
    save_logits(path, logits);
    Tensor back = load_logits(path);
    REQUIRE(back.shape() == logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(back[i] == logits[i]);
    std::remove(path.c_str());
}
