#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "qnn/dataset.hpp"
#include "qnn/distill.hpp"
#include "qnn/model.hpp"

namespace qnn {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch = 32;
    SgdConfig sgd;
    real lambda_l1 = 0;                    // slimming penalty on BN scales
    std::vector<std::size_t> lr_drops;     // epochs at which lr is divided by 10
    bool freeze_except_bn = false;
    std::uint64_t seed = 1;
    const Tensor* teacher_logits = nullptr;  // [train_n, classes]; enables KD
    real tau = real(1);
    real mu = real(0);
};

struct TrainResult {
    std::vector<real> epoch_loss;
};

namespace detail {

inline Tensor gather_batch(const Tensor& x, const std::vector<std::size_t>& idx) {
    Shape s = x.shape();
    s[0] = idx.size();
    Tensor out(s);
    const std::size_t stride = x.size() / x.dim(0);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(x.data() + idx[i] * stride, x.data() + (idx[i] + 1) * stride,
                  out.data() + i * stride);
    return out;
}

}  // namespace detail

// Plain eval accuracy in batches (BN eval mode, no augmentation).
inline double evaluate(Model& model, const Tensor& x, const std::vector<int>& y,
                       std::size_t batch = 256) {
    const std::size_t n = y.size();
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t stop = std::min(start + batch, n);
        idx.clear();
        for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
        Tensor bx = detail::gather_batch(x, idx);
        std::vector<int> by(y.begin() + static_cast<std::ptrdiff_t>(start),
                            y.begin() + static_cast<std::ptrdiff_t>(stop));
        Var logits = model.forward(bx, false);
        correct += count_correct(logits.value(), by);
    }
    return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

inline Tensor predict_logits(Model& model, const Tensor& x, std::size_t batch = 256) {
    const std::size_t n = x.dim(0);
    Tensor out;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t stop = std::min(start + batch, n);
        idx.clear();
        for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
        Var logits = model.forward(detail::gather_batch(x, idx), false);
        if (out.empty()) out = Tensor({n, logits.value().dim(1)});
        for (std::size_t i = start; i < stop; ++i)
            for (std::size_t j = 0; j < out.dim(1); ++j)
                out(i, j) = logits.value()(i - start, j);
    }
    return out;
}

inline TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg) {
    if (cfg.teacher_logits && cfg.teacher_logits->dim(0) != data.train_size())
        throw ConfigError("teacher logits row count does not match train split");
    Rng rng(derive_seed(cfg.seed, "train"));
    TrainResult result;
    SgdConfig sgd = cfg.sgd;
    std::vector<std::size_t> order(data.train_size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (std::find(cfg.lr_drops.begin(), cfg.lr_drops.end(), epoch) != cfg.lr_drops.end())
            sgd.lr /= 10;
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng.below(i + 1)]);

        real epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t stop = std::min(start + cfg.batch, order.size());
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
            Tensor bx = detail::gather_batch(data.train_x, idx);
            std::vector<int> by(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) by[i] = data.train_y[idx[i]];
            if (data.images && (data.crop_pad || data.mirror))
                for (std::size_t i = 0; i < idx.size(); ++i)
                    augment_sample(bx, i, data.crop_pad, data.mirror, rng);

            Var logits = model.forward(bx, true);
            Var loss;
            if (cfg.teacher_logits) {
                Tensor tl({idx.size(), cfg.teacher_logits->dim(1)});
                for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < tl.dim(1); ++j)
                        tl(i, j) = (*cfg.teacher_logits)(idx[i], j);
                loss = distill::kd_loss_op(logits, tl, by, cfg.tau, cfg.mu);
            } else {
                loss = softmax_cross_entropy(logits, by);
            }
            if (!std::isfinite(loss.value()[0]))
                throw NumericError("training loss diverged at epoch " + std::to_string(epoch));
            backward(loss);
            model.apply_sgd(sgd, cfg.lambda_l1, cfg.freeze_except_bn);
            epoch_loss += loss.value()[0];
            ++batches;
        }
        result.epoch_loss.push_back(batches ? epoch_loss / static_cast<real>(batches) : 0);
    }
    return result;
}

}  // namespace qnn
