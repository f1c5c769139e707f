#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qnn/nn_ops.hpp"
#include "qnn/quant.hpp"
#include "qnn/rng.hpp"
#include "qnn/sgd.hpp"

namespace qnn {

enum class LayerKind { Conv, Linear, BatchNorm, Relu, Pool, ResidualBlock };

inline std::string kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Linear: return "linear";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::Relu: return "relu";
        case LayerKind::Pool: return "pool";
        case LayerKind::ResidualBlock: return "residual-block";
    }
    return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
    if (s == "conv") return LayerKind::Conv;
    if (s == "linear") return LayerKind::Linear;
    if (s == "batchnorm") return LayerKind::BatchNorm;
    if (s == "relu") return LayerKind::Relu;
    if (s == "pool") return LayerKind::Pool;
    if (s == "residual-block") return LayerKind::ResidualBlock;
    throw ConfigError("unknown layer kind: " + s);
}

// Declarative layer description. Residual blocks expand to
// conv1(in->mid, stride) / bn1 / act / conv2(mid->out) / bn2 / (+ shortcut) / act;
// the shortcut is identity when in == out and stride == 1, else 1x1 conv + bn.
// Relu entries double as activation quantizers: act_bits == 32 is a plain
// ReLU, anything lower applies the clamp-and-round activation grid.
struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t mid_channels = 0;  // residual block inner width; 0 means out_channels
    std::size_t kernel = 0;        // pool: 0 means global average
    std::size_t stride = 1;
    std::size_t pad = 0;
    int weight_bits = 32;
    int act_bits = 32;
    double width_multiplier = 1.0;

    bool projection() const {
        return kind == LayerKind::ResidualBlock && (in_channels != out_channels || stride != 1);
    }
    std::size_t mid() const { return mid_channels ? mid_channels : out_channels; }
};

struct ModelSpec {
    std::vector<LayerSpec> layers;

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& l : layers) {
            j.push_back({{"kind", kind_name(l.kind)},
                         {"in_channels", l.in_channels},
                         {"out_channels", l.out_channels},
                         {"mid_channels", l.mid_channels},
                         {"kernel", l.kernel},
                         {"stride", l.stride},
                         {"pad", l.pad},
                         {"weight_bits", l.weight_bits},
                         {"act_bits", l.act_bits},
                         {"width_multiplier", l.width_multiplier}});
        }
        return nlohmann::json{{"layers", j}};
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        ModelSpec s;
        for (const auto& e : j.at("layers")) {
            LayerSpec l;
            l.kind = kind_from_name(e.at("kind").get<std::string>());
            l.in_channels = e.at("in_channels").get<std::size_t>();
            l.out_channels = e.at("out_channels").get<std::size_t>();
            l.mid_channels = e.value("mid_channels", std::size_t{0});
            l.kernel = e.value("kernel", std::size_t{0});
            l.stride = e.value("stride", std::size_t{1});
            l.pad = e.value("pad", std::size_t{0});
            l.weight_bits = e.value("weight_bits", 32);
            l.act_bits = e.value("act_bits", 32);
            l.width_multiplier = e.value("width_multiplier", 1.0);
            s.layers.push_back(l);
        }
        return s;
    }

    // Walks the layer list checking channel agreement plus the rule that the
    // first and last compute layers stay full precision.
    void validate() const {
        std::size_t cur = 0;
        bool first_compute = true;
        int last_compute = -1;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            switch (l.kind) {
                case LayerKind::Conv:
                case LayerKind::ResidualBlock:
                case LayerKind::Linear:
                    if (cur != 0 && l.in_channels != cur)
                        throw ConfigError("layer " + std::to_string(i) + " (" +
                                          kind_name(l.kind) + "): in_channels " +
                                          std::to_string(l.in_channels) +
                                          " does not match incoming " + std::to_string(cur));
                    if (first_compute) {
                        if (l.weight_bits != 32 || l.act_bits != 32)
                            throw ConfigError("first compute layer must stay full precision");
                        first_compute = false;
                    }
                    cur = l.out_channels;
                    last_compute = static_cast<int>(i);
                    break;
                case LayerKind::BatchNorm:
                case LayerKind::Relu:
                case LayerKind::Pool:
                    if (l.in_channels != 0 && cur != 0 && l.in_channels != cur)
                        throw ConfigError("layer " + std::to_string(i) +
                                          ": channel bookkeeping mismatch");
                    break;
            }
        }
        if (last_compute >= 0) {
            const auto& l = layers[static_cast<std::size_t>(last_compute)];
            if (l.weight_bits != 32 || l.act_bits != 32)
                throw ConfigError("last compute layer must stay full precision");
        }
    }
};

// Trainable parameters, independently recountable as sum(c_in*c_out*k^2) for
// convs plus 2 per BN channel plus in*out+out per linear layer.
inline std::size_t count_params(const ModelSpec& spec) {
    std::size_t total = 0;
    auto conv_p = [](std::size_t ci, std::size_t co, std::size_t k) { return ci * co * k * k; };
    for (const auto& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                total += conv_p(l.in_channels, l.out_channels, l.kernel);
                break;
            case LayerKind::Linear:
                total += l.in_channels * l.out_channels + l.out_channels;
                break;
            case LayerKind::BatchNorm:
                total += 2 * l.out_channels;
                break;
            case LayerKind::ResidualBlock: {
                const std::size_t mid = l.mid();
                total += conv_p(l.in_channels, mid, l.kernel) + 2 * mid;
                total += conv_p(mid, l.out_channels, l.kernel) + 2 * l.out_channels;
                if (l.projection())
                    total += conv_p(l.in_channels, l.out_channels, 1) + 2 * l.out_channels;
                break;
            }
            default:
                break;
        }
    }
    return total;
}

// ---- parameter storage ----

struct ParamTensor {
    Tensor value;
    Tensor momentum;
    bool is_bn_gamma = false;
    bool is_bn_param = false;
    NodePtr node;  // leaf node of the current step's graph
};

struct BnUnit {
    ParamTensor gamma, beta;
    BatchNormState state;

    void init(std::size_t channels, real gamma_init) {
        gamma.value = Tensor({channels}, gamma_init);
        beta.value = Tensor({channels}, 0);
        gamma.is_bn_gamma = gamma.is_bn_param = true;
        beta.is_bn_param = true;
        state = BatchNormState(channels);
    }
};

struct ConvUnit {
    ParamTensor w;

    void init(std::size_t in_c, std::size_t out_c, std::size_t k, Rng& rng) {
        const real stddev = std::sqrt(real(2) / static_cast<real>(in_c * k * k));
        w.value = Tensor::randn({out_c, in_c, k, k}, rng, stddev);
    }
};

struct LinearUnit {
    ParamTensor w, b;

    void init(std::size_t in, std::size_t out, Rng& rng) {
        w.value = Tensor::randn({in, out}, rng, std::sqrt(real(2) / static_cast<real>(in)));
        b.value = Tensor({out}, 0);
    }
};

struct LayerUnit {
    LayerSpec spec;
    std::optional<ConvUnit> conv, conv1, conv2, conv_sc;
    std::optional<BnUnit> bn, bn1, bn2, bn_sc;
    std::optional<LinearUnit> lin;
};

struct ModelInit {
    std::uint64_t seed = 1;
    real bn_gamma_init = real(0.5);  // slimming-friendly starting scale
};

// A realized network: parameter tensors plus a define-by-run forward that
// re-quantizes shadow copies of the master weights every pass.
class Model {
public:
    Model() = default;

    // step_params_ points into units_; copies must not inherit it
    Model(const Model& o) : spec_(o.spec_), units_(o.units_) {}
    Model& operator=(const Model& o) {
        spec_ = o.spec_;
        units_ = o.units_;
        step_params_.clear();
        training_ = false;
        return *this;
    }
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    Model(ModelSpec spec, const ModelInit& init) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng(init.seed);
        for (const auto& l : spec_.layers) {
            LayerUnit u;
            u.spec = l;
            switch (l.kind) {
                case LayerKind::Conv:
                    u.conv.emplace();
                    u.conv->init(l.in_channels, l.out_channels, l.kernel, rng);
                    break;
                case LayerKind::Linear:
                    u.lin.emplace();
                    u.lin->init(l.in_channels, l.out_channels, rng);
                    break;
                case LayerKind::BatchNorm:
                    u.bn.emplace();
                    u.bn->init(l.out_channels, init.bn_gamma_init);
                    break;
                case LayerKind::ResidualBlock:
                    u.conv1.emplace();
                    u.conv1->init(l.in_channels, l.mid(), l.kernel, rng);
                    u.bn1.emplace();
                    u.bn1->init(l.mid(), init.bn_gamma_init);
                    u.conv2.emplace();
                    u.conv2->init(l.mid(), l.out_channels, l.kernel, rng);
                    u.bn2.emplace();
                    u.bn2->init(l.out_channels, init.bn_gamma_init);
                    if (l.projection()) {
                        u.conv_sc.emplace();
                        u.conv_sc->init(l.in_channels, l.out_channels, 1, rng);
                        u.bn_sc.emplace();
                        u.bn_sc->init(l.out_channels, init.bn_gamma_init);
                    }
                    break;
                default:
                    break;
            }
            units_.push_back(std::move(u));
        }
    }

    const ModelSpec& spec() const { return spec_; }
    std::vector<LayerUnit>& units() { return units_; }
    const std::vector<LayerUnit>& units() const { return units_; }
    std::size_t param_count() const { return count_params(spec_); }

    Var forward(const Tensor& x, bool training) {
        check_finite(x, "model input");
        step_params_.clear();
        training_ = training;
        Var cur(x, false);
        for (auto& u : units_) cur = forward_unit(u, cur);
        return cur;
    }

    // Gradient harvest + SGD over every registered parameter of the last
    // forward pass. lambda_l1 adds the slimming subgradient on BN scales
    // (zero at gamma == 0). freeze_except_bn skips everything but BN params.
    void apply_sgd(const SgdConfig& cfg, real lambda_l1 = 0, bool freeze_except_bn = false) {
        if (step_params_.empty()) throw StateError("apply_sgd: no forward pass recorded");
        for (ParamTensor* p : step_params_) {
            if (freeze_except_bn && !p->is_bn_param) continue;
            Tensor grad = p->node && p->node->grad_ready ? p->node->grad
                                                         : Tensor(p->value.shape(), 0);
            if (lambda_l1 > 0 && p->is_bn_gamma) {
                for (std::size_t i = 0; i < grad.size(); ++i) {
                    const real g = p->value[i];
                    if (g > 0)
                        grad[i] += lambda_l1;
                    else if (g < 0)
                        grad[i] -= lambda_l1;
                }
            }
            sgd_step(p->value, grad, p->momentum, cfg);
        }
    }

    // Per-BN gamma access for pruning; residual blocks expose bn1/bn2 (the
    // projection-shortcut BN is reconciled, not threshold-pruned).
    struct GammaRef {
        std::size_t layer;
        std::string slot;  // "bn", "bn1", "bn2"
        BnUnit* unit;
    };

    std::vector<GammaRef> prunable_bns() {
        std::vector<GammaRef> out;
        for (std::size_t i = 0; i < units_.size(); ++i) {
            auto& u = units_[i];
            if (u.bn) out.push_back({i, "bn", &*u.bn});
            if (u.bn1) out.push_back({i, "bn1", &*u.bn1});
            if (u.bn2) out.push_back({i, "bn2", &*u.bn2});
        }
        return out;
    }

private:
    Var param_var(ParamTensor& p) {
        Var v(p.value, training_);
        p.node = v.node();
        step_params_.push_back(&p);
        return v;
    }

    Var weight_var(ConvUnit& c, int weight_bits) {
        Var w = param_var(c.w);
        quant::QuantConfig qc;
        qc.weight_bits = weight_bits;
        return quant::quantize_layer_weights(w, qc);
    }

    Var activation(const Var& x, int act_bits) {
        if (act_bits >= 32) return relu(x);
        return quant::quantize_activations_nbit_ste(x, act_bits);
    }

    Var forward_unit(LayerUnit& u, const Var& x) {
        const LayerSpec& l = u.spec;
        switch (l.kind) {
            case LayerKind::Conv: {
                ConvGeom g{l.in_channels, x.value().dim(2), x.value().dim(3), l.kernel, l.stride,
                           l.pad};
                return conv2d(x, weight_var(*u.conv, l.weight_bits), g);
            }
            case LayerKind::Linear: {
                Var in = x;
                if (x.value().rank() == 4)
                    in = reshape(x, {x.value().dim(0), x.value().size() / x.value().dim(0)});
                return linear(in, param_var(u.lin->w), param_var(u.lin->b));
            }
            case LayerKind::BatchNorm:
                return batchnorm(x, param_var(u.bn->gamma), param_var(u.bn->beta), u.bn->state,
                                 training_);
            case LayerKind::Relu:
                return activation(x, l.act_bits);
            case LayerKind::Pool:
                return l.kernel == 0 ? global_avg_pool(x) : avg_pool2d(x, l.kernel);
            case LayerKind::ResidualBlock: {
                ConvGeom g1{l.in_channels, x.value().dim(2), x.value().dim(3), l.kernel, l.stride,
                            l.pad};
                Var h = conv2d(x, weight_var(*u.conv1, l.weight_bits), g1);
                h = batchnorm(h, param_var(u.bn1->gamma), param_var(u.bn1->beta), u.bn1->state,
                              training_);
                h = activation(h, l.act_bits);
                ConvGeom g2{l.mid(), h.value().dim(2), h.value().dim(3), l.kernel, 1, l.pad};
                h = conv2d(h, weight_var(*u.conv2, l.weight_bits), g2);
                h = batchnorm(h, param_var(u.bn2->gamma), param_var(u.bn2->beta), u.bn2->state,
                              training_);
                Var shortcut = x;
                if (l.projection()) {
                    ConvGeom gs{l.in_channels, x.value().dim(2), x.value().dim(3), 1, l.stride, 0};
                    shortcut = conv2d(x, weight_var(*u.conv_sc, l.weight_bits), gs);
                    shortcut = batchnorm(shortcut, param_var(u.bn_sc->gamma),
                                         param_var(u.bn_sc->beta), u.bn_sc->state, training_);
                }
                return activation(add(h, shortcut), l.act_bits);
            }
        }
        throw StateError("unreachable layer kind");
    }

    ModelSpec spec_;
    std::vector<LayerUnit> units_;
    std::vector<ParamTensor*> step_params_;
    bool training_ = false;
};

// ---- templates ----

// Plain conv stack: conv/bn/act x3 with a 2x2 pool in the middle, global
// average pool, full-precision classifier head.
inline ModelSpec small_cnn_spec(std::size_t in_channels, std::size_t classes, std::size_t width,
                                int weight_bits, int act_bits) {
    ModelSpec s;
    auto conv = [](std::size_t ci, std::size_t co, int wb, std::size_t stride = 1) {
        LayerSpec l;
        l.kind = LayerKind::Conv;
        l.in_channels = ci;
        l.out_channels = co;
        l.kernel = 3;
        l.stride = stride;
        l.pad = 1;
        l.weight_bits = wb;
        return l;
    };
    auto bn = [](std::size_t c) {
        LayerSpec l;
        l.kind = LayerKind::BatchNorm;
        l.in_channels = l.out_channels = c;
        return l;
    };
    auto act = [](std::size_t c, int ab) {
        LayerSpec l;
        l.kind = LayerKind::Relu;
        l.in_channels = l.out_channels = c;
        l.act_bits = ab;
        return l;
    };
    s.layers.push_back(conv(in_channels, width, 32));
    s.layers.push_back(bn(width));
    s.layers.push_back(act(width, act_bits));
    s.layers.push_back(conv(width, width, weight_bits));
    s.layers.push_back(bn(width));
    s.layers.push_back(act(width, act_bits));
    LayerSpec pool;
    pool.kind = LayerKind::Pool;
    pool.kernel = 2;
    pool.in_channels = pool.out_channels = width;
    s.layers.push_back(pool);
    s.layers.push_back(conv(width, 2 * width, weight_bits));
    s.layers.push_back(bn(2 * width));
    s.layers.push_back(act(2 * width, 32));
    LayerSpec gap;
    gap.kind = LayerKind::Pool;
    gap.kernel = 0;
    gap.in_channels = gap.out_channels = 2 * width;
    s.layers.push_back(gap);
    LayerSpec head;
    head.kind = LayerKind::Linear;
    head.in_channels = 2 * width;
    head.out_channels = classes;
    s.layers.push_back(head);
    s.validate();
    return s;
}

// Two-stage residual net: full-precision stem, a stage of identity blocks,
// a strided projection block into a second stage, global pool, linear head.
inline ModelSpec toy_resnet_spec(std::size_t in_channels, std::size_t classes, std::size_t width,
                                 int weight_bits, int act_bits, std::size_t blocks_per_stage = 2) {
    ModelSpec s;
    LayerSpec stem;
    stem.kind = LayerKind::Conv;
    stem.in_channels = in_channels;
    stem.out_channels = width;
    stem.kernel = 3;
    stem.stride = 1;
    stem.pad = 1;
    s.layers.push_back(stem);
    LayerSpec bn;
    bn.kind = LayerKind::BatchNorm;
    bn.in_channels = bn.out_channels = width;
    s.layers.push_back(bn);
    LayerSpec act;
    act.kind = LayerKind::Relu;
    act.in_channels = act.out_channels = width;
    act.act_bits = act_bits;
    s.layers.push_back(act);

    auto block = [&](std::size_t ci, std::size_t co, std::size_t stride) {
        LayerSpec l;
        l.kind = LayerKind::ResidualBlock;
        l.in_channels = ci;
        l.out_channels = co;
        l.kernel = 3;
        l.stride = stride;
        l.pad = 1;
        l.weight_bits = weight_bits;
        l.act_bits = act_bits;
        return l;
    };
    for (std::size_t b = 0; b < blocks_per_stage; ++b) s.layers.push_back(block(width, width, 1));
    s.layers.push_back(block(width, 2 * width, 2));
    for (std::size_t b = 1; b < blocks_per_stage; ++b)
        s.layers.push_back(block(2 * width, 2 * width, 1));

    LayerSpec gap;
    gap.kind = LayerKind::Pool;
    gap.kernel = 0;
    gap.in_channels = gap.out_channels = 2 * width;
    s.layers.push_back(gap);
    LayerSpec head;
    head.kind = LayerKind::Linear;
    head.in_channels = 2 * width;
    head.out_channels = classes;
    s.layers.push_back(head);
    s.validate();
    return s;
}

}  // namespace qnn
