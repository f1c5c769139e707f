#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qnn/model.hpp"
#include "qnn/trainer.hpp"

namespace qnn::slim {

// Multiply every hidden channel count by `width` (nearest integer, floor 1).
// The data-facing input of the first compute layer and the classifier output
// stay fixed; conv parameter counts grow roughly width^2.
inline ModelSpec widen(const ModelSpec& spec, double width) {
    if (width < 1.0) throw ConfigError("widen: width must be >= 1");
    auto scaled = [width](std::size_t c) {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(c * width)));
    };
    ModelSpec out = spec;
    bool first_compute = true;
    int last_compute = -1;
    for (std::size_t i = 0; i < out.layers.size(); ++i)
        if (out.layers[i].kind == LayerKind::Conv || out.layers[i].kind == LayerKind::Linear ||
            out.layers[i].kind == LayerKind::ResidualBlock)
            last_compute = static_cast<int>(i);
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
        LayerSpec& l = out.layers[i];
        const bool compute = l.kind == LayerKind::Conv || l.kind == LayerKind::Linear ||
                             l.kind == LayerKind::ResidualBlock;
        const bool is_last = static_cast<int>(i) == last_compute;
        if (compute) {
            if (!first_compute) l.in_channels = scaled(l.in_channels);
            if (!is_last) l.out_channels = scaled(l.out_channels);
            if (l.kind == LayerKind::ResidualBlock && l.mid_channels)
                l.mid_channels = scaled(l.mid_channels);
            l.width_multiplier *= width;
            first_compute = false;
        } else {
            if (l.in_channels) l.in_channels = scaled(l.in_channels);
            if (l.out_channels) l.out_channels = scaled(l.out_channels);
        }
    }
    out.validate();
    return out;
}

// Sparsity-regularized training: minimizes task loss + lambda * sum|gamma|
// over BN scale factors. lambda = 0 is exactly the plain trainer.
inline TrainResult train_sparse(Model& model, const Dataset& data, real lambda,
                                TrainConfig cfg) {
    cfg.lambda_l1 = lambda;
    return train(model, data, cfg);
}

// ---- pruning ----

struct LayerPrune {
    std::size_t layer = 0;
    std::string slot;                 // "bn", "bn1", "bn2"
    std::vector<std::size_t> kept;    // strictly increasing indices
    std::vector<real> gamma_abs;      // snapshot of |gamma| for every channel
    std::size_t total = 0;
    bool empty_guard = false;         // all channels fell below threshold
};

struct PruneReport {
    std::vector<LayerPrune> layers;
    real threshold = 0;
    std::size_t channels_total = 0, channels_kept = 0;
    std::size_t params_before = 0, params_after = 0;
    double ratio = 0;  // pruned fraction, exactly 1 - kept/total
    double acc_before = -1, acc_zeroed = -1, acc_retrained = -1;

    nlohmann::json to_json() const {
        nlohmann::json jl = nlohmann::json::array();
        for (const auto& l : layers)
            jl.push_back({{"layer", l.layer},
                          {"slot", l.slot},
                          {"kept", l.kept},
                          {"gamma_abs", l.gamma_abs},
                          {"total", l.total},
                          {"empty_guard", l.empty_guard}});
        return {{"threshold", threshold},
                {"channels_total", channels_total},
                {"channels_kept", channels_kept},
                {"ratio", ratio},
                {"params_before", params_before},
                {"params_after", params_after},
                {"acc_before", acc_before},
                {"acc_zeroed", acc_zeroed},
                {"acc_retrained", acc_retrained},
                {"layers", jl}};
    }

    static PruneReport from_json(const nlohmann::json& j) {
        PruneReport r;
        r.threshold = j.at("threshold").get<real>();
        r.channels_total = j.at("channels_total").get<std::size_t>();
        r.channels_kept = j.at("channels_kept").get<std::size_t>();
        r.ratio = j.at("ratio").get<double>();
        r.params_before = j.at("params_before").get<std::size_t>();
        r.params_after = j.at("params_after").get<std::size_t>();
        r.acc_before = j.at("acc_before").get<double>();
        r.acc_zeroed = j.at("acc_zeroed").get<double>();
        r.acc_retrained = j.at("acc_retrained").get<double>();
        for (const auto& e : j.at("layers")) {
            LayerPrune l;
            l.layer = e.at("layer").get<std::size_t>();
            l.slot = e.at("slot").get<std::string>();
            l.kept = e.at("kept").get<std::vector<std::size_t>>();
            l.gamma_abs = e.at("gamma_abs").get<std::vector<real>>();
            l.total = e.at("total").get<std::size_t>();
            l.empty_guard = e.at("empty_guard").get<bool>();
            r.layers.push_back(std::move(l));
        }
        return r;
    }

    // Human-readable row in the style of the slimming result tables.
    std::string table(double reg) const {
        auto pct = [](double v) {
            char b[32];
            if (v < 0) return std::string("-");
            std::snprintf(b, sizeof b, "%.2f", 100 * v);
            return std::string(b);
        };
        std::ostringstream os;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-10s %-8s %-8s %-10s %-8s %-8s\n", "reg", "acc_O",
                      "ratio", "paras(M)", "acc_P", "acc_R");
        os << buf;
        std::snprintf(buf, sizeof buf, "%-10.5g %-8s %-8.2f %-10.4f %-8s %-8s\n", reg,
                      pct(acc_before).c_str(), 100 * ratio, params_after / 1e6,
                      pct(acc_zeroed).c_str(), pct(acc_retrained).c_str());
        os << buf;
        return os.str();
    }
};

struct PruneResult {
    ModelSpec spec;  // channel counts shrunk; residual blocks may still disagree
    PruneReport report;
};

namespace detail {

inline LayerPrune prune_bn(const BnUnit& bn, std::size_t layer, const std::string& slot,
                           real threshold) {
    LayerPrune p;
    p.layer = layer;
    p.slot = slot;
    p.total = bn.gamma.value.size();
    p.gamma_abs.resize(p.total);
    for (std::size_t j = 0; j < p.total; ++j) {
        p.gamma_abs[j] = std::abs(bn.gamma.value[j]);
        if (p.gamma_abs[j] >= threshold) p.kept.push_back(j);
    }
    if (p.kept.empty()) {
        // keep the single strongest channel rather than deleting the layer
        std::size_t best = 0;
        for (std::size_t j = 1; j < p.total; ++j)
            if (p.gamma_abs[j] > p.gamma_abs[best]) best = j;
        p.kept.push_back(best);
        p.empty_guard = true;
    }
    return p;
}

inline const LayerPrune* find(const PruneReport& rep, std::size_t layer, const std::string& slot) {
    for (const auto& l : rep.layers)
        if (l.layer == layer && l.slot == slot) return &l;
    return nullptr;
}

inline LayerPrune* find(PruneReport& rep, std::size_t layer, const std::string& slot) {
    for (auto& l : rep.layers)
        if (l.layer == layer && l.slot == slot) return &l;
    return nullptr;
}

}  // namespace detail

// Channel j of a BN layer goes iff |gamma_j| < threshold. Downstream conv
// input channels and upstream conv output channels follow the BN they wrap;
// projection-shortcut BNs are handled by reconciliation instead.
inline PruneResult prune(const Model& model, real threshold) {
    PruneResult out;
    out.report.threshold = threshold;
    const auto& units = model.units();

    for (std::size_t i = 0; i < units.size(); ++i) {
        const auto& u = units[i];
        if (u.bn) out.report.layers.push_back(detail::prune_bn(*u.bn, i, "bn", threshold));
        if (u.bn1) out.report.layers.push_back(detail::prune_bn(*u.bn1, i, "bn1", threshold));
        if (u.bn2) out.report.layers.push_back(detail::prune_bn(*u.bn2, i, "bn2", threshold));
    }
    for (const auto& l : out.report.layers) {
        out.report.channels_total += l.total;
        out.report.channels_kept += l.kept.size();
    }
    out.report.ratio = 1.0 - static_cast<double>(out.report.channels_kept) /
                                 static_cast<double>(out.report.channels_total);
    out.report.params_before = count_params(model.spec());

    // Rewrite the spec with kept counts, threading channel counts through.
    ModelSpec spec = model.spec();
    std::size_t cur = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        LayerSpec& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv: {
                if (cur) l.in_channels = cur;
                // out follows this conv's BN if one directly follows
                if (i + 1 < spec.layers.size() && spec.layers[i + 1].kind == LayerKind::BatchNorm)
                    if (const auto* p = detail::find(out.report, i + 1, "bn"))
                        l.out_channels = p->kept.size();
                cur = l.out_channels;
                break;
            }
            case LayerKind::BatchNorm:
                l.in_channels = l.out_channels = cur;
                break;
            case LayerKind::Relu:
            case LayerKind::Pool:
                if (l.in_channels) l.in_channels = l.out_channels = cur;
                break;
            case LayerKind::Linear:
                if (cur) l.in_channels = cur;
                cur = l.out_channels;
                break;
            case LayerKind::ResidualBlock: {
                if (cur) l.in_channels = cur;
                if (const auto* p = detail::find(out.report, i, "bn1"))
                    l.mid_channels = p->kept.size();
                if (const auto* p = detail::find(out.report, i, "bn2"))
                    l.out_channels = p->kept.size();
                cur = l.out_channels;
                break;
            }
        }
    }
    out.spec = std::move(spec);
    out.report.params_after = count_params(out.spec);
    return out;
}

// acc_P: all pruned channels set to 0 in the original network (gamma and
// beta zeroed, BN eval mode).
inline Model zero_pruned(const Model& model, const PruneReport& rep) {
    Model z = model;
    auto& units = z.units();
    for (const auto& l : rep.layers) {
        BnUnit* bn = nullptr;
        if (l.slot == "bn") bn = &*units[l.layer].bn;
        if (l.slot == "bn1") bn = &*units[l.layer].bn1;
        if (l.slot == "bn2") bn = &*units[l.layer].bn2;
        if (!bn) continue;
        std::vector<char> keep(l.total, 0);
        for (std::size_t j : l.kept) keep[j] = 1;
        for (std::size_t j = 0; j < l.total; ++j)
            if (!keep[j]) {
                bn->gamma.value[j] = 0;
                bn->beta.value[j] = 0;
            }
    }
    return z;
}

// ---- residual reconciliation ----

// Resize a kept set to `target` channels. Padding re-adds pruned channels by
// descending |gamma| (fresh init at rebuild time); shrinking drops kept
// channels by ascending |gamma|. Ties break on the lower index.
inline std::vector<std::size_t> resize_kept(const std::vector<std::size_t>& kept,
                                            const std::vector<real>& gamma_abs,
                                            std::size_t target) {
    std::vector<std::size_t> result = kept;
    if (result.size() < target) {
        std::vector<char> in(gamma_abs.size(), 0);
        for (std::size_t j : result) in[j] = 1;
        std::vector<std::size_t> pruned;
        for (std::size_t j = 0; j < gamma_abs.size(); ++j)
            if (!in[j]) pruned.push_back(j);
        std::stable_sort(pruned.begin(), pruned.end(), [&](std::size_t a, std::size_t b) {
            return gamma_abs[a] > gamma_abs[b];
        });
        const std::size_t need = target - result.size();
        if (need > pruned.size())
            throw ConfigError("resize_kept: cannot pad beyond the original channel count");
        result.insert(result.end(), pruned.begin(),
                      pruned.begin() + static_cast<std::ptrdiff_t>(need));
    } else if (result.size() > target) {
        std::stable_sort(result.begin(), result.end(), [&](std::size_t a, std::size_t b) {
            return gamma_abs[a] < gamma_abs[b];
        });
        result.erase(result.begin(),
                     result.begin() + static_cast<std::ptrdiff_t>(result.size() - target));
    }
    std::sort(result.begin(), result.end());
    return result;
}

// Within each stage of identity-shortcut blocks, the block output is the
// reference and the input side is padded or shrunk to match. Chains resolve
// by a backward sweep: the last block's bn2 count becomes the stage width and
// every upstream producer (previous bn2, or the stem/projection BN) is
// resized to it using its own |gamma| ranking. The rebuilt spec never
// inherits trained weights; retraining is mandatory.
inline ModelSpec reconcile_residual(const ModelSpec& pruned, const ModelSpec& original,
                                    PruneReport& rep) {
    if (pruned.layers.size() != original.layers.size())
        throw ConfigError("reconcile_residual: spec layer count mismatch");

    // producer(i) = report entry whose kept set defines the channels flowing
    // into layer i.
    struct BlockRef {
        std::size_t layer;
        LayerPrune* producer;  // feeds the block input (null for the first)
        bool identity;
    };
    std::vector<BlockRef> blocks;
    LayerPrune* cur = nullptr;
    for (std::size_t i = 0; i < original.layers.size(); ++i) {
        const LayerSpec& l = original.layers[i];
        switch (l.kind) {
            case LayerKind::BatchNorm:
                cur = detail::find(rep, i, "bn");
                break;
            case LayerKind::ResidualBlock: {
                const bool identity = !l.projection();
                blocks.push_back({i, cur, identity});
                cur = detail::find(rep, i, "bn2");
                break;
            }
            default:
                break;
        }
    }

    // Backward sweep over identity blocks.
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
        if (!it->identity || !it->producer) continue;
        const LayerPrune* bn2 = detail::find(rep, it->layer, "bn2");
        if (!bn2) continue;
        it->producer->kept = resize_kept(it->producer->kept, it->producer->gamma_abs,
                                         bn2->kept.size());
    }

    // Rebuild counts from the adjusted kept sets.
    ModelSpec spec = original;
    std::size_t chans = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        LayerSpec& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv:
                if (chans) l.in_channels = chans;
                if (i + 1 < spec.layers.size() && spec.layers[i + 1].kind == LayerKind::BatchNorm)
                    if (const auto* p = detail::find(rep, i + 1, "bn"))
                        l.out_channels = p->kept.size();
                chans = l.out_channels;
                break;
            case LayerKind::BatchNorm:
                l.in_channels = l.out_channels = chans;
                break;
            case LayerKind::Relu:
            case LayerKind::Pool:
                if (l.in_channels) l.in_channels = l.out_channels = chans;
                break;
            case LayerKind::Linear:
                if (chans) l.in_channels = chans;
                chans = l.out_channels;
                break;
            case LayerKind::ResidualBlock: {
                if (chans) l.in_channels = chans;
                if (const auto* p = detail::find(rep, i, "bn1"))
                    l.mid_channels = p->kept.size();
                if (const auto* p = detail::find(rep, i, "bn2"))
                    l.out_channels = p->kept.size();
                chans = l.out_channels;
                break;
            }
        }
    }
    spec.validate();
    rep.params_after = count_params(spec);
    return spec;
}

// Fresh-initialization retrain of a reconciled spec; records acc_R.
inline std::pair<Model, double> retrain(const ModelSpec& spec, const Dataset& data,
                                        const TrainConfig& cfg, real bn_gamma_init = real(0.5)) {
    Model model(spec, ModelInit{cfg.seed, bn_gamma_init});
    train(model, data, cfg);
    const double acc = evaluate(model, data.test_x, data.test_y);
    return {std::move(model), acc};
}

// ---- structural equivalence (chain models) ----

// Builds the physically pruned network with copied (sliced) weights for
// specs without residual blocks. Zeroing pruned channels in the original and
// removing them here must agree exactly in eval mode.
inline Model build_pruned_chain(const Model& model, const PruneResult& pr) {
    for (const auto& l : model.spec().layers)
        if (l.kind == LayerKind::ResidualBlock)
            throw ConfigError("build_pruned_chain: chain models only");
    Model out(pr.spec, ModelInit{1, real(1)});
    const auto& src_units = model.units();
    auto& dst_units = out.units();
    std::vector<std::size_t> in_keep;  // kept input channels for the next conv/linear

    for (std::size_t i = 0; i < src_units.size(); ++i) {
        const auto& su = src_units[i];
        auto& du = dst_units[i];
        if (su.conv) {
            std::vector<std::size_t> out_keep;
            if (const auto* p = detail::find(pr.report, i + 1, "bn"))
                out_keep = p->kept;
            else
                for (std::size_t j = 0; j < su.conv->w.value.dim(0); ++j) out_keep.push_back(j);
            std::vector<std::size_t> ik = in_keep;
            if (ik.empty())
                for (std::size_t j = 0; j < su.conv->w.value.dim(1); ++j) ik.push_back(j);
            const auto& w = su.conv->w.value;
            auto& dw = du.conv->w.value;
            const std::size_t k = w.dim(2);
            for (std::size_t oc = 0; oc < out_keep.size(); ++oc)
                for (std::size_t ic = 0; ic < ik.size(); ++ic)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            dw(oc, ic, ky, kx) = w(out_keep[oc], ik[ic], ky, kx);
            in_keep = out_keep;
        } else if (su.bn) {
            const auto* p = detail::find(pr.report, i, "bn");
            std::vector<std::size_t> keep;
            if (p)
                keep = p->kept;
            else
                for (std::size_t j = 0; j < su.bn->gamma.value.size(); ++j) keep.push_back(j);
            for (std::size_t j = 0; j < keep.size(); ++j) {
                du.bn->gamma.value[j] = su.bn->gamma.value[keep[j]];
                du.bn->beta.value[j] = su.bn->beta.value[keep[j]];
                du.bn->state.running_mean[j] = su.bn->state.running_mean[keep[j]];
                du.bn->state.running_var[j] = su.bn->state.running_var[keep[j]];
            }
        } else if (su.lin) {
            std::vector<std::size_t> ik = in_keep;
            if (ik.empty())
                for (std::size_t j = 0; j < su.lin->w.value.dim(0); ++j) ik.push_back(j);
            const auto& w = su.lin->w.value;
            auto& dw = du.lin->w.value;
            for (std::size_t r = 0; r < ik.size(); ++r)
                for (std::size_t c = 0; c < w.dim(1); ++c) dw(r, c) = w(ik[r], c);
            du.lin->b.value = su.lin->b.value;
            in_keep.clear();
        }
    }
    return out;
}

}  // namespace qnn::slim
