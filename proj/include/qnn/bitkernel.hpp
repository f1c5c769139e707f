#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "qnn/im2col.hpp"
#include "qnn/quant.hpp"
#include "qnn/tensor.hpp"

namespace qnn::bitkernel {

inline int popcount64(std::uint64_t x) { return std::popcount(x); }

// Word-parallel fallback for platforms without a native instruction; tests
// assert agreement with popcount64 so either can serve the kernels.
inline int popcount64_portable(std::uint64_t x) {
    x = x - ((x >> 1) & 0x5555555555555555ull);
    x = (x & 0x3333333333333333ull) + ((x >> 2) & 0x3333333333333333ull);
    x = (x + (x >> 4)) & 0x0f0f0f0f0f0f0f0full;
    return static_cast<int>((x * 0x0101010101010101ull) >> 56);
}

constexpr std::size_t kWordBits = 64;

inline std::size_t words_for(std::size_t bits) { return (bits + kWordBits - 1) / kWordBits; }

// Bit-packed +-1 tensor: bit 1 encodes +1, bit 0 encodes -1. Packing runs
// along the last (reduction) axis, one padded row of words per leading index,
// so each dot product is contiguous. Padding bits are kept at 0 and masked
// out of every popcount.
struct PackedTensor {
    Shape shape;                     // logical shape
    std::size_t rows = 0;            // product of leading dims
    std::size_t row_bits = 0;        // logical length of the packed axis
    std::size_t words_per_row = 0;
    std::vector<std::uint64_t> bits;
    std::vector<real> alpha;         // optional per-filter scales

    std::size_t padding_bits() const { return words_per_row * kWordBits - row_bits; }

    std::uint64_t tail_mask() const {
        const std::size_t rem = row_bits % kWordBits;
        return rem == 0 ? ~0ull : (~0ull >> (kWordBits - rem));
    }

    const std::uint64_t* row(std::size_t r) const { return bits.data() + r * words_per_row; }
    std::uint64_t* row(std::size_t r) { return bits.data() + r * words_per_row; }
};

inline PackedTensor pack(const Tensor& t) {
    if (t.empty()) throw ShapeError("pack: empty tensor");
    PackedTensor p;
    p.shape = t.shape();
    p.row_bits = t.shape().back();
    p.rows = t.size() / p.row_bits;
    p.words_per_row = words_for(p.row_bits);
    p.bits.assign(p.rows * p.words_per_row, 0);
    for (std::size_t r = 0; r < p.rows; ++r) {
        std::uint64_t* w = p.row(r);
        const real* src = t.data() + r * p.row_bits;
        for (std::size_t i = 0; i < p.row_bits; ++i) {
            if (src[i] == real(1))
                w[i / kWordBits] |= 1ull << (i % kWordBits);
            else if (src[i] != real(-1))
                throw PrecisionError("pack: element at flat index " +
                                     std::to_string(r * p.row_bits + i) + " is " +
                                     std::to_string(double(src[i])) + ", expected exactly +-1");
        }
    }
    return p;
}

inline Tensor unpack(const PackedTensor& p) {
    Tensor t(p.shape);
    for (std::size_t r = 0; r < p.rows; ++r) {
        const std::uint64_t* w = p.row(r);
        real* dst = t.data() + r * p.row_bits;
        for (std::size_t i = 0; i < p.row_bits; ++i)
            dst[i] = (w[i / kWordBits] >> (i % kWordBits)) & 1u ? real(1) : real(-1);
    }
    return t;
}

// Integer dot product of two packed +-1 rows: 2*popcount(XNOR) - L.
inline long long xnor_dot_row(const std::uint64_t* a, const std::uint64_t* b,
                              std::size_t words, std::size_t logical_len,
                              std::uint64_t tail_mask) {
    long long matches = 0;
    for (std::size_t w = 0; w < words; ++w) {
        std::uint64_t x = ~(a[w] ^ b[w]);
        if (w + 1 == words) x &= tail_mask;
        matches += popcount64(x);
    }
    return 2 * matches - static_cast<long long>(logical_len);
}

inline long long xnor_dot(const PackedTensor& a, const PackedTensor& b, std::size_t row_a = 0,
                          std::size_t row_b = 0) {
    if (a.row_bits != b.row_bits)
        throw ShapeError("xnor_dot: logical length mismatch " + std::to_string(a.row_bits) +
                         " vs " + std::to_string(b.row_bits));
    return xnor_dot_row(a.row(row_a), b.row(row_b), a.words_per_row, a.row_bits, a.tail_mask());
}

// Masked variant: only taps whose mask bit is 1 contribute.
//   sum_{valid} a_i * b_i = 2*popcount(XNOR & mask) - popcount(mask)
inline long long xnor_dot_masked(const std::uint64_t* a, const std::uint64_t* b,
                                 const std::uint64_t* mask, std::size_t words) {
    long long matches = 0, valid = 0;
    for (std::size_t w = 0; w < words; ++w) {
        const std::uint64_t m = mask[w];
        matches += popcount64(~(a[w] ^ b[w]) & m);
        valid += popcount64(m);
    }
    return 2 * matches - valid;
}

enum class ActDomain {
    PlusMinusOne,  // activations are exactly +-1; padded taps contribute 0
    ZeroOne        // activations on the 1-bit {0,1} grid; 0 maps to bit 0
};

// Patch rows in the packed domain. For ZeroOne inputs the map a -> 2a-1 sends
// padding zeros to -1, so rows need no mask; for PlusMinusOne inputs padded
// taps must contribute nothing, so a validity mask rides along.
struct PackedPatches {
    std::size_t rows = 0, row_bits = 0, words_per_row = 0;
    std::vector<std::uint64_t> bits;
    std::vector<std::uint64_t> mask;  // empty when no mask is needed
};

inline PackedPatches pack_patches(const Tensor& x, const ConvGeom& g, ActDomain domain) {
    if (x.rank() != 4) throw ShapeError("pack_patches: need [N,C,H,W]");
    const std::size_t n = x.dim(0), oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    PackedPatches p;
    p.rows = n * oh * ow;
    p.row_bits = g.patch_len();
    p.words_per_row = words_for(p.row_bits);
    p.bits.assign(p.rows * p.words_per_row, 0);
    const bool need_mask = domain == ActDomain::PlusMinusOne;
    if (need_mask) p.mask.assign(p.rows * p.words_per_row, 0);
    std::size_t row = 0;
    for (std::size_t im = 0; im < n; ++im)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx, ++row) {
                std::uint64_t* wb = p.bits.data() + row * p.words_per_row;
                std::uint64_t* wm = need_mask ? p.mask.data() + row * p.words_per_row : nullptr;
                for (std::size_t c = 0; c < g.in_c; ++c)
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(xx * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.pad);
                            const std::size_t bit = (c * k + ky) * k + kx;
                            const bool inside = iy >= 0 && ix >= 0 &&
                                                iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                                ix < static_cast<std::ptrdiff_t>(g.in_w);
                            if (!inside) continue;  // ZeroOne: 0 -> -1 -> bit 0; PlusMinusOne: masked off
                            const real v = x(im, c, static_cast<std::size_t>(iy),
                                             static_cast<std::size_t>(ix));
                            bool one;
                            if (domain == ActDomain::PlusMinusOne) {
                                if (v != real(1) && v != real(-1))
                                    throw PrecisionError("pack_patches: activation is " +
                                                         std::to_string(double(v)) +
                                                         ", expected exactly +-1");
                                one = v == real(1);
                            } else {
                                if (v != real(0) && v != real(1))
                                    throw PrecisionError("pack_patches: activation is " +
                                                         std::to_string(double(v)) +
                                                         ", expected exactly 0 or 1");
                                one = v == real(1);
                            }
                            if (one) wb[bit / kWordBits] |= 1ull << (bit % kWordBits);
                            if (wm) wm[bit / kWordBits] |= 1ull << (bit % kWordBits);
                        }
                    }
            }
    return p;
}

// Packs conv weights [out_c, in_c, k, k] of +-1 codes, one row per filter.
inline PackedTensor pack_filters(const Tensor& codes, std::span<const real> alpha) {
    if (codes.rank() != 4) throw ShapeError("pack_filters: need [out_c,in_c,k,k]");
    const std::size_t out_c = codes.dim(0), plen = codes.size() / out_c;
    PackedTensor p = pack(codes.reshaped({out_c, plen}));
    p.shape = codes.shape();
    p.alpha.assign(alpha.begin(), alpha.end());
    if (p.alpha.size() == 1 && out_c > 1) p.alpha.assign(out_c, alpha[0]);
    if (p.alpha.size() != out_c)
        throw ShapeError("pack_filters: " + std::to_string(alpha.size()) + " scales for " +
                         std::to_string(out_c) + " filters");
    return p;
}

// Binary convolution over bit-packed operands. Integer accumulation per
// output, one float multiply at the end, exactly equal to the float path:
//   PlusMinusOne:  y = alpha_f * sum_valid(w * a)
//   ZeroOne:       y = alpha_f * (xnor_full + sum(w)) / 2   via a = (a_pm + 1)/2
inline Tensor binary_conv2d(const Tensor& activations, const PackedTensor& weights,
                            const ConvGeom& g, ActDomain domain) {
    const std::size_t out_c = weights.shape.at(0);
    if (weights.row_bits != g.patch_len())
        throw ShapeError("binary_conv2d: filter length " + std::to_string(weights.row_bits) +
                         " vs patch " + std::to_string(g.patch_len()));
    if (weights.alpha.size() != out_c)
        throw ShapeError("binary_conv2d: missing per-filter scales");
    const std::size_t n = activations.dim(0), oh = g.out_h(), ow = g.out_w();
    PackedPatches patches = pack_patches(activations, g, domain);

    // Per-filter +-1 weight sums feed the {0,1} affine correction.
    std::vector<long long> w_sum(out_c, 0);
    if (domain == ActDomain::ZeroOne) {
        const std::uint64_t tm = weights.tail_mask();
        for (std::size_t f = 0; f < out_c; ++f) {
            const std::uint64_t* wr = weights.row(f);
            long long ones = 0;
            for (std::size_t w = 0; w < weights.words_per_row; ++w) {
                std::uint64_t x = wr[w];
                if (w + 1 == weights.words_per_row) x &= tm;
                ones += popcount64(x);
            }
            w_sum[f] = 2 * ones - static_cast<long long>(weights.row_bits);
        }
    }

    Tensor out({n, out_c, oh, ow});
    const std::uint64_t tm = weights.tail_mask();
    std::size_t row = 0;
    for (std::size_t im = 0; im < n; ++im)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x, ++row) {
                const std::uint64_t* arow = patches.bits.data() + row * patches.words_per_row;
                for (std::size_t f = 0; f < out_c; ++f) {
                    const std::uint64_t* wrow = weights.row(f);
                    long long acc;
                    if (domain == ActDomain::PlusMinusOne) {
                        acc = xnor_dot_masked(arow, wrow,
                                              patches.mask.data() + row * patches.words_per_row,
                                              patches.words_per_row);
                    } else {
                        const long long full = xnor_dot_row(arow, wrow, patches.words_per_row,
                                                            patches.row_bits, tm);
                        acc = (full + w_sum[f]) / 2;
                    }
                    out(im, f, y, x) = weights.alpha[f] * static_cast<real>(acc);
                }
            }
    return out;
}

// Memory footprint of a packed filter bank next to its float32 twin.
struct PackedFootprint {
    std::size_t packed_bytes = 0;
    std::size_t float32_bytes = 0;
    std::size_t float64_bytes = 0;
};

inline PackedFootprint footprint(std::size_t out_c, std::size_t patch_len) {
    PackedFootprint f;
    f.packed_bytes = words_for(patch_len) * sizeof(std::uint64_t) * out_c;
    f.float32_bytes = patch_len * out_c * 4;
    f.float64_bytes = patch_len * out_c * 8;
    return f;
}

}  // namespace qnn::bitkernel
