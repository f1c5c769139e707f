#pragma once

#include <cstddef>
#include <string>

#include "qnn/tensor.hpp"

namespace qnn {

struct ConvGeom {
    std::size_t in_c = 1, in_h = 1, in_w = 1;
    std::size_t kernel = 1, stride = 1, pad = 0;

    std::size_t out_h() const { return out_dim(in_h); }
    std::size_t out_w() const { return out_dim(in_w); }
    std::size_t patch_len() const { return in_c * kernel * kernel; }

    std::size_t out_dim(std::size_t in) const {
        const std::size_t padded = in + 2 * pad;
        if (padded < kernel || stride == 0)
            throw ShapeError("conv geometry yields non-positive output: in=" + std::to_string(in) +
                             " kernel=" + std::to_string(kernel) + " stride=" +
                             std::to_string(stride) + " pad=" + std::to_string(pad));
        return (padded - kernel) / stride + 1;
    }
};

// Patch matrix layout: one row per output position (n-major, then oh, ow),
// columns ordered channel-major then kh, kw. A [N,c,H,W] input becomes
// [N*oh*ow, c*k*k]; multiplying by the stacked-filter matrix reproduces the
// convolution. Out-of-bounds taps read as zero.
inline Tensor im2col(const Tensor& input, const ConvGeom& g) {
    if (input.rank() != 4)
        throw ShapeError("im2col: need [N,C,H,W], got " + shape_str(input.shape()));
    if (input.dim(1) != g.in_c || input.dim(2) != g.in_h || input.dim(3) != g.in_w)
        throw ShapeError("im2col: input " + shape_str(input.shape()) + " does not match geometry [" +
                         std::to_string(g.in_c) + "," + std::to_string(g.in_h) + "," +
                         std::to_string(g.in_w) + "]");
    const std::size_t n = input.dim(0);
    const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    Tensor cols({n * oh * ow, g.patch_len()}, 0);
    std::size_t row = 0;
    for (std::size_t im = 0; im < n; ++im) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++row) {
                real* dst = cols.data() + row * g.patch_len();
                for (std::size_t c = 0; c < g.in_c; ++c) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(x * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.pad);
                            real v = 0;
                            if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                ix < static_cast<std::ptrdiff_t>(g.in_w))
                                v = input(im, c, static_cast<std::size_t>(iy),
                                          static_cast<std::size_t>(ix));
                            dst[(c * k + ky) * k + kx] = v;
                        }
                    }
                }
            }
        }
    }
    return cols;
}

// Scatter-add transpose of im2col, used by the convolution backward pass.
inline Tensor col2im(const Tensor& cols, std::size_t n, const ConvGeom& g) {
    const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    if (cols.rank() != 2 || cols.dim(0) != n * oh * ow || cols.dim(1) != g.patch_len())
        throw ShapeError("col2im: cols " + shape_str(cols.shape()) + " does not match geometry");
    Tensor img({n, g.in_c, g.in_h, g.in_w}, 0);
    std::size_t row = 0;
    for (std::size_t im = 0; im < n; ++im) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++row) {
                const real* src = cols.data() + row * g.patch_len();
                for (std::size_t c = 0; c < g.in_c; ++c) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(x * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
                            img(im, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                                src[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    return img;
}

}  // namespace qnn
