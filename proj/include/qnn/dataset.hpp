#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qnn/error.hpp"
#include "qnn/rng.hpp"
#include "qnn/tensor.hpp"

namespace qnn {

// Train/test splits with disjoint samples. Images are [N,C,H,W]; tabular
// data is [N,D]. Augmentation (pad-crop + mirror) applies to the train split
// only, at batch assembly time.
struct Dataset {
    Tensor train_x, test_x;
    std::vector<int> train_y, test_y;
    std::size_t classes = 0;
    bool images = false;
    Tensor norm_mean, norm_std;  // per-channel stats the loader applied (empty = none)
    std::size_t crop_pad = 0;    // random-crop padding in pixels; 0 disables
    bool mirror = false;

    std::size_t train_size() const { return train_y.size(); }
    std::size_t test_size() const { return test_y.size(); }

    void check() const {
        for (int y : train_y)
            if (y < 0 || static_cast<std::size_t>(y) >= classes)
                throw ConfigError("train label " + std::to_string(y) + " out of range");
        for (int y : test_y)
            if (y < 0 || static_cast<std::size_t>(y) >= classes)
                throw ConfigError("test label " + std::to_string(y) + " out of range");
    }
};

// ---- IDX (MNIST-style) ----

namespace detail {

inline std::uint32_t idx_read_u32_be(std::istream& is, std::size_t& offset, const char* what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw ParseError(std::string("truncated IDX ") + what, offset);
    offset += 4;
    return std::uint32_t(b[0]) << 24 | std::uint32_t(b[1]) << 16 | std::uint32_t(b[2]) << 8 |
           std::uint32_t(b[3]);
}

}  // namespace detail

// Reads an idx3-ubyte image file into [N,1,H,W] scaled to [0,1].
inline Tensor load_idx_images(const std::string& path, std::size_t limit = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path);
    std::size_t offset = 0;
    const std::uint32_t magic = detail::idx_read_u32_be(is, offset, "magic");
    if (magic != 0x00000803u)
        throw ParseError("bad IDX image magic 0x" + std::to_string(magic), 0);
    std::size_t n = detail::idx_read_u32_be(is, offset, "count");
    const std::size_t h = detail::idx_read_u32_be(is, offset, "rows");
    const std::size_t w = detail::idx_read_u32_be(is, offset, "cols");
    if (limit && limit < n) n = limit;
    Tensor out({n, 1, h, w});
    std::vector<unsigned char> row(w);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t y = 0; y < h; ++y) {
            is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(w));
            if (static_cast<std::size_t>(is.gcount()) != w)
                throw ParseError("truncated IDX pixel data", offset);
            offset += w;
            for (std::size_t x = 0; x < w; ++x)
                out(i, 0, y, x) = static_cast<real>(row[x]) / real(255);
        }
    return out;
}

// Reads an idx1-ubyte label file.
inline std::vector<int> load_idx_labels(const std::string& path, std::size_t limit = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path);
    std::size_t offset = 0;
    const std::uint32_t magic = detail::idx_read_u32_be(is, offset, "magic");
    if (magic != 0x00000801u)
        throw ParseError("bad IDX label magic 0x" + std::to_string(magic), 0);
    std::size_t n = detail::idx_read_u32_be(is, offset, "count");
    if (limit && limit < n) n = limit;
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = is.get();
        if (c == EOF) throw ParseError("truncated IDX labels", offset);
        ++offset;
        labels[i] = c;
    }
    return labels;
}

// ---- CSV tabular: feature columns then an integer label column ----

inline void load_csv(const std::string& path, Tensor& x, std::vector<int>& y,
                     std::size_t& classes) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open " + path);
    std::vector<std::vector<real>> rows;
    std::vector<int> labels;
    std::string line;
    std::size_t offset = 0, cols = 0;
    while (std::getline(is, line)) {
        const std::size_t line_start = offset;
        offset += line.size() + 1;
        if (line.empty()) continue;
        std::vector<real> vals;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                vals.push_back(static_cast<real>(std::stod(cell)));
            } catch (const std::exception&) {
                throw ParseError("bad CSV number '" + cell + "'", line_start);
            }
        }
        if (vals.size() < 2) throw ParseError("CSV row needs >= 2 columns", line_start);
        if (cols == 0) cols = vals.size();
        if (vals.size() != cols) throw ParseError("ragged CSV row", line_start);
        labels.push_back(static_cast<int>(vals.back()));
        vals.pop_back();
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw ParseError("empty CSV", 0);
    x = Tensor({rows.size(), cols - 1});
    int max_label = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j + 1 < cols; ++j) x(i, j) = rows[i][j];
        max_label = std::max(max_label, labels[i]);
    }
    y = std::move(labels);
    classes = static_cast<std::size_t>(max_label) + 1;
}

// ---- synthetic generators ----

// Isotropic Gaussian blobs, one center per class on a circle.
inline Dataset make_blobs(std::size_t classes, std::size_t train_n, std::size_t test_n,
                          real spread, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "blobs"));
    Dataset d;
    d.classes = classes;
    auto fill = [&](Tensor& x, std::vector<int>& y, std::size_t n) {
        x = Tensor({n, 2});
        y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = i % classes;
            const real angle = real(2 * 3.14159265358979323846) * static_cast<real>(c) /
                               static_cast<real>(classes);
            x(i, 0) = std::cos(angle) + static_cast<real>(rng.normal()) * spread;
            x(i, 1) = std::sin(angle) + static_cast<real>(rng.normal()) * spread;
            y[i] = static_cast<int>(c);
        }
    };
    fill(d.train_x, d.train_y, train_n);
    fill(d.test_x, d.test_y, test_n);
    return d;
}

// Two interleaved spirals, the classic hard 2-d benchmark.
inline Dataset make_spirals(std::size_t train_n, std::size_t test_n, real noise,
                            std::uint64_t seed) {
    Rng rng(derive_seed(seed, "spirals"));
    Dataset d;
    d.classes = 2;
    auto fill = [&](Tensor& x, std::vector<int>& y, std::size_t n) {
        x = Tensor({n, 2});
        y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const int c = static_cast<int>(i % 2);
            const real t = real(0.2) + real(3.0) * static_cast<real>(rng.uniform());
            const real angle = t * real(3.0) + (c ? real(3.14159265358979) : real(0));
            x(i, 0) = t * std::cos(angle) + static_cast<real>(rng.normal()) * noise;
            x(i, 1) = t * std::sin(angle) + static_cast<real>(rng.normal()) * noise;
            y[i] = c;
        }
    };
    fill(d.train_x, d.train_y, train_n);
    fill(d.test_x, d.test_y, test_n);
    return d;
}

// Oriented sinusoidal gratings with random phase, contrast jitter and pixel
// noise: an image task whose difficulty tracks model capacity, which is what
// the width/bits trend experiments need.
inline Dataset make_stripes(std::size_t classes, std::size_t train_n, std::size_t test_n,
                            std::size_t size, real noise, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "stripes"));
    Dataset d;
    d.classes = classes;
    d.images = true;
    auto fill = [&](Tensor& x, std::vector<int>& y, std::size_t n) {
        x = Tensor({n, 1, size, size});
        y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = i % classes;
            const real angle = real(3.14159265358979323846) * static_cast<real>(c) /
                               static_cast<real>(classes);
            const real fx = std::cos(angle), fy = std::sin(angle);
            const real phase = real(2 * 3.14159265358979323846) * static_cast<real>(rng.uniform());
            const real contrast = real(0.6) + real(0.4) * static_cast<real>(rng.uniform());
            const real freq = real(2 * 3.14159265358979323846) / real(4);  // period 4 px
            for (std::size_t py = 0; py < size; ++py)
                for (std::size_t px = 0; px < size; ++px) {
                    const real v = contrast * std::sin(freq * (fx * static_cast<real>(px) +
                                                               fy * static_cast<real>(py)) +
                                                       phase);
                    x(i, 0, py, px) = v + static_cast<real>(rng.normal()) * noise;
                }
            y[i] = static_cast<int>(c);
        }
    };
    fill(d.train_x, d.train_y, train_n);
    fill(d.test_x, d.test_y, test_n);
    return d;
}

// ---- augmentation (train split only) ----

// Zero-pad by `pad` then crop back at a random offset; optional horizontal
// mirror. Operates on one [C,H,W] sample inside a batch tensor.
inline void augment_sample(Tensor& batch, std::size_t index, std::size_t pad, bool mirror,
                           Rng& rng) {
    const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const bool flip = mirror && rng.coin();
    std::size_t dy = 0, dx = 0;
    if (pad) {
        dy = rng.below(2 * pad + 1);
        dx = rng.below(2 * pad + 1);
    }
    if (!flip && dy == pad && dx == pad) return;
    if (!flip && pad == 0) return;
    Tensor sample({c, h, w}, 0);
    for (std::size_t ic = 0; ic < c; ++ic)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                // source position in the padded image
                const std::ptrdiff_t sy =
                    static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t sx =
                    static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad);
                real v = 0;
                if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                    sx < static_cast<std::ptrdiff_t>(w)) {
                    const std::size_t ux = flip ? w - 1 - static_cast<std::size_t>(sx)
                                                : static_cast<std::size_t>(sx);
                    v = batch(index, ic, static_cast<std::size_t>(sy), ux);
                }
                sample[(ic * h + y) * w + x] = v;
            }
    for (std::size_t ic = 0; ic < c; ++ic)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) batch(index, ic, y, x) = sample[(ic * h + y) * w + x];
}

}  // namespace qnn
