#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "qnn/bitkernel.hpp"
#include "qnn/model.hpp"

namespace qnn {

// Model container, little-endian throughout:
//   magic   "QNNF"
//   version u32                            (currently 1)
//   spec    u32 byte length + UTF-8 JSON   (ModelSpec)
//   blobs   float64 parameter values per layer, declaration order:
//             conv            w
//             linear          w, b
//             batchnorm       gamma, beta, running_mean, running_var
//             residual-block  conv1.w, bn1(g,b,rm,rv), conv2.w, bn2(...),
//                             then conv_sc.w, bn_sc(...) when projecting
//   optional packed-weights section:
//   tag     "BPK1"
//   count   u32 entries, each:
//             unit  u32   layer index
//             slot  u8    0=conv 1=conv1 2=conv2 3=conv_sc
//             rows  u64, row_bits u64, words_per_row u64
//             words u64 * rows * words_per_row
//             nalpha u32 + float64 scales
// Optimizer state (momentum buffers) is not part of the container.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    put_u64(os, u);
}

struct Reader {
    std::istream& is;
    std::size_t offset = 0;

    void read(void* dst, std::size_t n, const char* what) {
        is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is.gcount()) != n)
            throw ParseError(std::string("unexpected end of file reading ") + what, offset);
        offset += n;
    }

    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        read(b, 4, what);
        return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
               std::uint32_t(b[3]) << 24;
    }

    std::uint64_t u64(const char* what) {
        unsigned char b[8];
        read(b, 8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
        return v;
    }

    double f64(const char* what) {
        const std::uint64_t u = u64(what);
        double d;
        std::memcpy(&d, &u, 8);
        return d;
    }
};

inline void write_tensor(std::ostream& os, const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(os, static_cast<double>(t[i]));
}

inline void read_tensor(Reader& r, Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<real>(r.f64("parameter blob"));
}

inline void write_bn(std::ostream& os, const BnUnit& bn) {
    write_tensor(os, bn.gamma.value);
    write_tensor(os, bn.beta.value);
    write_tensor(os, bn.state.running_mean);
    write_tensor(os, bn.state.running_var);
}

inline void read_bn(Reader& r, BnUnit& bn) {
    read_tensor(r, bn.gamma.value);
    read_tensor(r, bn.beta.value);
    read_tensor(r, bn.state.running_mean);
    read_tensor(r, bn.state.running_var);
}

}  // namespace detail

constexpr std::uint32_t kModelFormatVersion = 1;

struct PackedSection {
    struct Entry {
        std::uint32_t unit = 0;
        std::uint8_t slot = 0;
        bitkernel::PackedTensor packed;
    };
    std::vector<Entry> entries;
};

inline void save_model(const Model& model, const std::string& path,
                       const PackedSection* packed = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    os.write("QNNF", 4);
    detail::put_u32(os, kModelFormatVersion);
    const std::string json = model.spec().to_json().dump();
    detail::put_u32(os, static_cast<std::uint32_t>(json.size()));
    os.write(json.data(), static_cast<std::streamsize>(json.size()));
    for (const auto& u : model.units()) {
        if (u.conv) detail::write_tensor(os, u.conv->w.value);
        if (u.lin) {
            detail::write_tensor(os, u.lin->w.value);
            detail::write_tensor(os, u.lin->b.value);
        }
        if (u.bn) detail::write_bn(os, *u.bn);
        if (u.conv1) {
            detail::write_tensor(os, u.conv1->w.value);
            detail::write_bn(os, *u.bn1);
            detail::write_tensor(os, u.conv2->w.value);
            detail::write_bn(os, *u.bn2);
            if (u.conv_sc) {
                detail::write_tensor(os, u.conv_sc->w.value);
                detail::write_bn(os, *u.bn_sc);
            }
        }
    }
    if (packed) {
        os.write("BPK1", 4);
        detail::put_u32(os, static_cast<std::uint32_t>(packed->entries.size()));
        for (const auto& e : packed->entries) {
            detail::put_u32(os, e.unit);
            os.put(static_cast<char>(e.slot));
            detail::put_u64(os, e.packed.rows);
            detail::put_u64(os, e.packed.row_bits);
            detail::put_u64(os, e.packed.words_per_row);
            for (std::uint64_t w : e.packed.bits) detail::put_u64(os, w);
            detail::put_u32(os, static_cast<std::uint32_t>(e.packed.alpha.size()));
            for (real a : e.packed.alpha) detail::put_f64(os, static_cast<double>(a));
        }
    }
    if (!os) throw ConfigError("write failed for " + path);
}

inline Model load_model(const std::string& path, PackedSection* packed_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open " + path);
    detail::Reader r{is};
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, "QNNF", 4) != 0) throw ParseError("bad magic, expected QNNF", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kModelFormatVersion)
        throw ParseError("unsupported container version " + std::to_string(version), 4);
    const std::uint32_t jlen = r.u32("spec length");
    std::string json(jlen, '\0');
    r.read(json.data(), jlen, "spec json");
    ModelSpec spec;
    try {
        spec = ModelSpec::from_json(nlohmann::json::parse(json));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("spec json: ") + e.what(), 12);
    }
    Model model(spec, ModelInit{0, real(1)});
    for (auto& u : model.units()) {
        if (u.conv) detail::read_tensor(r, u.conv->w.value);
        if (u.lin) {
            detail::read_tensor(r, u.lin->w.value);
            detail::read_tensor(r, u.lin->b.value);
        }
        if (u.bn) detail::read_bn(r, *u.bn);
        if (u.conv1) {
            detail::read_tensor(r, u.conv1->w.value);
            detail::read_bn(r, *u.bn1);
            detail::read_tensor(r, u.conv2->w.value);
            detail::read_bn(r, *u.bn2);
            if (u.conv_sc) {
                detail::read_tensor(r, u.conv_sc->w.value);
                detail::read_bn(r, *u.bn_sc);
            }
        }
    }
    if (packed_out) {
        char tag[4];
        is.read(tag, 4);
        if (is.gcount() == 4 && std::memcmp(tag, "BPK1", 4) == 0) {
            r.offset += 4;
            const std::uint32_t count = r.u32("packed count");
            for (std::uint32_t i = 0; i < count; ++i) {
                PackedSection::Entry e;
                e.unit = r.u32("packed unit");
                char slot;
                r.read(&slot, 1, "packed slot");
                e.slot = static_cast<std::uint8_t>(slot);
                e.packed.rows = r.u64("packed rows");
                e.packed.row_bits = r.u64("packed row bits");
                e.packed.words_per_row = r.u64("packed words");
                e.packed.bits.resize(e.packed.rows * e.packed.words_per_row);
                for (auto& w : e.packed.bits) w = r.u64("packed word");
                const std::uint32_t na = r.u32("alpha count");
                e.packed.alpha.resize(na);
                for (auto& a : e.packed.alpha) a = static_cast<real>(r.f64("alpha"));
                e.packed.shape = {e.packed.rows, e.packed.row_bits};
                packed_out->entries.push_back(std::move(e));
            }
        }
    }
    return model;
}

}  // namespace qnn
