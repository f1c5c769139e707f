#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "qnn/dataset.hpp"
#include "qnn/embed.hpp"
#include "qnn/model_io.hpp"
#include "qnn/quant.hpp"

using namespace qnn;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / name; }

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("model container round trip preserves spec and every parameter bit") {
    ModelSpec spec = toy_resnet_spec(1, 4, 4, 1, 1, 2);
    Model m(spec, ModelInit{77, 0.5});
    // nudge running stats so they are not defaults
    Rng rng(3);
    for (auto& ref : m.prunable_bns())
        for (std::size_t i = 0; i < ref.unit->state.running_mean.size(); ++i) {
            ref.unit->state.running_mean[i] = static_cast<real>(rng.normal());
            ref.unit->state.running_var[i] = static_cast<real>(rng.uniform(0.5, 2.0));
        }
    const std::string path = tmp("qnn_model.qnnf").string();
    save_model(m, path);
    Model back = load_model(path);

    REQUIRE(back.spec().layers.size() == m.spec().layers.size());
    Tensor x = Tensor::randn({2, 1, 8, 8}, rng);
    Var a = m.forward(x, false);
    Var b = back.forward(x, false);
    for (std::size_t i = 0; i < a.value().size(); ++i) CHECK(a.value()[i] == b.value()[i]);
    std::remove(path.c_str());
}

TEST_CASE("model container: bad magic is a parse error at offset 0") {
    const fs::path p = tmp("qnn_bad_magic.qnnf");
    write_bytes(p, {'N', 'O', 'P', 'E', 1, 0, 0, 0});
    try {
        load_model(p.string());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset == 0);
    }
    fs::remove(p);
}

TEST_CASE("model container: truncation reports the byte offset") {
    ModelSpec spec = small_cnn_spec(1, 4, 4, 32, 32);
    Model m(spec, ModelInit{1, 1});
    const fs::path p = tmp("qnn_trunc.qnnf");
    save_model(m, p.string());
    const auto full = fs::file_size(p);
    fs::resize_file(p, full / 2);
    CHECK_THROWS_AS(load_model(p.string()), ParseError);
    fs::remove(p);
}

TEST_CASE("packed weight section round trips through the container") {
    ModelSpec spec = small_cnn_spec(1, 4, 4, 1, 1);
    Model m(spec, ModelInit{5, 0.5});
    PackedSection packed;
    for (std::size_t i = 0; i < m.units().size(); ++i) {
        const auto& u = m.units()[i];
        if (!u.conv || u.spec.weight_bits != 1) continue;
        auto bin = quant::binarize_weights(u.conv->w.value, quant::Granularity::PerFilter);
        PackedSection::Entry e;
        e.unit = static_cast<std::uint32_t>(i);
        e.slot = 0;
        e.packed = bitkernel::pack_filters(bin.codes, bin.alpha);
        packed.entries.push_back(std::move(e));
    }
    REQUIRE(!packed.entries.empty());

    const std::string path = tmp("qnn_packed.qnnf").string();
    save_model(m, path, &packed);
    PackedSection back;
    Model loaded = load_model(path, &back);
    REQUIRE(back.entries.size() == packed.entries.size());
    for (std::size_t i = 0; i < back.entries.size(); ++i) {
        CHECK(back.entries[i].unit == packed.entries[i].unit);
        CHECK(back.entries[i].packed.bits == packed.entries[i].packed.bits);
        CHECK(back.entries[i].packed.row_bits == packed.entries[i].packed.row_bits);
        REQUIRE(back.entries[i].packed.alpha.size() == packed.entries[i].packed.alpha.size());
        for (std::size_t j = 0; j < back.entries[i].packed.alpha.size(); ++j)
            CHECK(back.entries[i].packed.alpha[j] == packed.entries[i].packed.alpha[j]);
    }
    std::remove(path.c_str());
}

TEST_CASE("IDX loader: wrong magic fails at offset 0, good files load") {
    const fs::path bad = tmp("qnn_bad.idx");
    write_bytes(bad, {0x00, 0x00, 0x09, 0x99, 0, 0, 0, 1});
    try {
        load_idx_images(bad.string());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset == 0);
    }
    fs::remove(bad);

    // hand-assembled 2-image 2x2 idx3 file plus labels
    const fs::path imgs = tmp("qnn_imgs.idx");
    write_bytes(imgs, {0x00, 0x00, 0x08, 0x03,  // magic 0x803
                       0x00, 0x00, 0x00, 0x02,  // 2 images
                       0x00, 0x00, 0x00, 0x02,  // 2 rows
                       0x00, 0x00, 0x00, 0x02,  // 2 cols
                       0, 255, 128, 64, 255, 0, 0, 32});
    Tensor x = load_idx_images(imgs.string());
    CHECK(x.shape() == Shape{2, 1, 2, 2});
    CHECK(x(0, 0, 0, 1) == doctest::Approx(1.0));
    CHECK(x(1, 0, 0, 0) == doctest::Approx(1.0));
    fs::remove(imgs);

    const fs::path labels = tmp("qnn_labels.idx");
    write_bytes(labels, {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 1, 0});
    auto y = load_idx_labels(labels.string());
    REQUIRE(y.size() == 2);
    CHECK(y[0] == 1);
    CHECK(y[1] == 0);
    fs::remove(labels);
}

TEST_CASE("CSV loader: 2 features + label column, malformed rows carry offsets") {
    const fs::path p = tmp("qnn_data.csv");
    {
        std::ofstream os(p);
        os << "0.5,1.25,0\n-1.0,2.5,1\n3.5,-0.25,1\n";
    }
    Tensor x;
    std::vector<int> y;
    std::size_t classes = 0;
    load_csv(p.string(), x, y, classes);
    CHECK(x.shape() == Shape{3, 2});
    CHECK(classes == 2);
    CHECK(y == std::vector<int>{0, 1, 1});
    CHECK(x(1, 1) == doctest::Approx(2.5));
    fs::remove(p);

    const fs::path bad = tmp("qnn_bad.csv");
    {
        std::ofstream os(bad);
        os << "1.0,2.0,0\nnot_a_number,2.0,1\n";
    }
    try {
        load_csv(bad.string(), x, y, classes);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset == 10);  // second line starts after "1.0,2.0,0\n"
    }
    fs::remove(bad);
}

TEST_CASE("feature matrix file round trip") {
    Rng rng(9);
    Tensor Y = Tensor::randn({7, 5}, rng);
    const std::string path = tmp("qnn_features.bin").string();
    embed::save_features(path, Y);
    Tensor back = embed::load_features(path);
    REQUIRE(back.shape() == Y.shape());
    for (std::size_t i = 0; i < Y.size(); ++i) CHECK(back[i] == Y[i]);
    std::remove(path.c_str());
}

TEST_CASE("embed state sidecar writes and has the documented layout") {
    Rng rng(11);
    Tensor Y = Tensor::randn({10, 3}, rng);
    embed::EmbedConfig cfg;
    cfg.m = 6;
    cfg.rounds = 1;
    cfg.m_epochs = 2;
    cfg.p_epochs = 2;
    embed::EmbedState st = embed::alternate(Y, cfg);
    const fs::path p = tmp("qnn_state.embed");
    embed::save_state(p.string(), st);
    std::ifstream is(p, std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    CHECK(std::string(magic, 4) == "QEM1");
    CHECK(fs::file_size(p) == 4 + 8 * 2 + 8 * 2 + 8 * st.P.size() + 8 * st.M.size() + st.m);
    fs::remove(p);
}
