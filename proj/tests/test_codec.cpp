#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "wg/codec.hpp"
#include "wg/rng.hpp"

using namespace wg;
using codec::LayerEntry;
using codec::LayerKind;

namespace {

codec::LayoutManifest fc_conv_manifest() {
    // fc 2->3 with bias, conv 3x3 cin=2 cout=4 with bias
    return codec::make_manifest("toy",
                                {{"fc1.weight", LayerKind::fc, {3, 2}},
                                 {"fc1.bias", LayerKind::bias, {3}},
                                 {"conv1.weight", LayerKind::conv, {4, 2, 3, 3}},
                                 {"conv1.bias", LayerKind::bias, {4}}});
}

std::vector<Tensor> random_params(const codec::LayoutManifest& m, Rng& rng) {
    std::vector<Tensor> out;
    for (const auto& l : m.layers) out.push_back(Tensor::randn(l.shape, rng));
    return out;
}

} // namespace

TEST_CASE("fc and conv segment lengths follow the vectorization rule", "[codec]") {
    auto m = fc_conv_manifest();
    // fc 2->3 with bias: 2*3 + 3 = 9
    CHECK(m.layers[0].length + m.layers[1].length == 9);
    // conv kh=kw=3, cin=2, cout=4 with bias: 3*3*2*4 + 4 = 76
    CHECK(m.layers[2].length + m.layers[3].length == 76);
    CHECK(m.total_length == 85);
    CHECK(m.padded_length == 85); // d == d_max: padding region empty
}

TEST_CASE("flatten orders segments by manifest and zero-pads", "[codec]") {
    auto m = fc_conv_manifest();
    m.padded_length = 100;
    Rng rng(7);
    auto params = random_params(m, rng);
    auto fw = codec::flatten(params, m);
    REQUIRE(fw.values.size() == 100);
    CHECK(fw.values[0] == params[0][0]);
    CHECK(fw.values[9] == params[2][0]); // conv starts right after fc bias
    for (std::int64_t i = 85; i < 100; ++i) CHECK(fw.values[i] == 0.0);

    SECTION("shape mismatch names the offending layer") {
        params[2] = Tensor::zeros({4, 2, 3, 2});
        try {
            codec::flatten(params, m);
            FAIL("expected layout error");
        } catch (const codec::LayoutError& e) {
            CHECK(std::string(e.what()).find("conv1.weight") != std::string::npos);
        }
    }
}

TEST_CASE("flatten is deterministic and round-trips bit-exactly", "[codec]") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto m = fc_conv_manifest();
        m.padded_length = m.total_length + static_cast<std::int64_t>(rng.below(8));
        auto params = random_params(m, rng);
        auto fw = codec::flatten(params, m);
        auto fw2 = codec::flatten(params, m);
        REQUIRE(fw.values.size() == fw2.values.size());
        for (std::int64_t i = 0; i < fw.values.size(); ++i) CHECK(fw.values[i] == fw2.values[i]);

        auto back = codec::devectorize(fw);
        REQUIRE(back.size() == params.size());
        for (std::size_t li = 0; li < params.size(); ++li) {
            REQUIRE(back[li].shape() == params[li].shape());
            for (std::int64_t i = 0; i < back[li].size(); ++i)
                CHECK(back[li][i] == params[li][i]);
        }
    }
}

TEST_CASE("devectorize rejects corrupted inputs", "[codec]") {
    auto m = fc_conv_manifest();
    m.padded_length = 90;
    Rng rng(3);
    auto fw = codec::flatten(random_params(m, rng), m);

    SECTION("nonzero padding in strict mode") {
        fw.values[88] = 1e-9;
        CHECK_THROWS_AS(codec::devectorize(fw), codec::CorruptionError);
        CHECK_NOTHROW(codec::devectorize(fw, /*strict=*/false));
    }
    SECTION("manifest longer than values") {
        fw.values = Tensor::zeros({10});
        CHECK_THROWS_AS(codec::devectorize(fw), codec::CorruptionError);
    }
}

TEST_CASE("single bias-only layer round-trips", "[codec]") {
    auto m = codec::make_manifest("bias-only", {{"b", LayerKind::bias, {2}}});
    Tensor b({2}, std::vector<double>{0.5, -1.0});
    auto fw = codec::flatten({b}, m);
    auto back = codec::devectorize(fw);
    CHECK(back[0][0] == 0.5);
    CHECK(back[0][1] == -1.0);
}

TEST_CASE("chunking splits with ceil(mn/l) chunks and zero pad", "[codec]") {
    Rng rng(5);
    auto v = Tensor::randn({10}, rng);
    auto cs = codec::chunk(v, 4);
    REQUIRE(cs.chunks.size() == 3);
    CHECK(cs.chunk_length == 4);
    CHECK(cs.source_length == 10);
    CHECK(cs.chunks[2][2] == 0.0);
    CHECK(cs.chunks[2][3] == 0.0);

    SECTION("mn == l gives a single unpadded chunk") {
        auto one = codec::chunk(v, 10);
        REQUIRE(one.chunks.size() == 1);
        for (std::int64_t i = 0; i < 10; ++i) CHECK(one.chunks[0][i] == v[i]);
    }
    SECTION("empty segment is rejected") {
        CHECK_THROWS_AS(codec::chunk(Tensor({0}), 4), std::invalid_argument);
    }
}

TEST_CASE("chunk count math matches the k-driven parameterization", "[codec]") {
    // 2,097,152-length segment at the same chunk size -> one chunk
    const std::int64_t mn = 2097152;
    CHECK(codec::chunk_length_for_count(mn, 1) == mn);
    CHECK((mn + mn - 1) / mn == 1);
    CHECK(codec::chunk_length_for_count(10, 3) == 4);
}

TEST_CASE("chunk/reassemble round-trips exactly for many lengths", "[codec]") {
    Rng rng(13);
    for (std::int64_t mn : {1, 2, 3, 7, 10, 64, 101}) {
        auto v = Tensor::randn({mn}, rng);
        for (std::int64_t l = 1; l <= mn + 3; ++l) {
            auto cs = codec::chunk(v, l);
            auto back = codec::reassemble(cs);
            REQUIRE(back.size() == mn);
            for (std::int64_t i = 0; i < mn; ++i) REQUIRE(back[i] == v[i]);
        }
    }
}

TEST_CASE("reassemble honors chunk indices regardless of delivery order", "[codec]") {
    Rng rng(17);
    auto v = Tensor::randn({11}, rng);
    auto cs = codec::chunk(v, 3);
    std::swap(cs.chunks[0], cs.chunks[3]);
    std::swap(cs.chunk_indices[0], cs.chunk_indices[3]);
    std::swap(cs.chunks[1], cs.chunks[2]);
    std::swap(cs.chunk_indices[1], cs.chunk_indices[2]);
    auto back = codec::reassemble(cs);
    for (std::int64_t i = 0; i < 11; ++i) CHECK(back[i] == v[i]);

    SECTION("missing index is an incomplete-set error") {
        cs.chunk_indices[2] = 2; // duplicate, index 1 now missing
        CHECK_THROWS_AS(codec::reassemble(cs), codec::IncompleteSetError);
    }
}

TEST_CASE("flat weights disk format round-trips through float32", "[codec]") {
    auto m = fc_conv_manifest();
    m.padded_length = 96;
    Rng rng(23);
    auto params = random_params(m, rng);
    auto fw = codec::flatten(params, m);
    codec::quantize_f32(fw.values);

    const auto path = std::filesystem::temp_directory_path() / "wg_codec_test.bin";
    codec::save_flat_weights(path, fw, {{"source", "test"}});
    auto loaded = codec::load_flat_weights(path);
    REQUIRE(loaded.values.size() == fw.values.size());
    for (std::int64_t i = 0; i < fw.values.size(); ++i) CHECK(loaded.values[i] == fw.values[i]);
    CHECK(loaded.manifest.architecture_id == "toy");
    CHECK(loaded.manifest.layers.size() == 4);
    std::filesystem::remove(path);
}
