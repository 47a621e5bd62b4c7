#include <algorithm>
#include <cmath>
#include <numeric>

#include "backbone/backbone.hpp"
#include "common/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace stldm;
using testing::normal;

namespace {

FeatureMap constant_map(std::size_t stage, std::size_t h, std::size_t w, Tensor data) {
    FeatureMap f;
    f.stage = stage;
    f.height = h;
    f.width = w;
    f.data = ad::constant(std::move(data));
    return f;
}

Image random_image(std::size_t side, Rng& rng) {
    Image img(side, side);
    for (auto& v : img.pixels.storage()) v = rng.uniform();
    return img;
}

// Gauss-Jordan with partial pivoting.
Tensor inverse(Tensor a) {
    const std::size_t n = a.rows();
    Tensor inv = Tensor::identity(n);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
        for (std::size_t c = 0; c < n; ++c) {
            std::swap(a.at(col, c), a.at(pivot, c));
            std::swap(inv.at(col, c), inv.at(pivot, c));
        }
        const double d = a.at(col, col);
        for (std::size_t c = 0; c < n; ++c) {
            a.at(col, c) /= d;
            inv.at(col, c) /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a.at(r, col);
            for (std::size_t c = 0; c < n; ++c) {
                a.at(r, c) -= f * a.at(col, c);
                inv.at(r, c) -= f * inv.at(col, c);
            }
        }
    }
    return inv;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an stldm::Error");
    return ErrorKind::Config;
}

}  // namespace

TEST_CASE("patch partition grids and constancy") {
    Rng rng(1);
    PatchPartition part(32, rng);
    Binder bind;
    CHECK(part.forward(bind, Image(224, 224)).height == 56);
    CHECK(part.forward(bind, Image(480, 480)).width == 120);

    const auto index = layout::patch_partition(8, 8, 4, 3);
    Image flat(8, 8, 0.37);
    for (std::size_t tok = 0; tok < 4; ++tok)
        for (std::size_t d = 0; d < 48; ++d) CHECK(flat.pixels[static_cast<std::size_t>(index[tok * 48 + d])] == 0.37);

    const FeatureMap f = part.forward(bind, Image(32, 32, 0.6));
    for (std::size_t r = 1; r < f.tokens(); ++r)
        for (std::size_t c = 0; c < f.channels(); ++c) REQUIRE(f.data->value.at(r, c) == f.data->value.at(0, c));
    CHECK(kind_of([&] { part.forward(bind, Image(30, 32)); }) == ErrorKind::Shape);
}

TEST_CASE("uniform window attention returns the window mean plus the residual") {
    Rng rng(2);
    const std::size_t c = 6;
    WindowBlock block(c, 2, 7, 2, rng);
    block.qkv.weight.value.fill(0.0);
    for (std::size_t i = 0; i < c; ++i) block.qkv.weight.value.at(i, 2 * c + i) = 1.0;
    block.proj.weight.value = Tensor::identity(c);
    const Tensor x = normal({49, c}, rng);

    // layer norm oracle with gamma 1, beta 0
    Tensor normed({49, c});
    for (std::size_t r = 0; r < 49; ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += x.at(r, j) / c;
        for (std::size_t j = 0; j < c; ++j) var += (x.at(r, j) - mu) * (x.at(r, j) - mu) / c;
        for (std::size_t j = 0; j < c; ++j) normed.at(r, j) = (x.at(r, j) - mu) / std::sqrt(var + 1e-5);
    }
    Binder bind;
    const Tensor got = block.attention_branch(bind, ad::constant(x), 7, 7)->value;
    for (std::size_t r = 0; r < 49; ++r)
        for (std::size_t j = 0; j < c; ++j) {
            double mean = 0.0;
            for (std::size_t s = 0; s < 49; ++s) mean += normed.at(s, j) / 49.0;
            REQUIRE(got.at(r, j) == doctest::Approx(x.at(r, j) + mean).epsilon(1e-12));
        }
}

TEST_CASE("window attention is permutation equivariant inside a window") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        WindowBlock block(8, 2, 7, 2, rng);
        const Tensor x = normal({49, 8}, rng);
        std::vector<std::size_t> perm(49);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 48; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        Tensor px({49, 8});
        for (std::size_t r = 0; r < 49; ++r)
            for (std::size_t j = 0; j < 8; ++j) px.at(r, j) = x.at(perm[r], j);
        Binder bind;
        const Tensor a = block.forward(bind, constant_map(1, 7, 7, x)).data->value;
        const Tensor b = block.forward(bind, constant_map(1, 7, 7, px)).data->value;
        for (std::size_t r = 0; r < 49; ++r)
            for (std::size_t j = 0; j < 8; ++j) REQUIRE(std::abs(b.at(r, j) - a.at(perm[r], j)) <= 1e-12);
    }
}

TEST_CASE("window attention is local") {
    Rng rng(4);
    WindowBlock block(8, 2, 7, 2, rng);
    Tensor x = normal({7 * 14, 8}, rng);
    Binder bind;
    const Tensor before = block.forward(bind, constant_map(1, 7, 14, x)).data->value;
    for (std::size_t r = 0; r < 7; ++r)
        for (std::size_t col = 0; col < 7; ++col)
            for (std::size_t j = 0; j < 8; ++j) x.at(r * 14 + col, j) += rng.normal();
    const Tensor after = block.forward(bind, constant_map(1, 7, 14, x)).data->value;
    for (std::size_t r = 0; r < 7; ++r)
        for (std::size_t col = 7; col < 14; ++col)
            for (std::size_t j = 0; j < 8; ++j) REQUIRE(after.at(r * 14 + col, j) == before.at(r * 14 + col, j));
}

TEST_CASE("window padding keeps shapes for grids that are not window multiples") {
    Rng rng(5);
    WindowBlock block(4, 1, 7, 2, rng);
    Binder bind;
    const FeatureMap out = block.forward(bind, constant_map(1, 10, 9, normal({90, 4}, rng)));
    CHECK(out.data->value.shape() == Shape{90, 4});
    CHECK(all_finite(out.data->value));
}

TEST_CASE("patch merging") {
    Rng rng(6);
    Binder bind;
    PatchMerging a(96, rng);
    const FeatureMap m = a.forward(bind, constant_map(1, 56, 56, Tensor({56 * 56, 96}, 0.1)));
    CHECK(m.height == 28);
    CHECK(m.channels() == 192);
    for (std::size_t r = 1; r < m.tokens(); ++r) REQUIRE(m.data->value.at(r, 5) == m.data->value.at(0, 5));
    PatchMerging b(384, rng);
    const FeatureMap n = b.forward(bind, constant_map(3, 14, 14, normal({196, 384}, rng)));
    CHECK(n.height == 7);
    CHECK(n.channels() == 768);
    CHECK(n.stage == 4);
    CHECK(kind_of([&] { a.forward(bind, constant_map(1, 5, 4, Tensor({20, 96}))); }) == ErrorKind::Shape);
}

TEST_CASE("patch expanding shapes and constraint") {
    Rng rng(7);
    Binder bind;
    PatchExpand a(384, 24, rng);
    CHECK(a.forward(bind, constant_map(3, 14, 14, normal({196, 384}, rng)))->value.shape() == Shape{56 * 56, 24});
    PatchExpand b(768, 48, rng);
    CHECK(b.forward(bind, constant_map(4, 7, 7, normal({49, 768}, rng)))->value.shape() == Shape{28 * 28, 48});
    try {
        PatchExpand bad(128, 16, rng);
        FAIL("no error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Constraint);
        const std::string msg = e.what();
        CHECK(msg.find("128") != std::string::npos);
        CHECK(msg.find("16") != std::string::npos);
        CHECK(msg.find("256") != std::string::npos);
    }
}

TEST_CASE("patch expanding followed by its explicit inverse is the identity") {
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t ct = 1 + rng.below(3), ci = 16 * ct, h = 2 + rng.below(3), w = 2 + rng.below(3);
        PatchExpand pe(ci, ct, rng);
        pe.linear.weight.value = normal({ci, ci}, rng);
        pe.linear.bias.value = normal({ci}, rng);
        const Tensor x = normal({h * w, ci}, rng);
        Binder bind;
        const Tensor y = pe.forward(bind, constant_map(2, h, w, x))->value;

        // un-rearrange the 4x4 blocks, remove the bias, apply W^-1
        Tensor widened({h * w, ci});
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c)
                for (std::size_t dy = 0; dy < 4; ++dy)
                    for (std::size_t dx = 0; dx < 4; ++dx)
                        for (std::size_t ch = 0; ch < ct; ++ch)
                            widened.at(r * w + c, (dy * 4 + dx) * ct + ch) =
                                y.at((4 * r + dy) * (4 * w) + 4 * c + dx, ch) - pe.linear.bias.value[(dy * 4 + dx) * ct + ch];
        const Tensor back = matmul(widened, inverse(pe.linear.weight.value));
        CHECK(max_abs_diff(back, x) <= 1e-9);
    }
}

TEST_CASE("factor to stage mapping and latent sizes") {
    CHECK(stage_for_factor(2) == 2);
    CHECK(stage_for_factor(4) == 3);
    CHECK(stage_for_factor(8) == 4);
    CHECK(kind_of([] { stage_for_factor(3); }) == ErrorKind::Config);

    Rng rng(9);
    struct Case {
        std::size_t factor, side, latent;
    };
    for (const Case& k : {Case{4, 224, 56}, Case{8, 480, 60}, Case{2, 224, 112}}) {
        AutoencoderConfig cfg;
        cfg.factor = k.factor;
        Autoencoder ae(cfg, rng);
        std::array<FeatureMap, 4> feats;
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t g = k.side / (4u << s);
            feats[s] = constant_map(s + 1, g, g, Tensor({g * g, cfg.backbone.channels[s]}, 0.2));
        }
        Binder bind;
        const FeatureMap latent = ae.latent_from_features(bind, feats);
        CAPTURE(k.factor);
        CHECK(latent.height == k.latent);
        CHECK(latent.width == k.latent);
        CHECK(latent.channels() == 3);
    }
}

TEST_CASE("encoder stage grids and decoder round trip at 224") {
    Rng rng(10);
    Autoencoder ae(AutoencoderConfig{}, rng);
    Binder bind;
    const EncodedImage enc = ae.encode_image(bind, random_image(224, rng));
    const std::size_t grids[4] = {56, 28, 14, 7};
    for (std::size_t s = 0; s < 4; ++s) {
        CHECK(enc.features[s].height == grids[s]);
        CHECK(enc.features[s].width == grids[s]);
        CHECK(enc.features[s].channels() == ae.config.backbone.channels[s]);
        CHECK(all_finite(enc.features[s].data->value));
    }
    CHECK(enc.latent.height == 56);
    const Image out = ae.decode_latent(bind, enc.latent);
    CHECK(out.height == 224);
    CHECK(out.width == 224);
    for (double v : out.pixels.values()) REQUIRE((v >= 0.0 && v <= 1.0));
}

TEST_CASE("stage outputs stay finite on random images") {
    Rng rng(11);
    Backbone bb(BackboneConfig{}, rng);
    for (int trial = 0; trial < 5; ++trial) {
        Binder bind;
        const auto feats = bb.forward(bind, random_image(64, rng));
        for (const auto& f : feats) REQUIRE(all_finite(f.data->value));
    }
}

TEST_CASE("zero latent decodes to the same block-periodic image every time") {
    Rng rng(12);
    Autoencoder ae(AutoencoderConfig{}, rng);
    FeatureMap z = constant_map(0, 8, 8, Tensor({64, 3}, 0.0));
    Binder bind;
    const Image a = ae.decode_latent(bind, z);
    const Image b = ae.decode_latent(bind, z);
    CHECK(a.pixels == b.pixels);
    // token-wise decoding of identical tokens repeats with the 4x4 partition period
    for (std::size_t y = 0; y < a.height; ++y)
        for (std::size_t x = 0; x < a.width; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch)
                REQUIRE(a.pixels[(y * a.width + x) * 3 + ch] == a.pixels[((y % 4) * a.width + x % 4) * 3 + ch]);
    CHECK(kind_of([&] { ae.decode_latent(bind, constant_map(0, 6, 8, Tensor({48, 3}))); }) == ErrorKind::Shape);
}

TEST_CASE("backbone configuration checks") {
    BackboneConfig c;
    c.heads[2] = 5;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
    BackboneConfig d;
    d.channels = {32, 64, 100, 256};
    CHECK(kind_of([&] { d.validate(); }) == ErrorKind::Config);
    const BackboneConfig ref = BackboneConfig::reference();
    CHECK(ref.channels == std::array<std::size_t, 4>{96, 192, 384, 768});
    CHECK(ref.heads == std::array<std::size_t, 4>{3, 6, 12, 24});
    CHECK(ref.depths == std::array<std::size_t, 4>{2, 2, 6, 2});
    CHECK(ref.window == 7);
}
