#include <algorithm>
#include <cmath>

#include "cimt/unet.hpp"
#include "doctest.h"

using namespace cimt;

namespace {

ParamStore init_params(uint64_t seed = 1) {
    ParamStore ps;
    ModelDims dims;
    Rng rng(seed);
    unet_init(ps, dims, rng);
    return ps;
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    REQUIRE(a.size() == b.size());
    float m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("zero params map any input to zero logits and features") {
    ModelDims dims;
    ParamStore ps = init_params();
    for (auto& [k, v] : ps) std::fill(v.values().begin(), v.values().end(), 0.0f);
    Rng rng(3);
    Tensor x = Tensor::uniform({1, 16, 16, 16}, rng, -1.0f, 1.0f);
    auto [pyr, logits] = unet_forward(x, ps, dims);
    for (float v : logits.values()) CHECK(v == 0.0f);
    for (const auto& level : pyr.levels)
        for (float v : level.values()) CHECK(v == 0.0f);
}

TEST_CASE("pyramid strides decrease and shapes follow the input") {
    ModelDims dims;
    ParamStore ps = init_params();
    Rng rng(5);
    Tensor x = Tensor::uniform({1, 32, 32, 32}, rng, -1.0f, 1.0f);
    auto [pyr, logits] = unet_forward(x, ps, dims);

    CHECK(logits.shape() == Shape{3, 32, 32, 32});
    REQUIRE(pyr.levels.size() == 4);
    REQUIRE(pyr.strides.size() == 4);
    for (size_t i = 1; i < pyr.strides.size(); ++i) CHECK(pyr.strides[i] < pyr.strides[i - 1]);
    CHECK(pyr.strides == std::vector<int>{8, 4, 2, 1});
    CHECK(pyr.levels[0].shape() == Shape{64, 4, 4, 4});
    CHECK(pyr.levels[1].shape() == Shape{32, 8, 8, 8});
    CHECK(pyr.levels[2].shape() == Shape{16, 16, 16, 16});
    CHECK(pyr.levels[3].shape() == Shape{8, 32, 32, 32});
    // finest level matches the input extents
    for (int a = 1; a <= 3; ++a) CHECK(pyr.levels[3].extent(a) == x.extent(a));
}

TEST_CASE("extents not divisible by 8 are rejected with padding advice") {
    ModelDims dims;
    ParamStore ps = init_params();
    Tensor x = Tensor::zeros({1, 20, 32, 32});
    try {
        unet_forward(x, ps, dims);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("pad") != std::string::npos);
    }
}

TEST_CASE("forward has no cross-sample state") {
    ModelDims dims;
    ParamStore ps = init_params();
    Rng rng(7);
    Tensor a = Tensor::uniform({1, 16, 16, 16}, rng, -1.0f, 1.0f);
    Tensor b = Tensor::uniform({1, 16, 16, 16}, rng, -1.0f, 1.0f);
    auto la1 = unet_forward(a, ps, dims).second;
    auto lb1 = unet_forward(b, ps, dims).second;
    // reversed order must reproduce both outputs bit-identically
    auto lb2 = unet_forward(b, ps, dims).second;
    auto la2 = unet_forward(a, ps, dims).second;
    CHECK(max_abs_diff(la1.values(), la2.values()) == 0.0f);
    CHECK(max_abs_diff(lb1.values(), lb2.values()) == 0.0f);
}

TEST_CASE("shifting the input by 8 shifts every level by its stride") {
    // with all bias-like params zeroed the background stays exactly zero, so
    // zero padding equals background and the net is shift-equivariant
    ModelDims dims;
    ParamStore ps = init_params(11);
    for (auto& [k, v] : ps)
        if (k.size() > 2 && k.compare(k.size() - 2, 2, ".b") == 0)
            std::fill(v.values().begin(), v.values().end(), 0.0f);

    const int D = 224, H = 16, W = 16;
    Rng rng(13);
    Tensor blob = Tensor::uniform({1, 16, H, W}, rng, 0.5f, 1.5f);
    Tensor x0 = Tensor::zeros({1, D, H, W});
    Tensor x1 = Tensor::zeros({1, D, H, W});
    paste_roi(x0, blob, {104, 0, 0});
    paste_roi(x1, blob, {112, 0, 0});

    auto [p0, l0] = unet_forward(x0, ps, dims);
    auto [p1, l1] = unet_forward(x1, ps, dims);

    for (size_t li = 0; li < p0.levels.size(); ++li) {
        const Tensor& a = p0.levels[li];
        const Tensor& b = p1.levels[li];
        const int shift = 8 / p0.strides[li];
        const int d = a.extent(1), h = a.extent(2), w = a.extent(3), c = a.extent(0);
        float worst = 0;
        for (int cc = 0; cc < c; ++cc)
            for (int z = 0; z + shift < d; ++z)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const float va = a.at({cc, z, y, xx});
                        const float vb = b.at({cc, z + shift, y, xx});
                        worst = std::max(worst, std::abs(va - vb));
                    }
        CHECK(worst == 0.0f);
    }
    // segmentation logits shift by the full 8 voxels
    float worst = 0;
    for (int cc = 0; cc < 3; ++cc)
        for (int z = 0; z + 8 < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    worst = std::max(worst, std::abs(l0.at({cc, z, y, xx}) - l1.at({cc, z + 8, y, xx})));
    CHECK(worst == 0.0f);
}

TEST_CASE("label bounding box applies the margin per axis") {
    const std::array<int, 3> e{16, 16, 16};
    std::vector<uint8_t> y(16 * 16 * 16, 0);
    for (int z = 4; z <= 8; ++z)
        for (int yy = 4; yy <= 8; ++yy)
            for (int x = 4; x <= 8; ++x) y[(static_cast<size_t>(z) * 16 + yy) * 16 + x] = 1;

    RoiBox box = roi_from_labels(y, e, {2, 2, 1});
    CHECK(box.low == std::array<int, 3>{2, 2, 3});
    CHECK(box.high == std::array<int, 3>{11, 11, 10});
    CHECK_FALSE(box.full_fallback);

    // margin 0 over a full-volume mask is the identity crop
    std::vector<uint8_t> full(16 * 16 * 16, 1);
    RoiBox ident = roi_from_labels(full, e, {0, 0, 0});
    CHECK(ident.low == std::array<int, 3>{0, 0, 0});
    CHECK(ident.high == std::array<int, 3>{16, 16, 16});

    // empty mask falls back to the whole volume and says so
    std::vector<uint8_t> none(16 * 16 * 16, 0);
    RoiBox fb = roi_from_labels(none, e, {2, 2, 1});
    CHECK(fb.full_fallback);
    CHECK(fb.low == std::array<int, 3>{0, 0, 0});
    CHECK(fb.high == std::array<int, 3>{16, 16, 16});
}

TEST_CASE("margins clamp at the volume boundary") {
    const std::array<int, 3> e{16, 16, 16};
    std::vector<uint8_t> y(16 * 16 * 16, 0);
    y[0] = 1;                    // corner voxel
    y[16 * 16 * 16 - 1] = 2;     // opposite corner, tumor counts as foreground
    RoiBox box = roi_from_labels(y, e, {3, 3, 3});
    CHECK(box.low == std::array<int, 3>{0, 0, 0});
    CHECK(box.high == std::array<int, 3>{16, 16, 16});
}

TEST_CASE("crop and paste round-trip the boxed region") {
    DifficultyConfig cfg;
    cfg.tumor_prob = 1.0;
    VolumeSample s = generate_sample(21, cfg, {32, 32, 32});
    RoiBox box = roi_from_labels(s.y, {32, 32, 32}, {2, 2, 1});
    VolumeSample crop = crop_roi(s, box);

    const auto sz = box.size();
    CHECK(crop.x.shape() == Shape{1, sz[0], sz[1], sz[2]});
    CHECK(crop.y.size() == static_cast<size_t>(sz[0]) * sz[1] * sz[2]);
    CHECK(crop.offset == box.low);
    CHECK(crop.label == 1);  // GT box always contains the tumor

    // cropped voxels match the source
    for (int z = 0; z < sz[0]; ++z)
        for (int y = 0; y < sz[1]; ++y)
            for (int x = 0; x < sz[2]; ++x) {
                CHECK(crop.x.at({0, z, y, x}) ==
                      s.x.at({0, box.low[0] + z, box.low[1] + y, box.low[2] + x}));
                CHECK(crop.y[(static_cast<size_t>(z) * sz[1] + y) * sz[2] + x] ==
                      s.y[(static_cast<size_t>(box.low[0] + z) * 32 + box.low[1] + y) * 32 +
                          box.low[2] + x]);
            }

    // paste restores the original voxels inside the box
    Tensor canvas = Tensor::zeros({1, 32, 32, 32});
    paste_roi(canvas, crop.x, crop.offset);
    for (int z = box.low[0]; z < box.high[0]; ++z)
        for (int y = box.low[1]; y < box.high[1]; ++y)
            for (int x = box.low[2]; x < box.high[2]; ++x)
                CHECK(canvas.at({0, z, y, x}) == s.x.at({0, z, y, x}));

    CHECK_THROWS_AS(crop_roi(s, RoiBox{{0, 0, 0}, {40, 8, 8}, false}), ContractError);
}

TEST_CASE("normalize_volume hits zero mean unit variance") {
    Tensor c = Tensor::full({1, 4, 4, 4}, 3.25f);
    Tensor nc = normalize_volume(c);
    for (float v : nc.values()) CHECK(v == 0.0f);

    Tensor two = Tensor::from({1, 1, 1, 2}, {0.0f, 2.0f});
    Tensor n2 = normalize_volume(two);
    CHECK(n2.values()[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(n2.values()[1] == doctest::Approx(1.0).epsilon(1e-6));

    Rng rng(31);
    Tensor x = Tensor::uniform({1, 16, 16, 16}, rng, 0.0f, 5.0f);
    Tensor n = normalize_volume(x);
    double mean = 0;
    for (float v : n.values()) mean += v;
    mean /= static_cast<double>(n.numel());
    double var = 0;
    for (float v : n.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n.numel());
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
}

TEST_CASE("locate_stomach reports a fallback when nothing is found") {
    ModelDims dims;
    ParamStore ps = init_params();
    for (auto& [k, v] : ps) std::fill(v.values().begin(), v.values().end(), 0.0f);
    // bias the head toward background: argmax is class 0 everywhere
    ps.get("backbone.seghead.conv.b").values()[0] = 5.0f;
    Rng rng(41);
    Tensor x = Tensor::uniform({1, 32, 32, 32}, rng, 0.0f, 1.0f);
    RoiBox fb = locate_stomach(x, ps, dims);
    CHECK(fb.full_fallback);
    CHECK(fb.low == std::array<int, 3>{0, 0, 0});
    CHECK(fb.high == std::array<int, 3>{32, 32, 32});

    // bias toward stomach: every voxel is foreground, full box without fallback
    ps.get("backbone.seghead.conv.b").values()[0] = 0.0f;
    ps.get("backbone.seghead.conv.b").values()[1] = 5.0f;
    RoiBox all = locate_stomach(x, ps, dims);
    CHECK_FALSE(all.full_fallback);
    CHECK(all.low == std::array<int, 3>{0, 0, 0});
    CHECK(all.high == std::array<int, 3>{32, 32, 32});
}

TEST_CASE("expand_to_multiple grows boxes in place") {
    const std::array<int, 3> e{32, 32, 32};
    RoiBox box{{2, 2, 3}, {11, 11, 10}, false};  // sizes 9, 9, 7
    RoiBox out = expand_to_multiple(box, e, 8);
    for (int a = 0; a < 3; ++a) {
        CHECK((out.high[a] - out.low[a]) % 8 == 0);
        CHECK(out.low[a] <= box.low[a]);
        CHECK(out.high[a] >= box.high[a]);
        CHECK(out.low[a] >= 0);
        CHECK(out.high[a] <= 32);
    }
    CHECK(out.size() == std::array<int, 3>{16, 16, 8});

    RoiBox exact{{0, 8, 16}, {8, 16, 24}, false};
    RoiBox same = expand_to_multiple(exact, e, 8);
    CHECK(same.low == exact.low);
    CHECK(same.high == exact.high);
}

TEST_CASE("model dims are validated") {
    ModelDims d;
    d.num_queries = 1;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = ModelDims{};
    d.embed_dim = 30;  // not a multiple of 4 heads
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = ModelDims{};
    d.roi_margin = {1, -1, 1};
    CHECK_THROWS_AS(d.validate(), ConfigError);
}
