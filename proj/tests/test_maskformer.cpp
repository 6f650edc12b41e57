#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cimt/maskformer.hpp"
#include "doctest.h"

using namespace cimt;

namespace {

ModelDims tiny_dims() {
    ModelDims d;
    d.in_channels = 1;
    d.base_width = 2;
    d.num_classes = 3;
    d.num_queries = 4;
    d.embed_dim = 8;
    d.num_heads = 2;
    d.cls_hidden = 8;
    return d;
}

// Two-level pyramid matching maskformer_init(ps, dims, rng, {3, 2}).
template <typename T>
FeaturePyramidT<T> tiny_pyramid(Rng& rng) {
    FeaturePyramidT<T> pyr;
    pyr.levels.push_back(TensorT<T>::randn({3, 2, 2, 2}, rng, T(0.8)));
    pyr.levels.push_back(TensorT<T>::randn({2, 2, 2, 4}, rng, T(0.8)));
    pyr.strides = {2, 1};
    return pyr;
}

void put_linear(ParamStoreT<double>& ps, const std::string& name, int out, int in, Rng& rng) {
    ps.put(name + ".w", Tensor64::randn({out, in}, rng, 0.5));
    ps.put(name + ".b", Tensor64::randn({out}, rng, 0.5));
}

double grad_abs_sum(const Tensor64& t) {
    double s = 0;
    for (double g : t.grad_values()) s += std::abs(g);
    return s;
}

}  // namespace

TEST_CASE("cluster update matches a brute-force oracle") {
    ModelDims d = tiny_dims();
    const int N = 4, C = 8, ch = 5, V = 20;
    Rng rng(42);
    ParamStoreT<double> ps;
    put_linear(ps, "s.cross.q", C, C, rng);
    put_linear(ps, "s.cross.k", C, ch, rng);
    put_linear(ps, "s.cross.v", C, ch, rng);
    Tensor64 centers = Tensor64::randn({N, C}, rng, 1.0);
    Tensor64 feat = Tensor64::randn({ch, V}, rng, 1.0);

    Tensor64 r;
    Tensor64 upd = cluster_update(centers, feat, ps, "s", d, &r);
    REQUIRE(upd.shape() == Shape{N, C});
    REQUIRE(r.shape() == Shape{N, V});

    auto qw = ps.get("s.cross.q.w").values(), qb = ps.get("s.cross.q.b").values();
    auto kw = ps.get("s.cross.k.w").values(), kb = ps.get("s.cross.k.b").values();
    auto vw = ps.get("s.cross.v.w").values(), vb = ps.get("s.cross.v.b").values();
    auto ce = centers.values();
    auto fe = feat.values();

    std::vector<double> qc(N * C), kp(V * C), vp(V * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double a = qb[c];
            for (int j = 0; j < C; ++j) a += ce[n * C + j] * qw[c * C + j];
            qc[n * C + c] = a;
        }
    for (int v = 0; v < V; ++v)
        for (int c = 0; c < C; ++c) {
            double ak = kb[c], av = vb[c];
            for (int j = 0; j < ch; ++j) {
                ak += fe[j * V + v] * kw[c * ch + j];
                av += fe[j * V + v] * vw[c * ch + j];
            }
            kp[v * C + c] = ak;
            vp[v * C + c] = av;
        }
    std::vector<double> r0(N * V);
    for (int n = 0; n < N; ++n)
        for (int v = 0; v < V; ++v) {
            double a = 0;
            for (int c = 0; c < C; ++c) a += qc[n * C + c] * kp[v * C + c];
            r0[n * V + v] = a / std::sqrt(8.0);
        }
    std::vector<double> upd0(ce.begin(), ce.end());
    for (int v = 0; v < V; ++v) {
        int arg = 0;
        for (int n = 1; n < N; ++n)
            if (r0[n * V + v] > r0[arg * V + v]) arg = n;
        for (int c = 0; c < C; ++c) upd0[arg * C + c] += vp[v * C + c];
    }

    for (int i = 0; i < N * V; ++i)
        CHECK(r.values()[i] == doctest::Approx(r0[i]).epsilon(1e-9));
    for (int i = 0; i < N * C; ++i)
        CHECK(upd.values()[i] == doctest::Approx(upd0[i]).epsilon(1e-9));
}

TEST_CASE("uniform keys route every voxel to the aligned cluster") {
    ModelDims d = tiny_dims();
    const int N = 4, C = 8, ch = 5, V = 6;
    Rng rng(3);
    ParamStoreT<double> ps;
    Tensor64 qw = Tensor64::zeros({C, C});
    for (int i = 0; i < C; ++i) qw.values()[i * C + i] = 1.0;
    ps.put("s.cross.q.w", qw);
    ps.put("s.cross.q.b", Tensor64::zeros({C}));
    ps.put("s.cross.k.w", Tensor64::zeros({C, ch}));
    ps.put("s.cross.k.b", Tensor64::full({C}, 1.0));
    put_linear(ps, "s.cross.v", C, ch, rng);

    Tensor64 centers = Tensor64::full({N, C}, -1.0);
    for (int c = 0; c < C; ++c) centers.values()[c] = 1.0;
    Tensor64 feat = Tensor64::randn({ch, V}, rng, 1.0);

    Tensor64 r;
    Tensor64 upd = cluster_update(centers, feat, ps, "s", d, &r);

    // keys are all-ones, so scores reduce to sum(center)/sqrt(C): +/- sqrt(8)
    for (int v = 0; v < V; ++v) {
        CHECK(r.values()[v] == doctest::Approx(std::sqrt(8.0)));
        for (int n = 1; n < N; ++n)
            CHECK(r.values()[n * V + v] == doctest::Approx(-std::sqrt(8.0)));
    }
    // row 0 collects every voxel's value vector; other rows are untouched
    auto vwv = ps.get("s.cross.v.w").values(), vbv = ps.get("s.cross.v.b").values();
    for (int c = 0; c < C; ++c) {
        double want = 1.0;
        for (int v = 0; v < V; ++v) {
            double a = vbv[c];
            for (int j = 0; j < ch; ++j) a += feat.values()[j * V + v] * vwv[c * ch + j];
            want += a;
        }
        CHECK(upd.values()[c] == doctest::Approx(want).epsilon(1e-9));
    }
    for (int n = 1; n < N; ++n)
        for (int c = 0; c < C; ++c) CHECK(upd.values()[n * C + c] == -1.0);
}

TEST_CASE("a zero value projection leaves the centers bit-identical") {
    ModelDims d = tiny_dims();
    Rng rng(5);
    ParamStoreT<double> ps;
    put_linear(ps, "s.cross.q", 8, 8, rng);
    put_linear(ps, "s.cross.k", 8, 5, rng);
    ps.put("s.cross.v.w", Tensor64::zeros({8, 5}));
    ps.put("s.cross.v.b", Tensor64::zeros({8}));
    Tensor64 centers = Tensor64::randn({4, 8}, rng, 1.0);
    Tensor64 feat = Tensor64::randn({5, 9}, rng, 1.0);
    Tensor64 upd = cluster_update<double>(centers, feat, ps, "s", d, nullptr);
    for (int i = 0; i < 32; ++i) CHECK(upd.values()[i] == centers.values()[i]);
}

TEST_CASE("cluster update rejects degenerate or mismatched inputs") {
    ModelDims d = tiny_dims();
    Rng rng(8);
    ParamStoreT<double> ps;
    put_linear(ps, "s.cross.q", 8, 8, rng);
    put_linear(ps, "s.cross.k", 8, 5, rng);
    put_linear(ps, "s.cross.v", 8, 5, rng);
    Tensor64 feat = Tensor64::randn({5, 9}, rng, 1.0);
    CHECK_THROWS_AS(
        cluster_update<double>(Tensor64::randn({1, 8}, rng, 1.0), feat, ps, "s", d, nullptr),
        ConfigError);
    CHECK_THROWS_AS(
        cluster_update<double>(Tensor64::randn({4, 7}, rng, 1.0), feat, ps, "s", d, nullptr),
        ShapeError);
}

TEST_CASE("assignment columns are a distribution at every stage") {
    ModelDims d = tiny_dims();
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        Rng rng(seed);
        ParamStore ps;
        maskformer_init(ps, d, rng, {3, 2});
        FeaturePyramidT<float> pyr = tiny_pyramid<float>(rng);
        MaskFormerOut out = maskformer_forward(pyr, ps, d);

        const int N = out.assignment.probs.extent(0);
        const int V = out.assignment.probs.extent(1);
        for (int v = 0; v < V; ++v) {
            double s = 0;
            for (int n = 0; n < N; ++n) s += out.assignment.probs.values()[n * V + v];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
        for (const Tensor& rl : out.state.per_stage_logits) {
            Tensor m = softmax_axis(rl, 0);
            const int Vs = m.extent(1);
            for (int v = 0; v < Vs; ++v) {
                double s = 0;
                for (int n = 0; n < N; ++n) s += m.values()[n * Vs + v];
                CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("assignment softmax splits ties evenly and rewards alignment") {
    Rng rng(11);
    Tensor64 same = Tensor64::zeros({4, 8});
    for (int c = 0; c < 8; ++c) {
        double x = rng.normal();
        for (int n = 0; n < 4; ++n) same.values()[n * 8 + c] = x;
    }
    Tensor64 F = Tensor64::randn({8, 5}, rng, 1.0);
    ClusterAssignmentT<double> even = assign(same, F);
    for (double p : even.probs.values()) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));

    Tensor64 centers = Tensor64::zeros({4, 8});
    for (int n = 0; n < 4; ++n) centers.values()[n * 8 + n] = n == 0 ? 5.0 : 1.0;
    Tensor64 Fa = Tensor64::zeros({8, 3});
    for (int v = 0; v < 3; ++v) Fa.values()[v] = 2.0;  // only channel 0 is active
    ClusterAssignmentT<double> won = assign(centers, Fa);
    for (int v = 0; v < 3; ++v) CHECK(won.probs.values()[v] > 0.99);

    CHECK_THROWS_AS(assign(Tensor64::zeros({4, 8}), Tensor64::zeros({7, 3})), ShapeError);
}

TEST_CASE("segmentation logits are the cluster-to-class mixture") {
    Rng rng(9);
    ParamStoreT<double> ps;
    put_linear(ps, "head.ck.fc1", 8, 8, rng);
    put_linear(ps, "head.ck.fc2", 3, 8, rng);
    Tensor64 centers = Tensor64::randn({4, 8}, rng, 1.0);
    Tensor64 F = Tensor64::randn({8, 7}, rng, 1.0);
    ClusterAssignmentT<double> asg = assign(centers, F);
    Tensor64 z = segment(asg, centers, ps);
    Tensor64 ck = ck_matrix(centers, ps);
    REQUIRE(ck.shape() == Shape{3, 4});
    REQUIRE(z.shape() == Shape{3, 7});
    for (int k = 0; k < 3; ++k)
        for (int v = 0; v < 7; ++v) {
            double acc = 0;
            for (int n = 0; n < 4; ++n)
                acc += ck.values()[k * 4 + n] * asg.probs.values()[n * 7 + v];
            CHECK(z.values()[k * 7 + v] == doctest::Approx(acc).epsilon(1e-9));
        }
}

TEST_CASE("hard assignments copy class columns and zero heads are uninformative") {
    Rng rng(15);
    ParamStoreT<double> ps;
    put_linear(ps, "head.ck.fc1", 8, 8, rng);
    put_linear(ps, "head.ck.fc2", 3, 8, rng);
    Tensor64 centers = Tensor64::randn({4, 8}, rng, 1.0);
    Tensor64 ck = ck_matrix(centers, ps);

    ClusterAssignmentT<double> hard;
    hard.logits = Tensor64::zeros({4, 4});
    hard.probs = Tensor64::zeros({4, 4});
    for (int v = 0; v < 4; ++v) hard.probs.values()[v * 4 + v] = 1.0;  // voxel v -> cluster v
    Tensor64 z = segment(hard, centers, ps);
    for (int k = 0; k < 3; ++k)
        for (int v = 0; v < 4; ++v) CHECK(z.values()[k * 4 + v] == ck.values()[k * 4 + v]);

    ParamStoreT<double> zero;
    zero.put("head.ck.fc1.w", Tensor64::zeros({8, 8}));
    zero.put("head.ck.fc1.b", Tensor64::zeros({8}));
    zero.put("head.ck.fc2.w", Tensor64::zeros({3, 8}));
    zero.put("head.ck.fc2.b", Tensor64::zeros({3}));
    Tensor64 z0 = segment(hard, centers, zero);
    Tensor64 p0 = softmax_axis(z0, 0);
    for (double p : p0.values()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("classification pools centers by mean and logits by max") {
    ModelDims d = tiny_dims();
    Rng rng(19);
    ParamStoreT<double> ps;
    ps.put("head.cls.norm_c.g", Tensor64::full({8}, 1.0));
    ps.put("head.cls.norm_c.b", Tensor64::zeros({8}));
    ps.put("head.cls.norm_r.g", Tensor64::full({4}, 1.0));
    ps.put("head.cls.norm_r.b", Tensor64::zeros({4}));
    put_linear(ps, "head.cls.fc1", 8, 12, rng);
    put_linear(ps, "head.cls.fc2", 2, 8, rng);

    ClusterStateT<double> st;
    st.centers = Tensor64::zeros({4, 8});
    for (int n = 0; n < 4; ++n)
        for (int c = 0; c < 8; ++c)
            st.centers.values()[n * 8 + c] = (2 * c - 7) * 0.125;  // dyadic, so means are exact

    ClusterAssignmentT<double> asg;
    asg.logits = Tensor64::zeros({4, 5});
    for (int n = 0; n < 4; ++n)
        for (int v = 0; v < 5; ++v) asg.logits.values()[n * 5 + v] = 0.5 * (n + 1) - 0.1 * v;
    asg.probs = softmax_axis(asg.logits, 0);

    ClsOutT<double> cls = classify(st, asg, ps, d);
    REQUIRE(cls.logits.shape() == Shape{2});
    for (int c = 0; c < 8; ++c)
        CHECK(cls.cluster_path.values()[c] == st.centers.values()[c]);
    for (int n = 0; n < 4; ++n)
        CHECK(cls.pixel_path.values()[n] == 0.5 * (n + 1));  // column 0 holds each row's max

    // raising one voxel's score moves only that cluster's pooled value
    asg.logits.values()[2 * 5 + 3] = 9.0;
    ClsOutT<double> bumped = classify(st, asg, ps, d);
    CHECK(bumped.pixel_path.values()[2] == 9.0);
    for (int n = 0; n < 4; ++n)
        if (n != 2) CHECK(bumped.pixel_path.values()[n] == cls.pixel_path.values()[n]);
    bool moved = false;
    for (int i = 0; i < 2; ++i)
        if (bumped.logits.values()[i] != cls.logits.values()[i]) moved = true;
    CHECK(moved);

    ClusterStateT<double> wide;
    wide.centers = Tensor64::zeros({4, 9});
    CHECK_THROWS_AS(classify(wide, asg, ps, d), ShapeError);
}

TEST_CASE("a perfect prediction drives the joint loss toward zero") {
    ModelDims d = tiny_dims();
    std::vector<uint8_t> y = {0, 1, 2, 0, 1, 2, 0, 1};
    MaskFormerOutT<double> out;
    out.finest_dims = {2, 2, 2};
    out.pred.seg_logits = add_scalar(scale(onehot_labels<double>(y, 3), 20.0), -10.0);
    out.pred.cls_logits = Tensor64::from({2}, {-10.0, 10.0});
    ParamStoreT<double> ps;
    LossPartsT<double> parts = joint_loss(out, ps, d, y, 1, {});
    CHECK(parts.total.item() < 1e-4);
    CHECK(parts.deep == 0.0);
    CHECK(parts.total.item() ==
          doctest::Approx(parts.seg_dice + parts.seg_ce + parts.cls_ce).epsilon(1e-9));
}

TEST_CASE("an uninformative classifier pays ln 2") {
    ModelDims d = tiny_dims();
    std::vector<uint8_t> y = {0, 1, 2, 0, 1, 2, 0, 1};
    MaskFormerOutT<double> out;
    out.finest_dims = {2, 2, 2};
    out.pred.seg_logits = add_scalar(scale(onehot_labels<double>(y, 3), 20.0), -10.0);
    out.pred.cls_logits = Tensor64::zeros({2});
    ParamStoreT<double> ps;
    LossPartsT<double> parts = joint_loss(out, ps, d, y, 0, {});
    CHECK(parts.cls_ce == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("half overlap costs half the soft dice") {
    std::vector<uint8_t> y = {1, 1, 1, 1, 2, 2, 2, 2};
    Tensor64 z = Tensor64::full({3, 8}, -30.0);
    auto set = [&](int k, int v) { z.values()[k * 8 + v] = 30.0; };
    set(1, 2); set(1, 3); set(1, 4); set(1, 5);
    set(2, 0); set(2, 1); set(2, 6); set(2, 7);
    auto [dice, ce] = seg_loss(z, onehot_labels<double>(y, 3));
    CHECK(dice.item() == doctest::Approx(0.5).epsilon(1e-4));
    CHECK(ce.item() > 1.0);  // half the voxels carry a confidently wrong class
}

TEST_CASE("labels and patient states outside their range are rejected") {
    ModelDims d = tiny_dims();
    CHECK_THROWS_AS(onehot_labels<double>({0, 3}, 3), DataError);
    CHECK_THROWS_AS(onehot_labels<float>({255}, 3), DataError);

    std::vector<uint8_t> y = {0, 1};
    MaskFormerOutT<double> out;
    out.finest_dims = {1, 1, 2};
    out.pred.seg_logits = Tensor64::zeros({3, 2});
    out.pred.cls_logits = Tensor64::zeros({2});
    ParamStoreT<double> ps;
    CHECK_THROWS_AS(joint_loss(out, ps, tiny_dims(), y, 2, {}), DataError);
    CHECK_THROWS_AS(joint_loss(out, ps, tiny_dims(), y, -1, {}), DataError);
}

TEST_CASE("per-voxel logit shifts leave assignment and segmentation unchanged") {
    Rng rng(21);
    const int N = 4, V = 6;
    Tensor64 r = Tensor64::randn({N, V}, rng, 1.0);
    Tensor64 shift = Tensor64::randn({V}, rng, 1.0);
    Tensor64 r2 = r.clone();
    for (int n = 0; n < N; ++n)
        for (int v = 0; v < V; ++v) r2.values()[n * V + v] += shift.values()[v];

    Tensor64 m1 = softmax_axis(r, 0), m2 = softmax_axis(r2, 0);
    for (int i = 0; i < N * V; ++i)
        CHECK(std::abs(m1.values()[i] - m2.values()[i]) < 1e-12);
    Tensor64 a1 = onehot_argmax_axis(r, 0), a2 = onehot_argmax_axis(r2, 0);
    for (int i = 0; i < N * V; ++i) CHECK(a1.values()[i] == a2.values()[i]);

    ParamStoreT<double> ps;
    put_linear(ps, "head.ck.fc1", 8, 8, rng);
    put_linear(ps, "head.ck.fc2", 3, 8, rng);
    Tensor64 centers = Tensor64::randn({N, 8}, rng, 1.0);
    ClusterAssignmentT<double> asg1{r, m1}, asg2{r2, m2};
    Tensor64 z1 = segment(asg1, centers, ps), z2 = segment(asg2, centers, ps);
    for (int i = 0; i < 3 * V; ++i)
        CHECK(std::abs(z1.values()[i] - z2.values()[i]) < 1e-9);
}

TEST_CASE("the decoder runs one stage per pyramid level, deterministically") {
    ModelDims d = tiny_dims();
    Rng rng(5);
    ParamStoreT<double> ps;
    maskformer_init(ps, d, rng, {3, 2, 2, 2});
    FeaturePyramidT<double> pyr;
    pyr.levels.push_back(Tensor64::randn({3, 2, 2, 2}, rng, 0.8));
    pyr.levels.push_back(Tensor64::randn({2, 2, 2, 2}, rng, 0.8));
    pyr.levels.push_back(Tensor64::randn({2, 2, 2, 4}, rng, 0.8));
    pyr.levels.push_back(Tensor64::randn({2, 2, 4, 4}, rng, 0.8));
    pyr.strides = {8, 4, 2, 1};

    ClusterStateT<double> st1 = run_decoder(pyr, ps, d);
    REQUIRE(st1.per_stage_logits.size() == 4);
    for (size_t s = 0; s < 4; ++s) {
        const Tensor64& level = pyr.levels[s];
        CHECK(st1.stage_dims[s] ==
              std::array<int, 3>{level.extent(1), level.extent(2), level.extent(3)});
        CHECK(st1.per_stage_logits[s].extent(0) == 4);
        CHECK(st1.per_stage_logits[s].extent(1) == int(level.numel() / level.extent(0)));
    }
    ClusterStateT<double> st2 = run_decoder(pyr, ps, d);
    for (int i = 0; i < 32; ++i) CHECK(st1.centers.values()[i] == st2.centers.values()[i]);
    for (size_t s = 0; s < 4; ++s)
        for (size_t i = 0; i < st1.per_stage_logits[s].values().size(); ++i)
            CHECK(st1.per_stage_logits[s].values()[i] == st2.per_stage_logits[s].values()[i]);

    FeaturePyramidT<double> three;
    three.levels = {pyr.levels[0], pyr.levels[1], pyr.levels[2]};
    three.strides = {4, 2, 1};
    CHECK_THROWS_AS(run_decoder(three, ps, d), ConfigError);

    ParamStoreT<double> bare;
    bare.put("decoder.queries", Tensor64::randn({4, 8}, rng, 0.02));
    FeaturePyramidT<double> one;
    one.levels = {pyr.levels[3]};
    one.strides = {1};
    CHECK_THROWS_AS(run_decoder(one, bare, d), ConfigError);
}

TEST_CASE("a single decoder stage composes exactly as the stage function") {
    ModelDims d = tiny_dims();
    Rng rng(6);
    ParamStoreT<double> ps;
    maskformer_init(ps, d, rng, {3});
    FeaturePyramidT<double> pyr;
    pyr.levels.push_back(Tensor64::randn({3, 2, 2, 2}, rng, 0.8));
    pyr.strides = {1};

    ClusterStateT<double> st = run_decoder(pyr, ps, d);
    Tensor64 r;
    Tensor64 direct = decoder_stage(ps.get("decoder.queries"),
                                    reshape(pyr.levels[0], {3, 8}), ps, "decoder.stage0", d, &r);
    for (int i = 0; i < 32; ++i) CHECK(st.centers.values()[i] == direct.values()[i]);
    for (int i = 0; i < 4 * 8; ++i)
        CHECK(st.per_stage_logits[0].values()[i] == r.values()[i]);
}

TEST_CASE("only the value path reaches the keys and queries unless deeply supervised") {
    ModelDims d = tiny_dims();
    std::vector<uint8_t> y(16);
    for (size_t i = 0; i < y.size(); ++i) y[i] = uint8_t(i % 3);

    auto run = [&](double deep_weight, ParamStoreT<double>& ps, Rng& rng) {
        maskformer_init(ps, d, rng, {3, 2});
        FeaturePyramidT<double> pyr = tiny_pyramid<double>(rng);
        ps.set_requires_grad_all(true);
        MaskFormerOutT<double> out = maskformer_forward(pyr, ps, d);
        LossWeights w;
        w.deep = deep_weight;
        LossPartsT<double> parts = joint_loss(out, ps, d, y, 1, w);
        backward(parts.total);
        return parts;
    };

    ParamStoreT<double> frozen;
    Rng rng1(31);
    LossPartsT<double> p0 = run(0.0, frozen, rng1);
    CHECK(p0.deep == 0.0);
    for (int s = 0; s < 2; ++s) {
        const std::string p = "decoder.stage" + std::to_string(s);
        CHECK_FALSE(frozen.get(p + ".cross.q.w").has_grad());
        CHECK_FALSE(frozen.get(p + ".cross.k.w").has_grad());
        CHECK(grad_abs_sum(frozen.get(p + ".cross.v.w")) > 0.0);
    }
    CHECK(grad_abs_sum(frozen.get("decoder.queries")) > 0.0);
    CHECK(grad_abs_sum(frozen.get("head.cls.fc1.w")) > 0.0);

    ParamStoreT<double> deep;
    Rng rng2(31);
    LossPartsT<double> p1 = run(0.25, deep, rng2);
    CHECK(p1.deep > 0.0);
    for (int s = 0; s < 2; ++s) {
        const std::string p = "decoder.stage" + std::to_string(s);
        CHECK(grad_abs_sum(deep.get(p + ".cross.q.w")) > 0.0);
        CHECK(grad_abs_sum(deep.get(p + ".cross.k.w")) > 0.0);
    }
    CHECK(p1.total.item() ==
          doctest::Approx(p1.seg_dice + p1.seg_ce + p1.cls_ce + p1.deep).epsilon(1e-9));
}

TEST_CASE("analytic gradients match finite differences through the full model") {
    ModelDims d = tiny_dims();
    Rng rng(77);
    ParamStoreT<double> ps;
    maskformer_init(ps, d, rng, {3, 2});
    FeaturePyramidT<double> pyr = tiny_pyramid<double>(rng);
    std::vector<uint8_t> y(16);
    for (size_t i = 0; i < y.size(); ++i) y[i] = uint8_t((i + 1) % 3);

    auto check_param = [&](const std::string& name) {
        Tensor64 orig = ps.get(name).clone();
        auto f = [&](const Tensor64& t) {
            ps.get(name) = t;
            MaskFormerOutT<double> out = maskformer_forward(pyr, ps, d);
            return joint_loss(out, ps, d, y, 1, {}).total;
        };
        double err = grad_check<double>(f, orig.clone(), 1e-5);
        ps.get(name) = orig;
        CHECK_MESSAGE(err < 1e-3, name, ": worst relative gradient error ", err);
    };

    for (const char* name : {"decoder.queries",
                             "decoder.stage0.cross.q.w",
                             "decoder.stage0.cross.k.b",
                             "decoder.stage0.cross.v.w",
                             "decoder.stage1.cross.v.b",
                             "decoder.stage0.attn.wq.w",
                             "decoder.stage0.attn.wo.b",
                             "decoder.stage0.ffn.fc1.w",
                             "decoder.stage0.norm1.g",
                             "decoder.stage1.norm2.b",
                             "head.fproj.w",
                             "head.ck.fc1.w",
                             "head.ck.fc2.b",
                             "head.cls.norm_r.g",
                             "head.cls.fc1.w",
                             "head.cls.fc2.b"})
        check_param(name);
}

TEST_CASE("cluster index permutations leave predictions unchanged") {
    ModelDims d = tiny_dims();
    const int N = 4, C = 8;
    Rng rng1(13);
    ParamStoreT<double> ps1;
    maskformer_init(ps1, d, rng1, {3, 2});
    FeaturePyramidT<double> pyr = tiny_pyramid<double>(rng1);
    MaskFormerOutT<double> out1 = maskformer_forward(pyr, ps1, d);

    Rng rng2(13);
    ParamStoreT<double> ps2;
    maskformer_init(ps2, d, rng2, {3, 2});
    const std::array<int, 4> perm = {2, 0, 3, 1};  // new row i takes old row perm[i]
    for (int i = 0; i < N; ++i) {
        for (int c = 0; c < C; ++c)
            ps2.get("decoder.queries").values()[i * C + c] =
                ps1.get("decoder.queries").values()[perm[i] * C + c];
        for (const char* nm : {"head.cls.norm_r.g", "head.cls.norm_r.b"})
            ps2.get(nm).values()[i] = ps1.get(nm).values()[perm[i]];
        for (int h = 0; h < d.cls_hidden; ++h)
            ps2.get("head.cls.fc1.w").values()[h * (C + N) + C + i] =
                ps1.get("head.cls.fc1.w").values()[h * (C + N) + C + perm[i]];
    }
    MaskFormerOutT<double> out2 = maskformer_forward(pyr, ps2, d);

    for (size_t i = 0; i < out1.pred.seg_logits.values().size(); ++i)
        CHECK(std::abs(out1.pred.seg_logits.values()[i] - out2.pred.seg_logits.values()[i]) <
              1e-9);
    for (int i = 0; i < 2; ++i)
        CHECK(std::abs(out1.pred.cls_logits.values()[i] - out2.pred.cls_logits.values()[i]) <
              1e-9);
    for (int c = 0; c < C; ++c)
        CHECK(std::abs(out1.pred.cluster_path.values()[c] - out2.pred.cluster_path.values()[c]) <
              1e-9);
    for (int i = 0; i < N; ++i)
        CHECK(std::abs(out2.pred.pixel_path.values()[i] -
                       out1.pred.pixel_path.values()[perm[i]]) < 1e-9);
}

TEST_CASE("label grids downsample with the nearest-index map") {
    //  2x2x4 grid of distinct labels 0..2, target 1x1x2
    std::vector<uint8_t> y(16);
    for (int i = 0; i < 16; ++i) y[i] = uint8_t(i % 3);
    std::vector<uint8_t> ds = downsample_labels(y, {2, 2, 4}, {1, 1, 2});
    REQUIRE(ds.size() == 2);
    CHECK(ds[0] == y[0]);
    CHECK(ds[1] == y[2]);
    CHECK(downsample_labels(y, {2, 2, 4}, {2, 2, 4}) == y);
    CHECK_THROWS_AS(downsample_labels(y, {3, 3, 3}, {1, 1, 1}), ShapeError);
}

TEST_CASE("deep supervision compares every stage against its own resolution") {
    ModelDims d = tiny_dims();
    Rng rng(55);
    ParamStoreT<double> ps;
    maskformer_init(ps, d, rng, {3, 2});
    FeaturePyramidT<double> pyr = tiny_pyramid<double>(rng);
    MaskFormerOutT<double> out = maskformer_forward(pyr, ps, d);
    std::vector<uint8_t> y(16, 0);
    y[3] = 1;
    y[9] = 2;

    LossWeights w;
    w.deep = 0.25;
    LossPartsT<double> parts = joint_loss(out, ps, d, y, 0, w);
    CHECK(parts.deep > 0.0);

    // doubling the stage weight doubles exactly the deep term
    LossWeights w2;
    w2.deep = 0.5;
    LossPartsT<double> parts2 = joint_loss(out, ps, d, y, 0, w2);
    CHECK(parts2.deep == doctest::Approx(2.0 * parts.deep).epsilon(1e-9));
    CHECK(parts2.seg_dice == doctest::Approx(parts.seg_dice).epsilon(1e-12));
    CHECK(parts2.cls_ce == doctest::Approx(parts.cls_ce).epsilon(1e-12));
}
