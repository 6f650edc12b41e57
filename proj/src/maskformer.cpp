#include "cimt/maskformer.hpp"

#include <cmath>

namespace cimt {

namespace {

constexpr double kDiceSmooth = 1e-5;
constexpr double kLogitClamp = 10.0;

template <typename T>
void add_linear(ParamStoreT<T>& ps, const std::string& name, int out, int in, Rng& rng) {
    const T std = std::sqrt(T(2) / static_cast<T>(in + out));
    ps.put(name + ".w", TensorT<T>::randn({out, in}, rng, std));
    ps.put(name + ".b", TensorT<T>::zeros({out}));
}

template <typename T>
void add_norm(ParamStoreT<T>& ps, const std::string& name, int c) {
    ps.put(name + ".g", TensorT<T>::full({c}, T(1)));
    ps.put(name + ".b", TensorT<T>::zeros({c}));
}

template <typename T>
TensorT<T> run_linear(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& name) {
    return linear(x, ps.get(name + ".w"), ps.get(name + ".b"));
}

}  // namespace

template <typename T>
void maskformer_init(ParamStoreT<T>& ps, const ModelDims& dims, Rng& rng,
                     const std::vector<int>& level_channels) {
    dims.validate();
    std::vector<int> chans = level_channels;
    if (chans.empty()) {
        const int w = dims.base_width;
        chans = {8 * w, 4 * w, 2 * w, w};
    }
    const int C = dims.embed_dim;
    ps.put("decoder.queries", TensorT<T>::randn({dims.num_queries, C}, rng, T(0.02)));
    for (size_t s = 0; s < chans.size(); ++s) {
        const std::string p = "decoder.stage" + std::to_string(s);
        add_linear(ps, p + ".cross.q", C, C, rng);
        add_linear(ps, p + ".cross.k", C, chans[s], rng);
        add_linear(ps, p + ".cross.v", C, chans[s], rng);
        add_linear(ps, p + ".attn.wq", C, C, rng);
        add_linear(ps, p + ".attn.wk", C, C, rng);
        add_linear(ps, p + ".attn.wv", C, C, rng);
        add_linear(ps, p + ".attn.wo", C, C, rng);
        add_norm(ps, p + ".norm1", C);
        add_linear(ps, p + ".ffn.fc1", 2 * C, C, rng);
        add_linear(ps, p + ".ffn.fc2", C, 2 * C, rng);
        add_norm(ps, p + ".norm2", C);
    }
    add_linear(ps, "head.fproj", C, chans.back(), rng);
    add_linear(ps, "head.ck.fc1", C, C, rng);
    add_linear(ps, "head.ck.fc2", dims.num_classes, C, rng);
    add_norm(ps, "head.cls.norm_c", C);
    add_norm(ps, "head.cls.norm_r", dims.num_queries);
    add_linear(ps, "head.cls.fc1", dims.cls_hidden, C + dims.num_queries, rng);
    add_linear(ps, "head.cls.fc2", 2, dims.cls_hidden, rng);
}

template <typename T>
TensorT<T> cluster_update(const TensorT<T>& centers, const TensorT<T>& feat_flat,
                          const ParamStoreT<T>& ps, const std::string& prefix,
                          const ModelDims& dims, TensorT<T>* stage_logits) {
    dims.validate();
    if (centers.rank() != 2 || centers.extent(1) != dims.embed_dim)
        throw ShapeError("cluster_update: centers must be [N, embed_dim]");
    if (centers.extent(0) < 2)
        throw ConfigError("cluster_update: need at least 2 cluster centers, argmax over one is degenerate");
    if (feat_flat.rank() != 2)
        throw ShapeError("cluster_update: features must be [channels, voxels]");

    TensorT<T> featT = transpose2(feat_flat);                     // [V, c]
    TensorT<T> kp = run_linear(featT, ps, prefix + ".cross.k");   // [V, C]
    TensorT<T> vp = run_linear(featT, ps, prefix + ".cross.v");   // [V, C]
    TensorT<T> qc = run_linear(centers, ps, prefix + ".cross.q"); // [N, C]
    TensorT<T> r = scale(matmul(qc, transpose2(kp)),
                         T(1) / std::sqrt(static_cast<T>(dims.embed_dim)));  // [N, V]
    if (stage_logits) *stage_logits = r;
    TensorT<T> a = onehot_argmax_axis(r, 0);  // constant in backward
    return add(centers, matmul(a, vp));
}

template <typename T>
TensorT<T> decoder_stage(const TensorT<T>& centers, const TensorT<T>& feat_flat,
                         const ParamStoreT<T>& ps, const std::string& prefix,
                         const ModelDims& dims, TensorT<T>* stage_logits) {
    TensorT<T> c1 = cluster_update(centers, feat_flat, ps, prefix, dims, stage_logits);

    const int dh = dims.embed_dim / dims.num_heads;
    TensorT<T> q = run_linear(c1, ps, prefix + ".attn.wq");
    TensorT<T> k = run_linear(c1, ps, prefix + ".attn.wk");
    TensorT<T> v = run_linear(c1, ps, prefix + ".attn.wv");
    std::vector<TensorT<T>> heads;
    for (int h = 0; h < dims.num_heads; ++h) {
        TensorT<T> qh = slice(q, 1, h * dh, dh);
        TensorT<T> kh = slice(k, 1, h * dh, dh);
        TensorT<T> vh = slice(v, 1, h * dh, dh);
        TensorT<T> att = softmax_axis(
            scale(matmul(qh, transpose2(kh)), T(1) / std::sqrt(static_cast<T>(dh))), 1);
        heads.push_back(matmul(att, vh));
    }
    TensorT<T> sa = run_linear(concat(heads, 1), ps, prefix + ".attn.wo");
    TensorT<T> c2 = layer_norm(add(c1, sa), 1, ps.get(prefix + ".norm1.g"),
                               ps.get(prefix + ".norm1.b"));

    TensorT<T> f = run_linear(gelu(run_linear(c2, ps, prefix + ".ffn.fc1")), ps,
                              prefix + ".ffn.fc2");
    return layer_norm(add(c2, f), 1, ps.get(prefix + ".norm2.g"), ps.get(prefix + ".norm2.b"));
}

template <typename T>
ClusterStateT<T> run_decoder(const FeaturePyramidT<T>& pyr, const ParamStoreT<T>& ps,
                             const ModelDims& dims) {
    int stages = 0;
    while (ps.has("decoder.stage" + std::to_string(stages) + ".cross.q.w")) ++stages;
    if (stages == 0) throw ConfigError("run_decoder: params contain no decoder stages");
    if (static_cast<int>(pyr.levels.size()) != stages)
        throw ConfigError("run_decoder: " + std::to_string(stages) + " decoder stages but " +
                          std::to_string(pyr.levels.size()) + " pyramid levels");

    ClusterStateT<T> st;
    st.centers = ps.get("decoder.queries");
    for (int s = 0; s < stages; ++s) {
        const TensorT<T>& level = pyr.levels[static_cast<size_t>(s)];
        if (level.rank() != 4) throw ShapeError("run_decoder: levels must be [c,D,H,W]");
        const int c = level.extent(0);
        const int64_t vox = level.numel() / c;
        TensorT<T> flat = reshape(level, {c, static_cast<int>(vox)});
        TensorT<T> r;
        st.centers = decoder_stage(st.centers, flat, ps, "decoder.stage" + std::to_string(s),
                                   dims, &r);
        st.per_stage_logits.push_back(std::move(r));
        st.stage_dims.push_back({level.extent(1), level.extent(2), level.extent(3)});
    }
    return st;
}

template <typename T>
ClusterAssignmentT<T> assign(const TensorT<T>& centers, const TensorT<T>& F) {
    if (centers.rank() != 2 || F.rank() != 2 || centers.extent(1) != F.extent(0))
        throw ShapeError("assign: centers [N,C] and features [C,V] must share C");
    ClusterAssignmentT<T> out;
    out.logits = matmul(centers, F);
    out.probs = softmax_axis(out.logits, 0);
    return out;
}

template <typename T>
TensorT<T> ck_matrix(const TensorT<T>& centers, const ParamStoreT<T>& ps) {
    TensorT<T> h = gelu(run_linear(centers, ps, "head.ck.fc1"));
    return transpose2(run_linear(h, ps, "head.ck.fc2"));  // [K, N]
}

template <typename T>
TensorT<T> segment(const ClusterAssignmentT<T>& assignment, const TensorT<T>& centers,
                   const ParamStoreT<T>& ps) {
    return matmul(ck_matrix(centers, ps), assignment.probs);
}

template <typename T>
ClsOutT<T> classify(const ClusterStateT<T>& state, const ClusterAssignmentT<T>& assignment,
                    const ParamStoreT<T>& ps, const ModelDims& dims) {
    if (state.centers.extent(1) != dims.embed_dim)
        throw ShapeError("classify: centers width does not match embed_dim");
    ClsOutT<T> out;
    out.cluster_path = reduce_mean(state.centers, 0);     // [C]
    out.pixel_path = reduce_max(assignment.logits, 1);    // [N]
    TensorT<T> nc = layer_norm(out.cluster_path, 0, ps.get("head.cls.norm_c.g"),
                               ps.get("head.cls.norm_c.b"));
    TensorT<T> nr = layer_norm(out.pixel_path, 0, ps.get("head.cls.norm_r.g"),
                               ps.get("head.cls.norm_r.b"));
    TensorT<T> cat = concat<T>({nc, nr}, 0);              // [C + N]
    TensorT<T> h = gelu(run_linear(cat, ps, "head.cls.fc1"));
    out.logits = run_linear(h, ps, "head.cls.fc2");
    return out;
}

template <typename T>
MaskFormerOutT<T> maskformer_forward(const FeaturePyramidT<T>& pyr, const ParamStoreT<T>& ps,
                                     const ModelDims& dims) {
    MaskFormerOutT<T> out;
    out.state = run_decoder(pyr, ps, dims);
    const TensorT<T>& finest = pyr.levels.back();
    out.finest_dims = {finest.extent(1), finest.extent(2), finest.extent(3)};
    const int c = finest.extent(0);
    const int vox = static_cast<int>(finest.numel() / c);
    TensorT<T> flat = reshape(finest, {c, vox});
    TensorT<T> F = transpose2(run_linear(transpose2(flat), ps, "head.fproj"));  // [C, V]
    out.assignment = assign(out.state.centers, F);
    out.pred.seg_logits = segment(out.assignment, out.state.centers, ps);
    ClsOutT<T> cls = classify(out.state, out.assignment, ps, dims);
    out.pred.cls_logits = cls.logits;
    out.pred.cluster_path = cls.cluster_path;
    out.pred.pixel_path = cls.pixel_path;
    return out;
}

template <typename T>
TensorT<T> onehot_labels(const std::vector<uint8_t>& y, int num_classes) {
    TensorT<T> out = TensorT<T>::zeros({num_classes, static_cast<int>(y.size())});
    auto v = out.values();
    const size_t n = y.size();
    for (size_t i = 0; i < n; ++i) {
        if (y[i] >= num_classes)
            throw DataError("voxel label " + std::to_string(int(y[i])) + " out of range [0, " +
                            std::to_string(num_classes) + ")");
        v[static_cast<size_t>(y[i]) * n + i] = T(1);
    }
    return out;
}

std::vector<uint8_t> downsample_labels(const std::vector<uint8_t>& y,
                                       const std::array<int, 3>& extents,
                                       const std::array<int, 3>& target) {
    const int D = extents[0], H = extents[1], W = extents[2];
    const int d = target[0], h = target[1], w = target[2];
    if (y.size() != static_cast<size_t>(D) * H * W)
        throw ShapeError("downsample_labels: label count does not match extents");
    std::vector<uint8_t> out(static_cast<size_t>(d) * h * w);
    size_t i = 0;
    for (int z = 0; z < d; ++z) {
        const int sz = z * D / d;
        for (int yy = 0; yy < h; ++yy) {
            const int sy = yy * H / h;
            for (int x = 0; x < w; ++x, ++i)
                out[i] = y[(static_cast<size_t>(sz) * H + sy) * W + x * W / w];
        }
    }
    return out;
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> seg_loss(const TensorT<T>& z, const TensorT<T>& target_onehot) {
    if (z.shape() != target_onehot.shape())
        throw ShapeError("seg_loss: logits and targets must match");
    const int K = z.extent(0);
    if (K < 2) throw ConfigError("seg_loss: need at least 2 classes");
    TensorT<T> probs = softmax_axis(z, 0);
    TensorT<T> dice_acc;
    for (int k = 1; k < K; ++k) {
        TensorT<T> pk = slice(probs, 0, k, 1);
        TensorT<T> yk = slice(target_onehot, 0, k, 1);
        TensorT<T> num = add_scalar(scale(sum(mul(pk, yk)), T(2)), T(kDiceSmooth));
        TensorT<T> den = add_scalar(add(sum(pk), sum(yk)), T(kDiceSmooth));
        TensorT<T> d = div(num, den);
        dice_acc = k == 1 ? d : add(dice_acc, d);
    }
    TensorT<T> dice_loss = add_scalar(neg(scale(dice_acc, T(1) / static_cast<T>(K - 1))), T(1));
    TensorT<T> ce = softmax_xent_mean(clamp(z, T(-kLogitClamp), T(kLogitClamp)), target_onehot, 0);
    return {dice_loss, ce};
}

template <typename T>
LossPartsT<T> joint_loss(const MaskFormerOutT<T>& out, const ParamStoreT<T>& ps,
                         const ModelDims& dims, const std::vector<uint8_t>& y,
                         int patient_label, const LossWeights& w) {
    if (patient_label != 0 && patient_label != 1)
        throw DataError("patient label must be 0 or 1");
    LossPartsT<T> parts;

    TensorT<T> target = onehot_labels<T>(y, dims.num_classes);
    auto [dice, ce] = seg_loss(out.pred.seg_logits, target);
    parts.seg_dice = static_cast<double>(dice.item());
    parts.seg_ce = static_cast<double>(ce.item());
    TensorT<T> total = scale(add(dice, ce), static_cast<T>(w.seg));

    if (w.deep != 0.0 && !out.state.per_stage_logits.empty()) {
        TensorT<T> ck = ck_matrix(out.state.centers, ps);
        for (size_t s = 0; s < out.state.per_stage_logits.size(); ++s) {
            TensorT<T> zs = matmul(ck, softmax_axis(out.state.per_stage_logits[s], 0));
            std::vector<uint8_t> ys =
                downsample_labels(y, out.finest_dims, out.state.stage_dims[s]);
            auto [ds, cs] = seg_loss(zs, onehot_labels<T>(ys, dims.num_classes));
            TensorT<T> term = scale(add(ds, cs), static_cast<T>(w.deep));
            parts.deep += static_cast<double>(term.item());
            total = add(total, term);
        }
    }

    TensorT<T> cls_target = TensorT<T>::zeros({2});
    cls_target.values()[static_cast<size_t>(patient_label)] = T(1);
    TensorT<T> cls_ce = softmax_xent_mean(
        clamp(out.pred.cls_logits, T(-kLogitClamp), T(kLogitClamp)), cls_target, 0);
    parts.cls_ce = static_cast<double>(cls_ce.item());
    total = add(total, scale(cls_ce, static_cast<T>(w.cls)));

    parts.total = total;
    return parts;
}

#define CIMT_MASKFORMER_INSTANTIATE_FOR(T)                                                    \
    template void maskformer_init(ParamStoreT<T>&, const ModelDims&, Rng&,                    \
                                  const std::vector<int>&);                                   \
    template TensorT<T> cluster_update(const TensorT<T>&, const TensorT<T>&,                  \
                                       const ParamStoreT<T>&, const std::string&,             \
                                       const ModelDims&, TensorT<T>*);                        \
    template TensorT<T> decoder_stage(const TensorT<T>&, const TensorT<T>&,                   \
                                      const ParamStoreT<T>&, const std::string&,              \
                                      const ModelDims&, TensorT<T>*);                         \
    template ClusterStateT<T> run_decoder(const FeaturePyramidT<T>&, const ParamStoreT<T>&,   \
                                          const ModelDims&);                                  \
    template ClusterAssignmentT<T> assign(const TensorT<T>&, const TensorT<T>&);              \
    template TensorT<T> ck_matrix(const TensorT<T>&, const ParamStoreT<T>&);                  \
    template TensorT<T> segment(const ClusterAssignmentT<T>&, const TensorT<T>&,              \
                                const ParamStoreT<T>&);                                       \
    template ClsOutT<T> classify(const ClusterStateT<T>&, const ClusterAssignmentT<T>&,       \
                                 const ParamStoreT<T>&, const ModelDims&);                    \
    template MaskFormerOutT<T> maskformer_forward(const FeaturePyramidT<T>&,                  \
                                                  const ParamStoreT<T>&, const ModelDims&);   \
    template TensorT<T> onehot_labels(const std::vector<uint8_t>&, int);                      \
    template std::pair<TensorT<T>, TensorT<T>> seg_loss(const TensorT<T>&, const TensorT<T>&); \
    template LossPartsT<T> joint_loss(const MaskFormerOutT<T>&, const ParamStoreT<T>&,        \
                                      const ModelDims&, const std::vector<uint8_t>&, int,     \
                                      const LossWeights&);

CIMT_MASKFORMER_INSTANTIATE_FOR(float)
CIMT_MASKFORMER_INSTANTIATE_FOR(double)
#undef CIMT_MASKFORMER_INSTANTIATE_FOR

}  // namespace cimt
