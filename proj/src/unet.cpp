#include "cimt/unet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cimt {

void ModelDims::validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (base_width < 1) throw ConfigError("base_width must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (num_queries < 2) throw ConfigError("num_queries must be >= 2 (cluster assignment is degenerate otherwise)");
    if (embed_dim < num_heads || embed_dim % num_heads != 0)
        throw ConfigError("embed_dim must be a positive multiple of num_heads");
    if (cls_hidden < 1) throw ConfigError("cls_hidden must be >= 1");
    for (int m : roi_margin)
        if (m < 0) throw ConfigError("roi_margin must be non-negative");
}

namespace {

template <typename T>
void add_conv(ParamStoreT<T>& ps, const std::string& name, int cout, int cin, int k, Rng& rng) {
    const T std = std::sqrt(T(2) / static_cast<T>(cin * k * k * k));
    ps.put(name + ".w", TensorT<T>::randn({cout, cin, k, k, k}, rng, std));
    ps.put(name + ".b", TensorT<T>::zeros({cout}));
}

template <typename T>
void add_norm(ParamStoreT<T>& ps, const std::string& name, int c) {
    ps.put(name + ".g", TensorT<T>::full({c}, T(1)));
    ps.put(name + ".b", TensorT<T>::zeros({c}));
}

template <typename T>
void add_block(ParamStoreT<T>& ps, const std::string& prefix, int cin, int cout, Rng& rng) {
    add_conv(ps, prefix + ".conv1", cout, cin, 3, rng);
    add_norm(ps, prefix + ".norm1", cout);
    add_conv(ps, prefix + ".conv2", cout, cout, 3, rng);
    add_norm(ps, prefix + ".norm2", cout);
}

// conv -> channel layer_norm -> GELU, twice
template <typename T>
TensorT<T> run_block(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& prefix) {
    TensorT<T> h = conv3(x, ps.get(prefix + ".conv1.w"), ps.get(prefix + ".conv1.b"), 1, 1);
    h = gelu(layer_norm(h, 0, ps.get(prefix + ".norm1.g"), ps.get(prefix + ".norm1.b")));
    h = conv3(h, ps.get(prefix + ".conv2.w"), ps.get(prefix + ".conv2.b"), 1, 1);
    return gelu(layer_norm(h, 0, ps.get(prefix + ".norm2.g"), ps.get(prefix + ".norm2.b")));
}

std::array<int, 3> spatial(const Shape& s) { return {s[1], s[2], s[3]}; }

}  // namespace

template <typename T>
void unet_init(ParamStoreT<T>& ps, const ModelDims& dims, Rng& rng) {
    dims.validate();
    const int w = dims.base_width;
    add_block(ps, "backbone.enc0", dims.in_channels, w, rng);
    add_block(ps, "backbone.enc1", w, 2 * w, rng);
    add_block(ps, "backbone.enc2", 2 * w, 4 * w, rng);
    add_block(ps, "backbone.enc3", 4 * w, 8 * w, rng);
    add_block(ps, "backbone.dec2", 8 * w + 4 * w, 4 * w, rng);
    add_block(ps, "backbone.dec1", 4 * w + 2 * w, 2 * w, rng);
    add_block(ps, "backbone.dec0", 2 * w + w, w, rng);
    add_conv(ps, "backbone.seghead.conv", dims.num_classes, w, 1, rng);
}

template <typename T>
std::pair<FeaturePyramidT<T>, TensorT<T>> unet_forward(const TensorT<T>& x,
                                                       const ParamStoreT<T>& ps,
                                                       const ModelDims& dims) {
    if (x.rank() != 4 || x.extent(0) != dims.in_channels)
        throw ShapeError("unet_forward: input must be [" + std::to_string(dims.in_channels) +
                         ",D,H,W]");
    for (int a = 1; a <= 3; ++a)
        if (x.extent(a) % 8 != 0 || x.extent(a) < 8)
            throw ShapeError("unet_forward: extents must be positive multiples of 8 "
                             "(pad the volume before the forward pass)");

    const std::array<int, 3> pool_w{2, 2, 2};
    TensorT<T> e0 = run_block(x, ps, "backbone.enc0");
    TensorT<T> e1 = run_block(pool3(e0, PoolKind::kMax, pool_w, pool_w), ps, "backbone.enc1");
    TensorT<T> e2 = run_block(pool3(e1, PoolKind::kMax, pool_w, pool_w), ps, "backbone.enc2");
    TensorT<T> e3 = run_block(pool3(e2, PoolKind::kMax, pool_w, pool_w), ps, "backbone.enc3");

    TensorT<T> d2 = run_block(
        concat<T>({interpolate_nearest(e3, spatial(e2.shape())), e2}, 0), ps, "backbone.dec2");
    TensorT<T> d1 = run_block(
        concat<T>({interpolate_nearest(d2, spatial(e1.shape())), e1}, 0), ps, "backbone.dec1");
    TensorT<T> d0 = run_block(
        concat<T>({interpolate_nearest(d1, spatial(e0.shape())), e0}, 0), ps, "backbone.dec0");

    TensorT<T> logits =
        conv3(d0, ps.get("backbone.seghead.conv.w"), ps.get("backbone.seghead.conv.b"), 1, 0);

    FeaturePyramidT<T> pyr;
    pyr.levels = {e3, d2, d1, d0};
    pyr.strides = {8, 4, 2, 1};
    return {std::move(pyr), std::move(logits)};
}

template <typename T>
TensorT<T> normalize_volume(const TensorT<T>& x) {
    if (x.numel() == 0) throw ShapeError("normalize_volume: empty input");
    auto v = x.values();
    double sum = 0;
    for (T t : v) sum += t;
    const double mean = sum / static_cast<double>(v.size());
    double var = 0;
    for (T t : v) {
        const double d = t - mean;
        var += d * d;
    }
    var /= static_cast<double>(v.size());
    const double denom = std::sqrt(std::max(var, 1e-12));
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    auto o = out.values();
    for (size_t i = 0; i < v.size(); ++i)
        o[i] = static_cast<T>((v[i] - mean) / denom);
    return out;
}

RoiBox box_from_mask(const std::vector<uint8_t>& fg, const std::array<int, 3>& extents,
                     const std::array<int, 3>& margin) {
    const int D = extents[0], H = extents[1], W = extents[2];
    if (fg.size() != static_cast<size_t>(D) * H * W)
        throw ShapeError("box_from_mask: mask size does not match extents");
    RoiBox box;
    std::array<int, 3> lo{D, H, W}, hi{-1, -1, -1};
    size_t i = 0;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x, ++i) {
                if (!fg[i]) continue;
                lo[0] = std::min(lo[0], z);
                lo[1] = std::min(lo[1], y);
                lo[2] = std::min(lo[2], x);
                hi[0] = std::max(hi[0], z);
                hi[1] = std::max(hi[1], y);
                hi[2] = std::max(hi[2], x);
            }
    if (hi[0] < 0) {
        box.low = {0, 0, 0};
        box.high = extents;
        box.full_fallback = true;
        return box;
    }
    for (int a = 0; a < 3; ++a) {
        box.low[a] = std::max(0, lo[a] - margin[a]);
        box.high[a] = std::min(extents[a], hi[a] + 1 + margin[a]);
    }
    return box;
}

RoiBox roi_from_labels(const std::vector<uint8_t>& y, const std::array<int, 3>& extents,
                       const std::array<int, 3>& margin) {
    std::vector<uint8_t> fg(y.size());
    for (size_t i = 0; i < y.size(); ++i) fg[i] = y[i] == 1 || y[i] == 2;
    return box_from_mask(fg, extents, margin);
}

template <typename T>
RoiBox locate_stomach(const TensorT<T>& x, const ParamStoreT<T>& ps, const ModelDims& dims) {
    NoGradGuard ng;
    auto [pyr, logits] = unet_forward(normalize_volume(x), ps, dims);
    const int K = logits.extent(0);
    const size_t nvox = static_cast<size_t>(logits.extent(1)) * logits.extent(2) * logits.extent(3);
    auto v = logits.values();
    std::vector<uint8_t> fg(nvox);
    for (size_t i = 0; i < nvox; ++i) {
        int best = 0;
        T bestv = v[i];
        for (int k = 1; k < K; ++k) {
            const T cand = v[static_cast<size_t>(k) * nvox + i];
            if (cand > bestv) {
                bestv = cand;
                best = k;
            }
        }
        fg[i] = best >= 1;
    }
    return box_from_mask(fg, {x.extent(1), x.extent(2), x.extent(3)}, dims.roi_margin);
}

RoiBox expand_to_multiple(const RoiBox& box, const std::array<int, 3>& extents, int m) {
    if (m < 1) throw ConfigError("expand_to_multiple: m must be >= 1");
    RoiBox out = box;
    for (int a = 0; a < 3; ++a) {
        if (extents[a] < m)
            throw ShapeError("expand_to_multiple: volume extent smaller than required multiple");
        const int cap = (extents[a] / m) * m;  // largest feasible side
        int size = box.high[a] - box.low[a];
        if (size <= 0) throw ContractError("expand_to_multiple: box must be non-empty");
        int target = std::min(((size + m - 1) / m) * m, cap);
        int low = box.low[a] - (target - size) / 2;
        low = std::clamp(low, 0, extents[a] - target);
        out.low[a] = low;
        out.high[a] = low + target;
    }
    return out;
}

VolumeSample crop_roi(const VolumeSample& s, const RoiBox& box) {
    if (s.x.rank() != 4) throw ShapeError("crop_roi: sample image must be [c,D,H,W]");
    const int C = s.x.extent(0), D = s.x.extent(1), H = s.x.extent(2), W = s.x.extent(3);
    for (int a = 0; a < 3; ++a) {
        const int ext = a == 0 ? D : a == 1 ? H : W;
        if (box.low[a] < 0 || box.high[a] > ext || box.high[a] <= box.low[a])
            throw ContractError("crop_roi: box outside the volume or empty");
    }
    const auto sz = box.size();
    VolumeSample out;
    out.id = s.id;
    out.seed = s.seed;
    out.tumor_frac = s.tumor_frac;
    out.offset = box.low;
    out.x = Tensor::zeros({C, sz[0], sz[1], sz[2]});
    out.y.assign(static_cast<size_t>(sz[0]) * sz[1] * sz[2], 0);
    auto src = s.x.values();
    auto dst = out.x.values();
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < sz[0]; ++z)
            for (int y = 0; y < sz[1]; ++y) {
                const size_t si = ((static_cast<size_t>(c) * D + box.low[0] + z) * H + box.low[1] + y) * W +
                                  box.low[2];
                const size_t di = ((static_cast<size_t>(c) * sz[0] + z) * sz[1] + y) * sz[2];
                std::memcpy(&dst[di], &src[si], static_cast<size_t>(sz[2]) * sizeof(float));
            }
    int tumor = 0;
    for (int z = 0; z < sz[0]; ++z)
        for (int y = 0; y < sz[1]; ++y) {
            const size_t si = (static_cast<size_t>(box.low[0] + z) * H + box.low[1] + y) * W + box.low[2];
            const size_t di = (static_cast<size_t>(z) * sz[1] + y) * sz[2];
            std::memcpy(&out.y[di], &s.y[si], static_cast<size_t>(sz[2]));
        }
    for (uint8_t c : out.y) tumor += c == 2;
    out.tumor_voxels = tumor;
    out.label = tumor > 0 ? 1 : 0;
    return out;
}

template <typename T>
void paste_roi(TensorT<T>& dest, const TensorT<T>& src, const std::array<int, 3>& offset) {
    if (dest.rank() != 4 || src.rank() != 4 || dest.extent(0) != src.extent(0))
        throw ShapeError("paste_roi: tensors must be [c,D,H,W] with equal channels");
    const int C = src.extent(0), d = src.extent(1), h = src.extent(2), w = src.extent(3);
    const int D = dest.extent(1), H = dest.extent(2), W = dest.extent(3);
    if (offset[0] < 0 || offset[1] < 0 || offset[2] < 0 || offset[0] + d > D ||
        offset[1] + h > H || offset[2] + w > W)
        throw ContractError("paste_roi: source does not fit at the given offset");
    auto sv = src.values();
    auto dv = dest.values();
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y) {
                const size_t si = ((static_cast<size_t>(c) * d + z) * h + y) * static_cast<size_t>(w);
                const size_t di = ((static_cast<size_t>(c) * D + offset[0] + z) * H + offset[1] + y) * W +
                                  offset[2];
                std::memcpy(&dv[di], &sv[si], static_cast<size_t>(w) * sizeof(T));
            }
}

#define CIMT_UNET_INSTANTIATE_FOR(T)                                                        \
    template void unet_init(ParamStoreT<T>&, const ModelDims&, Rng&);                       \
    template std::pair<FeaturePyramidT<T>, TensorT<T>> unet_forward(                        \
        const TensorT<T>&, const ParamStoreT<T>&, const ModelDims&);                        \
    template TensorT<T> normalize_volume(const TensorT<T>&);                                \
    template RoiBox locate_stomach(const TensorT<T>&, const ParamStoreT<T>&,                \
                                   const ModelDims&);                                       \
    template void paste_roi(TensorT<T>&, const TensorT<T>&, const std::array<int, 3>&);

CIMT_UNET_INSTANTIATE_FOR(float)
CIMT_UNET_INSTANTIATE_FOR(double)
#undef CIMT_UNET_INSTANTIATE_FOR

}  // namespace cimt
