#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "cimt/params.hpp"
#include "cimt/phantom.hpp"
#include "cimt/rng.hpp"
#include "cimt/tensor.hpp"

namespace cimt {

// Shared width/head configuration for the backbone and the decoder on top.
struct ModelDims {
    int in_channels = 1;
    int base_width = 8;    // encoder widths: w, 2w, 4w, 8w
    int num_classes = 3;   // background, stomach, tumor
    int num_queries = 8;   // cluster centers
    int embed_dim = 32;    // decoder channel width
    int num_heads = 4;
    int cls_hidden = 32;
    std::array<int, 3> roi_margin{2, 2, 1};

    void validate() const;
};

// Multi-scale features, coarse to fine; strides strictly decrease and the
// finest level matches the input extents.
template <typename T>
struct FeaturePyramidT {
    std::vector<TensorT<T>> levels;
    std::vector<int> strides;
};
using FeaturePyramid = FeaturePyramidT<float>;

// Axis-aligned voxel box, low inclusive, high exclusive.
struct RoiBox {
    std::array<int, 3> low{0, 0, 0};
    std::array<int, 3> high{0, 0, 0};
    bool full_fallback = false;  // no foreground found, box covers the volume

    std::array<int, 3> size() const {
        return {high[0] - low[0], high[1] - low[1], high[2] - low[2]};
    }
};

// Creates backbone parameters under "backbone.*". Draw order is fixed, so a
// given rng state always produces the same initialization.
template <typename T>
void unet_init(ParamStoreT<T>& ps, const ModelDims& dims, Rng& rng);

// Returns the feature pyramid (strides 8/4/2/1) and segmentation logits
// [num_classes, D, H, W]. Extents must be divisible by 8.
template <typename T>
std::pair<FeaturePyramidT<T>, TensorT<T>> unet_forward(const TensorT<T>& x,
                                                       const ParamStoreT<T>& ps,
                                                       const ModelDims& dims);

// Mean 0, variance 1 (population), epsilon-guarded: constant volumes map to 0.
template <typename T>
TensorT<T> normalize_volume(const TensorT<T>& x);

// Bounding box of the set voxels plus a margin, clamped to the volume.
RoiBox box_from_mask(const std::vector<uint8_t>& fg, const std::array<int, 3>& extents,
                     const std::array<int, 3>& margin);

// Ground-truth box: foreground is stomach or tumor (labels 1 and 2).
RoiBox roi_from_labels(const std::vector<uint8_t>& y, const std::array<int, 3>& extents,
                       const std::array<int, 3>& margin);

// Predicted box: runs the segmentation head and takes argmax classes 1 and 2.
template <typename T>
RoiBox locate_stomach(const TensorT<T>& x, const ParamStoreT<T>& ps, const ModelDims& dims);

// Grows the box so every side is a multiple of `m` (shifted to stay inside).
RoiBox expand_to_multiple(const RoiBox& box, const std::array<int, 3>& extents, int m);

// Sub-volume and sub-labelmap; offset records where the crop came from and
// the patient label is recomputed from the cropped voxels.
VolumeSample crop_roi(const VolumeSample& s, const RoiBox& box);

// Writes src (channels-first) into dest at the voxel offset. Plain data move,
// never recorded on the tape.
template <typename T>
void paste_roi(TensorT<T>& dest, const TensorT<T>& src, const std::array<int, 3>& offset);

#define CIMT_UNET_DECLARE_FOR(T)                                                              \
    extern template void unet_init(ParamStoreT<T>&, const ModelDims&, Rng&);                  \
    extern template std::pair<FeaturePyramidT<T>, TensorT<T>> unet_forward(                   \
        const TensorT<T>&, const ParamStoreT<T>&, const ModelDims&);                          \
    extern template TensorT<T> normalize_volume(const TensorT<T>&);                           \
    extern template RoiBox locate_stomach(const TensorT<T>&, const ParamStoreT<T>&,           \
                                          const ModelDims&);                                  \
    extern template void paste_roi(TensorT<T>&, const TensorT<T>&, const std::array<int, 3>&);

CIMT_UNET_DECLARE_FOR(float)
CIMT_UNET_DECLARE_FOR(double)
#undef CIMT_UNET_DECLARE_FOR

}  // namespace cimt
