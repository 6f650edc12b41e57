#pragma once

#include <array>
#include <string>
#include <vector>

#include "cimt/params.hpp"
#include "cimt/rng.hpp"
#include "cimt/tensor.hpp"
#include "cimt/unet.hpp"

namespace cimt {

// Cluster centers after the decoder plus the per-stage cross-attention
// logits retained for deep supervision.
template <typename T>
struct ClusterStateT {
    TensorT<T> centers;                          // [N, C]
    std::vector<TensorT<T>> per_stage_logits;    // R_l, each [N, voxels at stage l]
    std::vector<std::array<int, 3>> stage_dims;  // spatial extents per stage
};
using ClusterState = ClusterStateT<float>;

// Final cluster-to-voxel assignment: logits R and probs M = softmax over N.
template <typename T>
struct ClusterAssignmentT {
    TensorT<T> logits;  // R [N, V]
    TensorT<T> probs;   // M [N, V]
};
using ClusterAssignment = ClusterAssignmentT<float>;

template <typename T>
struct JointPredictionT {
    TensorT<T> seg_logits;     // Z [K, V] over the finest level's voxels
    TensorT<T> cls_logits;     // [2]: normal, tumor-bearing
    TensorT<T> cluster_path;   // mean of centers over N, [C]
    TensorT<T> pixel_path;     // max of R over voxels, [N]
};
using JointPrediction = JointPredictionT<float>;

template <typename T>
struct MaskFormerOutT {
    ClusterStateT<T> state;
    ClusterAssignmentT<T> assignment;
    JointPredictionT<T> pred;
    std::array<int, 3> finest_dims{0, 0, 0};
};
using MaskFormerOut = MaskFormerOutT<float>;

// Creates decoder + head parameters under "decoder.*" and "head.*".
// level_channels lists the pyramid channel widths coarse to fine; empty means
// the backbone defaults {8w, 4w, 2w, w}. One decoder stage per level.
template <typename T>
void maskformer_init(ParamStoreT<T>& ps, const ModelDims& dims, Rng& rng,
                     const std::vector<int>& level_channels = {});

// Cross-attention center update: centers + A V^p, where A one-hot-selects the
// argmax cluster per voxel (lowest index on ties) and is constant during
// backward. The scaled logits Q^c K^pT / sqrt(C) are written to *stage_logits
// before the argmax so later losses can reach the Q/K projections.
template <typename T>
TensorT<T> cluster_update(const TensorT<T>& centers, const TensorT<T>& feat_flat,
                          const ParamStoreT<T>& ps, const std::string& prefix,
                          const ModelDims& dims, TensorT<T>* stage_logits);

// cluster_update followed by multi-head self-attention and a feed-forward
// block, each with residual + layer_norm.
template <typename T>
TensorT<T> decoder_stage(const TensorT<T>& centers, const TensorT<T>& feat_flat,
                         const ParamStoreT<T>& ps, const std::string& prefix,
                         const ModelDims& dims, TensorT<T>* stage_logits);

// Runs one decoder stage per pyramid level, coarse to fine.
template <typename T>
ClusterStateT<T> run_decoder(const FeaturePyramidT<T>& pyr, const ParamStoreT<T>& ps,
                             const ModelDims& dims);

// R = centers . F, M = softmax over the cluster axis.
template <typename T>
ClusterAssignmentT<T> assign(const TensorT<T>& centers, const TensorT<T>& F);

// K x N class matrix: the center MLP output, one column per cluster.
template <typename T>
TensorT<T> ck_matrix(const TensorT<T>& centers, const ParamStoreT<T>& ps);

// Z = C_K M.
template <typename T>
TensorT<T> segment(const ClusterAssignmentT<T>& assignment, const TensorT<T>& centers,
                   const ParamStoreT<T>& ps);

template <typename T>
struct ClsOutT {
    TensorT<T> logits;        // [2]
    TensorT<T> cluster_path;  // [C]
    TensorT<T> pixel_path;    // [N]
};

// Two-path classification head over the final centers and assignment logits.
template <typename T>
ClsOutT<T> classify(const ClusterStateT<T>& state, const ClusterAssignmentT<T>& assignment,
                    const ParamStoreT<T>& ps, const ModelDims& dims);

// Full decoder + heads on a feature pyramid.
template <typename T>
MaskFormerOutT<T> maskformer_forward(const FeaturePyramidT<T>& pyr, const ParamStoreT<T>& ps,
                                     const ModelDims& dims);

struct LossWeights {
    double seg = 1.0;    // final-map Dice + CE
    double cls = 1.0;    // patient-level CE
    double deep = 0.25;  // each per-stage supervision term
};

template <typename T>
struct LossPartsT {
    TensorT<T> total;     // scalar on the tape
    double seg_dice = 0;  // detached component values for logging
    double seg_ce = 0;
    double cls_ce = 0;
    double deep = 0;
};
using LossParts = LossPartsT<float>;

// One-hot [K, V] voxel targets; rejects labels outside [0, K).
template <typename T>
TensorT<T> onehot_labels(const std::vector<uint8_t>& y, int num_classes);

// Nearest-voxel downsampling of a label map (same index map as
// interpolate_nearest).
std::vector<uint8_t> downsample_labels(const std::vector<uint8_t>& y,
                                       const std::array<int, 3>& extents,
                                       const std::array<int, 3>& target);

// Dice(K-1 foreground classes) + CE with +-10 logit clamp before the CE.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> seg_loss(const TensorT<T>& z, const TensorT<T>& target_onehot);

// Total = seg(final) + weighted per-stage supervision + classification CE.
template <typename T>
LossPartsT<T> joint_loss(const MaskFormerOutT<T>& out, const ParamStoreT<T>& ps,
                         const ModelDims& dims, const std::vector<uint8_t>& y,
                         int patient_label, const LossWeights& w = {});

#define CIMT_MASKFORMER_DECLARE_FOR(T)                                                       \
    extern template void maskformer_init(ParamStoreT<T>&, const ModelDims&, Rng&,            \
                                         const std::vector<int>&);                           \
    extern template TensorT<T> cluster_update(const TensorT<T>&, const TensorT<T>&,          \
                                              const ParamStoreT<T>&, const std::string&,     \
                                              const ModelDims&, TensorT<T>*);                \
    extern template TensorT<T> decoder_stage(const TensorT<T>&, const TensorT<T>&,           \
                                             const ParamStoreT<T>&, const std::string&,      \
                                             const ModelDims&, TensorT<T>*);                 \
    extern template ClusterStateT<T> run_decoder(const FeaturePyramidT<T>&,                  \
                                                 const ParamStoreT<T>&, const ModelDims&);   \
    extern template ClusterAssignmentT<T> assign(const TensorT<T>&, const TensorT<T>&);      \
    extern template TensorT<T> ck_matrix(const TensorT<T>&, const ParamStoreT<T>&);          \
    extern template TensorT<T> segment(const ClusterAssignmentT<T>&, const TensorT<T>&,      \
                                       const ParamStoreT<T>&);                               \
    extern template ClsOutT<T> classify(const ClusterStateT<T>&, const ClusterAssignmentT<T>&, \
                                        const ParamStoreT<T>&, const ModelDims&);            \
    extern template MaskFormerOutT<T> maskformer_forward(const FeaturePyramidT<T>&,          \
                                                         const ParamStoreT<T>&,              \
                                                         const ModelDims&);                  \
    extern template TensorT<T> onehot_labels(const std::vector<uint8_t>&, int);              \
    extern template std::pair<TensorT<T>, TensorT<T>> seg_loss(const TensorT<T>&,            \
                                                               const TensorT<T>&);           \
    extern template LossPartsT<T> joint_loss(const MaskFormerOutT<T>&, const ParamStoreT<T>&, \
                                             const ModelDims&, const std::vector<uint8_t>&,  \
                                             int, const LossWeights&);

CIMT_MASKFORMER_DECLARE_FOR(float)
CIMT_MASKFORMER_DECLARE_FOR(double)
#undef CIMT_MASKFORMER_DECLARE_FOR

}  // namespace cimt
