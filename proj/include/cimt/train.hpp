#pragma once

#include <string>
#include <vector>

#include "cimt/checkpoint.hpp"
#include "cimt/maskformer.hpp"
#include "cimt/metrics.hpp"
#include "cimt/optim.hpp"
#include "cimt/phantom.hpp"
#include "cimt/unet.hpp"

namespace cimt {

// Presets: "cimt" (two-stage: backbone pretrain, then cluster decoder with a
// frozen-backbone warmup and a reduced backbone learning rate), "unet-s4c"
// (backbone only; classify by thresholding segmented tumor volume),
// "unet-joint" (backbone plus a pooled classification head, end to end).
struct TrainConfig {
    std::string preset = "cimt";
    int epochs = 40;          // main-stage epochs
    int stage_a_epochs = 10;  // backbone pretrain epochs (cimt only)
    int freeze_epochs = 5;    // frozen-backbone epochs at main-stage start (cimt only)
    double lr = 1e-4;
    double backbone_lr_multiplier = 0.1;
    int batch_size = 2;
    uint64_t seed = 7;
    bool augment_flips = true;
    bool augment_intensity = true;
    double cls_weight = 1.0;
    double deep_weight = 0.25;

    void validate() const;
};

// Total epochs a run performs (stage A + main stage for cimt).
int total_epochs(const TrainConfig& cfg);

// Random axis flips (image and labels together) and a ±10% intensity scale.
// Pure given the rng state; pass-through when both switches are off.
VolumeSample augment_sample(const VolumeSample& s, Rng& rng, bool flips, bool intensity);

// Validation-set threshold on segmented tumor volumes maximizing
// sensitivity + specificity; ties resolve to the lower threshold.
double s4c_select_threshold(const std::vector<double>& volumes, const std::vector<int>& labels);

struct S4cDecision {
    int label = 0;
    int tumor_voxels = 0;
};

// Counts tumor-class voxels in an argmax label map; positive iff the count
// strictly exceeds the threshold.
S4cDecision s4c_classify(const std::vector<uint8_t>& pred_labels, double threshold);

// Scores one case: ROI (ground-truth box or the model's own localization),
// crop, normalize, forward, and a per-preset score in [0, 1]. The unet-s4c
// score is tumor voxels over full-volume voxels, monotone in the count.
CaseScore infer_case(const VolumeSample& s, const ParamStore& ps, const ModelDims& dims,
                     const std::string& preset, bool oracle_roi);

std::vector<CaseScore> evaluate_cases(const std::string& data_dir, const DatasetIndex& index,
                                      const std::string& split, const ParamStore& ps,
                                      const ModelDims& dims, const std::string& preset,
                                      bool oracle_roi);

struct TrainResult {
    double best_val_auc = 0.0;
    double final_val_auc = 0.0;
    int epochs_run = 0;  // log lines appended by this call
    std::string log_path;
    std::string last_dir;
    std::string best_dir;
};

// Full training run into out_dir: JSONL log (one line per epoch), a "last"
// checkpoint every epoch, and a "best" checkpoint by validation AUC, each
// carrying the validation-selected operating threshold. `resume` continues
// from out_dir/last and appends to the log; finished runs return immediately.
TrainResult train_model(const std::string& data_dir, const ModelDims& dims,
                        const TrainConfig& cfg, const std::string& out_dir,
                        const std::string& config_hash, bool resume = false);

}  // namespace cimt
