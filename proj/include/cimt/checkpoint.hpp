#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "cimt/params.hpp"
#include "cimt/unet.hpp"

namespace cimt {

inline constexpr int kCheckpointVersion = 1;

// Everything about a checkpoint except the tensors themselves. `extra` holds
// scalar bookkeeping (epoch, t_step, skips, best_val_auc, thresholds).
struct CheckpointMeta {
    int version = kCheckpointVersion;
    std::string preset;
    std::string config_hash;
    std::string stage;  // "A" (backbone only), "B" (with heads), "done"
    ModelDims dims;
    std::map<std::string, double> extra;
};

nlohmann::json dims_to_json(const ModelDims& dims);
ModelDims dims_from_json(const nlohmann::json& j);

// Writes manifest.json plus one raw .bin per tensor (f32 little-endian,
// C-order) with a CRC-32 each. Optimizer moments are stored as extra tensors
// named "opt.m.<param>" / "opt.v.<param>". Replaces the directory wholesale.
void save_checkpoint(const std::string& dir, const CheckpointMeta& meta, const ParamStore& ps,
                     const std::map<std::string, std::vector<float>>& opt_m = {},
                     const std::map<std::string, std::vector<float>>& opt_v = {});

struct LoadedCheckpoint {
    CheckpointMeta meta;
    ParamStore params;  // requires_grad left off
    std::map<std::string, std::vector<float>> opt_m, opt_v;
};

// Rejects unknown versions and any byte-count or CRC-32 mismatch.
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace cimt
