#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cimt/errors.hpp"
#include "cimt/rng.hpp"
#include "cimt/tensor.hpp"

namespace cimt {

// Difficulty knobs for the synthetic stomach volumes.
struct DifficultyConfig {
    double contrast_delta = 1.5;     // tumor-vs-wall mean shift, in units of noise_std
    double deform_amp = 0.08;        // radial wall deformation amplitude
    double noise_std = 0.05;         // additive Gaussian noise
    double lumen_content_prob = 0.5; // chance of bright debris blobs inside the lumen
    double tumor_prob = 0.5;         // chance a sample carries a tumor

    void validate() const;
};

// One case: image, voxel labels, and the patient-level label.
// Label values: 0 background, 1 stomach (wall and lumen), 2 tumor.
struct VolumeSample {
    std::string id;
    uint64_t seed = 0;
    Tensor x;                    // [1, D, H, W]
    std::vector<uint8_t> y;      // D*H*W, C-order
    int label = 0;               // 1 iff any voxel is labeled 2
    double tumor_frac = 0.0;     // requested tumor size, fraction of wall voxels
    int tumor_voxels = 0;
    std::array<int, 3> offset{0, 0, 0};  // position within the source volume, set by cropping
};

VolumeSample generate_sample(uint64_t seed, const DifficultyConfig& cfg,
                             const std::array<int, 3>& extents);

struct DatasetEntry {
    std::string id;
    uint64_t seed = 0;
    std::string split;           // train | val | test
    int label = 0;
    double tumor_frac = 0.0;     // filled when the sample is generated
    std::string x_file;
    std::string y_file;
};

struct DatasetIndex {
    int version = 1;
    uint64_t base_seed = 0;
    std::array<int, 3> extents{32, 32, 32};
    DifficultyConfig cfg;
    std::vector<DatasetEntry> entries;

    std::vector<const DatasetEntry*> split(const std::string& name) const;
};

// Plans the dataset: disjoint per-sample seeds, exact per-split class counts
// (round(n * prevalence)), labels shuffled within each split.
DatasetIndex make_splits(int n_train, int n_val, int n_test, double prevalence,
                         uint64_t base_seed, const DifficultyConfig& cfg,
                         const std::array<int, 3>& extents);

// Generates the sample an index entry describes (label is forced, not drawn).
VolumeSample generate_from_entry(const DatasetIndex& index, const DatasetEntry& entry);

// On-disk layout: manifest.json + X_<id>.bin (f32 LE) + Y_<id>.bin (u8).
void save_dataset(DatasetIndex& index, const std::string& dir);
DatasetIndex load_dataset_index(const std::string& dir);
VolumeSample load_case(const std::string& dir, const DatasetIndex& index,
                       const DatasetEntry& entry);

}  // namespace cimt
