#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cimt/errors.hpp"
#include "cimt/rng.hpp"

namespace cimt {

// One evaluated test case.
struct CaseScore {
    std::string id;
    double score = 0.0;  // P(tumor-bearing) in [0, 1]
    int label = 0;       // {0, 1}
    int64_t tumor_voxels = 0;     // predicted tumor voxel count
    int64_t gt_tumor_voxels = 0;  // ground-truth tumor voxel count
    double dice = 0.0;            // predicted vs ground-truth tumor mask
    bool localization_hit = false;
};

struct CiTriple {
    double low = 0.0;
    double point = 0.0;
    double high = 0.0;
};

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

struct DelongResult {
    double auc_a = 0.0;
    double auc_b = 0.0;
    double z = 0.0;
    double p = 1.0;
    bool degenerate = false;  // zero-variance convention applied
};

struct StratumRate {
    double lo_volume = 0.0;  // inclusive lower bound on GT tumor voxels
    double hi_volume = 0.0;  // inclusive upper bound
    int n = 0;
    int detected = 0;
    double rate = 0.0;
};

struct EvalReport {
    int n_pos = 0;
    int n_neg = 0;
    double threshold = 0.0;
    CiTriple auc;
    CiTriple sens;
    CiTriple spec;
    double localization_rate = 0.0;  // over positive cases
    std::vector<StratumRate> strata;
    std::vector<RocPoint> roc;
    std::vector<CaseScore> cases;
    std::map<std::string, double> p_values;  // filled by model-vs-model comparison
};

// Mann-Whitney AUC with midrank tie handling. Throws DataError on one class.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Positive iff score > threshold. A class with no members yields NaN, not 0.
std::pair<double, double> sens_spec(const std::vector<double>& scores,
                                    const std::vector<int>& labels, double threshold);

// Threshold maximizing sens + spec, candidates at midpoints between adjacent
// distinct scores plus the maximum score; ties pick the lower threshold.
double youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels);

// Percentile bootstrap over case resampling. `metric` sees resampled index
// lists and may return NaN for an undefined replica; those are redrawn (with a
// cap). `labels` enables stratified resampling when requested.
CiTriple bootstrap_ci(const std::function<double(const std::vector<size_t>&)>& metric,
                      const std::vector<int>& labels, int B, double alpha, uint64_t seed,
                      bool stratified = false);

DelongResult delong_test(const std::vector<double>& scores_a,
                         const std::vector<double>& scores_b, const std::vector<int>& labels);

enum class RateKind { kSensitivity, kSpecificity };

// Paired two-sided permutation test over case-wise prediction swaps,
// (count + 1) / (R + 1) smoothing.
double permutation_test(const std::vector<int>& preds_a, const std::vector<int>& preds_b,
                        const std::vector<int>& labels, RateKind kind, int R, uint64_t seed);

struct LocResult {
    double dice = 0.0;
    bool hit = false;
};

// Dice between binary masks; hit iff dice > 0.01. Two empty masks score dice 1
// and count as a hit only for a normal (label 0) case.
LocResult localization_hit(const std::vector<uint8_t>& pred_mask,
                           const std::vector<uint8_t>& gt_mask, int label);

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels);

// Aggregates per-case results into the full report. When `threshold` is NaN
// the operating point is the Youden threshold of these cases.
EvalReport build_report(const std::vector<CaseScore>& cases, int bootstrap_b, uint64_t seed,
                        double threshold);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
std::string roc_to_csv(const std::vector<RocPoint>& roc);

}  // namespace cimt
