#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "cimt/phantom.hpp"
#include "cimt/train.hpp"
#include "cimt/unet.hpp"

namespace cimt {

struct DataConfig {
    int n_train = 200;
    int n_val = 50;
    int n_test = 100;
    double prevalence = 0.5;
    uint64_t base_seed = 1234;
    std::array<int, 3> extents{32, 32, 32};
    DifficultyConfig difficulty;

    void validate() const;
};

struct EvalConfig {
    int bootstrap_b = 1000;
    double alpha = 0.05;
    uint64_t seed = 2024;
    bool oracle_roi = false;

    void validate() const;
};

// Whole-run configuration: {data, model, train, eval} sections in JSON.
// Absent keys keep their defaults; unknown keys are rejected with their path.
struct RunConfig {
    DataConfig data;
    ModelDims model;
    TrainConfig train;
    EvalConfig eval;

    void validate() const;
};

RunConfig config_from_json_text(const std::string& text);
RunConfig load_config(const std::string& path);
std::string config_to_json_text(const RunConfig& cfg);

// 16-hex-digit digest of the canonical JSON form; embedded in artifacts so
// outputs are traceable to the exact configuration that produced them.
std::string config_hash(const RunConfig& cfg);

}  // namespace cimt
