#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/fl.hpp"
#include "fedsim/model.hpp"
#include "fedsim/ssl.hpp"
#include "fedsim/synth.hpp"

namespace fedsim {

struct CenterConfig {
    int center_id = 0;
    std::size_t n_per_class = 0;
    double noise_sigma = 0.08;
    StainTransform stain;
};

struct PathsConfig {
    std::string data = "data";
    std::string checkpoints = "checkpoints";
    std::string reports = "reports";
};

// The fully pinned experiment: every derived seed is a pure function of
// master_seed and a stage/center tag. Unknown keys in the text form are
// errors, not warnings.
struct ExperimentConfig {
    int schema_version = 1;
    std::uint64_t master_seed = 1;
    ModelSpec model;
    std::vector<ClassPrototype> class_prototypes;  // shared across centers
    std::vector<CenterConfig> centers;
    std::size_t pseudo_n = 1000;
    SSLConfig ssl;
    FLConfig fl;
    std::size_t k_folds = 5;
    PathsConfig paths;

    static ExperimentConfig defaults();
    void validate() const;  // ConfigError naming the offending field
    CenterSpec center_spec(std::size_t index) const;
};

ExperimentConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& cfg, const std::string& path);

} // namespace fedsim
