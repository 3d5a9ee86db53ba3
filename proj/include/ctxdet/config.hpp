#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxdet/detector.hpp"
#include "ctxdet/synth.hpp"

namespace ctxdet {

/// One experiment, fully determined: dataset constants and sizes, detector
/// and attention settings, seeds.
struct ExperimentConfig {
    GenConfig dataset;
    int train_scenes = 500;
    int val_scenes = 100;
    int test_scenes = 0;
    DetectorConfig detector;
    std::vector<std::uint64_t> seeds = {1};
    bool eval_exclude_normal = true;

    std::vector<int> excluded_categories() const {
        return eval_exclude_normal ? std::vector<int>{static_cast<int>(CellClass::normal)}
                                   : std::vector<int>{};
    }
};

/// Flat INI-style document: [section] headers with key = value lines,
/// comments starting with '#' or ';'. Unknown sections or keys are errors.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

/// Canonical JSON rendering of every resolved setting; reproduces the run.
std::string config_resolved_json(const ExperimentConfig& cfg);

}  // namespace ctxdet
