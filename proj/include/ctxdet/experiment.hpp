#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctxdet/config.hpp"
#include "ctxdet/detector.hpp"
#include "ctxdet/eval.hpp"
#include "ctxdet/synth.hpp"

namespace ctxdet {

std::vector<GtInstance> gt_instances(const std::vector<const Scene*>& scenes);

std::vector<DetInstance> run_inference(const std::vector<const Scene*>& scenes,
                                       const DetectorParams& params, const DetectorConfig& cfg);

struct EvalOutputs {
    EvalReport eval;
    TideReport tide;
    std::vector<DetInstance> detections;
    std::optional<double> image_accuracy;  // set when the image head exists
};

EvalOutputs evaluate_split(const SynthDataset& data, const std::string& split,
                           const DetectorParams& params, const ExperimentConfig& cfg);

std::string detections_json(const std::vector<DetInstance>& dets);
std::vector<DetInstance> parse_detections_json(const std::string& text);

// ---- command-level operations (shared by the CLI and the acceptance suite) --

/// Generates and exports the configured dataset. Refuses to overwrite an
/// existing dataset directory unless force is set.
void cmd_gen(const ExperimentConfig& cfg, const std::string& out_dir, bool force);

/// Trains on the dataset in data_dir and writes checkpoint.bin,
/// train_log.jsonl and config_resolved.json into out_dir.
DetectorParams cmd_train(const ExperimentConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir, bool force);

/// Loads a checkpoint, runs inference plus both evaluators on the split, and
/// writes report.json, detections.json and per_class.csv into out_dir.
EvalOutputs cmd_eval(const ExperimentConfig& cfg, const std::string& data_dir,
                     const std::string& checkpoint_path, const std::string& split,
                     const std::string& out_dir);

/// Evaluates an existing detections file against a split instead of running
/// a model.
EvalOutputs cmd_eval_detections(const ExperimentConfig& cfg, const std::string& data_dir,
                                const std::string& detections_path, const std::string& split,
                                const std::string& out_dir);

// ---- ablations ---------------------------------------------------------------

enum class AblationAxis { downsample_op, c_prime, c_double_prime, fpn_level, strategy };

AblationAxis ablation_axis_from_string(const std::string& name);
std::string to_string(AblationAxis axis);
std::vector<std::string> default_axis_values(AblationAxis axis);

/// Applies one axis value onto a copy of the config (forcing the single-module
/// strategy the axis ablates, mirroring the ablation tables).
ExperimentConfig apply_axis_value(const ExperimentConfig& cfg, AblationAxis axis,
                                  const std::string& value);

struct AblationCell {
    std::string value;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double ap = 0.0, ap50 = 0.0, ap75 = 0.0;
};

/// Trains and evaluates every value x seed cell on a shared dataset. Cells
/// run on up to `threads` workers; failures are recorded and the run
/// continues.
std::vector<AblationCell> run_ablation(const ExperimentConfig& cfg, const SynthDataset& data,
                                       AblationAxis axis, const std::vector<std::string>& values,
                                       const std::vector<std::uint64_t>& seeds, int threads);

std::string ablation_csv(const std::vector<AblationCell>& cells);
std::string ablation_markdown(AblationAxis axis, const std::vector<AblationCell>& cells);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace ctxdet
