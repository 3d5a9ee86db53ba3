#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctxdet/attention.hpp"
#include "ctxdet/boxes.hpp"
#include "ctxdet/synth.hpp"
#include "ctxdet/tensor.hpp"

namespace ctxdet {

enum class ProposalMode { learned_rpn_lite, gt_jitter };

std::string to_string(ProposalMode mode);
ProposalMode proposal_mode_from_string(const std::string& name);

/// Four-level feature pyramid; level r (1-based) has spatial extent
/// H/2^(r+1) x W/2^(r+1) and a shared channel count.
struct PyramidFeatures {
    std::vector<Tensor> levels;  // [h, w, C] each, bottom (largest) first

    static std::int64_t stride_of(int level) { return std::int64_t{1} << (level + 1); }
};

struct Proposal {
    Box box;
    double objectness = 0.0;
};

struct Detection {
    Box box;
    int class_id = 0;  // category id, 1-based foreground classes
    double score = 0.0;
};

struct DetectorConfig {
    std::int64_t roi_size = 7;     // s
    std::int64_t channels = 32;    // C, shared across pyramid levels
    std::int64_t cls_hidden = 256;
    std::int64_t num_classes = 3;  // foreground classes; head emits num_classes + 1 logits

    ProposalMode proposal_mode = ProposalMode::gt_jitter;
    double jitter_frac = 0.2;      // gt_jitter: per-coordinate noise, fraction of box size
    int bg_proposals = 4;          // gt_jitter: sampled background boxes per image
    int rpn_topk = 100;
    double rpn_nms_iou = 0.7;
    double rpn_pos_iou = 0.5;

    // Proposal-to-GT matching and per-image sampling: IoU >= pos_iou is a
    // positive, everything else background; up to sample_count proposals at
    // pos_fraction positives.
    double pos_iou = 0.5;
    int sample_count = 32;
    double pos_fraction = 0.25;

    double rpn_weight = 1.0;
    double head_weight = 2.0;
    double imgcls_weight = 0.15;
    bool with_imgcls = true;

    double score_threshold = 0.05;
    double nms_iou = 0.5;
    int max_detections = 100;

    int epochs = 12;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double grad_clip_norm = 10.0;  // global-norm clip; 0 disables
    std::uint64_t seed = 0;

    CombinationMode strategy = CombinationMode::none;
    RramConfig rram;
    GramConfig gram;
    bool attention_bias = false;
    bool zero_init_output_proj = false;
    bool parallel_double_residual = false;
};

struct ConvParam {
    Tensor w;  // [kh, kw, c_in, c_out]
    Tensor b;  // [c_out]
};

struct LinearParam {
    Tensor w;  // [c_in, c_out]
    Tensor b;  // [c_out]
};

struct NormParam {
    Tensor gamma;  // [c]
    Tensor beta;   // [c]
};

/// Every learnable tensor of the detector. Which members are defined depends
/// on the config: attention bundles exist only for the strategies that use
/// them, RPN parameters only in learned_rpn_lite mode, the image head only
/// when enabled.
struct DetectorParams {
    ConvParam stem;
    NormParam stem_norm;
    std::array<ConvParam, 4> blocks;
    std::array<NormParam, 4> block_norms;
    ConvParam rpn_conv;
    LinearParam rpn_obj;
    LinearParam rpn_box;
    AttentionParams rram;
    AttentionParams gram;
    LinearParam cls_fc1, cls_fc2;
    ConvParam reg_conv1, reg_conv2;
    LinearParam reg_out;
    ConvParam imgcls_conv;
    LinearParam imgcls_fc;

    bool has_rram = false, has_gram = false, has_rpn = false, has_imgcls = false;

    /// Ordered (name, tensor) view over the defined parameters.
    std::vector<std::pair<std::string, Tensor>> named() const;
    std::int64_t param_count() const;
};

DetectorParams make_detector_params(const DetectorConfig& cfg, Rng& rng);

/// Tiny four-stage stride-2 conv backbone behind the pyramid contract.
/// Requires H and W to be multiples of 32.
PyramidFeatures backbone_forward(const Tensor& image, const DetectorParams& params);

std::vector<Proposal> propose(const PyramidFeatures& features, const DetectorParams& params,
                              const DetectorConfig& cfg, const std::vector<Box>& gt_boxes,
                              Rng& rng);

struct RoiBatch {
    Tensor features;  // [N, s, s, C]
    std::vector<Box> boxes;
    std::vector<int> levels;  // pyramid level of origin, 1-based
};

/// Area-heuristic level assignment plus bilinear crop-resize to s x s.
RoiBatch roi_pool(const PyramidFeatures& features, const std::vector<Proposal>& proposals,
                  const DetectorConfig& cfg);

struct HeadOutputs {
    Tensor class_logits;  // [N, num_classes + 1]
    Tensor box_deltas;    // [N, 4 * num_classes]
};

HeadOutputs double_head_forward(const Tensor& roi_features, const DetectorParams& params,
                                const DetectorConfig& cfg);

/// conv -> GAP -> FC on the bottom pyramid level; one abnormality logit.
Tensor image_cls_logit(const PyramidFeatures& features, const DetectorParams& params);

/// Mean cross entropy of head logits against per-proposal labels (0 = bg).
Tensor head_classification_loss(const Tensor& logits, const std::vector<std::int64_t>& labels);

/// Smooth-L1 over the positive proposals' class-specific delta quadruples,
/// summed and normalized by the number of sampled proposals. No positives
/// gives an exact zero.
Tensor head_regression_loss(const Tensor& box_deltas, const std::vector<std::int64_t>& labels,
                            const std::vector<std::array<double, 4>>& targets,
                            std::int64_t num_classes);

struct LossBreakdown {
    Tensor total;
    double rpn_cls = 0.0, rpn_reg = 0.0, head_cls = 0.0, head_reg = 0.0, imgcls = 0.0;
};

/// Full training-step forward pass: backbone, proposals, sampling, attention,
/// heads, weighted loss. Deterministic given step_seed.
LossBreakdown detection_forward(const Scene& scene, const DetectorParams& params,
                                const DetectorConfig& cfg, std::uint64_t step_seed);

struct TrainLogEntry {
    int step = 0;
    int epoch = 0;
    double lr = 0.0;
    double total = 0.0, rpn_cls = 0.0, rpn_reg = 0.0, head_cls = 0.0, head_reg = 0.0,
           imgcls = 0.0;
};

struct TrainResult {
    DetectorParams params;
    std::vector<TrainLogEntry> log;             // one entry per step
    std::vector<std::pair<int, double>> epoch_mean_loss;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// SGD with momentum and weight decay; step-decay schedule (x0.1 at
/// floor(2E/3) and floor(11E/12) epochs). Deterministic per cfg.seed.
TrainResult train(const SynthDataset& data, const DetectorConfig& cfg);

std::vector<Detection> infer(const Scene& scene, const DetectorParams& params,
                             const DetectorConfig& cfg);

double image_cls_probability(const Scene& scene, const DetectorParams& params,
                             const DetectorConfig& cfg);

}  // namespace ctxdet
