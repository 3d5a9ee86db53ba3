#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctxdet/boxes.hpp"

namespace ctxdet {

struct GtInstance {
    int image_id = 0;
    Box box;
    int category_id = 0;
};

struct DetInstance {
    int image_id = 0;
    Box box;
    int category_id = 0;
    double score = 0.0;
};

/// Evaluation conventions (documented here because two independent
/// implementations must agree exactly):
///  - detections are capped to the top max_detections per image, ordered by
///    descending score; equal scores keep input order (stable sort everywhere)
///  - matching is greedy per image and category in that order: each detection
///    takes the unmatched GT with the highest IoU >= threshold, ties broken by
///    the lowest GT index
///  - AP uses 101-point interpolated precision; AP is averaged over the
///    categories that have ground truth (excluded categories are dropped from
///    both sets), then over IoU thresholds
///  - size-stratified AP restricts both GT and detections to the area bucket
///  - AR is recall averaged over thresholds and categories
struct EvalConfig {
    std::vector<double> iou_thresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                          0.75, 0.80, 0.85, 0.90, 0.95};
    std::vector<int> exclude_categories;  // e.g. the synthetic "normal" class
    int max_detections = 100;
};

struct EvalReport {
    double ap = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ap_small = 0.0;
    double ap_medium = 0.0;
    double ap_large = 0.0;
    double ar = 0.0;
    std::map<int, double> per_class_ap;  // category -> AP over all thresholds
};

/// TIDE-style error deltas. Classification of each false positive follows the
/// published rules at foreground IoU 0.5 and background IoU 0.1, applied in
/// order (first match wins):
///   Cls:  IoU >= 0.5 with a GT of another class
///   Loc:  0.1 <= IoU < 0.5 with a GT of the same class
///   Both: 0.1 <= IoU < 0.5 with a GT of another class
///   Dupe: IoU >= 0.5 with an already-matched GT of the same class
///   Bkg:  IoU < 0.1 with every GT
/// Miss covers unmatched GT that no Cls/Loc/Both error points at. The oracle
/// fixes are: Cls reclassifies to the overlapped GT's class; Loc snaps the box
/// onto the best same-class GT; Both/Dupe/Bkg remove the detection; Miss
/// removes the ground truth; FP removes every false positive; FN adds a
/// perfect detection for every unmatched GT. Each E_x is the AP50 after the
/// fix minus the baseline AP50.
struct TideReport {
    double base_ap50 = 0.0;
    double e_cls = 0.0;
    double e_loc = 0.0;
    double e_both = 0.0;
    double e_dupe = 0.0;
    double e_bkg = 0.0;
    double e_miss = 0.0;
    double e_fp = 0.0;
    double e_fn = 0.0;
};

EvalReport coco_ap(const std::vector<DetInstance>& detections,
                   const std::vector<GtInstance>& ground_truth, const EvalConfig& cfg = {});

TideReport tide_decompose(const std::vector<DetInstance>& detections,
                          const std::vector<GtInstance>& ground_truth,
                          const EvalConfig& cfg = {});

struct TideCounts {
    int cls = 0, loc = 0, both = 0, dupe = 0, bkg = 0;
    int missed_gt = 0;
    int false_positives = 0;
};

/// Error-type counts from the same analysis pass tide_decompose uses.
TideCounts tide_error_counts(const std::vector<DetInstance>& detections,
                             const std::vector<GtInstance>& ground_truth,
                             const EvalConfig& cfg = {});

std::string report_to_json(const EvalReport& eval, const TideReport& tide);
std::string per_class_csv(const EvalReport& eval);

}  // namespace ctxdet
