#include "ctxdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ctxdet {

namespace {

constexpr double kSmallMax = 32.0 * 32.0;
constexpr double kMediumMax = 96.0 * 96.0;

enum class AreaBucket { all, small, medium, large };

bool in_bucket(const Box& b, AreaBucket bucket) {
    const double a = b.area();
    switch (bucket) {
        case AreaBucket::all: return true;
        case AreaBucket::small: return a <= kSmallMax;
        case AreaBucket::medium: return a > kSmallMax && a <= kMediumMax;
        case AreaBucket::large: return a > kMediumMax;
    }
    return true;
}

bool excluded(int category, const EvalConfig& cfg) {
    return std::find(cfg.exclude_categories.begin(), cfg.exclude_categories.end(), category) !=
           cfg.exclude_categories.end();
}

// Top max_detections per image by descending score, stable in input order.
std::vector<DetInstance> cap_detections(const std::vector<DetInstance>& dets,
                                        const EvalConfig& cfg) {
    std::map<int, std::vector<std::size_t>> per_image;
    for (std::size_t i = 0; i < dets.size(); ++i) per_image[dets[i].image_id].push_back(i);
    std::vector<std::size_t> keep;
    for (auto& [img, idx] : per_image) {
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
        if (static_cast<int>(idx.size()) > cfg.max_detections) {
            idx.resize(static_cast<std::size_t>(cfg.max_detections));
        }
        keep.insert(keep.end(), idx.begin(), idx.end());
    }
    std::sort(keep.begin(), keep.end());  // restore global input order
    std::vector<DetInstance> out;
    out.reserve(keep.size());
    for (const auto i : keep) out.push_back(dets[i]);
    return out;
}

// Greedy matching of score-ordered detections of one image and category
// against its GT boxes. Returns per-detection matched GT index (-1 = FP).
std::vector<int> greedy_match(const std::vector<const DetInstance*>& dets,
                              const std::vector<const GtInstance*>& gts, double threshold) {
    std::vector<int> matched_det(dets.size(), -1);
    std::vector<bool> gt_taken(gts.size(), false);
    for (std::size_t d = 0; d < dets.size(); ++d) {
        double best = -1.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gt_taken[g]) continue;
            const double v = iou(dets[d]->box, gts[g]->box);
            if (v >= threshold && v > best) {
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            gt_taken[static_cast<std::size_t>(best_gt)] = true;
            matched_det[d] = best_gt;
        }
    }
    return matched_det;
}

// 101-point interpolated AP from a globally score-ordered TP/FP sequence.
double ap_101(const std::vector<bool>& tp_flags, std::int64_t npos, double* recall_out) {
    if (npos <= 0) {
        if (recall_out) *recall_out = 0.0;
        return 0.0;
    }
    std::vector<double> precision;
    std::vector<double> recall;
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < tp_flags.size(); ++i) {
        if (tp_flags[i]) ++tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
    }
    if (recall_out) *recall_out = recall.empty() ? 0.0 : recall.back();
    // max precision to the right
    for (std::size_t i = precision.size(); i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double total = 0.0;
    for (int r = 0; r <= 100; ++r) {
        const double target = static_cast<double>(r) / 100.0;
        // first point with recall >= target
        double p = 0.0;
        for (std::size_t i = 0; i < recall.size(); ++i) {
            if (recall[i] >= target - 1e-12) {
                p = precision[i];
                break;
            }
        }
        total += p;
    }
    return total / 101.0;
}

struct CategoryEval {
    double ap_mean = 0.0;      // over thresholds
    double ap50 = 0.0;
    double ap75 = 0.0;
    double recall_mean = 0.0;  // over thresholds
};

// Per-category evaluation over all thresholds within one area bucket.
std::map<int, CategoryEval> evaluate_categories(const std::vector<DetInstance>& dets_in,
                                                const std::vector<GtInstance>& gts_in,
                                                const EvalConfig& cfg, AreaBucket bucket) {
    std::vector<DetInstance> dets = cap_detections(dets_in, cfg);

    std::set<int> categories;
    for (const auto& g : gts_in) {
        if (!excluded(g.category_id, cfg) && in_bucket(g.box, bucket)) {
            categories.insert(g.category_id);
        }
    }
    std::map<int, CategoryEval> out;
    for (const int cat : categories) {
        // Global score order of this category's detections (stable by input).
        std::vector<const DetInstance*> cat_dets;
        for (const auto& d : dets) {
            if (d.category_id == cat && in_bucket(d.box, bucket)) cat_dets.push_back(&d);
        }
        std::stable_sort(cat_dets.begin(), cat_dets.end(),
                         [](const DetInstance* a, const DetInstance* b) { return a->score > b->score; });
        std::map<int, std::vector<const GtInstance*>> gt_by_image;
        std::int64_t npos = 0;
        for (const auto& g : gts_in) {
            if (g.category_id == cat && in_bucket(g.box, bucket)) {
                gt_by_image[g.image_id].push_back(&g);
                ++npos;
            }
        }
        CategoryEval ce;
        for (std::size_t ti = 0; ti < cfg.iou_thresholds.size(); ++ti) {
            const double t = cfg.iou_thresholds[ti];
            // Match per image; detections stay in global score order.
            std::map<int, std::vector<const DetInstance*>> det_by_image;
            for (const auto* d : cat_dets) det_by_image[d->image_id].push_back(d);
            std::map<const DetInstance*, bool> tp;
            for (auto& [img, img_dets] : det_by_image) {
                static const std::vector<const GtInstance*> kNone;
                const auto it = gt_by_image.find(img);
                const auto& img_gts = it == gt_by_image.end() ? kNone : it->second;
                const auto matches = greedy_match(img_dets, img_gts, t);
                for (std::size_t d = 0; d < img_dets.size(); ++d) {
                    tp[img_dets[d]] = matches[d] >= 0;
                }
            }
            std::vector<bool> flags;
            flags.reserve(cat_dets.size());
            for (const auto* d : cat_dets) flags.push_back(tp[d]);
            double recall = 0.0;
            const double ap = ap_101(flags, npos, &recall);
            ce.ap_mean += ap;
            ce.recall_mean += recall;
            if (t == 0.50) ce.ap50 = ap;
            if (t == 0.75) ce.ap75 = ap;
        }
        const double nt = static_cast<double>(cfg.iou_thresholds.size());
        ce.ap_mean /= nt;
        ce.recall_mean /= nt;
        out[cat] = ce;
    }
    return out;
}

double mean_ap(const std::map<int, CategoryEval>& cats,
               double CategoryEval::*field) {
    if (cats.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [cat, ce] : cats) s += ce.*field;
    return s / static_cast<double>(cats.size());
}

}  // namespace

EvalReport coco_ap(const std::vector<DetInstance>& detections,
                   const std::vector<GtInstance>& ground_truth, const EvalConfig& cfg) {
    EvalReport report;
    const auto all = evaluate_categories(detections, ground_truth, cfg, AreaBucket::all);
    report.ap = mean_ap(all, &CategoryEval::ap_mean);
    report.ap50 = mean_ap(all, &CategoryEval::ap50);
    report.ap75 = mean_ap(all, &CategoryEval::ap75);
    report.ar = mean_ap(all, &CategoryEval::recall_mean);
    for (const auto& [cat, ce] : all) report.per_class_ap[cat] = ce.ap_mean;
    report.ap_small = mean_ap(evaluate_categories(detections, ground_truth, cfg, AreaBucket::small),
                              &CategoryEval::ap_mean);
    report.ap_medium = mean_ap(
        evaluate_categories(detections, ground_truth, cfg, AreaBucket::medium),
        &CategoryEval::ap_mean);
    report.ap_large = mean_ap(evaluate_categories(detections, ground_truth, cfg, AreaBucket::large),
                              &CategoryEval::ap_mean);
    return report;
}

namespace {

constexpr double kFg = 0.5;
constexpr double kBg = 0.1;

enum class ErrorKind { none, cls, loc, both, dupe, bkg };

struct TideAnalysis {
    std::vector<ErrorKind> det_error;       // per capped detection
    std::vector<int> det_target_gt;         // GT index the error points at (-1 none)
    std::vector<bool> det_matched;
    std::vector<bool> gt_matched;
    std::vector<bool> gt_missed;            // unmatched and not targeted by cls/loc/both
    std::vector<DetInstance> dets;          // capped detections (input order)
};

double ap50_of(const std::vector<DetInstance>& dets, const std::vector<GtInstance>& gts,
               const EvalConfig& cfg) {
    EvalConfig c = cfg;
    c.iou_thresholds = {0.50};
    const auto cats = evaluate_categories(dets, gts, c, AreaBucket::all);
    return mean_ap(cats, &CategoryEval::ap50);
}

TideAnalysis analyze(const std::vector<DetInstance>& detections,
                     const std::vector<GtInstance>& gts, const EvalConfig& cfg) {
    TideAnalysis a;
    a.dets = cap_detections(detections, cfg);
    // Drop detections of excluded categories from the analysis entirely.
    std::vector<DetInstance> kept;
    for (const auto& d : a.dets) {
        if (!excluded(d.category_id, cfg)) kept.push_back(d);
    }
    a.dets = std::move(kept);
    std::vector<const GtInstance*> gt_ptrs;
    for (const auto& g : gts) {
        if (!excluded(g.category_id, cfg)) gt_ptrs.push_back(&g);
    }

    const std::size_t nd = a.dets.size();
    const std::size_t ng = gt_ptrs.size();
    a.det_error.assign(nd, ErrorKind::none);
    a.det_target_gt.assign(nd, -1);
    a.det_matched.assign(nd, false);
    a.gt_matched.assign(ng, false);
    a.gt_missed.assign(ng, false);

    // Same-class greedy matching at the foreground threshold, per image, in
    // global score order (stable by input order).
    std::vector<std::size_t> order(nd);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return a.dets[x].score > a.dets[y].score;
    });
    for (const auto di : order) {
        const auto& d = a.dets[di];
        double best = -1.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < ng; ++g) {
            if (a.gt_matched[g]) continue;
            if (gt_ptrs[g]->image_id != d.image_id || gt_ptrs[g]->category_id != d.category_id) {
                continue;
            }
            const double v = iou(d.box, gt_ptrs[g]->box);
            if (v >= kFg && v > best) {
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            a.gt_matched[static_cast<std::size_t>(best_gt)] = true;
            a.det_matched[di] = true;
        }
    }

    std::vector<bool> gt_targeted(ng, false);
    for (std::size_t di = 0; di < nd; ++di) {
        if (a.det_matched[di]) continue;
        const auto& d = a.dets[di];
        double iou_same = 0.0, iou_other = 0.0;
        int best_same = -1, best_other = -1;
        int best_same_matched = -1;
        double iou_same_matched = 0.0;
        for (std::size_t g = 0; g < ng; ++g) {
            if (gt_ptrs[g]->image_id != d.image_id) continue;
            const double v = iou(d.box, gt_ptrs[g]->box);
            if (gt_ptrs[g]->category_id == d.category_id) {
                if (v > iou_same) {
                    iou_same = v;
                    best_same = static_cast<int>(g);
                }
                if (a.gt_matched[g] && v > iou_same_matched) {
                    iou_same_matched = v;
                    best_same_matched = static_cast<int>(g);
                }
            } else if (v > iou_other) {
                iou_other = v;
                best_other = static_cast<int>(g);
            }
        }
        if (iou_other >= kFg) {
            a.det_error[di] = ErrorKind::cls;
            a.det_target_gt[di] = best_other;
        } else if (iou_same >= kBg && iou_same < kFg) {
            a.det_error[di] = ErrorKind::loc;
            a.det_target_gt[di] = best_same;
        } else if (iou_other >= kBg && iou_other < kFg) {
            a.det_error[di] = ErrorKind::both;
            a.det_target_gt[di] = best_other;
        } else if (iou_same_matched >= kFg) {
            a.det_error[di] = ErrorKind::dupe;
            a.det_target_gt[di] = best_same_matched;
        } else {
            a.det_error[di] = ErrorKind::bkg;
        }
        if (a.det_target_gt[di] >= 0 && a.det_error[di] != ErrorKind::dupe) {
            gt_targeted[static_cast<std::size_t>(a.det_target_gt[di])] = true;
        }
    }
    for (std::size_t g = 0; g < ng; ++g) {
        a.gt_missed[g] = !a.gt_matched[g] && !gt_targeted[g];
    }
    return a;
}

}  // namespace

TideReport tide_decompose(const std::vector<DetInstance>& detections,
                          const std::vector<GtInstance>& ground_truth, const EvalConfig& cfg) {
    std::vector<GtInstance> gts;
    for (const auto& g : ground_truth) {
        if (!excluded(g.category_id, cfg)) gts.push_back(g);
    }
    const TideAnalysis a = analyze(detections, ground_truth, cfg);

    TideReport report;
    report.base_ap50 = ap50_of(a.dets, gts, cfg);

    const auto fixed_ap = [&](ErrorKind kind) {
        std::vector<DetInstance> fixed;
        fixed.reserve(a.dets.size());
        for (std::size_t i = 0; i < a.dets.size(); ++i) {
            DetInstance d = a.dets[i];
            if (a.det_error[i] == kind) {
                switch (kind) {
                    case ErrorKind::cls:
                        d.category_id = gts[static_cast<std::size_t>(a.det_target_gt[i])].category_id;
                        break;
                    case ErrorKind::loc:
                        d.box = gts[static_cast<std::size_t>(a.det_target_gt[i])].box;
                        break;
                    case ErrorKind::both:
                    case ErrorKind::dupe:
                    case ErrorKind::bkg:
                        continue;  // removed
                    default: break;
                }
            }
            fixed.push_back(d);
        }
        return ap50_of(fixed, gts, cfg);
    };

    report.e_cls = fixed_ap(ErrorKind::cls) - report.base_ap50;
    report.e_loc = fixed_ap(ErrorKind::loc) - report.base_ap50;
    report.e_both = fixed_ap(ErrorKind::both) - report.base_ap50;
    report.e_dupe = fixed_ap(ErrorKind::dupe) - report.base_ap50;
    report.e_bkg = fixed_ap(ErrorKind::bkg) - report.base_ap50;

    {
        std::vector<GtInstance> kept_gts;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (!a.gt_missed[g]) kept_gts.push_back(gts[g]);
        }
        report.e_miss = ap50_of(a.dets, kept_gts, cfg) - report.base_ap50;
    }
    {
        std::vector<DetInstance> only_tp;
        for (std::size_t i = 0; i < a.dets.size(); ++i) {
            if (a.det_matched[i]) only_tp.push_back(a.dets[i]);
        }
        report.e_fp = ap50_of(only_tp, gts, cfg) - report.base_ap50;
    }
    {
        std::vector<DetInstance> with_perfect = a.dets;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (!a.gt_matched[g]) {
                with_perfect.push_back(
                    DetInstance{gts[g].image_id, gts[g].box, gts[g].category_id, 1.0});
            }
        }
        report.e_fn = ap50_of(with_perfect, gts, cfg) - report.base_ap50;
    }
    return report;
}

TideCounts tide_error_counts(const std::vector<DetInstance>& detections,
                             const std::vector<GtInstance>& ground_truth, const EvalConfig& cfg) {
    const TideAnalysis a = analyze(detections, ground_truth, cfg);
    TideCounts c;
    for (std::size_t i = 0; i < a.dets.size(); ++i) {
        if (a.det_matched[i]) continue;
        ++c.false_positives;
        switch (a.det_error[i]) {
            case ErrorKind::cls: ++c.cls; break;
            case ErrorKind::loc: ++c.loc; break;
            case ErrorKind::both: ++c.both; break;
            case ErrorKind::dupe: ++c.dupe; break;
            case ErrorKind::bkg: ++c.bkg; break;
            case ErrorKind::none: break;
        }
    }
    for (std::size_t g = 0; g < a.gt_missed.size(); ++g) {
        if (a.gt_missed[g]) ++c.missed_gt;
    }
    return c;
}

std::string report_to_json(const EvalReport& eval, const TideReport& tide) {
    nlohmann::ordered_json j;
    j["ap"] = eval.ap;
    j["ap50"] = eval.ap50;
    j["ap75"] = eval.ap75;
    j["ap_small"] = eval.ap_small;
    j["ap_medium"] = eval.ap_medium;
    j["ap_large"] = eval.ap_large;
    j["ar"] = eval.ar;
    nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
    for (const auto& [cat, ap] : eval.per_class_ap) per_class[std::to_string(cat)] = ap;
    j["per_class_ap"] = per_class;
    nlohmann::ordered_json t;
    t["base_ap50"] = tide.base_ap50;
    t["e_cls"] = tide.e_cls;
    t["e_loc"] = tide.e_loc;
    t["e_both"] = tide.e_both;
    t["e_dupe"] = tide.e_dupe;
    t["e_bkg"] = tide.e_bkg;
    t["e_miss"] = tide.e_miss;
    t["e_fp"] = tide.e_fp;
    t["e_fn"] = tide.e_fn;
    j["tide"] = t;
    return j.dump(2) + "\n";
}

std::string per_class_csv(const EvalReport& eval) {
    std::ostringstream os;
    os << "category_id,ap\n";
    for (const auto& [cat, ap] : eval.per_class_ap) os << cat << "," << ap << "\n";
    return os.str();
}

}  // namespace ctxdet
