#include <cmath>

#include "ctxdet/eval.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctxdet;

TEST_SUITE_BEGIN("eval");

TEST_CASE("perfect detections give AP 1 everywhere") {
    std::vector<GtInstance> gts = {{0, {10, 10, 30, 30}, 1}, {0, {40, 40, 80, 90}, 2},
                                   {1, {5, 5, 25, 25}, 1}};
    std::vector<DetInstance> dets;
    for (const auto& g : gts) dets.push_back({g.image_id, g.box, g.category_id, 1.0});
    const auto rep = coco_ap(dets, gts);
    CHECK(rep.ap == 1.0);
    CHECK(rep.ap50 == 1.0);
    CHECK(rep.ap75 == 1.0);
    CHECK(rep.ar == 1.0);
}

TEST_CASE("no detections give AP 0") {
    std::vector<GtInstance> gts = {{0, {10, 10, 30, 30}, 1}};
    const auto rep = coco_ap({}, gts);
    CHECK(rep.ap == 0.0);
    CHECK(rep.ap50 == 0.0);
}

TEST_CASE("ap is at most ap50") {
    std::vector<DetInstance> dets;
    std::vector<GtInstance> gts;
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        oracles::random_scene(seed, 3, dets, gts);
        const auto rep = coco_ap(dets, gts);
        CHECK(rep.ap <= rep.ap50 + 1e-12);
    }
}

TEST_CASE("hand case with duplicate and false positive matches oracle") {
    std::vector<GtInstance> gts = {{0, {0, 0, 10, 10}, 1}, {0, {20, 20, 32, 34}, 1}};
    std::vector<DetInstance> dets = {
        {0, {0, 0, 10, 10}, 1, 0.9},    // TP
        {0, {1, 0, 11, 10}, 1, 0.8},    // duplicate of the first GT
        {0, {50, 50, 60, 60}, 1, 0.7},  // pure background FP
    };
    const EvalConfig cfg;
    const auto rep = coco_ap(dets, gts, cfg);
    const double expect = oracles::brute_map(dets, gts, cfg.iou_thresholds);
    CHECK(rep.ap == expect);
}

TEST_CASE("coco_ap equals brute-force PR oracle exactly on random scenes") {
    const EvalConfig cfg;
    std::vector<DetInstance> dets;
    std::vector<GtInstance> gts;
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        oracles::random_scene(seed, 2 + static_cast<int>(seed % 3), dets, gts);
        CAPTURE(seed);
        const auto rep = coco_ap(dets, gts, cfg);
        CHECK(rep.ap == oracles::brute_map(dets, gts, cfg.iou_thresholds));
        CHECK(rep.ap50 == oracles::brute_map(dets, gts, {0.5}));
        CHECK(rep.ap75 == oracles::brute_map(dets, gts, {0.75}));
    }
}

TEST_CASE("category exclusion is honored by both implementations") {
    std::vector<DetInstance> dets;
    std::vector<GtInstance> gts;
    oracles::random_scene(42, 3, dets, gts);
    const EvalConfig cfg{.exclude_categories = {1}};
    const auto rep = coco_ap(dets, gts, cfg);
    CHECK(rep.ap == oracles::brute_map(dets, gts, cfg.iou_thresholds, {1}));
    CHECK(rep.per_class_ap.count(1) == 0);
}

TEST_CASE("adding a perfect top detection never decreases AP") {
    std::vector<DetInstance> dets;
    std::vector<GtInstance> gts;
    for (std::uint64_t seed = 200; seed < 212; ++seed) {
        oracles::random_scene(seed, 2, dets, gts);
        const auto before = coco_ap(dets, gts);
        // add an exact match for the first GT at top score
        std::vector<DetInstance> more = dets;
        more.push_back({gts[0].image_id, gts[0].box, gts[0].category_id, 1.0});
        const auto after = coco_ap(more, gts);
        CHECK(after.ap >= before.ap - 1e-12);
    }
}

TEST_CASE("tide: perfect detections give zero deltas") {
    std::vector<GtInstance> gts = {{0, {10, 10, 30, 30}, 1}, {1, {5, 5, 25, 25}, 2}};
    std::vector<DetInstance> dets;
    for (const auto& g : gts) dets.push_back({g.image_id, g.box, g.category_id, 1.0});
    const auto rep = tide_decompose(dets, gts);
    CHECK(rep.base_ap50 == 1.0);
    CHECK(rep.e_cls == 0.0);
    CHECK(rep.e_loc == 0.0);
    CHECK(rep.e_both == 0.0);
    CHECK(rep.e_dupe == 0.0);
    CHECK(rep.e_bkg == 0.0);
    CHECK(rep.e_miss == 0.0);
    CHECK(rep.e_fp == 0.0);
    CHECK(rep.e_fn == 0.0);
}

TEST_CASE("tide: right class at IoU 0.3 is a localization error only") {
    std::vector<GtInstance> gts = {{0, {0, 0, 10, 10}, 1}};
    // IoU = 3/17 with x-shift 7: inter 3*10=30, union 200-30=170... use shift 5: inter 50, union 150 -> 1/3
    std::vector<DetInstance> dets = {{0, {5, 0, 15, 10}, 1, 0.9}};
    const auto counts = tide_error_counts(dets, gts);
    CHECK(counts.loc == 1);
    CHECK(counts.cls == 0);
    CHECK(counts.both == 0);
    CHECK(counts.dupe == 0);
    CHECK(counts.bkg == 0);
    CHECK(counts.false_positives == 1);
    CHECK(counts.missed_gt == 0);  // the GT is targeted by the loc error
    const auto rep = tide_decompose(dets, gts);
    CHECK(rep.e_loc == 1.0);  // snapping the box makes the single detection perfect
    CHECK(rep.e_cls == 0.0);
    CHECK(rep.e_both == 0.0);
    CHECK(rep.e_dupe == 0.0);
    CHECK(rep.e_bkg == 0.0);
    CHECK(rep.e_miss == 0.0);
}

TEST_CASE("tide: constructed five-detection scene matches independent oracle") {
    std::vector<GtInstance> gts = {
        {0, {0, 0, 10, 10}, 1}, {0, {20, 0, 30, 10}, 2}, {0, {40, 0, 52, 12}, 1}};
    std::vector<DetInstance> dets = {
        {0, {0, 0, 10, 10}, 1, 0.95},   // TP
        {0, {0, 0, 10, 10}, 1, 0.90},   // duplicate
        {0, {20, 0, 30, 10}, 1, 0.85},  // classification error (GT 2 has class 2)
        {0, {43, 0, 60, 12}, 1, 0.80},  // localization error on GT 3
        {0, {80, 80, 90, 90}, 2, 0.75}, // background error
    };
    const auto rep = tide_decompose(dets, gts);
    const auto expect = oracles::tide_oracle(dets, gts);
    CHECK(rep.base_ap50 == doctest::Approx(expect.base_ap50).epsilon(1e-12));
    CHECK(rep.e_cls == doctest::Approx(expect.e_cls).epsilon(1e-12));
    CHECK(rep.e_loc == doctest::Approx(expect.e_loc).epsilon(1e-12));
    CHECK(rep.e_both == doctest::Approx(expect.e_both).epsilon(1e-12));
    CHECK(rep.e_dupe == doctest::Approx(expect.e_dupe).epsilon(1e-12));
    CHECK(rep.e_bkg == doctest::Approx(expect.e_bkg).epsilon(1e-12));
    CHECK(rep.e_miss == doctest::Approx(expect.e_miss).epsilon(1e-12));
    CHECK(rep.e_fp == doctest::Approx(expect.e_fp).epsilon(1e-12));
    CHECK(rep.e_fn == doctest::Approx(expect.e_fn).epsilon(1e-12));
    const auto counts = tide_error_counts(dets, gts);
    CHECK(counts.dupe == 1);
    CHECK(counts.cls == 1);
    CHECK(counts.loc == 1);
    CHECK(counts.bkg == 1);
}

TEST_CASE("tide matches oracle and deltas stay nonnegative on random scenes") {
    std::vector<DetInstance> dets;
    std::vector<GtInstance> gts;
    for (std::uint64_t seed = 300; seed < 312; ++seed) {
        oracles::random_scene(seed, 2, dets, gts);
        CAPTURE(seed);
        const auto rep = tide_decompose(dets, gts);
        const auto expect = oracles::tide_oracle(dets, gts);
        for (const auto& [got, want] :
             std::vector<std::pair<double, double>>{{rep.base_ap50, expect.base_ap50},
                                                    {rep.e_cls, expect.e_cls},
                                                    {rep.e_loc, expect.e_loc},
                                                    {rep.e_both, expect.e_both},
                                                    {rep.e_dupe, expect.e_dupe},
                                                    {rep.e_bkg, expect.e_bkg},
                                                    {rep.e_miss, expect.e_miss},
                                                    {rep.e_fp, expect.e_fp},
                                                    {rep.e_fn, expect.e_fn}}) {
            CHECK(got == doctest::Approx(want).epsilon(1e-12));
            CHECK(got >= -1e-12);
        }
        const auto counts = tide_error_counts(dets, gts);
        CHECK(counts.cls + counts.loc + counts.both + counts.dupe + counts.bkg ==
              counts.false_positives);
    }
}

TEST_CASE("tide: empty detections") {
    std::vector<GtInstance> gts = {{0, {0, 0, 10, 10}, 1}, {0, {20, 0, 30, 10}, 2}};
    const auto rep = tide_decompose({}, gts);
    CHECK(rep.base_ap50 == 0.0);
    CHECK(rep.e_cls == 0.0);
    CHECK(rep.e_loc == 0.0);
    CHECK(rep.e_both == 0.0);
    CHECK(rep.e_dupe == 0.0);
    CHECK(rep.e_bkg == 0.0);
    CHECK(rep.e_fp == 0.0);
    CHECK(rep.e_miss == 0.0);  // removing every missed GT leaves nothing to score
    CHECK(rep.e_fn == 1.0);    // adding perfect detections fully recovers AP50
}

TEST_CASE("report json is deterministic") {
    std::vector<DetInstance> dets;
    std::vector<GtInstance> gts;
    oracles::random_scene(7, 2, dets, gts);
    const auto rep = coco_ap(dets, gts);
    const auto tide = tide_decompose(dets, gts);
    CHECK(report_to_json(rep, tide) == report_to_json(rep, tide));
    CHECK(per_class_csv(rep).rfind("category_id,ap\n", 0) == 0);
}

TEST_SUITE_END();
