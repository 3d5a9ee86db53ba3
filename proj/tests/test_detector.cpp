#include <map>
#include <cmath>

#include "ctxdet/detector.hpp"
#include "doctest.h"

using namespace ctxdet;

namespace {

DetectorConfig small_config() {
    DetectorConfig cfg;
    cfg.channels = 8;
    cfg.roi_size = 3;
    cfg.cls_hidden = 16;
    cfg.num_classes = 3;
    cfg.rram.c_prime = 4;
    cfg.gram.c_double_prime = 4;
    cfg.seed = 3;
    return cfg;
}

Scene tiny_scene(std::uint64_t seed = 1) {
    GenConfig g;
    g.min_blobs = 3;
    g.max_blobs = 5;
    return generate_scene(g, seed, 0);
}

}  // namespace

TEST_SUITE_BEGIN("detector");

TEST_CASE("backbone produces the documented pyramid shapes") {
    DetectorConfig cfg = small_config();
    Rng rng(1);
    const auto params = make_detector_params(cfg, rng);
    Tensor image = Tensor::zeros({64, 64, 3});
    const auto feats = backbone_forward(image, params);
    REQUIRE(feats.levels.size() == 4);
    CHECK(feats.levels[0].shape() == Shape{16, 16, 8});
    CHECK(feats.levels[1].shape() == Shape{8, 8, 8});
    CHECK(feats.levels[2].shape() == Shape{4, 4, 8});
    CHECK(feats.levels[3].shape() == Shape{2, 2, 8});
    CHECK_THROWS_AS(backbone_forward(Tensor::zeros({60, 64, 3}), params), std::invalid_argument);
}

TEST_CASE("backbone on a zero image with zero biases is zero") {
    DetectorConfig cfg = small_config();
    Rng rng(2);
    const auto params = make_detector_params(cfg, rng);
    const auto feats = backbone_forward(Tensor::zeros({64, 64, 3}), params);
    for (const auto& level : feats.levels) {
        for (const double v : level.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("backbone is deterministic for a fixed seed") {
    DetectorConfig cfg = small_config();
    Rng rng_a(7), rng_b(7);
    const auto pa = make_detector_params(cfg, rng_a);
    const auto pb = make_detector_params(cfg, rng_b);
    const Scene scene = tiny_scene();
    const auto fa = backbone_forward(scene.image(), pa);
    const auto fb = backbone_forward(scene.image(), pb);
    for (std::size_t l = 0; l < fa.levels.size(); ++l) {
        for (std::int64_t i = 0; i < fa.levels[l].numel(); ++i) {
            CHECK(fa.levels[l].values()[i] == fb.levels[l].values()[i]);
        }
    }
}

TEST_CASE("gt_jitter proposals with zero noise equal the ground truth") {
    DetectorConfig cfg = small_config();
    cfg.jitter_frac = 0.0;
    cfg.bg_proposals = 0;
    Rng rng(4);
    const auto params = make_detector_params(cfg, rng);
    const Scene scene = tiny_scene();
    const auto feats = backbone_forward(scene.image(), params);
    std::vector<Box> gt;
    for (const auto& b : scene.blobs) gt.push_back(clip_box(b.box(), scene.width, scene.height));
    Rng prop_rng(5);
    const auto proposals = propose(feats, params, cfg, gt, prop_rng);
    REQUIRE(proposals.size() == gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        CHECK(proposals[i].box.x1 == gt[i].x1);
        CHECK(proposals[i].box.y2 == gt[i].y2);
    }
}

TEST_CASE("gt_jitter with no ground truth yields only background proposals") {
    DetectorConfig cfg = small_config();
    cfg.bg_proposals = 5;
    Rng rng(6);
    const auto params = make_detector_params(cfg, rng);
    const auto feats = backbone_forward(Tensor::zeros({64, 64, 3}), params);
    Rng prop_rng(7);
    const auto proposals = propose(feats, params, cfg, {}, prop_rng);
    CHECK(proposals.size() == 5);
    for (const auto& p : proposals) CHECK(p.objectness == 0.0);
}

TEST_CASE("learned rpn returns at most top-k proposals sorted by objectness") {
    DetectorConfig cfg = small_config();
    cfg.proposal_mode = ProposalMode::learned_rpn_lite;
    cfg.rpn_topk = 20;
    Rng rng(8);
    const auto params = make_detector_params(cfg, rng);
    const Scene scene = tiny_scene(3);
    const auto feats = backbone_forward(scene.image(), params);
    Rng prop_rng(9);
    const auto proposals = propose(feats, params, cfg, {}, prop_rng);
    CHECK(proposals.size() <= 20);
    REQUIRE(!proposals.empty());
    for (std::size_t i = 1; i < proposals.size(); ++i) {
        CHECK(proposals[i - 1].objectness >= proposals[i].objectness);
    }
    for (const auto& p : proposals) {
        CHECK(p.box.valid());
        CHECK(p.box.x2 <= scene.width);
        CHECK(p.box.y2 <= scene.height);
    }
}

TEST_CASE("roi_pool of a constant feature map is constant") {
    DetectorConfig cfg = small_config();
    PyramidFeatures feats;
    feats.levels = {Tensor::full({16, 16, 8}, 0.7), Tensor::full({8, 8, 8}, 0.7),
                    Tensor::full({4, 4, 8}, 0.7), Tensor::full({2, 2, 8}, 0.7)};
    const auto batch = roi_pool(feats, {Proposal{{10, 10, 26, 26}, 1.0}}, cfg);
    CHECK(batch.features.shape() == Shape{1, 3, 3, 8});
    for (const double v : batch.features.values()) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("roi_pool on a one-cell map replicates that cell") {
    // A feature map with a single cell: every bilinear sample clamps onto it.
    Tensor feat = Tensor::from_data({1, 1, 2}, {1.5, -2.0});
    Tensor pooled = roi_bilinear(feat, 0.0, 0.0, 4.0, 4.0, 3, 4.0);
    CHECK(pooled.shape() == Shape{3, 3, 2});
    for (std::int64_t p = 0; p < 9; ++p) {
        CHECK(pooled.values()[p * 2 + 0] == 1.5);
        CHECK(pooled.values()[p * 2 + 1] == -2.0);
    }
}

TEST_CASE("roi_pool matches the closed-form bilinear oracle on a linear ramp") {
    // Feature value f(yc, xc) = 2*xc + 3*yc + 0.25 at cell centers; bilinear
    // interpolation reproduces the ramp exactly away from the borders.
    const std::int64_t h = 16, w = 16, c = 1;
    std::vector<double> data(h * w);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            data[y * w + x] = 2.0 * static_cast<double>(x) + 3.0 * static_cast<double>(y) + 0.25;
        }
    }
    PyramidFeatures feats;
    feats.levels = {Tensor::from_data({h, w, c}, data), Tensor::zeros({8, 8, 1}),
                    Tensor::zeros({4, 4, 1}), Tensor::zeros({2, 2, 1})};
    DetectorConfig cfg = small_config();
    cfg.roi_size = 5;
    cfg.channels = 1;
    const Box box{12.0, 17.0, 33.0, 40.0};  // sqrt area ~22 -> level 1, stride 4
    const auto batch = roi_pool(feats, {Proposal{box, 1.0}}, cfg);
    REQUIRE(batch.levels[0] == 1);
    for (std::int64_t i = 0; i < 5; ++i) {
        const double py = box.y1 + (i + 0.5) * box.height() / 5.0;
        const double v = py / 4.0 - 0.5;
        for (std::int64_t j = 0; j < 5; ++j) {
            const double px = box.x1 + (j + 0.5) * box.width() / 5.0;
            const double u = px / 4.0 - 0.5;
            const double expect = 2.0 * u + 3.0 * v + 0.25;
            CHECK(std::abs(batch.features.at({0, i, j, 0}) - expect) < 1e-9);
        }
    }
    CHECK_THROWS_AS(roi_pool(feats, {Proposal{{5, 5, 5, 9}, 1.0}}, cfg), std::invalid_argument);
}

TEST_CASE("double head handles empty batches and zero weights") {
    DetectorConfig cfg = small_config();
    Rng rng(10);
    auto params = make_detector_params(cfg, rng);
    const auto empty = double_head_forward(Tensor::zeros({0, 3, 3, 8}), params, cfg);
    CHECK(empty.class_logits.shape() == Shape{0, 4});
    CHECK(empty.box_deltas.shape() == Shape{0, 12});

    for (auto t : {params.cls_fc1.w, params.cls_fc1.b, params.cls_fc2.w, params.cls_fc2.b}) {
        std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
    }
    Rng xr(11);
    const auto out = double_head_forward(rand_uniform({2, 3, 3, 8}, xr, -1.0, 1.0), params, cfg);
    for (const double v : out.class_logits.values()) CHECK(v == 0.0);
}

TEST_CASE("double head gradcheck") {
    DetectorConfig cfg = small_config();
    Rng rng(12);
    auto params = make_detector_params(cfg, rng);
    Rng xr(13);
    Tensor rois = rand_uniform({2, 3, 3, 8}, xr, -1.0, 1.0, true);
    std::vector<Tensor> check_params = {rois,
                                        params.cls_fc1.w, params.cls_fc1.b,
                                        params.cls_fc2.w, params.cls_fc2.b,
                                        params.reg_conv1.w, params.reg_conv1.b,
                                        params.reg_conv2.w, params.reg_conv2.b,
                                        params.reg_out.w, params.reg_out.b};
    auto f = [&] {
        const auto out = double_head_forward(rois, params, cfg);
        return sum(mul(out.class_logits, out.class_logits)) + sum(mul(out.box_deltas, out.box_deltas));
    };
    auto res = grad_check(f, check_params, xr, 6);
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("loss examples") {
    SUBCASE("one-hot logits give near-zero classification loss") {
        Tensor logits = Tensor::from_data({1, 3}, {30.0, 0.0, 0.0});
        CHECK(head_classification_loss(logits, {0}).item() < 1e-9);
    }
    SUBCASE("uniform two-class logits give ln 2") {
        Tensor logits = Tensor::from_data({1, 2}, {0.0, 0.0});
        CHECK(head_classification_loss(logits, {1}).item() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("deltas equal to targets give exactly zero regression loss") {
        Tensor deltas = Tensor::from_data({1, 8}, {0, 0, 0, 0, 0.2, -0.1, 0.05, 0.3});
        const std::vector<std::array<double, 4>> targets = {{0.2, -0.1, 0.05, 0.3}};
        CHECK(head_regression_loss(deltas, {2}, targets, 2).item() == 0.0);
    }
    SUBCASE("no positives give zero, not NaN") {
        Tensor deltas = Tensor::from_data({2, 8}, std::vector<double>(16, 0.5));
        const std::vector<std::array<double, 4>> targets(2, {0, 0, 0, 0});
        const double v = head_regression_loss(deltas, {0, 0}, targets, 2).item();
        CHECK(v == 0.0);
    }
}

TEST_CASE("image head basics") {
    DetectorConfig cfg = small_config();
    Rng rng(14);
    auto params = make_detector_params(cfg, rng);
    PyramidFeatures feats;
    feats.levels = {Tensor::full({16, 16, 8}, 0.5), Tensor::zeros({8, 8, 8}),
                    Tensor::zeros({4, 4, 8}), Tensor::zeros({2, 2, 8})};
    SUBCASE("zero weights give logit 0 (probability one half)") {
        for (auto t : {params.imgcls_conv.w, params.imgcls_conv.b, params.imgcls_fc.w,
                       params.imgcls_fc.b}) {
            std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
        }
        CHECK(image_cls_logit(feats, params).item() == 0.0);
    }
    SUBCASE("center-tap conv and unit FC make the logit linear in a constant input") {
        std::fill(params.imgcls_conv.w.mutable_values().begin(),
                  params.imgcls_conv.w.mutable_values().end(), 0.0);
        // kernel [3,3,8,8]: center tap (1,1), channel-diagonal
        for (std::int64_t ch = 0; ch < 8; ++ch) {
            params.imgcls_conv.w.mutable_values()[((1 * 3 + 1) * 8 + ch) * 8 + ch] = 1.0;
        }
        std::fill(params.imgcls_conv.b.mutable_values().begin(),
                  params.imgcls_conv.b.mutable_values().end(), 0.0);
        std::fill(params.imgcls_fc.w.mutable_values().begin(),
                  params.imgcls_fc.w.mutable_values().end(), 1.0);
        std::fill(params.imgcls_fc.b.mutable_values().begin(),
                  params.imgcls_fc.b.mutable_values().end(), 0.0);
        const double logit_half = image_cls_logit(feats, params).item();
        feats.levels[0] = Tensor::full({16, 16, 8}, 1.0);
        const double logit_one = image_cls_logit(feats, params).item();
        CHECK(logit_half == doctest::Approx(0.5 * 8.0));
        CHECK(logit_one == doctest::Approx(2.0 * logit_half));
    }
}

TEST_CASE("loss decomposition follows the configured weights exactly") {
    DetectorConfig cfg = small_config();
    Rng rng(15);
    const auto params = make_detector_params(cfg, rng);
    const Scene scene = tiny_scene(9);
    const auto lb = detection_forward(scene, params, cfg, 123);
    const double expect = cfg.rpn_weight * (lb.rpn_cls + lb.rpn_reg) +
                          cfg.head_weight * (lb.head_cls + lb.head_reg) +
                          cfg.imgcls_weight * lb.imgcls;
    CHECK(lb.total.item() == expect);
    CHECK(lb.rpn_cls == 0.0);  // gt_jitter mode trains no RPN
    CHECK(lb.rpn_reg == 0.0);
}

TEST_CASE("detection_forward is deterministic in the step seed") {
    DetectorConfig cfg = small_config();
    Rng rng(16);
    const auto params = make_detector_params(cfg, rng);
    const Scene scene = tiny_scene(10);
    const auto a = detection_forward(scene, params, cfg, 999);
    const auto b = detection_forward(scene, params, cfg, 999);
    CHECK(a.total.item() == b.total.item());
    CHECK(a.head_cls == b.head_cls);
}

TEST_CASE("strategy none keeps attention out of the parameter set") {
    DetectorConfig cfg = small_config();
    Rng rng_a(17);
    const auto baseline = make_detector_params(cfg, rng_a);
    DetectorConfig with_attention = cfg;
    with_attention.strategy = CombinationMode::cascade_rram_gram;
    Rng rng_b(17);
    const auto attn = make_detector_params(with_attention, rng_b);
    CHECK(baseline.param_count() < attn.param_count());
    CHECK(attn.param_count() - baseline.param_count() ==
          attn.rram.param_count() + attn.gram.param_count());
    CHECK(!baseline.has_rram);
    CHECK(!baseline.has_gram);
}

TEST_CASE("end-to-end gradients flow through a cascade strategy") {
    DetectorConfig cfg = small_config();
    cfg.strategy = CombinationMode::cascade_rram_gram;
    cfg.with_imgcls = true;
    Rng rng(18);
    const auto params = make_detector_params(cfg, rng);
    const Scene scene = tiny_scene(11);
    auto named = params.named();
    std::vector<Tensor> tensors;
    for (auto& [name, t] : named) tensors.push_back(t);
    Rng check_rng(19);
    auto f = [&] { return detection_forward(scene, params, cfg, 77).total; };
    const auto res = grad_check(f, tensors, check_rng, 2);
    CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
}

TEST_CASE("training with lr zero leaves parameters unchanged") {
    GenConfig g;
    g.min_blobs = 2;
    g.max_blobs = 3;
    g.seed = 21;
    const auto data = generate_dataset(g, 2, 0, 0);
    DetectorConfig cfg = small_config();
    cfg.lr = 0.0;
    cfg.epochs = 2;
    Rng rng(22);
    Rng init_copy = Rng(cfg.seed).derive(11);
    const auto before = make_detector_params(cfg, init_copy);
    const auto result = train(data, cfg);
    const auto a = before.named();
    const auto b = result.params.named();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::int64_t k = 0; k < a[i].second.numel(); ++k) {
            CHECK(a[i].second.values()[k] == b[i].second.values()[k]);
        }
    }
}

TEST_CASE("same seed trains to identical parameters") {
    GenConfig g;
    g.min_blobs = 2;
    g.max_blobs = 3;
    g.seed = 23;
    const auto data = generate_dataset(g, 3, 0, 0);
    DetectorConfig cfg = small_config();
    cfg.epochs = 2;
    cfg.lr = 0.01;
    const auto r1 = train(data, cfg);
    const auto r2 = train(data, cfg);
    const auto a = r1.params.named();
    const auto b = r2.params.named();
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::int64_t k = 0; k < a[i].second.numel(); ++k) {
            CHECK(a[i].second.values()[k] == b[i].second.values()[k]);
        }
    }
    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].total == r2.log[i].total);
    }
}

TEST_CASE("head classification loss decreases on a fixed separable image") {
    GenConfig g;
    g.min_blobs = 3;
    g.max_blobs = 3;
    g.seed = 25;
    auto data = generate_dataset(g, 1, 0, 0);
    DetectorConfig cfg = small_config();
    cfg.jitter_frac = 0.0;  // fixed proposals make every step see the same input
    cfg.bg_proposals = 0;
    cfg.with_imgcls = false;
    cfg.epochs = 10;
    cfg.lr = 0.002;
    const auto result = train(data, cfg);
    REQUIRE(result.log.size() == 10);
    for (std::size_t i = 1; i < result.log.size(); ++i) {
        CHECK(result.log[i].head_cls < result.log[i - 1].head_cls + 1e-9);
    }
}

TEST_CASE("infer contract") {
    DetectorConfig cfg = small_config();
    cfg.num_classes = 3;
    Rng rng(26);
    auto params = make_detector_params(cfg, rng);

    SUBCASE("no proposals give no detections") {
        Scene s;
        s.id = 0;
        s.width = 64;
        s.height = 64;
        s.pixels.assign(64 * 64 * 3, 0.0);
        DetectorConfig c = cfg;
        c.bg_proposals = 0;
        CHECK(infer(s, params, c).empty());
    }
    SUBCASE("duplicate proposals collapse to one detection per class") {
        // zero regression weights keep boxes identical so NMS removes copies
        std::fill(params.reg_out.w.mutable_values().begin(),
                  params.reg_out.w.mutable_values().end(), 0.0);
        std::fill(params.reg_out.b.mutable_values().begin(),
                  params.reg_out.b.mutable_values().end(), 0.0);
        Scene s;
        s.id = 1;
        s.width = 64;
        s.height = 64;
        s.pixels.assign(64 * 64 * 3, 0.3);
        CellBlob b;
        b.cx = 30;
        b.cy = 30;
        b.cyto_radius = 6;
        b.nucleus_radius = 3;
        b.intensity = 0.5;
        s.blobs = {b, b};  // two identical ground truths -> two identical proposals
        DetectorConfig c = cfg;
        c.jitter_frac = 0.0;
        c.bg_proposals = 0;
        const auto dets = infer(s, params, c);
        std::map<int, int> per_class;
        for (const auto& d : dets) ++per_class[d.class_id];
        for (const auto& [cls, count] : per_class) CHECK(count == 1);
        CHECK(dets.size() <= 3);
    }
}

TEST_SUITE_END();
