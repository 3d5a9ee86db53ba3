#include <filesystem>
#include <fstream>

#include "ctxdet/checkpoint.hpp"
#include "ctxdet/experiment.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace ctxdet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("ctxdet_pipe_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ExperimentConfig micro_config() {
    ExperimentConfig cfg;
    cfg.dataset.min_blobs = 3;
    cfg.dataset.max_blobs = 5;
    cfg.dataset.seed = 42;
    cfg.train_scenes = 6;
    cfg.val_scenes = 2;
    cfg.detector.channels = 8;
    cfg.detector.roi_size = 3;
    cfg.detector.cls_hidden = 16;
    cfg.detector.epochs = 2;
    cfg.detector.lr = 0.005;
    cfg.detector.seed = 7;
    cfg.detector.rram.c_prime = 4;
    cfg.detector.gram.c_double_prime = 4;
    return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("pipeline");

TEST_CASE("checkpoint round trips bit-exactly") {
    DetectorConfig cfg;
    cfg.channels = 8;
    cfg.roi_size = 3;
    cfg.cls_hidden = 16;
    cfg.strategy = CombinationMode::cascade_rram_gram;
    cfg.rram.c_prime = 4;
    cfg.gram.c_double_prime = 4;
    Rng rng(1);
    auto params = make_detector_params(cfg, rng);
    const auto dir = temp_dir("ckpt");
    const std::string path = (dir / "checkpoint.bin").string();
    save_checkpoint(path, params.named());

    Rng rng2(2);
    auto other = make_detector_params(cfg, rng2);
    auto named = other.named();
    load_checkpoint(path, named);
    const auto expect = params.named();
    REQUIRE(named.size() == expect.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        CHECK(named[i].first == expect[i].first);
        for (std::int64_t k = 0; k < named[i].second.numel(); ++k) {
            CHECK(named[i].second.values()[k] == expect[i].second.values()[k]);
        }
    }

    SUBCASE("mismatched parameter sets are rejected") {
        DetectorConfig other_cfg = cfg;
        other_cfg.strategy = CombinationMode::none;
        Rng rng3(3);
        auto baseline = make_detector_params(other_cfg, rng3);
        auto baseline_named = baseline.named();
        CHECK_THROWS_AS(load_checkpoint(path, baseline_named), std::runtime_error);
    }
    fs::remove_all(dir);
}

TEST_CASE("config parsing") {
    SUBCASE("empty text keeps defaults") {
        const auto cfg = parse_config_text("");
        CHECK(cfg.detector.roi_size == 7);
        CHECK(cfg.detector.channels == 32);
        CHECK(cfg.detector.rram.c_prime == 128);
        CHECK(cfg.detector.gram.c_double_prime == 128);
        CHECK(cfg.detector.gram.fpn_level == 1);
        CHECK(cfg.detector.rpn_weight == 1.0);
        CHECK(cfg.detector.head_weight == 2.0);
        CHECK(cfg.detector.imgcls_weight == 0.15);
        CHECK(cfg.detector.momentum == 0.9);
        CHECK(cfg.detector.weight_decay == 1e-4);
    }
    SUBCASE("values land in the right fields") {
        const auto cfg = parse_config_text(R"(
# experiment file
[dataset]
min_blobs = 4
max_blobs = 6
seed = 99

[experiment]
train_scenes = 50
seeds = 1, 2, 3

[detector]
strategy = cascade_rram_gram
channels = 16
epochs = 5

[rram]
c_prime = 32
downsample_op = max_pool2

[gram]
fpn_level = 2
)");
        CHECK(cfg.dataset.min_blobs == 4);
        CHECK(cfg.dataset.seed == 99);
        CHECK(cfg.train_scenes == 50);
        CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2, 3});
        CHECK(cfg.detector.strategy == CombinationMode::cascade_rram_gram);
        CHECK(cfg.detector.channels == 16);
        CHECK(cfg.detector.rram.c_prime == 32);
        CHECK(cfg.detector.rram.downsample_op == DownsampleOp::max_pool2);
        CHECK(cfg.detector.gram.fpn_level == 2);
    }
    SUBCASE("unknown keys are named in the error") {
        try {
            parse_config_text("[detector]\nlearning_rate = 0.1\n");
            FAIL("expected error");
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find("detector.learning_rate") != std::string::npos);
        }
    }
    SUBCASE("bad values are rejected") {
        CHECK_THROWS_AS(parse_config_text("[detector]\nepochs = many\n"), std::invalid_argument);
        CHECK_THROWS_AS(parse_config_text("[gram]\nfpn_level = 9\n"), std::invalid_argument);
    }
    SUBCASE("resolved json is deterministic and parseable") {
        const auto cfg = micro_config();
        const auto a = config_resolved_json(cfg);
        CHECK(a == config_resolved_json(cfg));
        const auto j = nlohmann::ordered_json::parse(a);
        CHECK(j.at("detector").at("channels") == 8);
        CHECK(j.at("rram").at("tau") == 4.0);
    }
}

TEST_CASE("detections json round trips") {
    std::vector<DetInstance> dets = {{0, {1.5, 2.25, 10.125, 20.0}, 2, 0.73},
                                     {3, {0.0, 0.0, 5.0, 5.0}, 1, 1.0}};
    const auto parsed = parse_detections_json(detections_json(dets));
    REQUIRE(parsed.size() == dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
        CHECK(parsed[i].image_id == dets[i].image_id);
        CHECK(parsed[i].category_id == dets[i].category_id);
        CHECK(parsed[i].score == dets[i].score);
        CHECK(parsed[i].box.x1 == dets[i].box.x1);
        CHECK(parsed[i].box.x2 == dets[i].box.x2);
    }
}

TEST_CASE("gen, train, eval pipeline runs and reproduces its report") {
    const auto cfg = micro_config();
    const auto root = temp_dir("e2e");
    const std::string data_dir = (root / "data").string();
    cmd_gen(cfg, data_dir, false);
    CHECK(fs::exists(fs::path(data_dir) / "meta.json"));
    CHECK_THROWS_AS(cmd_gen(cfg, data_dir, false), std::runtime_error);  // refuses overwrite
    cmd_gen(cfg, data_dir, true);

    const std::string run_a = (root / "run_a").string();
    cmd_train(cfg, data_dir, run_a, false);
    CHECK(fs::exists(fs::path(run_a) / "checkpoint.bin"));
    CHECK(fs::exists(fs::path(run_a) / "train_log.jsonl"));
    CHECK(fs::exists(fs::path(run_a) / "config_resolved.json"));
    CHECK_THROWS_AS(cmd_train(cfg, data_dir, run_a, false), std::runtime_error);

    const auto out =
        cmd_eval(cfg, data_dir, (fs::path(run_a) / "checkpoint.bin").string(), "val", run_a);
    CHECK(fs::exists(fs::path(run_a) / "report.json"));
    CHECK(out.image_accuracy.has_value());

    // Full rerun into a second directory: byte-identical artifacts.
    const std::string run_b = (root / "run_b").string();
    cmd_train(cfg, data_dir, run_b, false);
    cmd_eval(cfg, data_dir, (fs::path(run_b) / "checkpoint.bin").string(), "val", run_b);
    for (const auto& file : {"report.json", "detections.json", "per_class.csv",
                             "train_log.jsonl", "config_resolved.json"}) {
        CAPTURE(file);
        CHECK(read_text_file((fs::path(run_a) / file).string()) ==
              read_text_file((fs::path(run_b) / file).string()));
    }

    SUBCASE("missing split is an error") {
        CHECK_THROWS_AS(
            cmd_eval(cfg, data_dir, (fs::path(run_a) / "checkpoint.bin").string(), "test", run_a),
            std::runtime_error);
    }
    fs::remove_all(root);
}

TEST_CASE("evaluating perfect oracle detections gives AP 1") {
    const auto cfg = micro_config();
    const auto root = temp_dir("oracle_eval");
    const std::string data_dir = (root / "data").string();
    cmd_gen(cfg, data_dir, false);
    const auto data = import_dataset(data_dir);
    std::vector<DetInstance> perfect;
    for (const auto* s : data.split("val")) {
        for (const auto& g : gt_instances({s})) {
            perfect.push_back(DetInstance{g.image_id, g.box, g.category_id, 1.0});
        }
    }
    write_text_file((root / "dets.json").string(), detections_json(perfect));
    const auto out = cmd_eval_detections(cfg, data_dir, (root / "dets.json").string(), "val",
                                         (root / "out").string());
    CHECK(out.eval.ap == 1.0);
    CHECK(out.eval.ap50 == 1.0);
    fs::remove_all(root);
}

TEST_CASE("ablation produces one row per value and seed and reruns identically") {
    auto cfg = micro_config();
    cfg.detector.epochs = 1;
    const auto data = generate_dataset(cfg.dataset, 4, 2, 0);
    const std::vector<std::string> values = {"none", "rram_only"};
    const std::vector<std::uint64_t> seeds = {1, 2};
    const auto cells = run_ablation(cfg, data, AblationAxis::strategy, values, seeds, 2);
    REQUIRE(cells.size() == 4);
    for (const auto& c : cells) {
        CAPTURE(c.value);
        CAPTURE(c.error);
        CHECK(c.ok);
    }
    const auto cells2 = run_ablation(cfg, data, AblationAxis::strategy, values, seeds, 1);
    CHECK(ablation_csv(cells) == ablation_csv(cells2));
    const auto md = ablation_markdown(AblationAxis::strategy, cells);
    CHECK(md.find("| none |") != std::string::npos);
    CHECK(md.find("| rram_only |") != std::string::npos);

    SUBCASE("strategy axis default emits all six rows") {
        const auto defaults = default_axis_values(AblationAxis::strategy);
        REQUIRE(defaults.size() == 6);
        CHECK(defaults[0] == "none");
        CHECK(defaults[3] == "parallel_sum");
    }
    SUBCASE("axis application forces the matching single-module strategy") {
        const auto a = apply_axis_value(cfg, AblationAxis::downsample_op, "gap");
        CHECK(a.detector.strategy == CombinationMode::rram_only);
        CHECK(a.detector.rram.downsample_op == DownsampleOp::gap);
        const auto b = apply_axis_value(cfg, AblationAxis::fpn_level, "3");
        CHECK(b.detector.strategy == CombinationMode::gram_only);
        CHECK(b.detector.gram.fpn_level == 3);
    }
}

TEST_SUITE_END();
