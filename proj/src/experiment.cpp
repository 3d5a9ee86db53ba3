#include "ctxdet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "ctxdet/checkpoint.hpp"
#include "json.hpp"

namespace ctxdet {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::vector<GtInstance> gt_instances(const std::vector<const Scene*>& scenes) {
    std::vector<GtInstance> out;
    for (const auto* s : scenes) {
        for (const auto& b : s->blobs) {
            out.push_back(GtInstance{s->id, clip_box(b.box(), s->width, s->height),
                                     static_cast<int>(b.label)});
        }
    }
    return out;
}

std::vector<DetInstance> run_inference(const std::vector<const Scene*>& scenes,
                                       const DetectorParams& params, const DetectorConfig& cfg) {
    std::vector<DetInstance> out;
    for (const auto* s : scenes) {
        for (const auto& d : infer(*s, params, cfg)) {
            out.push_back(DetInstance{s->id, d.box, d.class_id, d.score});
        }
    }
    return out;
}

EvalOutputs evaluate_split(const SynthDataset& data, const std::string& split,
                           const DetectorParams& params, const ExperimentConfig& cfg) {
    const auto scenes = data.split(split);
    if (scenes.empty()) throw std::runtime_error("evaluate_split: split '" + split + "' is empty");
    EvalOutputs out;
    out.detections = run_inference(scenes, params, cfg.detector);
    const auto gts = gt_instances(scenes);
    EvalConfig ecfg;
    ecfg.exclude_categories = cfg.excluded_categories();
    ecfg.max_detections = cfg.detector.max_detections;
    out.eval = coco_ap(out.detections, gts, ecfg);
    out.tide = tide_decompose(out.detections, gts, ecfg);
    if (params.has_imgcls) {
        int correct = 0;
        for (const auto* s : scenes) {
            const bool predicted = image_cls_probability(*s, params, cfg.detector) > 0.5;
            correct += predicted == s->has_abnormal() ? 1 : 0;
        }
        out.image_accuracy = static_cast<double>(correct) / static_cast<double>(scenes.size());
    }
    return out;
}

std::string detections_json(const std::vector<DetInstance>& dets) {
    ordered_json arr = ordered_json::array();
    for (const auto& d : dets) {
        ordered_json j;
        j["image_id"] = d.image_id;
        j["category_id"] = d.category_id;
        j["bbox"] = {d.box.x1, d.box.y1, d.box.width(), d.box.height()};
        j["score"] = d.score;
        arr.push_back(j);
    }
    return arr.dump(2) + "\n";
}

std::vector<DetInstance> parse_detections_json(const std::string& text) {
    ordered_json arr;
    try {
        arr = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("detections: ") + e.what());
    }
    std::vector<DetInstance> out;
    for (const auto& j : arr) {
        const auto& bbox = j.at("bbox");
        const double x = bbox.at(0), y = bbox.at(1), w = bbox.at(2), h = bbox.at(3);
        out.push_back(DetInstance{j.at("image_id"), Box{x, y, x + w, y + h}, j.at("category_id"),
                                  j.at("score")});
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void cmd_gen(const ExperimentConfig& cfg, const std::string& out_dir, bool force) {
    if (fs::exists(fs::path(out_dir) / "meta.json") && !force) {
        throw std::runtime_error("gen: dataset already exists at " + out_dir +
                                 " (use --force to overwrite)");
    }
    const auto data = generate_dataset(cfg.dataset, cfg.train_scenes, cfg.val_scenes,
                                       cfg.test_scenes);
    export_dataset(data, out_dir);
}

namespace {

std::string train_log_jsonl(const TrainResult& result) {
    std::ostringstream os;
    for (const auto& e : result.log) {
        ordered_json j;
        j["step"] = e.step;
        j["epoch"] = e.epoch;
        j["lr"] = e.lr;
        j["total"] = e.total;
        j["rpn_cls"] = e.rpn_cls;
        j["rpn_reg"] = e.rpn_reg;
        j["head_cls"] = e.head_cls;
        j["head_reg"] = e.head_reg;
        j["imgcls"] = e.imgcls;
        os << j.dump() << "\n";
    }
    for (const auto& [epoch, mean] : result.epoch_mean_loss) {
        ordered_json j;
        j["epoch"] = epoch;
        j["mean_loss"] = mean;
        os << j.dump() << "\n";
    }
    return os.str();
}

}  // namespace

DetectorParams cmd_train(const ExperimentConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir, bool force) {
    const fs::path ckpt = fs::path(out_dir) / "checkpoint.bin";
    if (fs::exists(ckpt) && !force) {
        throw std::runtime_error("train: checkpoint already exists at " + ckpt.string() +
                                 " (use --force to retrain)");
    }
    const auto data = import_dataset(data_dir);
    const auto result = train(data, cfg.detector);
    fs::create_directories(out_dir);
    save_checkpoint(ckpt.string(), result.params.named());
    write_text_file((fs::path(out_dir) / "train_log.jsonl").string(), train_log_jsonl(result));
    write_text_file((fs::path(out_dir) / "config_resolved.json").string(),
                    config_resolved_json(cfg));
    return result.params;
}

namespace {

void write_eval_outputs(const EvalOutputs& out, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::string report = report_to_json(out.eval, out.tide);
    if (out.image_accuracy.has_value()) {
        // splice the extra field deterministically via re-parse
        auto j = nlohmann::ordered_json::parse(report);
        j["image_accuracy"] = *out.image_accuracy;
        report = j.dump(2) + "\n";
    }
    write_text_file((fs::path(out_dir) / "report.json").string(), report);
    write_text_file((fs::path(out_dir) / "detections.json").string(),
                    detections_json(out.detections));
    write_text_file((fs::path(out_dir) / "per_class.csv").string(), per_class_csv(out.eval));
}

}  // namespace

EvalOutputs cmd_eval(const ExperimentConfig& cfg, const std::string& data_dir,
                     const std::string& checkpoint_path, const std::string& split,
                     const std::string& out_dir) {
    const auto data = import_dataset(data_dir);
    Rng rng(cfg.detector.seed);
    Rng init = rng.derive(11);
    DetectorParams params = make_detector_params(cfg.detector, init);
    auto named = params.named();
    load_checkpoint(checkpoint_path, named);
    const auto out = evaluate_split(data, split, params, cfg);
    write_eval_outputs(out, out_dir);
    return out;
}

EvalOutputs cmd_eval_detections(const ExperimentConfig& cfg, const std::string& data_dir,
                                const std::string& detections_path, const std::string& split,
                                const std::string& out_dir) {
    const auto data = import_dataset(data_dir);
    const auto scenes = data.split(split);
    if (scenes.empty()) throw std::runtime_error("eval: split '" + split + "' is empty");
    EvalOutputs out;
    out.detections = parse_detections_json(read_text_file(detections_path));
    const auto gts = gt_instances(scenes);
    EvalConfig ecfg;
    ecfg.exclude_categories = cfg.excluded_categories();
    ecfg.max_detections = cfg.detector.max_detections;
    out.eval = coco_ap(out.detections, gts, ecfg);
    out.tide = tide_decompose(out.detections, gts, ecfg);
    write_eval_outputs(out, out_dir);
    return out;
}

AblationAxis ablation_axis_from_string(const std::string& name) {
    if (name == "downsample_op") return AblationAxis::downsample_op;
    if (name == "c_prime") return AblationAxis::c_prime;
    if (name == "c_double_prime") return AblationAxis::c_double_prime;
    if (name == "fpn_level") return AblationAxis::fpn_level;
    if (name == "strategy") return AblationAxis::strategy;
    throw std::invalid_argument("unknown ablation axis '" + name + "'");
}

std::string to_string(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::downsample_op: return "downsample_op";
        case AblationAxis::c_prime: return "c_prime";
        case AblationAxis::c_double_prime: return "c_double_prime";
        case AblationAxis::fpn_level: return "fpn_level";
        case AblationAxis::strategy: return "strategy";
    }
    throw std::logic_error("unknown AblationAxis");
}

std::vector<std::string> default_axis_values(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::downsample_op:
            return {"naive_subsample", "max_pool2", "linear_proj2", "gap"};
        case AblationAxis::c_prime: return {"64", "128", "256"};
        case AblationAxis::c_double_prime: return {"64", "128", "256"};
        case AblationAxis::fpn_level: return {"1", "2", "3", "4"};
        case AblationAxis::strategy: {
            std::vector<std::string> out;
            for (const auto mode : all_combination_modes()) out.push_back(to_string(mode));
            return out;
        }
    }
    throw std::logic_error("unknown AblationAxis");
}

ExperimentConfig apply_axis_value(const ExperimentConfig& cfg, AblationAxis axis,
                                  const std::string& value) {
    ExperimentConfig out = cfg;
    switch (axis) {
        case AblationAxis::downsample_op:
            out.detector.strategy = CombinationMode::rram_only;
            out.detector.rram.downsample_op = downsample_op_from_string(value);
            break;
        case AblationAxis::c_prime:
            out.detector.strategy = CombinationMode::rram_only;
            out.detector.rram.c_prime = std::stoll(value);
            break;
        case AblationAxis::c_double_prime:
            out.detector.strategy = CombinationMode::gram_only;
            out.detector.gram.c_double_prime = std::stoll(value);
            break;
        case AblationAxis::fpn_level:
            out.detector.strategy = CombinationMode::gram_only;
            out.detector.gram.fpn_level = std::stoi(value);
            break;
        case AblationAxis::strategy:
            out.detector.strategy = combination_mode_from_string(value);
            break;
    }
    return out;
}

std::vector<AblationCell> run_ablation(const ExperimentConfig& cfg, const SynthDataset& data,
                                       AblationAxis axis, const std::vector<std::string>& values,
                                       const std::vector<std::uint64_t>& seeds, int threads) {
    std::vector<AblationCell> cells;
    for (const auto& value : values) {
        for (const auto seed : seeds) {
            AblationCell cell;
            cell.value = value;
            cell.seed = seed;
            cells.push_back(cell);
        }
    }
    std::atomic<std::size_t> next{0};
    const int worker_count = std::max(1, std::min<int>(threads, static_cast<int>(cells.size())));
    const auto work = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            AblationCell& cell = cells[i];
            try {
                ExperimentConfig run_cfg = apply_axis_value(cfg, axis, cell.value);
                run_cfg.detector.seed = cell.seed;
                const auto result = train(data, run_cfg.detector);
                const auto out = evaluate_split(data, "val", result.params, run_cfg);
                cell.ap = out.eval.ap;
                cell.ap50 = out.eval.ap50;
                cell.ap75 = out.eval.ap75;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.error = e.what();
            }
        }
    };
    if (worker_count <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < worker_count; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return cells;
}

std::string ablation_csv(const std::vector<AblationCell>& cells) {
    std::ostringstream os;
    os << "value,seed,status,ap,ap50,ap75,error\n";
    for (const auto& c : cells) {
        os << c.value << "," << c.seed << "," << (c.ok ? "ok" : "failed") << ",";
        if (c.ok) {
            os << c.ap << "," << c.ap50 << "," << c.ap75 << ",";
        } else {
            os << ",,,\"" << c.error << "\"";
        }
        os << "\n";
    }
    return os.str();
}

namespace {

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;
    int n = 0;
};

Aggregate aggregate(const std::vector<double>& xs) {
    Aggregate a;
    a.n = static_cast<int>(xs.size());
    if (xs.empty()) return a;
    for (const double x : xs) a.mean += x;
    a.mean /= static_cast<double>(xs.size());
    for (const double x : xs) a.stddev += (x - a.mean) * (x - a.mean);
    a.stddev = xs.size() > 1 ? std::sqrt(a.stddev / static_cast<double>(xs.size() - 1)) : 0.0;
    return a;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << v * 100.0;
    return os.str();
}

}  // namespace

std::string ablation_markdown(AblationAxis axis, const std::vector<AblationCell>& cells) {
    // preserve first-appearance order of values
    std::vector<std::string> values;
    for (const auto& c : cells) {
        if (std::find(values.begin(), values.end(), c.value) == values.end()) {
            values.push_back(c.value);
        }
    }
    std::ostringstream os;
    os << "| " << to_string(axis) << " | AP | AP50 | AP75 | seeds |\n";
    os << "|---|---|---|---|---|\n";
    for (const auto& value : values) {
        std::vector<double> ap, ap50, ap75;
        int failures = 0;
        for (const auto& c : cells) {
            if (c.value != value) continue;
            if (!c.ok) {
                ++failures;
                continue;
            }
            ap.push_back(c.ap);
            ap50.push_back(c.ap50);
            ap75.push_back(c.ap75);
        }
        const auto a = aggregate(ap), a50 = aggregate(ap50), a75 = aggregate(ap75);
        os << "| " << value << " | " << fmt(a.mean) << " ± " << fmt(a.stddev) << " | "
           << fmt(a50.mean) << " ± " << fmt(a50.stddev) << " | " << fmt(a75.mean) << " ± "
           << fmt(a75.stddev) << " | " << a.n;
        if (failures > 0) os << " (+" << failures << " failed)";
        os << " |\n";
    }
    return os.str();
}

}  // namespace ctxdet
