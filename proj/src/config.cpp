#include "ctxdet/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ctxdet {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
    throw std::invalid_argument("config: bad value '" + value + "' for key '" + key + "'");
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) bad_value(key, v);
        return d;
    } catch (const std::invalid_argument&) {
        bad_value(key, v);
    } catch (const std::out_of_range&) {
        bad_value(key, v);
    }
}

int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long d = std::stol(v, &pos);
        if (pos != v.size()) bad_value(key, v);
        return static_cast<int>(d);
    } catch (const std::invalid_argument&) {
        bad_value(key, v);
    } catch (const std::out_of_range&) {
        bad_value(key, v);
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        if (pos != v.size()) bad_value(key, v);
        return d;
    } catch (const std::invalid_argument&) {
        bad_value(key, v);
    } catch (const std::out_of_range&) {
        bad_value(key, v);
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v);
}

std::vector<std::uint64_t> to_seed_list(const std::string& key, const std::string& v) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(to_u64(key, item));
    }
    if (out.empty()) bad_value(key, v);
    return out;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    const std::map<std::string, Setter> setters = {
        // dataset
        {"dataset.width", [&](const std::string& k, const std::string& v) { cfg.dataset.width = to_int(k, v); }},
        {"dataset.height", [&](const std::string& k, const std::string& v) { cfg.dataset.height = to_int(k, v); }},
        {"dataset.min_blobs", [&](const std::string& k, const std::string& v) { cfg.dataset.min_blobs = to_int(k, v); }},
        {"dataset.max_blobs", [&](const std::string& k, const std::string& v) { cfg.dataset.max_blobs = to_int(k, v); }},
        {"dataset.min_radius", [&](const std::string& k, const std::string& v) { cfg.dataset.min_radius = to_double(k, v); }},
        {"dataset.max_radius", [&](const std::string& k, const std::string& v) { cfg.dataset.max_radius = to_double(k, v); }},
        {"dataset.max_overlap", [&](const std::string& k, const std::string& v) { cfg.dataset.max_overlap = to_double(k, v); }},
        {"dataset.neighbor_radius", [&](const std::string& k, const std::string& v) { cfg.dataset.neighbor_radius = to_double(k, v); }},
        {"dataset.rel_margin", [&](const std::string& k, const std::string& v) { cfg.dataset.rel_margin = to_double(k, v); }},
        {"dataset.glob_threshold", [&](const std::string& k, const std::string& v) { cfg.dataset.glob_threshold = to_double(k, v); }},
        {"dataset.shift_max", [&](const std::string& k, const std::string& v) { cfg.dataset.shift_max = to_double(k, v); }},
        {"dataset.abnormal_scene_prob", [&](const std::string& k, const std::string& v) { cfg.dataset.abnormal_scene_prob = to_double(k, v); }},
        {"dataset.min_abnormal", [&](const std::string& k, const std::string& v) { cfg.dataset.min_abnormal = to_int(k, v); }},
        {"dataset.max_abnormal", [&](const std::string& k, const std::string& v) { cfg.dataset.max_abnormal = to_int(k, v); }},
        {"dataset.glob_fraction", [&](const std::string& k, const std::string& v) { cfg.dataset.glob_fraction = to_double(k, v); }},
        {"dataset.force_glob_presence", [&](const std::string& k, const std::string& v) { cfg.dataset.force_glob_presence = to_bool(k, v); }},
        {"dataset.ratio_mu_min", [&](const std::string& k, const std::string& v) { cfg.dataset.ratio_mu_min = to_double(k, v); }},
        {"dataset.ratio_mu_max", [&](const std::string& k, const std::string& v) { cfg.dataset.ratio_mu_max = to_double(k, v); }},
        {"dataset.ratio_noise", [&](const std::string& k, const std::string& v) { cfg.dataset.ratio_noise = to_double(k, v); }},
        {"dataset.rel_excess_min", [&](const std::string& k, const std::string& v) { cfg.dataset.rel_excess_min = to_double(k, v); }},
        {"dataset.rel_excess_max", [&](const std::string& k, const std::string& v) { cfg.dataset.rel_excess_max = to_double(k, v); }},
        {"dataset.base_normal_min", [&](const std::string& k, const std::string& v) { cfg.dataset.base_normal_min = to_double(k, v); }},
        {"dataset.base_normal_max", [&](const std::string& k, const std::string& v) { cfg.dataset.base_normal_max = to_double(k, v); }},
        {"dataset.base_glob_min", [&](const std::string& k, const std::string& v) { cfg.dataset.base_glob_min = to_double(k, v); }},
        {"dataset.base_glob_max", [&](const std::string& k, const std::string& v) { cfg.dataset.base_glob_max = to_double(k, v); }},
        {"dataset.background", [&](const std::string& k, const std::string& v) { cfg.dataset.background = to_double(k, v); }},
        {"dataset.pixel_noise", [&](const std::string& k, const std::string& v) { cfg.dataset.pixel_noise = to_double(k, v); }},
        {"dataset.seed", [&](const std::string& k, const std::string& v) { cfg.dataset.seed = to_u64(k, v); }},
        // experiment
        {"experiment.train_scenes", [&](const std::string& k, const std::string& v) { cfg.train_scenes = to_int(k, v); }},
        {"experiment.val_scenes", [&](const std::string& k, const std::string& v) { cfg.val_scenes = to_int(k, v); }},
        {"experiment.test_scenes", [&](const std::string& k, const std::string& v) { cfg.test_scenes = to_int(k, v); }},
        {"experiment.seeds", [&](const std::string& k, const std::string& v) { cfg.seeds = to_seed_list(k, v); }},
        {"experiment.eval_exclude_normal", [&](const std::string& k, const std::string& v) { cfg.eval_exclude_normal = to_bool(k, v); }},
        // detector
        {"detector.roi_size", [&](const std::string& k, const std::string& v) { cfg.detector.roi_size = to_int(k, v); }},
        {"detector.channels", [&](const std::string& k, const std::string& v) { cfg.detector.channels = to_int(k, v); }},
        {"detector.cls_hidden", [&](const std::string& k, const std::string& v) { cfg.detector.cls_hidden = to_int(k, v); }},
        {"detector.num_classes", [&](const std::string& k, const std::string& v) { cfg.detector.num_classes = to_int(k, v); }},
        {"detector.proposal_mode", [&](const std::string& k, const std::string& v) { cfg.detector.proposal_mode = proposal_mode_from_string(v); (void)k; }},
        {"detector.jitter_frac", [&](const std::string& k, const std::string& v) { cfg.detector.jitter_frac = to_double(k, v); }},
        {"detector.bg_proposals", [&](const std::string& k, const std::string& v) { cfg.detector.bg_proposals = to_int(k, v); }},
        {"detector.rpn_topk", [&](const std::string& k, const std::string& v) { cfg.detector.rpn_topk = to_int(k, v); }},
        {"detector.rpn_nms_iou", [&](const std::string& k, const std::string& v) { cfg.detector.rpn_nms_iou = to_double(k, v); }},
        {"detector.rpn_pos_iou", [&](const std::string& k, const std::string& v) { cfg.detector.rpn_pos_iou = to_double(k, v); }},
        {"detector.pos_iou", [&](const std::string& k, const std::string& v) { cfg.detector.pos_iou = to_double(k, v); }},
        {"detector.sample_count", [&](const std::string& k, const std::string& v) { cfg.detector.sample_count = to_int(k, v); }},
        {"detector.pos_fraction", [&](const std::string& k, const std::string& v) { cfg.detector.pos_fraction = to_double(k, v); }},
        {"detector.rpn_weight", [&](const std::string& k, const std::string& v) { cfg.detector.rpn_weight = to_double(k, v); }},
        {"detector.head_weight", [&](const std::string& k, const std::string& v) { cfg.detector.head_weight = to_double(k, v); }},
        {"detector.imgcls_weight", [&](const std::string& k, const std::string& v) { cfg.detector.imgcls_weight = to_double(k, v); }},
        {"detector.with_imgcls", [&](const std::string& k, const std::string& v) { cfg.detector.with_imgcls = to_bool(k, v); }},
        {"detector.score_threshold", [&](const std::string& k, const std::string& v) { cfg.detector.score_threshold = to_double(k, v); }},
        {"detector.nms_iou", [&](const std::string& k, const std::string& v) { cfg.detector.nms_iou = to_double(k, v); }},
        {"detector.max_detections", [&](const std::string& k, const std::string& v) { cfg.detector.max_detections = to_int(k, v); }},
        {"detector.epochs", [&](const std::string& k, const std::string& v) { cfg.detector.epochs = to_int(k, v); }},
        {"detector.lr", [&](const std::string& k, const std::string& v) { cfg.detector.lr = to_double(k, v); }},
        {"detector.momentum", [&](const std::string& k, const std::string& v) { cfg.detector.momentum = to_double(k, v); }},
        {"detector.weight_decay", [&](const std::string& k, const std::string& v) { cfg.detector.weight_decay = to_double(k, v); }},
        {"detector.grad_clip_norm", [&](const std::string& k, const std::string& v) { cfg.detector.grad_clip_norm = to_double(k, v); }},
        {"detector.seed", [&](const std::string& k, const std::string& v) { cfg.detector.seed = to_u64(k, v); }},
        {"detector.strategy", [&](const std::string& k, const std::string& v) { cfg.detector.strategy = combination_mode_from_string(v); (void)k; }},
        {"detector.attention_bias", [&](const std::string& k, const std::string& v) { cfg.detector.attention_bias = to_bool(k, v); }},
        {"detector.zero_init_output_proj", [&](const std::string& k, const std::string& v) { cfg.detector.zero_init_output_proj = to_bool(k, v); }},
        {"detector.parallel_double_residual", [&](const std::string& k, const std::string& v) { cfg.detector.parallel_double_residual = to_bool(k, v); }},
        // attention sub-configs
        {"rram.c_prime", [&](const std::string& k, const std::string& v) { cfg.detector.rram.c_prime = to_int(k, v); }},
        {"rram.downsample_op", [&](const std::string& k, const std::string& v) { cfg.detector.rram.downsample_op = downsample_op_from_string(v); (void)k; }},
        {"gram.c_double_prime", [&](const std::string& k, const std::string& v) { cfg.detector.gram.c_double_prime = to_int(k, v); }},
        {"gram.fpn_level", [&](const std::string& k, const std::string& v) { cfg.detector.gram.fpn_level = to_int(k, v); }},
        {"gram.extra_downsample_ratio", [&](const std::string& k, const std::string& v) { cfg.detector.gram.extra_downsample_ratio = to_int(k, v); }},
    };

    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') {
                throw std::invalid_argument("config: malformed section header at line " +
                                            std::to_string(line_no));
            }
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config: expected 'key = value' at line " +
                                        std::to_string(line_no));
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;
        const auto it = setters.find(full);
        if (it == setters.end()) {
            throw std::invalid_argument("config: unknown key '" + full + "' at line " +
                                        std::to_string(line_no));
        }
        it->second(full, value);
    }
    if (cfg.detector.gram.fpn_level < 1 || cfg.detector.gram.fpn_level > 4) {
        throw std::invalid_argument("config: gram.fpn_level must be in 1..4");
    }
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string config_resolved_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json d;
    const auto& g = cfg.dataset;
    d["width"] = g.width;
    d["height"] = g.height;
    d["min_blobs"] = g.min_blobs;
    d["max_blobs"] = g.max_blobs;
    d["min_radius"] = g.min_radius;
    d["max_radius"] = g.max_radius;
    d["max_overlap"] = g.max_overlap;
    d["neighbor_radius"] = g.neighbor_radius;
    d["rel_margin"] = g.rel_margin;
    d["glob_threshold"] = g.glob_threshold;
    d["shift_max"] = g.shift_max;
    d["abnormal_scene_prob"] = g.abnormal_scene_prob;
    d["min_abnormal"] = g.min_abnormal;
    d["max_abnormal"] = g.max_abnormal;
    d["glob_fraction"] = g.glob_fraction;
    d["force_glob_presence"] = g.force_glob_presence;
    d["ratio_mu_min"] = g.ratio_mu_min;
    d["ratio_mu_max"] = g.ratio_mu_max;
    d["ratio_noise"] = g.ratio_noise;
    d["rel_excess_min"] = g.rel_excess_min;
    d["rel_excess_max"] = g.rel_excess_max;
    d["base_normal_min"] = g.base_normal_min;
    d["base_normal_max"] = g.base_normal_max;
    d["base_glob_min"] = g.base_glob_min;
    d["base_glob_max"] = g.base_glob_max;
    d["background"] = g.background;
    d["pixel_noise"] = g.pixel_noise;
    d["seed"] = g.seed;
    j["dataset"] = d;

    nlohmann::ordered_json e;
    e["train_scenes"] = cfg.train_scenes;
    e["val_scenes"] = cfg.val_scenes;
    e["test_scenes"] = cfg.test_scenes;
    e["seeds"] = cfg.seeds;
    e["eval_exclude_normal"] = cfg.eval_exclude_normal;
    j["experiment"] = e;

    const auto& dc = cfg.detector;
    nlohmann::ordered_json det;
    det["roi_size"] = dc.roi_size;
    det["channels"] = dc.channels;
    det["cls_hidden"] = dc.cls_hidden;
    det["num_classes"] = dc.num_classes;
    det["proposal_mode"] = to_string(dc.proposal_mode);
    det["jitter_frac"] = dc.jitter_frac;
    det["bg_proposals"] = dc.bg_proposals;
    det["rpn_topk"] = dc.rpn_topk;
    det["rpn_nms_iou"] = dc.rpn_nms_iou;
    det["rpn_pos_iou"] = dc.rpn_pos_iou;
    det["pos_iou"] = dc.pos_iou;
    det["sample_count"] = dc.sample_count;
    det["pos_fraction"] = dc.pos_fraction;
    det["rpn_weight"] = dc.rpn_weight;
    det["head_weight"] = dc.head_weight;
    det["imgcls_weight"] = dc.imgcls_weight;
    det["with_imgcls"] = dc.with_imgcls;
    det["score_threshold"] = dc.score_threshold;
    det["nms_iou"] = dc.nms_iou;
    det["max_detections"] = dc.max_detections;
    det["epochs"] = dc.epochs;
    det["lr"] = dc.lr;
    det["momentum"] = dc.momentum;
    det["weight_decay"] = dc.weight_decay;
    det["grad_clip_norm"] = dc.grad_clip_norm;
    det["seed"] = dc.seed;
    det["strategy"] = to_string(dc.strategy);
    det["attention_bias"] = dc.attention_bias;
    det["zero_init_output_proj"] = dc.zero_init_output_proj;
    det["parallel_double_residual"] = dc.parallel_double_residual;
    j["detector"] = det;

    nlohmann::ordered_json r;
    r["c_prime"] = dc.rram.c_prime;
    r["downsample_op"] = to_string(dc.rram.downsample_op);
    r["tau"] = dc.rram.tau();
    j["rram"] = r;

    nlohmann::ordered_json gr;
    gr["c_double_prime"] = dc.gram.c_double_prime;
    gr["fpn_level"] = dc.gram.fpn_level;
    gr["extra_downsample_ratio"] = dc.gram.extra_downsample_ratio;
    gr["tau"] = dc.gram.tau();
    j["gram"] = gr;

    return j.dump(2) + "\n";
}

}  // namespace ctxdet
