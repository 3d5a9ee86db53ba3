#include "ctxdet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "ctxdet/png_io.hpp"
#include "json.hpp"

namespace ctxdet {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string to_string(CellClass c) {
    switch (c) {
        case CellClass::normal: return "normal";
        case CellClass::abnormal_rel: return "abnormal_rel";
        case CellClass::abnormal_glob: return "abnormal_glob";
    }
    throw std::logic_error("unknown CellClass");
}

bool Scene::has_abnormal() const {
    return std::any_of(blobs.begin(), blobs.end(),
                       [](const CellBlob& b) { return b.label != CellClass::normal; });
}

double GenConfig::expected_fraction(CellClass c) const {
    const double mean_blobs = 0.5 * (min_blobs + max_blobs);
    if (mean_blobs <= 0.0) return c == CellClass::normal ? 1.0 : 0.0;
    const double mean_abn = 0.5 * (min_abnormal + max_abnormal);
    // With forced glob presence the first abnormal in a scene is always glob
    // and glob_fraction applies to the remainder.
    const double glob_per_scene = force_glob_presence
                                      ? 1.0 + (mean_abn - 1.0) * glob_fraction
                                      : mean_abn * glob_fraction;
    const double rel_per_scene = mean_abn - glob_per_scene;
    switch (c) {
        case CellClass::normal:
            return 1.0 - abnormal_scene_prob * mean_abn / mean_blobs;
        case CellClass::abnormal_rel:
            return abnormal_scene_prob * rel_per_scene / mean_blobs;
        case CellClass::abnormal_glob:
            return abnormal_scene_prob * glob_per_scene / mean_blobs;
    }
    throw std::logic_error("unknown CellClass");
}

CellClass classify_blob(const std::vector<CellBlob>& blobs, std::size_t index, double global_shift,
                        const GenConfig& cfg) {
    const CellBlob& b = blobs[index];
    double ratio_sum = 0.0;
    int neighbors = 0;
    for (std::size_t j = 0; j < blobs.size(); ++j) {
        if (j == index) continue;
        const double dx = blobs[j].cx - b.cx;
        const double dy = blobs[j].cy - b.cy;
        if (std::sqrt(dx * dx + dy * dy) <= cfg.neighbor_radius) {
            ratio_sum += blobs[j].nucleus_ratio();
            ++neighbors;
        }
    }
    if (neighbors > 0 && b.nucleus_ratio() > ratio_sum / neighbors + cfg.rel_margin) {
        return CellClass::abnormal_rel;
    }
    if (b.intensity - global_shift > cfg.glob_threshold) return CellClass::abnormal_glob;
    return CellClass::normal;
}

namespace {

double disc_overlap_fraction(double x1, double y1, double r1, double x2, double y2, double r2) {
    const double d = std::hypot(x2 - x1, y2 - y1);
    const double rmin = std::min(r1, r2);
    if (d >= r1 + r2) return 0.0;
    double inter = 0.0;
    if (d <= std::abs(r1 - r2)) {
        inter = M_PI * rmin * rmin;
    } else {
        const double a1 = std::acos(std::clamp((d * d + r1 * r1 - r2 * r2) / (2 * d * r1), -1.0, 1.0));
        const double a2 = std::acos(std::clamp((d * d + r2 * r2 - r1 * r1) / (2 * d * r2), -1.0, 1.0));
        inter = r1 * r1 * a1 + r2 * r2 * a2 -
                0.5 * std::sqrt(std::max(0.0, (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) *
                                                  (d + r1 + r2)));
    }
    return inter / (M_PI * rmin * rmin);
}

// Fixed stain map: every rendered cell pixel is a constant times the blob
// intensity so a crop reveals intensity but never the shift behind it.
constexpr double kCytoColor[3] = {0.55, 0.62, 0.70};
constexpr double kNucleusColor[3] = {0.95, 0.85, 1.00};

void render_scene(Scene& scene, const GenConfig& cfg, Rng& render_rng) {
    const int w = scene.width, h = scene.height;
    scene.pixels.assign(static_cast<std::size_t>(w) * h * 3, cfg.background);
    for (const auto& b : scene.blobs) {
        const int y0 = std::max(0, static_cast<int>(std::floor(b.cy - b.cyto_radius)));
        const int y1 = std::min(h - 1, static_cast<int>(std::ceil(b.cy + b.cyto_radius)));
        const int x0 = std::max(0, static_cast<int>(std::floor(b.cx - b.cyto_radius)));
        const int x1 = std::min(w - 1, static_cast<int>(std::ceil(b.cx + b.cyto_radius)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double d = std::hypot(x + 0.5 - b.cx, y + 0.5 - b.cy);
                if (d > b.cyto_radius) continue;
                const bool nucleus = d <= b.nucleus_radius;
                double* px = scene.pixels.data() + (static_cast<std::size_t>(y) * w + x) * 3;
                for (int c = 0; c < 3; ++c) {
                    px[c] = (nucleus ? kNucleusColor[c] : kCytoColor[c]) * b.intensity;
                }
            }
        }
    }
    for (auto& v : scene.pixels) {
        v = std::clamp(v + render_rng.normal(0.0, cfg.pixel_noise), 0.0, 1.0);
    }
}

}  // namespace

Scene generate_scene(const GenConfig& cfg, std::uint64_t scene_seed, int id) {
    if (cfg.width % 32 != 0 || cfg.height % 32 != 0) {
        throw std::invalid_argument("generate_scene: width/height must be multiples of 32");
    }
    Rng rng(scene_seed);
    Rng plan_rng = rng.derive(1);
    Rng place_rng = rng.derive(2);
    Rng render_rng = rng.derive(3);

    Scene scene;
    scene.id = id;
    scene.width = cfg.width;
    scene.height = cfg.height;
    scene.global_shift = plan_rng.uniform(-cfg.shift_max, cfg.shift_max);

    const int n = cfg.min_blobs +
                  static_cast<int>(plan_rng.below(static_cast<std::uint64_t>(
                      cfg.max_blobs - cfg.min_blobs + 1)));
    int n_abn = 0;
    if (n > 0 && plan_rng.next_double() < cfg.abnormal_scene_prob) {
        n_abn = cfg.min_abnormal + static_cast<int>(plan_rng.below(static_cast<std::uint64_t>(
                                       cfg.max_abnormal - cfg.min_abnormal + 1)));
        n_abn = std::min(n_abn, n);
    }
    enum class Plan { normal, rel, glob };
    std::vector<Plan> plan(static_cast<std::size_t>(n), Plan::normal);
    for (int i = 0; i < n_abn; ++i) {
        const bool forced_glob = cfg.force_glob_presence && i == 0;
        plan[static_cast<std::size_t>(i)] =
            forced_glob || plan_rng.next_double() < cfg.glob_fraction ? Plan::glob : Plan::rel;
    }
    shuffle(plan, plan_rng);

    const double mu = plan_rng.uniform(cfg.ratio_mu_min, cfg.ratio_mu_max);
    for (const auto p : plan) {
        CellBlob b;
        b.cyto_radius = plan_rng.uniform(cfg.min_radius, cfg.max_radius);
        double ratio = 0.0;
        double base = 0.0;
        switch (p) {
            case Plan::normal:
            case Plan::glob:
                ratio = mu + plan_rng.uniform(-cfg.ratio_noise, cfg.ratio_noise);
                break;
            case Plan::rel:
                ratio = mu + cfg.rel_margin +
                        plan_rng.uniform(cfg.rel_excess_min, cfg.rel_excess_max);
                break;
        }
        base = p == Plan::glob ? plan_rng.uniform(cfg.base_glob_min, cfg.base_glob_max)
                               : plan_rng.uniform(cfg.base_normal_min, cfg.base_normal_max);
        ratio = std::clamp(ratio, 0.15, 0.92);
        b.nucleus_radius = ratio * b.cyto_radius;
        b.intensity = std::clamp(base + scene.global_shift, 0.0, 1.0);

        // Placement with bounded overlap; blobs that cannot be placed are dropped.
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const double r = b.cyto_radius;
            b.cx = place_rng.uniform(r + 1.0, cfg.width - r - 1.0);
            b.cy = place_rng.uniform(r + 1.0, cfg.height - r - 1.0);
            placed = true;
            for (const auto& other : scene.blobs) {
                if (disc_overlap_fraction(b.cx, b.cy, r, other.cx, other.cy, other.cyto_radius) >
                    cfg.max_overlap) {
                    placed = false;
                    break;
                }
            }
        }
        if (placed) scene.blobs.push_back(b);
    }

    // Labels come from the rule, not from the plan.
    for (std::size_t i = 0; i < scene.blobs.size(); ++i) {
        scene.blobs[i].label = classify_blob(scene.blobs, i, scene.global_shift, cfg);
    }
    render_scene(scene, cfg, render_rng);
    return scene;
}

std::vector<const Scene*> SynthDataset::split(const std::string& name) const {
    std::vector<const Scene*> out;
    for (const auto& s : scenes) {
        if (s.split == name) out.push_back(&s);
    }
    return out;
}

SynthDataset generate_dataset(const GenConfig& cfg, int n_train, int n_val, int n_test) {
    SynthDataset ds;
    ds.config = cfg;
    Rng master(cfg.seed);
    int id = 0;
    const auto emit = [&](const std::string& split, int count) {
        for (int i = 0; i < count; ++i, ++id) {
            Scene s = generate_scene(cfg, master.derive(static_cast<std::uint64_t>(id)).next_u64(),
                                     id);
            s.split = split;
            ds.scenes.push_back(std::move(s));
        }
    };
    emit("train", n_train);
    emit("val", n_val);
    emit("test", n_test);
    return ds;
}

namespace {

ordered_json config_to_json(const GenConfig& c) {
    ordered_json j;
    j["width"] = c.width;
    j["height"] = c.height;
    j["min_blobs"] = c.min_blobs;
    j["max_blobs"] = c.max_blobs;
    j["min_radius"] = c.min_radius;
    j["max_radius"] = c.max_radius;
    j["max_overlap"] = c.max_overlap;
    j["neighbor_radius"] = c.neighbor_radius;
    j["rel_margin"] = c.rel_margin;
    j["glob_threshold"] = c.glob_threshold;
    j["shift_max"] = c.shift_max;
    j["abnormal_scene_prob"] = c.abnormal_scene_prob;
    j["min_abnormal"] = c.min_abnormal;
    j["max_abnormal"] = c.max_abnormal;
    j["glob_fraction"] = c.glob_fraction;
    j["ratio_mu_min"] = c.ratio_mu_min;
    j["ratio_mu_max"] = c.ratio_mu_max;
    j["ratio_noise"] = c.ratio_noise;
    j["rel_excess_min"] = c.rel_excess_min;
    j["rel_excess_max"] = c.rel_excess_max;
    j["base_normal_min"] = c.base_normal_min;
    j["base_normal_max"] = c.base_normal_max;
    j["base_glob_min"] = c.base_glob_min;
    j["base_glob_max"] = c.base_glob_max;
    j["background"] = c.background;
    j["pixel_noise"] = c.pixel_noise;
    j["seed"] = c.seed;
    return j;
}

GenConfig config_from_json(const ordered_json& j) {
    GenConfig c;
    c.width = j.at("width");
    c.height = j.at("height");
    c.min_blobs = j.at("min_blobs");
    c.max_blobs = j.at("max_blobs");
    c.min_radius = j.at("min_radius");
    c.max_radius = j.at("max_radius");
    c.max_overlap = j.at("max_overlap");
    c.neighbor_radius = j.at("neighbor_radius");
    c.rel_margin = j.at("rel_margin");
    c.glob_threshold = j.at("glob_threshold");
    c.shift_max = j.at("shift_max");
    c.abnormal_scene_prob = j.at("abnormal_scene_prob");
    c.min_abnormal = j.at("min_abnormal");
    c.max_abnormal = j.at("max_abnormal");
    c.glob_fraction = j.at("glob_fraction");
    c.ratio_mu_min = j.at("ratio_mu_min");
    c.ratio_mu_max = j.at("ratio_mu_max");
    c.ratio_noise = j.at("ratio_noise");
    c.rel_excess_min = j.at("rel_excess_min");
    c.rel_excess_max = j.at("rel_excess_max");
    c.base_normal_min = j.at("base_normal_min");
    c.base_normal_max = j.at("base_normal_max");
    c.base_glob_min = j.at("base_glob_min");
    c.base_glob_max = j.at("base_glob_max");
    c.background = j.at("background");
    c.pixel_noise = j.at("pixel_noise");
    c.seed = j.at("seed");
    return c;
}

std::string image_file_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%06d.png", id);
    return buf;
}

}  // namespace

void export_dataset(const SynthDataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");

    ordered_json ann;
    ann["images"] = ordered_json::array();
    ann["annotations"] = ordered_json::array();
    ann["categories"] = ordered_json::array();
    for (const auto c : {CellClass::normal, CellClass::abnormal_rel, CellClass::abnormal_glob}) {
        ann["categories"].push_back({{"id", static_cast<int>(c)}, {"name", to_string(c)}});
    }
    int ann_id = 0;
    for (const auto& scene : ds.scenes) {
        ordered_json img;
        img["id"] = scene.id;
        img["file_name"] = image_file_name(scene.id);
        img["width"] = scene.width;
        img["height"] = scene.height;
        img["split"] = scene.split;
        img["global_shift"] = scene.global_shift;
        ann["images"].push_back(img);
        for (const auto& b : scene.blobs) {
            const Box box = clip_box(b.box(), scene.width, scene.height);
            ordered_json a;
            a["id"] = ann_id++;
            a["image_id"] = scene.id;
            a["category_id"] = static_cast<int>(b.label);
            a["bbox"] = {box.x1, box.y1, box.width(), box.height()};
            a["area"] = box.area();
            a["cx"] = b.cx;
            a["cy"] = b.cy;
            a["cyto_radius"] = b.cyto_radius;
            a["nucleus_radius"] = b.nucleus_radius;
            a["intensity"] = b.intensity;
            ann["annotations"].push_back(a);
        }

        std::vector<std::uint8_t> bytes(scene.pixels.size());
        for (std::size_t i = 0; i < bytes.size(); ++i) {
            bytes[i] = static_cast<std::uint8_t>(std::lround(scene.pixels[i] * 255.0));
        }
        write_png_rgb8((fs::path(dir) / "images" / image_file_name(scene.id)).string(), bytes,
                       scene.width, scene.height);
    }
    std::ofstream(fs::path(dir) / "annotations.json") << ann.dump(2) << "\n";

    ordered_json meta;
    meta["generator_version"] = 1;
    meta["constants"] = config_to_json(ds.config);
    meta["seed"] = ds.config.seed;
    ordered_json counts;
    for (const auto& split : {"train", "val", "test"}) {
        counts[split] = ds.split(split).size();
    }
    meta["scene_counts"] = counts;
    std::ofstream(fs::path(dir) / "meta.json") << meta.dump(2) << "\n";
}

SynthDataset import_dataset(const std::string& dir) {
    const auto load_json = [](const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("import_dataset: missing " + path.string());
        try {
            return ordered_json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error("import_dataset: " + path.string() + ": " + e.what());
        }
    };
    SynthDataset ds;
    ds.config = config_from_json(load_json(fs::path(dir) / "meta.json").at("constants"));
    const auto ann = load_json(fs::path(dir) / "annotations.json");

    std::map<int, Scene> scenes;
    for (const auto& img : ann.at("images")) {
        Scene s;
        s.id = img.at("id");
        s.width = img.at("width");
        s.height = img.at("height");
        s.split = img.at("split");
        s.global_shift = img.at("global_shift");
        int w = 0, h = 0;
        const auto bytes = read_png_rgb8(
            (fs::path(dir) / "images" / img.at("file_name").get<std::string>()).string(), &w, &h);
        if (w != s.width || h != s.height) {
            throw std::runtime_error("import_dataset: image size mismatch for scene " +
                                     std::to_string(s.id));
        }
        s.pixels.resize(bytes.size());
        for (std::size_t i = 0; i < bytes.size(); ++i) s.pixels[i] = bytes[i] / 255.0;
        scenes[s.id] = std::move(s);
    }
    for (const auto& a : ann.at("annotations")) {
        CellBlob b;
        b.cx = a.at("cx");
        b.cy = a.at("cy");
        b.cyto_radius = a.at("cyto_radius");
        b.nucleus_radius = a.at("nucleus_radius");
        b.intensity = a.at("intensity");
        b.label = static_cast<CellClass>(a.at("category_id").get<int>());
        scenes.at(a.at("image_id").get<int>()).blobs.push_back(b);
    }
    for (auto& [id, scene] : scenes) ds.scenes.push_back(std::move(scene));
    std::sort(ds.scenes.begin(), ds.scenes.end(),
              [](const Scene& a, const Scene& b) { return a.id < b.id; });
    return ds;
}

}  // namespace ctxdet
