#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxdet/boxes.hpp"
#include "ctxdet/rng.hpp"
#include "ctxdet/tensor.hpp"

namespace ctxdet {

enum class CellClass : int { normal = 1, abnormal_rel = 2, abnormal_glob = 3 };

std::string to_string(CellClass c);

struct CellBlob {
    double cx = 0.0, cy = 0.0;
    double cyto_radius = 0.0;
    double nucleus_radius = 0.0;
    double intensity = 0.0;  // rendered staining value, already includes the global shift
    CellClass label = CellClass::normal;

    double nucleus_ratio() const { return nucleus_radius / cyto_radius; }
    Box box() const { return Box{cx - cyto_radius, cy - cyto_radius, cx + cyto_radius,
                                 cy + cyto_radius}; }
};

struct Scene {
    int id = 0;
    int width = 0, height = 0;
    std::string split = "train";
    double global_shift = 0.0;
    std::vector<CellBlob> blobs;
    std::vector<double> pixels;  // height x width x 3 row-major, values in [0, 1]

    Tensor image() const { return Tensor::from_data({height, width, 3}, pixels); }
    bool has_abnormal() const;
};

/// Generator constants. The two context rules are:
///   abnormal_rel:  nucleus/cytoplasm ratio exceeds the mean ratio of the
///                  other blobs within neighbor_radius by more than rel_margin
///                  (blobs without neighbors stay normal)
///   abnormal_glob: intensity - global_shift exceeds glob_threshold
/// checked in that order. Both are undecidable from a single blob crop: the
/// ratio rule needs the neighbors, the intensity rule needs the image-wide
/// shift, and every rendered cell pixel is proportional to intensity alone.
struct GenConfig {
    int width = 64, height = 64;
    int min_blobs = 6, max_blobs = 10;
    double min_radius = 4.5, max_radius = 7.5;
    double max_overlap = 0.30;  // fraction of the smaller disc

    double neighbor_radius = 96.0;  // rho; covers the whole image at 64 x 64
    double rel_margin = 0.12;       // delta
    double glob_threshold = 0.60;   // theta
    double shift_max = 0.10;        // global_shift ~ U(-shift_max, shift_max)

    // Scene plan.
    double abnormal_scene_prob = 0.6;
    int min_abnormal = 1, max_abnormal = 4;
    double glob_fraction = 0.4;  // extra abnormal blobs planned as glob vs rel
    // Every abnormal scene carries at least one glob cell, which keeps the
    // image-level label decidable from stain intensity alone.
    bool force_glob_presence = true;

    // Appearance plan.
    double ratio_mu_min = 0.22, ratio_mu_max = 0.70;   // scene-level mean nucleus ratio
    double ratio_noise = 0.04;                         // per-blob ratio jitter
    double rel_excess_min = 0.05, rel_excess_max = 0.09;  // planned outlier above mu + delta
    double base_normal_min = 0.40, base_normal_max = 0.52;
    double base_glob_min = 0.66, base_glob_max = 0.80;
    double background = 0.12;
    double pixel_noise = 0.01;

    std::uint64_t seed = 1;

    /// Marginal class priors implied by the plan (for distribution checks).
    double expected_fraction(CellClass c) const;
};

/// The labeling rule, shared by generation and re-labeling checks.
CellClass classify_blob(const std::vector<CellBlob>& blobs, std::size_t index, double global_shift,
                        const GenConfig& cfg);

Scene generate_scene(const GenConfig& cfg, std::uint64_t scene_seed, int id);

struct SynthDataset {
    GenConfig config;
    std::vector<Scene> scenes;

    std::vector<const Scene*> split(const std::string& name) const;
};

SynthDataset generate_dataset(const GenConfig& cfg, int n_train, int n_val, int n_test);

/// Layout: dir/images/img_%06d.png, dir/annotations.json, dir/meta.json.
void export_dataset(const SynthDataset& ds, const std::string& dir);
SynthDataset import_dataset(const std::string& dir);

}  // namespace ctxdet
