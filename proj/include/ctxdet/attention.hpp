#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctxdet/tensor.hpp"

namespace ctxdet {

// Spatial reduction applied to the key/value side of the RoI-relationship
// attention. naive_subsample keeps even 0-based indices and is the default.
enum class DownsampleOp { naive_subsample, max_pool2, linear_proj2, gap };

enum class CombinationMode {
    none,
    rram_only,
    gram_only,
    parallel_sum,
    cascade_gram_rram,
    cascade_rram_gram,
};

std::string to_string(DownsampleOp op);
DownsampleOp downsample_op_from_string(const std::string& name);
std::string to_string(CombinationMode mode);
CombinationMode combination_mode_from_string(const std::string& name);
const std::vector<CombinationMode>& all_combination_modes();

struct RramConfig {
    std::int64_t c_prime = 128;
    DownsampleOp downsample_op = DownsampleOp::naive_subsample;
    bool bias = false;
    // Scaling is tied to the reduced channel count and not independently tunable.
    double tau() const { return static_cast<double>(c_prime); }
};

struct GramConfig {
    std::int64_t c_double_prime = 128;
    int fpn_level = 1;  // 1..4, bottom (highest resolution) first
    std::int64_t extra_downsample_ratio = 4;  // applied before attention when fpn_level == 1
    bool bias = false;
    double tau() const { return static_cast<double>(c_double_prime); }
};

/// Projection bundle for one attention module: query/key/value projections
/// into the reduced space and the output projection back to C, plus the
/// learnable stride-2 kernel when downsample_op == linear_proj2.
struct AttentionParams {
    Tensor query_w;   // [C, C_r]
    Tensor key_w;     // [C, C_r]
    Tensor value_w;   // [C, C_r]
    Tensor output_w;  // [C_r, C]
    Tensor query_b, key_b, value_b, output_b;  // undefined unless bias enabled
    Tensor down_w;    // [2, 2, C, C], defined only for linear_proj2

    void append_to(const std::string& prefix,
                   std::vector<std::pair<std::string, Tensor>>& out) const;
    std::int64_t param_count() const;
};

AttentionParams make_attention_params(std::int64_t channels, std::int64_t reduced, Rng& rng,
                                      bool bias, bool zero_output_proj, bool with_down_proj);

/// The four downsampling operators over [N, s, s, C]; all produce
/// ceil(s/2) x ceil(s/2) spatial extent except gap which produces 1 x 1.
Tensor downsample(const Tensor& x, DownsampleOp op, const AttentionParams& params);

struct AttentionStats {
    std::int64_t queries = 0;
    std::int64_t keys_per_query = 0;
};

/// Unnormalized pairwise similarity q_proj(query) . k_proj(key) / tau for a
/// single pair of 1 x C feature vectors.
double rram_similarity(const Tensor& query, const Tensor& key, const AttentionParams& params,
                       double tau);

/// Attention influence of all (downsampled) RoI positions on every RoI
/// position: the residual term added to the features.
Tensor rram_delta(const Tensor& rois, const AttentionParams& params, const RramConfig& cfg,
                  AttentionStats* stats = nullptr);
/// rois + rram_delta(rois); identity when N == 0.
Tensor rram_enhance(const Tensor& rois, const AttentionParams& params, const RramConfig& cfg,
                    AttentionStats* stats = nullptr);

/// Influence of the (mod-2 subsampled) global feature map on every RoI
/// position. global_map is the already-selected [h, w, C] FPN level,
/// pre-reduced by extra_downsample_ratio where applicable.
Tensor gram_delta(const Tensor& rois, const Tensor& global_map, const AttentionParams& params,
                  const GramConfig& cfg, AttentionStats* stats = nullptr);
Tensor gram_enhance(const Tensor& rois, const Tensor& global_map, const AttentionParams& params,
                    const GramConfig& cfg, AttentionStats* stats = nullptr);

/// Select the configured FPN level from bottom-first pyramid levels and apply
/// the extra stride reduction for level 1.
Tensor prepare_global_map(const std::vector<Tensor>& levels, const GramConfig& cfg);

/// Applies the configured combination of the two modules. With
/// parallel_double_residual the parallel mode fuses full module outputs
/// (input counted twice) instead of input + both influences.
Tensor combine(const Tensor& rois, const Tensor& global_map, const AttentionParams& rram_params,
               const AttentionParams& gram_params, const RramConfig& rram_cfg,
               const GramConfig& gram_cfg, CombinationMode mode,
               bool parallel_double_residual = false);

/// Number of key positions attended per query in an instrumented RRAM pass;
/// equals N * ceil(s/2)^2 for naive_subsample.
std::int64_t count_similarity_evals(const Tensor& rois, const AttentionParams& params,
                                    const RramConfig& cfg);

}  // namespace ctxdet
