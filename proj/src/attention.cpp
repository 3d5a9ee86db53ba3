#include "ctxdet/attention.hpp"

#include <stdexcept>

namespace ctxdet {

namespace {

void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_channels(const Tensor& x, const AttentionParams& params, const char* who) {
    check(x.shape().back() == params.query_w.dim(0),
          std::string(who) + ": feature channels " + std::to_string(x.shape().back()) +
              " do not match projection input " + std::to_string(params.query_w.dim(0)));
}

}  // namespace

std::string to_string(DownsampleOp op) {
    switch (op) {
        case DownsampleOp::naive_subsample: return "naive_subsample";
        case DownsampleOp::max_pool2: return "max_pool2";
        case DownsampleOp::linear_proj2: return "linear_proj2";
        case DownsampleOp::gap: return "gap";
    }
    throw std::logic_error("unknown DownsampleOp");
}

DownsampleOp downsample_op_from_string(const std::string& name) {
    if (name == "naive_subsample") return DownsampleOp::naive_subsample;
    if (name == "max_pool2") return DownsampleOp::max_pool2;
    if (name == "linear_proj2") return DownsampleOp::linear_proj2;
    if (name == "gap") return DownsampleOp::gap;
    throw std::invalid_argument("unknown downsample op '" + name + "'");
}

std::string to_string(CombinationMode mode) {
    switch (mode) {
        case CombinationMode::none: return "none";
        case CombinationMode::rram_only: return "rram_only";
        case CombinationMode::gram_only: return "gram_only";
        case CombinationMode::parallel_sum: return "parallel_sum";
        case CombinationMode::cascade_gram_rram: return "cascade_gram_rram";
        case CombinationMode::cascade_rram_gram: return "cascade_rram_gram";
    }
    throw std::logic_error("unknown CombinationMode");
}

CombinationMode combination_mode_from_string(const std::string& name) {
    for (const auto mode : all_combination_modes()) {
        if (to_string(mode) == name) return mode;
    }
    throw std::invalid_argument("unknown combination mode '" + name + "'");
}

const std::vector<CombinationMode>& all_combination_modes() {
    static const std::vector<CombinationMode> kModes = {
        CombinationMode::none,           CombinationMode::rram_only,
        CombinationMode::gram_only,      CombinationMode::parallel_sum,
        CombinationMode::cascade_gram_rram, CombinationMode::cascade_rram_gram,
    };
    return kModes;
}

void AttentionParams::append_to(const std::string& prefix,
                                std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".query_w", query_w);
    out.emplace_back(prefix + ".key_w", key_w);
    out.emplace_back(prefix + ".value_w", value_w);
    out.emplace_back(prefix + ".output_w", output_w);
    if (query_b.defined()) {
        out.emplace_back(prefix + ".query_b", query_b);
        out.emplace_back(prefix + ".key_b", key_b);
        out.emplace_back(prefix + ".value_b", value_b);
        out.emplace_back(prefix + ".output_b", output_b);
    }
    if (down_w.defined()) out.emplace_back(prefix + ".down_w", down_w);
}

std::int64_t AttentionParams::param_count() const {
    std::int64_t n = query_w.numel() + key_w.numel() + value_w.numel() + output_w.numel();
    if (query_b.defined()) {
        n += query_b.numel() + key_b.numel() + value_b.numel() + output_b.numel();
    }
    if (down_w.defined()) n += down_w.numel();
    return n;
}

AttentionParams make_attention_params(std::int64_t channels, std::int64_t reduced, Rng& rng,
                                      bool bias, bool zero_output_proj, bool with_down_proj) {
    check(channels >= 1 && reduced >= 1, "attention params need positive channel counts");
    AttentionParams p;
    p.query_w = kaiming({channels, reduced}, channels, rng);
    p.key_w = kaiming({channels, reduced}, channels, rng);
    p.value_w = kaiming({channels, reduced}, channels, rng);
    p.output_w = zero_output_proj ? Tensor::zeros({reduced, channels}, true)
                                  : kaiming({reduced, channels}, reduced, rng);
    if (bias) {
        p.query_b = Tensor::zeros({reduced}, true);
        p.key_b = Tensor::zeros({reduced}, true);
        p.value_b = Tensor::zeros({reduced}, true);
        p.output_b = Tensor::zeros({channels}, true);
    }
    if (with_down_proj) p.down_w = kaiming({2, 2, channels, channels}, 4 * channels, rng);
    return p;
}

Tensor downsample(const Tensor& x, DownsampleOp op, const AttentionParams& params) {
    check(x.rank() == 4, "downsample expects [n,s,s,c]");
    switch (op) {
        case DownsampleOp::naive_subsample: return subsample_spatial(x, 2);
        case DownsampleOp::max_pool2: return max_pool2(x);
        case DownsampleOp::linear_proj2:
            check(params.down_w.defined(), "linear_proj2 requires a down projection kernel");
            return conv2d(replicate_pad_to_even(x), params.down_w, Tensor(), 2, 0);
        case DownsampleOp::gap: return global_avg_pool(x);
    }
    throw std::logic_error("unknown DownsampleOp");
}

double rram_similarity(const Tensor& query, const Tensor& key, const AttentionParams& params,
                       double tau) {
    check(tau > 0.0, "rram_similarity: tau must be positive");
    check(query.rank() == 2 && query.dim(0) == 1 && key.rank() == 2 && key.dim(0) == 1,
          "rram_similarity expects 1 x C feature vectors");
    check_channels(query, params, "rram_similarity");
    Tensor q = linear(query, params.query_w, params.query_b);
    Tensor k = linear(key, params.key_w, params.key_b);
    double dot = 0.0;
    for (std::int64_t j = 0; j < q.numel(); ++j) dot += q.values()[j] * k.values()[j];
    return dot / tau;
}

namespace {

// Shared attention body: queries from `source`, keys/values from `context`
// rows, output projected back and reshaped to the source shape.
Tensor attention_delta(const Tensor& source, const Tensor& context_rows,
                       const AttentionParams& params, double tau, AttentionStats* stats) {
    Tensor q = reshape_v(linear(source, params.query_w, params.query_b));
    Tensor k = linear(context_rows, params.key_w, params.key_b);
    Tensor v = linear(context_rows, params.value_w, params.value_b);
    Tensor attn = scaled_softmax(matmul_nt(q, k), tau);
    Tensor agg = matmul(attn, v);
    if (stats) {
        stats->queries = q.dim(0);
        stats->keys_per_query = k.dim(0);
    }
    return reshape_v_inv(linear(agg, params.output_w, params.output_b), source.shape());
}

}  // namespace

Tensor rram_delta(const Tensor& rois, const AttentionParams& params, const RramConfig& cfg,
                  AttentionStats* stats) {
    check(rois.rank() == 4, "rram expects RoI features [n,s,s,c]");
    check_channels(rois, params, "rram");
    check(rois.dim(0) >= 1, "rram_delta requires at least one RoI");
    Tensor down = downsample(rois, cfg.downsample_op, params);
    Tensor context = reshape(down, {down.dim(0) * down.dim(1) * down.dim(2), down.dim(3)});
    return attention_delta(rois, context, params, cfg.tau(), stats);
}

Tensor rram_enhance(const Tensor& rois, const AttentionParams& params, const RramConfig& cfg,
                    AttentionStats* stats) {
    if (rois.defined() && rois.rank() == 4 && rois.dim(0) == 0) return rois;
    return rois + rram_delta(rois, params, cfg, stats);
}

Tensor gram_delta(const Tensor& rois, const Tensor& global_map, const AttentionParams& params,
                  const GramConfig& cfg, AttentionStats* stats) {
    check(rois.rank() == 4, "gram expects RoI features [n,s,s,c]");
    check(global_map.rank() == 3, "gram expects a global map [h,w,c]");
    check(global_map.dim(0) >= 1 && global_map.dim(1) >= 1, "gram: empty global map");
    check(global_map.dim(2) == rois.dim(3), "gram: global map channels " +
                                                std::to_string(global_map.dim(2)) +
                                                " do not match RoI channels " +
                                                std::to_string(rois.dim(3)));
    check_channels(rois, params, "gram");
    Tensor g4 = reshape(global_map, {1, global_map.dim(0), global_map.dim(1), global_map.dim(2)});
    Tensor down = subsample_spatial(g4, 2);
    Tensor context = reshape(down, {down.dim(1) * down.dim(2), down.dim(3)});
    return attention_delta(rois, context, params, cfg.tau(), stats);
}

Tensor gram_enhance(const Tensor& rois, const Tensor& global_map, const AttentionParams& params,
                    const GramConfig& cfg, AttentionStats* stats) {
    if (rois.defined() && rois.rank() == 4 && rois.dim(0) == 0) return rois;
    return rois + gram_delta(rois, global_map, params, cfg, stats);
}

Tensor prepare_global_map(const std::vector<Tensor>& levels, const GramConfig& cfg) {
    check(cfg.fpn_level >= 1 && cfg.fpn_level <= static_cast<int>(levels.size()),
          "gram: fpn_level " + std::to_string(cfg.fpn_level) + " out of range");
    Tensor level = levels[static_cast<std::size_t>(cfg.fpn_level - 1)];
    check(level.rank() == 3, "pyramid levels must be [h,w,c]");
    if (cfg.fpn_level == 1 && cfg.extra_downsample_ratio > 1) {
        Tensor g4 = reshape(level, {1, level.dim(0), level.dim(1), level.dim(2)});
        Tensor down = subsample_spatial(g4, cfg.extra_downsample_ratio);
        return reshape(down, {down.dim(1), down.dim(2), down.dim(3)});
    }
    return level;
}

Tensor combine(const Tensor& rois, const Tensor& global_map, const AttentionParams& rram_params,
               const AttentionParams& gram_params, const RramConfig& rram_cfg,
               const GramConfig& gram_cfg, CombinationMode mode, bool parallel_double_residual) {
    if (rois.rank() == 4 && rois.dim(0) == 0) return rois;
    switch (mode) {
        case CombinationMode::none: return rois;
        case CombinationMode::rram_only: return rram_enhance(rois, rram_params, rram_cfg);
        case CombinationMode::gram_only:
            return gram_enhance(rois, global_map, gram_params, gram_cfg);
        case CombinationMode::parallel_sum: {
            Tensor dr = rram_delta(rois, rram_params, rram_cfg);
            Tensor dg = gram_delta(rois, global_map, gram_params, gram_cfg);
            Tensor fused = rois + dr + dg;
            // Alternative fusion: full module outputs summed, input counted twice.
            return parallel_double_residual ? fused + rois : fused;
        }
        case CombinationMode::cascade_gram_rram:
            return rram_enhance(gram_enhance(rois, global_map, gram_params, gram_cfg), rram_params,
                                rram_cfg);
        case CombinationMode::cascade_rram_gram:
            return gram_enhance(rram_enhance(rois, rram_params, rram_cfg), global_map, gram_params,
                                gram_cfg);
    }
    throw std::logic_error("unknown CombinationMode");
}

std::int64_t count_similarity_evals(const Tensor& rois, const AttentionParams& params,
                                    const RramConfig& cfg) {
    AttentionStats stats;
    rram_delta(rois, params, cfg, &stats);
    return stats.keys_per_query;
}

}  // namespace ctxdet
