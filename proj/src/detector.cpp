#include "ctxdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ctxdet {

namespace {

void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

bool uses_rram(CombinationMode m) {
    return m == CombinationMode::rram_only || m == CombinationMode::parallel_sum ||
           m == CombinationMode::cascade_gram_rram || m == CombinationMode::cascade_rram_gram;
}

bool uses_gram(CombinationMode m) {
    return m == CombinationMode::gram_only || m == CombinationMode::parallel_sum ||
           m == CombinationMode::cascade_gram_rram || m == CombinationMode::cascade_rram_gram;
}

ConvParam make_conv(std::int64_t kh, std::int64_t kw, std::int64_t ci, std::int64_t co, Rng& rng) {
    return ConvParam{kaiming({kh, kw, ci, co}, kh * kw * ci, rng), Tensor::zeros({co}, true)};
}

LinearParam make_linear(std::int64_t ci, std::int64_t co, Rng& rng, bool zero = false) {
    return LinearParam{zero ? Tensor::zeros({ci, co}, true) : kaiming({ci, co}, ci, rng),
                       Tensor::zeros({co}, true)};
}

NormParam make_norm(std::int64_t c) {
    return NormParam{Tensor::full({c}, 1.0, true), Tensor::zeros({c}, true)};
}

void append_conv(const std::string& name, const ConvParam& c,
                 std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(name + ".w", c.w);
    out.emplace_back(name + ".b", c.b);
}

void append_linear(const std::string& name, const LinearParam& l,
                   std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(name + ".w", l.w);
    out.emplace_back(name + ".b", l.b);
}

void append_norm(const std::string& name, const NormParam& n,
                 std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(name + ".gamma", n.gamma);
    out.emplace_back(name + ".beta", n.beta);
}

}  // namespace

std::string to_string(ProposalMode mode) {
    return mode == ProposalMode::gt_jitter ? "gt_jitter" : "learned_rpn_lite";
}

ProposalMode proposal_mode_from_string(const std::string& name) {
    if (name == "gt_jitter") return ProposalMode::gt_jitter;
    if (name == "learned_rpn_lite") return ProposalMode::learned_rpn_lite;
    throw std::invalid_argument("unknown proposal mode '" + name + "'");
}

std::vector<std::pair<std::string, Tensor>> DetectorParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    append_conv("stem", stem, out);
    append_norm("stem.norm", stem_norm, out);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        append_conv("block" + std::to_string(i + 1), blocks[i], out);
        append_norm("block" + std::to_string(i + 1) + ".norm", block_norms[i], out);
    }
    if (has_rpn) {
        append_conv("rpn.conv", rpn_conv, out);
        append_linear("rpn.obj", rpn_obj, out);
        append_linear("rpn.box", rpn_box, out);
    }
    if (has_rram) rram.append_to("rram", out);
    if (has_gram) gram.append_to("gram", out);
    append_linear("cls.fc1", cls_fc1, out);
    append_linear("cls.fc2", cls_fc2, out);
    append_conv("reg.conv1", reg_conv1, out);
    append_conv("reg.conv2", reg_conv2, out);
    append_linear("reg.out", reg_out, out);
    if (has_imgcls) {
        append_conv("imgcls.conv", imgcls_conv, out);
        append_linear("imgcls.fc", imgcls_fc, out);
    }
    return out;
}

std::int64_t DetectorParams::param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
}

DetectorParams make_detector_params(const DetectorConfig& cfg, Rng& rng) {
    check(cfg.channels >= 1 && cfg.roi_size >= 1 && cfg.num_classes >= 1,
          "detector config: channels, roi_size and num_classes must be positive");
    const auto c = cfg.channels;
    DetectorParams p;
    p.stem = make_conv(3, 3, 3, c, rng);
    p.stem_norm = make_norm(c);
    for (auto& b : p.blocks) b = make_conv(3, 3, c, c, rng);
    for (auto& n : p.block_norms) n = make_norm(c);
    p.has_rpn = cfg.proposal_mode == ProposalMode::learned_rpn_lite;
    if (p.has_rpn) {
        p.rpn_conv = make_conv(3, 3, c, c, rng);
        p.rpn_obj = make_linear(c, 1, rng);
        p.rpn_box = make_linear(c, 4, rng);
    }
    p.has_rram = uses_rram(cfg.strategy);
    if (p.has_rram) {
        p.rram = make_attention_params(c, cfg.rram.c_prime, rng, cfg.attention_bias,
                                       cfg.zero_init_output_proj,
                                       cfg.rram.downsample_op == DownsampleOp::linear_proj2);
    }
    p.has_gram = uses_gram(cfg.strategy);
    if (p.has_gram) {
        p.gram = make_attention_params(c, cfg.gram.c_double_prime, rng, cfg.attention_bias,
                                       cfg.zero_init_output_proj, false);
    }
    p.cls_fc1 = make_linear(cfg.roi_size * cfg.roi_size * c, cfg.cls_hidden, rng);
    p.cls_fc2 = make_linear(cfg.cls_hidden, cfg.num_classes + 1, rng);
    p.reg_conv1 = make_conv(3, 3, c, c, rng);
    p.reg_conv2 = make_conv(3, 3, c, c, rng);
    p.reg_out = make_linear(c, 4 * cfg.num_classes, rng);
    p.has_imgcls = cfg.with_imgcls;
    if (p.has_imgcls) {
        p.imgcls_conv = make_conv(3, 3, c, c, rng);
        p.imgcls_fc = make_linear(c, 1, rng);
    }
    return p;
}

PyramidFeatures backbone_forward(const Tensor& image, const DetectorParams& params) {
    check(image.rank() == 3 && image.dim(2) == 3, "backbone expects an [H, W, 3] image");
    const auto h = image.dim(0), w = image.dim(1);
    check(h % 32 == 0 && w % 32 == 0, "backbone: image dims must be multiples of 32, got " +
                                          std::to_string(h) + "x" + std::to_string(w));
    Tensor x = reshape(image, {1, h, w, 3});
    x = relu(channel_norm(conv2d(x, params.stem.w, params.stem.b, 2, 1),
                          params.stem_norm.gamma, params.stem_norm.beta));
    PyramidFeatures out;
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        x = relu(channel_norm(conv2d(x, params.blocks[i].w, params.blocks[i].b, 2, 1),
                              params.block_norms[i].gamma, params.block_norms[i].beta));
        out.levels.push_back(reshape(x, {x.dim(1), x.dim(2), x.dim(3)}));
    }
    return out;
}

namespace {

// Background box proposals that stay mostly off the ground truth.
std::vector<Proposal> sample_background(const std::vector<Box>& gt_boxes, double width,
                                        double height, int count, Rng& rng) {
    std::vector<Proposal> out;
    for (int i = 0; i < count; ++i) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            const double size = rng.uniform(8.0, 22.0);
            const double x = rng.uniform(0.0, std::max(1.0, width - size));
            const double y = rng.uniform(0.0, std::max(1.0, height - size));
            const Box b{x, y, x + size, y + size};
            bool clear = true;
            for (const auto& gt : gt_boxes) {
                if (iou(b, gt) > 0.3) {
                    clear = false;
                    break;
                }
            }
            if (clear) {
                out.push_back(Proposal{b, 0.0});
                break;
            }
        }
    }
    return out;
}

struct RpnOutputs {
    std::vector<Tensor> obj_logits;  // per level, [h*w, 1]
    std::vector<Tensor> deltas;      // per level, [h*w, 4]
};

RpnOutputs rpn_forward(const PyramidFeatures& features, const DetectorParams& params) {
    RpnOutputs out;
    for (const auto& level : features.levels) {
        Tensor x = reshape(level, {1, level.dim(0), level.dim(1), level.dim(2)});
        x = relu(conv2d(x, params.rpn_conv.w, params.rpn_conv.b, 1, 1));
        Tensor flat = reshape(x, {x.dim(1) * x.dim(2), x.dim(3)});
        out.obj_logits.push_back(linear(flat, params.rpn_obj.w, params.rpn_obj.b));
        out.deltas.push_back(linear(flat, params.rpn_box.w, params.rpn_box.b));
    }
    return out;
}

Box anchor_at(int level, std::int64_t y, std::int64_t x) {
    const double stride = static_cast<double>(PyramidFeatures::stride_of(level));
    const double cx = (static_cast<double>(x) + 0.5) * stride;
    const double cy = (static_cast<double>(y) + 0.5) * stride;
    const double half = 2.0 * stride;  // anchor side = 4 * stride
    return Box{cx - half, cy - half, cx + half, cy + half};
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<Proposal> propose(const PyramidFeatures& features, const DetectorParams& params,
                              const DetectorConfig& cfg, const std::vector<Box>& gt_boxes,
                              Rng& rng) {
    check(!features.levels.empty(), "propose: empty feature pyramid");
    const double width = static_cast<double>(features.levels[0].dim(1) * 4);
    const double height = static_cast<double>(features.levels[0].dim(0) * 4);

    if (cfg.proposal_mode == ProposalMode::gt_jitter) {
        std::vector<Proposal> out;
        for (const auto& gt : gt_boxes) {
            Box b = gt;
            const double w = gt.width(), h = gt.height();
            b.x1 += rng.uniform(-cfg.jitter_frac, cfg.jitter_frac) * w;
            b.x2 += rng.uniform(-cfg.jitter_frac, cfg.jitter_frac) * w;
            b.y1 += rng.uniform(-cfg.jitter_frac, cfg.jitter_frac) * h;
            b.y2 += rng.uniform(-cfg.jitter_frac, cfg.jitter_frac) * h;
            b = clip_box(b, width, height);
            if (b.width() < 2.0) b.x2 = std::min(width, b.x1 + 2.0);
            if (b.height() < 2.0) b.y2 = std::min(height, b.y1 + 2.0);
            if (b.x2 > b.x1 && b.y2 > b.y1) out.push_back(Proposal{b, 1.0});
        }
        const auto bg = sample_background(gt_boxes, width, height, cfg.bg_proposals, rng);
        out.insert(out.end(), bg.begin(), bg.end());
        return out;
    }

    // learned_rpn_lite: one square anchor per position, decoded and pruned.
    const RpnOutputs rpn = rpn_forward(features, params);
    std::vector<Proposal> candidates;
    for (std::size_t li = 0; li < features.levels.size(); ++li) {
        const auto h = features.levels[li].dim(0), w = features.levels[li].dim(1);
        const int level = static_cast<int>(li) + 1;
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                const std::int64_t idx = y * w + x;
                const Box anchor = anchor_at(level, y, x);
                const std::array<double, 4> delta = {
                    rpn.deltas[li].values()[idx * 4 + 0], rpn.deltas[li].values()[idx * 4 + 1],
                    rpn.deltas[li].values()[idx * 4 + 2], rpn.deltas[li].values()[idx * 4 + 3]};
                Box b = clip_box(decode_box_delta(anchor, delta), width, height);
                if (b.width() < 2.0 || b.height() < 2.0) continue;
                candidates.push_back(Proposal{b, sigmoid(rpn.obj_logits[li].values()[idx])});
            }
        }
    }
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (const auto& p : candidates) {
        boxes.push_back(p.box);
        scores.push_back(p.objectness);
    }
    const auto keep = nms(boxes, scores, cfg.rpn_nms_iou);
    std::vector<Proposal> out;
    for (const auto i : keep) {
        out.push_back(candidates[i]);
        if (static_cast<int>(out.size()) >= cfg.rpn_topk) break;
    }
    return out;
}

RoiBatch roi_pool(const PyramidFeatures& features, const std::vector<Proposal>& proposals,
                  const DetectorConfig& cfg) {
    RoiBatch batch;
    std::vector<Tensor> pooled;
    for (const auto& p : proposals) {
        check(p.box.valid(), "roi_pool: degenerate proposal box");
        const double scale_ref = std::sqrt(p.box.area());
        const int level = std::clamp(
            2 + static_cast<int>(std::floor(std::log2(scale_ref / 56.0))), 1, 4);
        const double stride = static_cast<double>(PyramidFeatures::stride_of(level));
        pooled.push_back(roi_bilinear(features.levels[static_cast<std::size_t>(level - 1)],
                                      p.box.x1, p.box.y1, p.box.x2, p.box.y2, cfg.roi_size,
                                      stride));
        batch.boxes.push_back(p.box);
        batch.levels.push_back(level);
    }
    batch.features = pooled.empty()
                         ? Tensor::zeros({0, cfg.roi_size, cfg.roi_size, cfg.channels})
                         : stack0(pooled);
    return batch;
}

HeadOutputs double_head_forward(const Tensor& roi_features, const DetectorParams& params,
                                const DetectorConfig& cfg) {
    check(roi_features.rank() == 4, "double_head_forward expects [N, s, s, C]");
    const auto n = roi_features.dim(0);
    if (n == 0) {
        return HeadOutputs{Tensor::zeros({0, cfg.num_classes + 1}),
                           Tensor::zeros({0, 4 * cfg.num_classes})};
    }
    Tensor flat = reshape(roi_features,
                          {n, roi_features.dim(1) * roi_features.dim(2) * roi_features.dim(3)});
    Tensor cls = linear(relu(linear(flat, params.cls_fc1.w, params.cls_fc1.b)), params.cls_fc2.w,
                        params.cls_fc2.b);
    Tensor r = relu(conv2d(roi_features, params.reg_conv1.w, params.reg_conv1.b, 1, 1));
    r = relu(conv2d(r, params.reg_conv2.w, params.reg_conv2.b, 1, 1));
    Tensor reg = linear(spatial_mean(r), params.reg_out.w, params.reg_out.b);
    return HeadOutputs{cls, reg};
}

Tensor image_cls_logit(const PyramidFeatures& features, const DetectorParams& params) {
    check(!features.levels.empty(), "image_cls_logit: empty pyramid");
    const Tensor& bottom = features.levels[0];
    Tensor x = reshape(bottom, {1, bottom.dim(0), bottom.dim(1), bottom.dim(2)});
    x = relu(conv2d(x, params.imgcls_conv.w, params.imgcls_conv.b, 1, 1));
    return reshape(linear(spatial_mean(x), params.imgcls_fc.w, params.imgcls_fc.b), {1});
}

Tensor head_classification_loss(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    return cross_entropy(logits, labels);
}

Tensor head_regression_loss(const Tensor& box_deltas, const std::vector<std::int64_t>& labels,
                            const std::vector<std::array<double, 4>>& targets,
                            std::int64_t num_classes) {
    check(box_deltas.rank() == 2 && box_deltas.dim(1) == 4 * num_classes,
          "head_regression_loss: deltas must be [N, 4*num_classes]");
    check(labels.size() == targets.size() &&
              static_cast<std::int64_t>(labels.size()) == box_deltas.dim(0),
          "head_regression_loss: size mismatch");
    std::vector<std::int64_t> picked;
    std::vector<double> target_values;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] <= 0) continue;
        const std::int64_t base = static_cast<std::int64_t>(i) * 4 * num_classes +
                                  4 * (labels[i] - 1);
        for (int k = 0; k < 4; ++k) {
            picked.push_back(base + k);
            target_values.push_back(targets[i][static_cast<std::size_t>(k)]);
        }
    }
    if (picked.empty()) return Tensor::scalar(0.0);
    Tensor pred = gather(box_deltas, picked, {static_cast<std::int64_t>(picked.size())});
    Tensor loss = smooth_l1_sum(pred, target_values, 1.0);
    return scale(loss, 1.0 / static_cast<double>(labels.size()));
}

namespace {

struct MatchedProposals {
    std::vector<Proposal> sampled;
    std::vector<std::int64_t> labels;                 // 0 = background
    std::vector<std::array<double, 4>> reg_targets;   // valid where label > 0
};

MatchedProposals match_and_sample(const std::vector<Proposal>& proposals,
                                  const std::vector<CellBlob>& blobs, const DetectorConfig& cfg,
                                  Rng& rng, bool subsample) {
    std::vector<std::int64_t> labels(proposals.size(), 0);
    std::vector<std::array<double, 4>> targets(proposals.size(), {0, 0, 0, 0});
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        double best = 0.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < blobs.size(); ++g) {
            const double v = iou(proposals[i].box, blobs[g].box());
            if (v > best) {
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0 && best >= cfg.pos_iou) {
            labels[i] = static_cast<std::int64_t>(blobs[static_cast<std::size_t>(best_gt)].label);
            targets[i] = encode_box_delta(proposals[i].box,
                                          blobs[static_cast<std::size_t>(best_gt)].box());
        }
    }
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < proposals.size(); ++i) (labels[i] > 0 ? pos : neg).push_back(i);
    if (subsample) {
        shuffle(pos, rng);
        shuffle(neg, rng);
        const std::size_t max_pos = static_cast<std::size_t>(
            std::lround(cfg.sample_count * cfg.pos_fraction));
        if (pos.size() > max_pos) pos.resize(max_pos);
        const std::size_t max_neg = static_cast<std::size_t>(cfg.sample_count) - pos.size();
        if (neg.size() > max_neg) neg.resize(max_neg);
    }
    std::vector<std::size_t> chosen = pos;
    chosen.insert(chosen.end(), neg.begin(), neg.end());
    std::sort(chosen.begin(), chosen.end());
    MatchedProposals out;
    for (const auto i : chosen) {
        out.sampled.push_back(proposals[i]);
        out.labels.push_back(labels[i]);
        out.reg_targets.push_back(targets[i]);
    }
    return out;
}

// Anchor-level RPN losses: objectness BCE over a balanced anchor sample plus
// smooth-L1 on the positive anchors' deltas, normalized by the sample size.
std::pair<Tensor, Tensor> rpn_loss(const PyramidFeatures& features, const DetectorParams& params,
                                   const DetectorConfig& cfg, const std::vector<Box>& gt_boxes,
                                   Rng& rng) {
    const RpnOutputs rpn = rpn_forward(features, params);
    struct AnchorRef {
        std::size_t level;
        std::int64_t idx;
        Box anchor;
        int gt = -1;
    };
    std::vector<AnchorRef> pos, neg;
    for (std::size_t li = 0; li < features.levels.size(); ++li) {
        const auto h = features.levels[li].dim(0), w = features.levels[li].dim(1);
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                AnchorRef ref{li, y * w + x, anchor_at(static_cast<int>(li) + 1, y, x), -1};
                double best = 0.0;
                for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
                    const double v = iou(ref.anchor, gt_boxes[g]);
                    if (v > best) {
                        best = v;
                        ref.gt = static_cast<int>(g);
                    }
                }
                if (ref.gt >= 0 && best >= cfg.rpn_pos_iou) {
                    pos.push_back(ref);
                } else {
                    ref.gt = -1;
                    neg.push_back(ref);
                }
            }
        }
    }
    shuffle(pos, rng);
    shuffle(neg, rng);
    if (pos.size() > 32) pos.resize(32);
    const std::size_t neg_cap = std::max<std::size_t>(32, pos.size());
    if (neg.size() > neg_cap) neg.resize(neg_cap);

    std::vector<AnchorRef> sampled = pos;
    sampled.insert(sampled.end(), neg.begin(), neg.end());
    const auto total_count = static_cast<double>(std::max<std::size_t>(1, sampled.size()));

    Tensor cls_loss = Tensor::scalar(0.0);
    Tensor reg_loss = Tensor::scalar(0.0);
    for (std::size_t li = 0; li < rpn.obj_logits.size(); ++li) {
        std::vector<std::int64_t> obj_local;
        std::vector<double> obj_targets;
        std::vector<std::int64_t> delta_local;
        std::vector<double> delta_targets;
        for (const auto& ref : sampled) {
            if (ref.level != li) continue;
            obj_local.push_back(ref.idx);
            obj_targets.push_back(ref.gt >= 0 ? 1.0 : 0.0);
            if (ref.gt >= 0) {
                const auto d =
                    encode_box_delta(ref.anchor, gt_boxes[static_cast<std::size_t>(ref.gt)]);
                for (int k = 0; k < 4; ++k) {
                    delta_local.push_back(ref.idx * 4 + k);
                    delta_targets.push_back(d[static_cast<std::size_t>(k)]);
                }
            }
        }
        if (!obj_local.empty()) {
            Tensor flat = reshape(rpn.obj_logits[li], {rpn.obj_logits[li].numel()});
            Tensor picked =
                gather(flat, obj_local, {static_cast<std::int64_t>(obj_local.size())});
            // per-level mean weighted back to a global mean over the sample
            cls_loss = cls_loss + scale(bce_with_logits(picked, obj_targets),
                                        static_cast<double>(obj_local.size()) / total_count);
        }
        if (!delta_local.empty()) {
            Tensor flat = reshape(rpn.deltas[li], {rpn.deltas[li].numel()});
            Tensor picked =
                gather(flat, delta_local, {static_cast<std::int64_t>(delta_local.size())});
            reg_loss = reg_loss + scale(smooth_l1_sum(picked, delta_targets, 1.0),
                                        1.0 / total_count);
        }
    }
    return {cls_loss, reg_loss};
}

Tensor apply_attention(const RoiBatch& batch, const PyramidFeatures& features,
                       const DetectorParams& params, const DetectorConfig& cfg) {
    if (cfg.strategy == CombinationMode::none) return batch.features;
    Tensor gmap;
    if (uses_gram(cfg.strategy)) gmap = prepare_global_map(features.levels, cfg.gram);
    return combine(batch.features, gmap, params.rram, params.gram, cfg.rram, cfg.gram,
                   cfg.strategy, cfg.parallel_double_residual);
}

}  // namespace

LossBreakdown detection_forward(const Scene& scene, const DetectorParams& params,
                                const DetectorConfig& cfg, std::uint64_t step_seed) {
    Rng rng(step_seed);
    Rng proposal_rng = rng.derive(1);
    Rng sample_rng = rng.derive(2);
    Rng rpn_rng = rng.derive(3);

    const Tensor image = scene.image();
    const PyramidFeatures features = backbone_forward(image, params);
    std::vector<Box> gt_boxes;
    for (const auto& b : scene.blobs) {
        gt_boxes.push_back(clip_box(b.box(), scene.width, scene.height));
    }
    const auto proposals = propose(features, params, cfg, gt_boxes, proposal_rng);
    const auto matched = match_and_sample(proposals, scene.blobs, cfg, sample_rng, true);

    LossBreakdown out;
    Tensor head_cls = Tensor::scalar(0.0);
    Tensor head_reg = Tensor::scalar(0.0);
    if (!matched.sampled.empty()) {
        const RoiBatch rois = roi_pool(features, matched.sampled, cfg);
        const Tensor enhanced = apply_attention(rois, features, params, cfg);
        const HeadOutputs heads = double_head_forward(enhanced, params, cfg);
        head_cls = head_classification_loss(heads.class_logits, matched.labels);
        head_reg = head_regression_loss(heads.box_deltas, matched.labels, matched.reg_targets,
                                        cfg.num_classes);
    }

    Tensor rpn_cls = Tensor::scalar(0.0);
    Tensor rpn_reg = Tensor::scalar(0.0);
    if (cfg.proposal_mode == ProposalMode::learned_rpn_lite) {
        const auto [c, r] = rpn_loss(features, params, cfg, gt_boxes, rpn_rng);
        rpn_cls = c;
        rpn_reg = r;
    }

    Tensor imgcls = Tensor::scalar(0.0);
    if (cfg.with_imgcls) {
        const double label = scene.has_abnormal() ? 1.0 : 0.0;
        imgcls = bce_with_logits(image_cls_logit(features, params), {label});
    }

    Tensor total = scale(rpn_cls + rpn_reg, cfg.rpn_weight) +
                   scale(head_cls + head_reg, cfg.head_weight) + scale(imgcls, cfg.imgcls_weight);
    out.total = total;
    out.rpn_cls = rpn_cls.item();
    out.rpn_reg = rpn_reg.item();
    out.head_cls = head_cls.item();
    out.head_reg = head_reg.item();
    out.imgcls = imgcls.item();
    return out;
}

TrainResult train(const SynthDataset& data, const DetectorConfig& cfg) {
    const auto scenes = data.split("train");
    check(!scenes.empty(), "train: empty train split");
    Rng master(cfg.seed);
    Rng init_rng = master.derive(11);
    TrainResult result;
    result.params = make_detector_params(cfg, init_rng);

    auto named = result.params.named();
    std::vector<std::vector<double>> velocity;
    for (const auto& [name, t] : named) velocity.emplace_back(t.numel(), 0.0);

    const int decay1 = (2 * cfg.epochs) / 3;
    const int decay2 = (11 * cfg.epochs) / 12;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr * (epoch >= decay2 ? 0.01 : epoch >= decay1 ? 0.1 : 1.0);
        std::vector<std::size_t> order(scenes.size());
        std::iota(order.begin(), order.end(), 0);
        Rng epoch_rng = master.derive(1000 + static_cast<std::uint64_t>(epoch));
        shuffle(order, epoch_rng);
        double epoch_loss = 0.0;
        for (const auto idx : order) {
            const std::uint64_t step_seed =
                master.derive((static_cast<std::uint64_t>(epoch) << 32) ^ idx).next_u64();
            LossBreakdown lb = detection_forward(*scenes[idx], result.params, cfg, step_seed);
            const double loss_value = lb.total.item();
            if (!std::isfinite(loss_value)) {
                std::ostringstream os;
                os << "training diverged: loss " << loss_value << " at step " << step << " (epoch "
                   << epoch << ", scene " << scenes[idx]->id << ")";
                throw TrainingDiverged(os.str());
            }
            for (auto& [name, t] : named) t.zero_grad();
            lb.total.backward();
            double grad_scale = 1.0;
            if (cfg.grad_clip_norm > 0.0) {
                double sq = 0.0;
                for (auto& [name, t] : named) {
                    for (const double g : t.grad()) sq += g * g;
                }
                const double norm = std::sqrt(sq);
                if (norm > cfg.grad_clip_norm) grad_scale = cfg.grad_clip_norm / norm;
            }
            for (std::size_t pi = 0; pi < named.size(); ++pi) {
                auto vals = named[pi].second.mutable_values();
                auto grads = named[pi].second.grad();
                auto& vel = velocity[pi];
                if (grads.empty()) continue;
                for (std::size_t i = 0; i < vals.size(); ++i) {
                    vel[i] = cfg.momentum * vel[i] + grad_scale * grads[i] +
                             cfg.weight_decay * vals[i];
                    vals[i] -= lr * vel[i];
                }
            }
            result.log.push_back(TrainLogEntry{step, epoch, lr, loss_value, lb.rpn_cls, lb.rpn_reg,
                                               lb.head_cls, lb.head_reg, lb.imgcls});
            epoch_loss += loss_value;
            ++step;
        }
        result.epoch_mean_loss.emplace_back(epoch,
                                            epoch_loss / static_cast<double>(scenes.size()));
    }
    return result;
}

std::vector<Detection> infer(const Scene& scene, const DetectorParams& params,
                             const DetectorConfig& cfg) {
    Rng rng = Rng(cfg.seed ^ 0x5eedf00dULL).derive(static_cast<std::uint64_t>(scene.id));
    const Tensor image = scene.image();
    const PyramidFeatures features = backbone_forward(image, params);
    std::vector<Box> gt_boxes;
    for (const auto& b : scene.blobs) {
        gt_boxes.push_back(clip_box(b.box(), scene.width, scene.height));
    }
    const auto proposals = propose(features, params, cfg, gt_boxes, rng);
    if (proposals.empty()) return {};
    const RoiBatch rois = roi_pool(features, proposals, cfg);
    const Tensor enhanced = apply_attention(rois, features, params, cfg);
    const HeadOutputs heads = double_head_forward(enhanced, params, cfg);

    const auto k = cfg.num_classes;
    std::vector<Detection> all;
    for (std::int64_t cls = 1; cls <= k; ++cls) {
        std::vector<Detection> candidates;
        for (std::size_t i = 0; i < proposals.size(); ++i) {
            const double* row = heads.class_logits.values().data() + i * (k + 1);
            double m = row[0];
            for (std::int64_t j = 1; j <= k; ++j) m = std::max(m, row[j]);
            double denom = 0.0;
            for (std::int64_t j = 0; j <= k; ++j) denom += std::exp(row[j] - m);
            const double score = std::exp(row[cls] - m) / denom;
            if (score < cfg.score_threshold) continue;
            const std::size_t base = i * static_cast<std::size_t>(4 * k) +
                                     static_cast<std::size_t>(4 * (cls - 1));
            const std::array<double, 4> delta = {
                heads.box_deltas.values()[base + 0], heads.box_deltas.values()[base + 1],
                heads.box_deltas.values()[base + 2], heads.box_deltas.values()[base + 3]};
            const Box b = clip_box(decode_box_delta(proposals[i].box, delta),
                                   static_cast<double>(scene.width),
                                   static_cast<double>(scene.height));
            if (!b.valid()) continue;
            candidates.push_back(Detection{b, static_cast<int>(cls), score});
        }
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (const auto& c : candidates) {
            boxes.push_back(c.box);
            scores.push_back(c.score);
        }
        for (const auto i : nms(boxes, scores, cfg.nms_iou)) all.push_back(candidates[i]);
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(all.size()) > cfg.max_detections) {
        all.resize(static_cast<std::size_t>(cfg.max_detections));
    }
    return all;
}

double image_cls_probability(const Scene& scene, const DetectorParams& params,
                             const DetectorConfig& cfg) {
    check(params.has_imgcls, "image_cls_probability: detector built without the image head");
    const PyramidFeatures features = backbone_forward(scene.image(), params);
    return sigmoid(image_cls_logit(features, params).item());
}

}  // namespace ctxdet
