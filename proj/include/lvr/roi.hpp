#pragma once

// Stage-1 supervision: ROI boxes projected onto the patch grid, bucketed
// position-aligned targets, and the alignment / generation / combined losses.

#include <string>
#include <utility>
#include <vector>

#include "lvr/decode.hpp"
#include "lvr/model.hpp"

namespace lvr {

// Axis-aligned rectangle in image pixel coordinates, half-open on both axes.
struct RoiBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    void validate(int image_w, int image_h) const {
        if (!(0 <= x0 && x0 < x1 && x1 <= image_w && 0 <= y0 && y0 < y1 && y1 <= image_h)) {
            throw std::invalid_argument("RoiBox: invalid or degenerate box [" + std::to_string(x0) + "," +
                                        std::to_string(y0) + "," + std::to_string(x1) + "," + std::to_string(y1) +
                                        ") for " + std::to_string(image_w) + "x" + std::to_string(image_h));
        }
    }
};

// Flat row-major indices of every patch cell whose pixel extent intersects
// the box. Any overlap counts; a valid box therefore always covers at least
// one patch.
inline std::vector<int> project_box_to_patches(const RoiBox& box, int image_w, int image_h, int patch) {
    box.validate(image_w, image_h);
    if (patch <= 0 || image_w % patch != 0 || image_h % patch != 0) {
        throw std::invalid_argument("project_box_to_patches: image dims not divisible by patch size");
    }
    const int wp = image_w / patch;
    const int c_lo = box.x0 / patch, c_hi = (box.x1 - 1) / patch;
    const int r_lo = box.y0 / patch, r_hi = (box.y1 - 1) / patch;
    std::vector<int> out;
    for (int r = r_lo; r <= r_hi; ++r) {
        for (int c = c_lo; c <= c_hi; ++c) out.push_back(r * wp + c);
    }
    return out;
}

// K contiguous buckets over a list of length m; bucket k (1-based) spans
// [floor((k-1)m/K), floor(km/K)). Sizes differ by at most one.
inline std::vector<std::pair<int, int>> partition_buckets(int m, int k) {
    if (m < 0 || k < 1) throw std::invalid_argument("partition_buckets: need m >= 0 and k >= 1");
    std::vector<std::pair<int, int>> out;
    out.reserve(k);
    for (int b = 1; b <= k; ++b) {
        out.emplace_back(static_cast<int>(static_cast<long>(b - 1) * m / k),
                         static_cast<int>(static_cast<long>(b) * m / k));
    }
    return out;
}

// Per-bucket arithmetic means of the ROI tokens, as detached tensors (the
// alignment loss must not pull visual tokens toward latents). Empty buckets
// copy the nearest nonempty bucket's target, earlier bucket preferred on
// ties.
inline std::vector<Tensor> bucket_targets(const std::vector<Tensor>& visual, const std::vector<int>& indices,
                                          const std::vector<std::pair<int, int>>& buckets) {
    if (indices.empty()) {
        throw std::invalid_argument("bucket_targets: empty ROI index set, sample unusable for alignment");
    }
    if (buckets.empty() || buckets.back().second != static_cast<int>(indices.size())) {
        throw std::invalid_argument("bucket_targets: partition inconsistent with index list length");
    }
    for (int idx : indices) {
        if (idx < 0 || idx >= static_cast<int>(visual.size())) {
            throw std::invalid_argument("bucket_targets: patch index " + std::to_string(idx) + " out of range");
        }
    }
    const int k = static_cast<int>(buckets.size());
    const int d = static_cast<int>(visual.front().numel());
    std::vector<Tensor> targets(k);
    for (int b = 0; b < k; ++b) {
        const auto [lo, hi] = buckets[b];
        if (lo >= hi) continue;
        Tensor t = Tensor::zeros({1, d});
        for (int p = lo; p < hi; ++p) {
            const Tensor& v = visual[indices[p]];
            for (int j = 0; j < d; ++j) (*t.data)[j] += (*v.data)[j];
        }
        for (int j = 0; j < d; ++j) (*t.data)[j] /= (hi - lo);
        targets[b] = t;
    }
    for (int b = 0; b < k; ++b) {
        if (targets[b].data) continue;
        for (int dist = 1; dist < k; ++dist) {
            if (b - dist >= 0 && targets[b - dist].data) {
                targets[b] = targets[b - dist];
                break;
            }
            if (b + dist < k && targets[b + dist].data) {
                targets[b] = targets[b + dist];
                break;
            }
        }
        if (!targets[b].data) throw std::invalid_argument("bucket_targets: all buckets empty");
    }
    return targets;
}

// (1/K) sum of squared distances between latent states and their targets.
// Targets must be detached; gradients reach the latent states only.
inline Tensor align_loss(const std::vector<Tensor>& latent_states, const std::vector<Tensor>& targets,
                         Tape* tape) {
    if (latent_states.size() != targets.size() || latent_states.empty()) {
        throw std::invalid_argument("align_loss: trajectory and target lengths differ (" +
                                    std::to_string(latent_states.size()) + " vs " +
                                    std::to_string(targets.size()) + ")");
    }
    Tensor acc;
    for (size_t i = 0; i < latent_states.size(); ++i) {
        if (targets[i].tracked()) {
            throw std::invalid_argument("align_loss: targets must be detached (stop-gradient)");
        }
        Tensor term = sum_squared_diff(latent_states[i], targets[i], tape);
        acc = (i == 0) ? term : add(acc, term, tape);
    }
    return scale(acc, 1.0 / static_cast<double>(latent_states.size()), tape);
}

namespace detail {

inline Tensor nll_of_decisions(const std::vector<Tensor>& logits, const std::vector<int>& tokens, size_t begin,
                               size_t end, Tape* tape) {
    Tensor acc;
    for (size_t i = begin; i < end; ++i) {
        Tensor p = pick(softmax_rows(logits[i], tape), 0, tokens[i], tape);
        Tensor term = scale(log(p, tape), -1.0, tape);
        acc = (i == begin) ? term : add(acc, term, tape);
    }
    return acc;
}

}  // namespace detail

struct GenerationLoss {
    Tensor sum;        // optimized value: summed next-token NLL over y
    double per_token;  // averaged variant, for reporting
};

// Next-token NLL for the answer sequence y, conditioned on X0 and the
// in-line latent rollout (control tokens teacher-forced around the segment).
inline GenerationLoss generation_loss(const Model& m, const MixedSequence& x0, const std::vector<int>& y, int K,
                                      Tape* tape) {
    if (y.empty()) throw std::invalid_argument("generation_loss: empty target sequence");
    for (int t : y) {
        if (m.vocab.is_control(t)) {
            throw std::invalid_argument("generation_loss: control token inside answer span (malformed target)");
        }
    }
    ReplayLayout lay;
    lay.has_latent = true;
    lay.k = K;
    lay.pre_latent = {m.vocab.start_latent()};
    lay.start_is_decision = false;  // Eq-style loss covers the answer tokens only
    lay.answer = y;
    lay.predict_eos = false;
    TeacherForcedResult tf = teacher_forced_forward(m, x0, lay, nullptr, tape);
    GenerationLoss out;
    out.sum = detail::nll_of_decisions(tf.decision_logits, tf.decision_tokens, 0, tf.decision_tokens.size(), tape);
    out.per_token = out.sum.value() / static_cast<double>(y.size());
    return out;
}

struct SftLoss {
    Tensor total;  // emission NLL + lambda * alignment, on the tape
    double total_value = 0.0;
    double gen_value = 0.0;    // emission NLL (START + answer + EOS terms)
    double align_value = 0.0;  // reported even when lambda is zero
};

// Detached bucket targets for one sample under the current visual pathway.
inline std::vector<Tensor> roi_targets(const Model& m, const std::vector<double>& image, const RoiBox& roi,
                                       int K) {
    std::vector<Tensor> visual = m.embed_patches(image, nullptr);
    const std::vector<int> indices =
        project_box_to_patches(roi, m.cfg.image_side, m.cfg.image_side, m.cfg.patch_size);
    return bucket_targets(visual, indices, partition_buckets(static_cast<int>(indices.size()), K));
}

namespace detail {

struct SftBranches {
    Tensor gen;
    Tensor align;
};

inline SftBranches build_sft_branches(const Model& m, const std::vector<double>& image, const RoiBox& roi,
                                      const std::vector<int>& question, const std::vector<int>& answer, int K,
                                      Tape* tape, const std::vector<Tensor>* frozen_targets) {
    if (answer.empty()) throw std::invalid_argument("sft_loss: empty answer");
    for (int t : answer) {
        if (m.vocab.is_control(t)) throw std::invalid_argument("sft_loss: control token in answer");
    }
    std::vector<Tensor> visual = m.embed_patches(image, tape);
    MixedSequence x0 = m.build_context(visual, question);

    ReplayLayout lay;
    lay.has_latent = true;
    lay.k = K;
    lay.pre_latent = {m.vocab.start_latent()};
    lay.start_is_decision = true;  // supervised: the model must learn to emit START
    lay.answer = answer;
    lay.predict_eos = true;
    TeacherForcedResult tf = teacher_forced_forward(m, x0, lay, nullptr, tape);

    SftBranches out;
    out.gen = nll_of_decisions(tf.decision_logits, tf.decision_tokens, 0, tf.decision_tokens.size(), tape);

    std::vector<Tensor> targets;
    if (!frozen_targets) {
        const std::vector<int> indices =
            project_box_to_patches(roi, m.cfg.image_side, m.cfg.image_side, m.cfg.patch_size);
        std::vector<Tensor> detached;
        detached.reserve(visual.size());
        for (const Tensor& v : visual) detached.push_back(v.detached());
        targets = bucket_targets(detached, indices, partition_buckets(static_cast<int>(indices.size()), K));
    }
    out.align = align_loss(tf.latent_states, frozen_targets ? *frozen_targets : targets, tape);
    return out;
}

}  // namespace detail

// Combined Stage-1 objective for one sample. The emission part teaches the
// model to produce the full generation: START_LATENT after the context, the
// answer tokens after the latent segment, then EOS. The alignment part
// anchors the in-line rollout to the bucketed ROI targets, which sit under a
// stop-gradient. Pass `frozen_targets` to hold that snapshot fixed across
// calls (finite-difference probing must see the same function the backward
// pass differentiates).
inline SftLoss sft_loss(const Model& m, const std::vector<double>& image, const RoiBox& roi,
                        const std::vector<int>& question, const std::vector<int>& answer, double lambda, int K,
                        Tape* tape, const std::vector<Tensor>* frozen_targets = nullptr) {
    detail::SftBranches b = detail::build_sft_branches(m, image, roi, question, answer, K, tape, frozen_targets);
    SftLoss out;
    out.total = add(b.gen, scale(b.align, lambda, tape), tape);
    out.total_value = out.total.value();
    out.gen_value = b.gen.value();
    out.align_value = b.align.value();
    return out;
}

// Training-time backward for the combined objective, accumulating gradients
// scaled by `loss_scale` into the parameter buffers. The generation branch
// updates every parameter; the alignment branch updates everything except
// the visual pathway. Alignment pulling on the patch embedder admits a
// degenerate optimum (flatten the visual tokens until the targets are
// trivially matchable), so its gradient stops at the evidence it anchors to.
inline SftLoss sft_backward(Model& m, const std::vector<double>& image, const RoiBox& roi,
                            const std::vector<int>& question, const std::vector<int>& answer, double lambda,
                            int K, double loss_scale) {
    Tape tape;
    detail::SftBranches b = detail::build_sft_branches(m, image, roi, question, answer, K, &tape, nullptr);
    SftLoss out;
    out.gen_value = b.gen.value();
    out.align_value = b.align.value();
    out.total_value = out.gen_value + lambda * out.align_value;
    out.total = Tensor::scalar(out.total_value);

    Tensor gen_scaled = scale(b.gen, loss_scale, &tape);
    tape.backward(gen_scaled);

    static const char* vision_params[] = {"vision.patch.w", "vision.patch.b", "vision.proj.w", "vision.proj.b"};
    std::vector<std::vector<double>> saved;
    for (const char* name : vision_params) saved.push_back(*m.params.find(name).grad);
    Tensor align_scaled = scale(b.align, lambda * loss_scale, &tape);
    tape.backward_branch(align_scaled);
    for (size_t i = 0; i < saved.size(); ++i) *m.params.find(vision_params[i]).grad = std::move(saved[i]);
    return out;
}

}  // namespace lvr
