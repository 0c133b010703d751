#pragma once

// Training loops for both stages, plus the evaluation-side analyses:
// latent-budget sweep, per-layer visual-attention fractions, and the
// end-to-end gradient checks.

#include <algorithm>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

#include "lvr/config.hpp"
#include "lvr/grad_check.hpp"
#include "lvr/optim.hpp"
#include "lvr/roi.hpp"
#include "lvr/serde.hpp"
#include "lvr/synth.hpp"
#include "lvr/vlpo.hpp"

namespace lvr {

struct SftEpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double gen = 0.0;
    double align = 0.0;
    double eval_accuracy = 0.0;
    double format_rate = 0.0;

    json to_json() const {
        return json{{"epoch", epoch},          {"loss", loss},
                    {"gen", gen},              {"align", align},
                    {"eval_accuracy", eval_accuracy}, {"format_rate", format_rate}};
    }
};

struct SftResult {
    Model model;
    std::vector<SftEpochMetrics> metrics;
    EvalReport final_eval;
};

// Minimizes the combined Stage-1 objective over the train split with
// teacher-forced control tokens and the in-line latent rollout. Emits one
// metrics line per epoch; a non-finite loss aborts, leaving the latest
// per-epoch checkpoint on disk.
inline SftResult train_sft(const TrainConfig& raw_cfg, const std::vector<SynthSample>& train,
                           const std::vector<SynthSample>& test, std::ostream* metrics_out = nullptr,
                           const std::string& checkpoint_path = "") {
    const TrainConfig cfg = raw_cfg.resolved();
    if (train.empty()) throw std::invalid_argument("train_sft: empty training set");
    Model model = Model::init(cfg.model, cfg.vocabulary());
    OptimConfig oc;
    oc.lr = cfg.sft.lr;
    AdamW opt(oc);

    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    SftResult res;
    const int batch = std::max(1, cfg.sft.batch_size);
    for (int epoch = 0; epoch < cfg.sft.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 0x73667445ull, static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0, gen_sum = 0.0, align_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += batch) {
            const size_t end = std::min(order.size(), start + batch);
            const double inv = 1.0 / static_cast<double>(end - start);
            model.params.zero_grads();
            bool bad = false;
            for (size_t i = start; i < end; ++i) {
                const SynthSample& s = train[order[i]];
                SftLoss l =
                    sft_backward(model, s.image, s.roi, s.question, {s.answer}, cfg.sft.lambda, cfg.k, inv);
                if (!std::isfinite(l.total_value)) {
                    bad = true;
                    break;
                }
                loss_sum += l.total_value;
                gen_sum += l.gen_value;
                align_sum += l.align_value;
            }
            if (bad) {
                throw std::runtime_error("train_sft: non-finite loss at epoch " + std::to_string(epoch) +
                                         "; last-good checkpoint retained");
            }
            opt.step(model.params);
        }

        SftEpochMetrics em;
        em.epoch = epoch;
        em.loss = loss_sum / train.size();
        em.gen = gen_sum / train.size();
        em.align = align_sum / train.size();
        if (!test.empty()) {
            const int limit = cfg.sft.eval_samples > 0
                                  ? std::min<int>(cfg.sft.eval_samples, static_cast<int>(test.size()))
                                  : static_cast<int>(test.size());
            std::vector<SynthSample> subset(test.begin(), test.begin() + limit);
            EvalReport er = evaluate(model, subset, cfg.k, cfg.sft.max_answer_len);
            em.eval_accuracy = er.accuracy;
            em.format_rate = er.format_rate;
        }
        res.metrics.push_back(em);
        if (metrics_out) (*metrics_out) << em.to_json().dump() << "\n" << std::flush;
        if (!checkpoint_path.empty()) save_checkpoint(model, checkpoint_path);
    }
    if (!test.empty()) res.final_eval = evaluate(model, test, cfg.k, cfg.sft.max_answer_len);
    res.model = std::move(model);
    return res;
}

struct VlpoTrainResult {
    Model model;
    std::vector<VlpoStepMetrics> metrics;
};

// Stage-2 loop: per step, snapshot the behavior policy, sample groups for a
// few inputs, normalize advantages, and take one clipped-objective step. The
// visual pathway stays frozen throughout; the init model doubles as the KL
// reference.
inline VlpoTrainResult train_vlpo(const TrainConfig& raw_cfg, const Model& init,
                                  const std::vector<SynthSample>& train, std::ostream* metrics_out = nullptr) {
    const TrainConfig cfg = raw_cfg.resolved();
    if (train.empty()) throw std::invalid_argument("train_vlpo: empty training set");
    Model policy = init.clone();
    policy.freeze_visual_pathway(true);
    const Model ref = init.clone();

    OptimConfig oc;
    oc.lr = cfg.vlpo.lr;
    AdamW opt(oc);

    std::ofstream rollout_store;
    if (!cfg.vlpo.rollout_store.empty()) {
        rollout_store.open(cfg.vlpo.rollout_store, std::ios::binary);
        if (!rollout_store) throw std::runtime_error("train_vlpo: cannot open rollout store " + cfg.vlpo.rollout_store);
    }

    VlpoTrainResult res;
    const int inputs = std::max(1, cfg.vlpo.inputs_per_step);
    for (int step = 0; step < cfg.vlpo.steps; ++step) {
        const Model policy_old = policy.clone();
        Rng pick_rng(derive_seed(cfg.seed, 0x766c706full, static_cast<uint64_t>(step)));
        std::vector<TrajectoryGroup> groups;
        std::vector<SynthSample> batch;
        for (int j = 0; j < inputs; ++j) {
            const SynthSample& s = train[pick_rng.below(train.size())];
            TrajectoryGroup g = sample_group(policy_old, s, cfg.k, cfg.vlpo.rl,
                                             derive_seed(cfg.seed, static_cast<uint64_t>(step), static_cast<uint64_t>(j)),
                                             /*force_latent=*/false);
            if (!g.degenerate) {
                for (RolloutRecord& r : g.records) compute_reward(r, {s.answer});
                normalize_advantages(g, cfg.vlpo.rl.adv_eps);
            }
            batch.push_back(s);
            groups.push_back(std::move(g));
        }
        if (rollout_store.is_open()) {
            for (const TrajectoryGroup& g : groups) {
                for (const RolloutRecord& r : g.records) rollout_store << rollout_to_json(r).dump() << "\n";
            }
        }
        bool usable = false;
        for (const TrajectoryGroup& g : groups) usable = usable || !g.degenerate;
        VlpoStepMetrics ms;
        if (usable) {
            ms = vlpo_step(policy, ref, groups, batch, cfg.vlpo.rl, opt);
        } else {
            std::cerr << "train_vlpo: step " << step << " had no usable groups, skipped\n";
            ms.step_skipped = true;
            ms.has_latent_metrics = cfg.vlpo.rl.mode == RlMode::vlpo;
        }
        ms.step = step;
        res.metrics.push_back(ms);
        if (metrics_out) (*metrics_out) << ms.to_json().dump() << "\n" << std::flush;
    }
    res.model = std::move(policy);
    return res;
}

struct SweepRow {
    int k = 0;
    double accuracy = 0.0;
};

// Evaluates one checkpoint at several inference-time latent budgets.
// Duplicate budgets are dropped with a warning; budgets below 1 are rejected.
inline std::vector<SweepRow> sweep_k(const Model& m, const std::vector<SynthSample>& data,
                                     const std::vector<int>& ks, int max_answer_len = 4) {
    std::vector<int> unique;
    for (int k : ks) {
        if (k < 1) throw std::invalid_argument("sweep_k: latent budget must be >= 1, got " + std::to_string(k));
        if (std::find(unique.begin(), unique.end(), k) != unique.end()) {
            std::cerr << "sweep_k: duplicate budget " << k << " dropped\n";
            continue;
        }
        unique.push_back(k);
    }
    std::vector<SweepRow> rows;
    for (int k : unique) rows.push_back({k, evaluate(m, data, k, max_answer_len).accuracy});
    return rows;
}

// Mean fraction of attention mass that answer-phase decoding places on the
// visual-token positions, per layer, averaged over heads, positions, and
// samples.
inline std::vector<double> attention_fractions(const Model& m, const std::vector<SynthSample>& data, int k,
                                               int max_answer_len = 4) {
    if (data.empty()) throw std::invalid_argument("attention_fractions: empty dataset");
    const int n_vis = m.cfg.num_patches();
    std::vector<double> acc(m.cfg.num_layers, 0.0);
    long positions = 0;
    Rng rng(0);
    for (const SynthSample& s : data) {
        AttnTrace trace;
        MixedSequence x0 = m.context_for_image(s.image, nullptr);
        const int n_ctx = static_cast<int>(x0.size());
        DecodeResult d = decode_with_latent(m, x0, k, 0.0, max_answer_len, rng, false, 8, &trace);
        // positions whose logits produced the answer-phase samples
        int base;
        int draws;
        if (d.has_start) {
            base = n_ctx + static_cast<int>(d.pre_latent.size()) + d.k;  // END position
            draws = static_cast<int>(d.answer.size()) + (d.hit_eos ? 1 : 0);
        } else {
            base = n_ctx - 1;
            draws = static_cast<int>(d.answer.size()) + (d.hit_eos ? 1 : 0);
        }
        for (int j = 0; j < draws; ++j) {
            const auto& layers = trace.probs.at(base + j);
            for (int l = 0; l < m.cfg.num_layers; ++l) {
                double mass = 0.0;
                for (int src = 0; src < n_vis && src < static_cast<int>(layers[l].size()); ++src) {
                    mass += layers[l][src];
                }
                acc[l] += mass;
            }
            ++positions;
        }
    }
    if (positions == 0) throw std::runtime_error("attention_fractions: no answer positions decoded");
    for (double& v : acc) v /= positions;
    return acc;
}

struct GradCheckSummary {
    GradCheckReport sft;
    GradCheckReport vlpo;
    bool pass = false;
};

// End-to-end gradient verification on a small model: the combined Stage-1
// loss, and the full Stage-2 surrogate (text ratios, latent Gaussian path,
// KL) at parameters perturbed off the behavior snapshot.
inline GradCheckSummary run_grad_checks(uint64_t seed, double step, double tol, int coords_per_tensor,
                                        int embed_dim = 16, int num_layers = 2) {
    ModelConfig mc;
    mc.embed_dim = embed_dim;
    mc.num_layers = num_layers;
    mc.num_heads = 2;
    mc.patch_size = 7;
    mc.image_side = 28;
    mc.max_positions = 64;
    mc.init_seed = derive_seed(seed, 1);
    TaskConfig tc;
    tc.image_side = mc.image_side;
    tc.patch_size = mc.patch_size;
    tc.alphabet = 4;
    tc.max_distractors = 3;
    Vocabulary vocab{tc.alphabet};
    Model model = Model::init(mc, vocab);
    SynthSample sample = generate_sample(tc, derive_seed(seed, 2), 0, vocab);

    GradCheckSummary out;
    {
        const std::vector<Tensor> frozen = roi_targets(model, sample.image, sample.roi, 4);
        auto loss_fn = [&](Tape* tape) {
            return sft_loss(model, sample.image, sample.roi, sample.question, {sample.answer}, 1.0, 4, tape,
                            &frozen)
                .total;
        };
        out.sft = grad_check(loss_fn, model.params, step, tol, coords_per_tensor, derive_seed(seed, 3));
    }
    {
        VlpoConfig rl;
        rl.group_size = 2;
        rl.max_answer_len = 3;
        TrajectoryGroup g = sample_group(model, sample, 4, rl, derive_seed(seed, 4), /*force_latent=*/true);
        for (RolloutRecord& r : g.records) compute_reward(r, {sample.answer});
        g.records[0].advantage = 0.8;
        g.records[1].advantage = -0.5;
        std::vector<TrajectoryGroup> groups = {g};
        std::vector<SynthSample> samples = {sample};
        Model policy = model.clone();
        Rng prng(derive_seed(seed, 5));
        for (auto& e : policy.params.entries()) {
            for (double& v : *e.tensor.data) v += prng.uniform(-0.005, 0.005);
        }
        auto loss_fn = [&](Tape* tape) {
            return assemble_step_loss(policy, model, groups, samples, rl, tape).loss;
        };
        out.vlpo = grad_check(loss_fn, policy.params, step, tol, coords_per_tensor, derive_seed(seed, 6));
    }
    out.pass = out.sft.pass && out.vlpo.pass;
    return out;
}

}  // namespace lvr
