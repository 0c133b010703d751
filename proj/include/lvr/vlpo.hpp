#pragma once

// Stage-2 reinforcement learning: group rollouts under a frozen behavior
// policy, outcome rewards, group-normalized advantages, replay-based text
// ratios, Gaussian-surrogate latent ratios, and the clipped joint objective
// with an exact KL penalty to a fixed reference policy. grpo mode drops the
// latent terms and keeps everything else.

#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "lvr/decode.hpp"
#include "lvr/model.hpp"
#include "lvr/optim.hpp"
#include "lvr/serde.hpp"
#include "lvr/synth.hpp"

namespace lvr {

enum class RlMode { vlpo, grpo };

struct VlpoConfig {
    int group_size = 8;      // G
    double clip_eps = 0.2;   // epsilon
    double adv_eps = 1e-4;   // epsilon_0, advantage stabilizer
    double sigma = 1.0;      // latent Gaussian scale
    double kl_beta = 0.04;   // beta
    double temperature = 0.9;
    int max_answer_len = 4;
    int max_prelatent = 8;
    RlMode mode = RlMode::vlpo;

    void validate() const {
        if (group_size < 2) throw std::invalid_argument("VlpoConfig: group size must be >= 2");
        if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw std::invalid_argument("VlpoConfig: clip_eps not in (0,1)");
        if (!(sigma > 0.0)) throw std::invalid_argument("VlpoConfig: sigma must be positive");
        if (kl_beta < 0.0) throw std::invalid_argument("VlpoConfig: kl_beta must be >= 0");
        if (!(temperature > 0.0)) throw std::invalid_argument("VlpoConfig: temperature must be positive");
        if (max_answer_len < 1) throw std::invalid_argument("VlpoConfig: max_answer_len must be >= 1");
    }
};

struct RolloutRecord {
    int sample_index = -1;
    DecodeResult decode;
    double reward = 0.0;
    double acc_reward = 0.0;
    double fmt_reward = 0.0;
    double advantage = 0.0;
};

struct TrajectoryGroup {
    int sample_index = -1;
    std::vector<RolloutRecord> records;
    bool degenerate = false;  // a record diverged twice; excluded from optimization
    double reward_mean = 0.0;
    double reward_std = 0.0;
};

// R_acc: exact match of the answer span against the gold tokens.
// R_fmt: both control tokens appeared. R = R_acc + R_fmt.
inline double compute_reward(RolloutRecord& rec, const std::vector<int>& gold) {
    if (gold.empty()) throw std::invalid_argument("compute_reward: empty gold answer");
    rec.acc_reward = (rec.decode.answer == gold) ? 1.0 : 0.0;
    rec.fmt_reward = (rec.decode.has_start && rec.decode.has_end) ? 1.0 : 0.0;
    rec.reward = rec.acc_reward + rec.fmt_reward;
    return rec.reward;
}

// Group-normalized advantage with population std; the same value is later
// broadcast to every text and latent position of the trajectory.
inline void normalize_advantages(TrajectoryGroup& group, double adv_eps) {
    const int g = static_cast<int>(group.records.size());
    if (g < 2) throw std::invalid_argument("normalize_advantages: group size must be >= 2");
    double mean = 0.0;
    for (const RolloutRecord& r : group.records) mean += r.reward;
    mean /= g;
    double var = 0.0;
    for (const RolloutRecord& r : group.records) var += (r.reward - mean) * (r.reward - mean);
    var /= g;
    const double std_dev = std::sqrt(var);
    group.reward_mean = mean;
    group.reward_std = std_dev;
    for (RolloutRecord& r : group.records) r.advantage = (r.reward - mean) / (std_dev + adv_eps);
}

// G independent decodes from the frozen behavior policy, one rng stream per
// record. A diverging decode is resampled once with a retry stream; a second
// failure marks the whole group degenerate.
inline TrajectoryGroup sample_group(const Model& policy_old, const SynthSample& input, int k,
                                    const VlpoConfig& cfg, uint64_t seed, bool force_latent = false) {
    cfg.validate();
    TrajectoryGroup group;
    group.sample_index = input.index;
    MixedSequence x0 = policy_old.context_for_image(input.image, nullptr);
    for (int i = 0; i < cfg.group_size; ++i) {
        RolloutRecord rec;
        rec.sample_index = input.index;
        bool ok = false;
        for (int retry = 0; retry < 2 && !ok; ++retry) {
            Rng rng(derive_seed(seed, static_cast<uint64_t>(i), static_cast<uint64_t>(retry)));
            try {
                rec.decode = decode_with_latent(policy_old, x0, k, cfg.temperature, cfg.max_answer_len, rng,
                                                force_latent, cfg.max_prelatent);
                ok = true;
            } catch (const std::runtime_error& e) {
                std::cerr << "sample_group: rollout " << i << " diverged (" << e.what() << "), "
                          << (retry == 0 ? "resampling once" : "marking group degenerate") << "\n";
            }
        }
        if (!ok) {
            group.degenerate = true;
            return group;
        }
        group.records.push_back(std::move(rec));
    }
    return group;
}

// min(r*A, clip(r, 1-eps, 1+eps)*A), the PPO-style clipped surrogate term.
inline double clipped_term(double r, double adv, double eps) {
    if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("clipped_term: eps not in (0,1)");
    const double clipped = std::min(std::max(r, 1.0 - eps), 1.0 + eps);
    return std::min(r * adv, clipped * adv);
}

// Exact KL(p || q) between two explicit distributions.
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
    return acc;
}

// Everything the objective needs from one trajectory replay, on the tape.
struct RecordTerms {
    std::vector<Tensor> text_ratios;    // one per recorded decision
    std::vector<Tensor> latent_ratios;  // one per latent step (empty without a latent segment)
    std::vector<double> deviations;     // D_k values
    Tensor kl_mean;                     // mean exact KL over answer-span decisions
    int underflow_events = 0;
};

inline RecordTerms record_terms(const Model& policy, const Model& ref, const SynthSample& sample,
                                const RolloutRecord& rec, const VlpoConfig& cfg, Tape* tape,
                                bool want_latent_terms) {
    const DecodeResult& d = rec.decode;
    const ReplayLayout lay = ReplayLayout::of(d);

    MixedSequence x0 = policy.context_for_image(sample.image, tape);
    TeacherForcedResult tf =
        teacher_forced_forward(policy, x0, lay, d.has_start ? &d.latents.states : nullptr, tape);
    if (tf.decision_tokens != d.step_tokens) {
        throw std::runtime_error("record_terms: replay decisions do not match the recorded generation");
    }
    std::vector<Tensor> probs = decision_prob_tensors(tf, d.temperature, tape);

    RecordTerms out;
    for (size_t t = 0; t < probs.size(); ++t) {
        const double p_old = d.step_probs[t];
        if (!(p_old > 0.0)) throw std::invalid_argument("record_terms: recorded probability must be positive");
        if (probs[t].value() < 1e-300) {
            ++out.underflow_events;
            std::cerr << "record_terms: policy probability underflow at decision " << t << ", ratio clamped to 0\n";
            out.text_ratios.push_back(Tensor::scalar(0.0));
            continue;
        }
        out.text_ratios.push_back(divide(probs[t], p_old, tape));
    }

    if (want_latent_terms && d.has_start) {
        bool finite = true;
        for (const Tensor& mu : tf.latent_states) finite = finite && all_finite(mu);
        if (!finite) {
            std::cerr << "record_terms: non-finite replay state, trajectory excluded from latent loss\n";
        } else {
            const double coef = -1.0 / (2.0 * cfg.sigma * cfg.sigma);
            for (int k = 0; k < d.latents.k(); ++k) {
                Tensor h_rec = detail::const_row(d.latents.states[k]);
                Tensor dev = sum_squared_diff(tf.latent_states[k], h_rec, tape);
                out.deviations.push_back(dev.value());
                out.latent_ratios.push_back(exp(scale(dev, coef, tape), tape));
            }
        }
    }

    // Exact full-vocabulary KL to the reference policy over answer-span
    // decisions, under the same replayed latent context.
    const size_t kl_begin = static_cast<size_t>(tf.answer_decision_begin);
    if (kl_begin < probs.size()) {
        MixedSequence x0_ref = ref.context_for_image(sample.image, nullptr);
        TeacherForcedResult tf_ref =
            teacher_forced_forward(ref, x0_ref, lay, d.has_start ? &d.latents.states : nullptr, nullptr);
        const double inv_temp = 1.0 / d.temperature;
        Tensor acc;
        for (size_t t = kl_begin; t < probs.size(); ++t) {
            Tensor p_row = softmax_rows(scale(tf.decision_logits[t], inv_temp, tape), tape);
            Tensor ref_row = softmax_rows(scale(tf_ref.decision_logits[t], inv_temp, nullptr), nullptr);
            Tensor kl_t = sum_all(mul(p_row, sub(log(p_row, tape), log(ref_row, nullptr), tape), tape), tape);
            acc = (t == kl_begin) ? kl_t : add(acc, kl_t, tape);
        }
        out.kl_mean = scale(acc, 1.0 / static_cast<double>(probs.size() - kl_begin), tape);
    } else {
        out.kl_mean = Tensor::scalar(0.0);
    }
    return out;
}

// Spec-surface helpers built on the replay machinery (no tape).

inline double text_ratio(const Model& policy, const SynthSample& sample, const RolloutRecord& rec, int t,
                         const Model& ref, const VlpoConfig& cfg) {
    RecordTerms terms = record_terms(policy, ref, sample, rec, cfg, nullptr, false);
    return terms.text_ratios.at(t).value();
}

// Returns (D_k, r_lat_k).
inline std::pair<double, double> latent_ratio(const Model& policy, const SynthSample& sample,
                                              const RolloutRecord& rec, int k, const Model& ref,
                                              const VlpoConfig& cfg) {
    RecordTerms terms = record_terms(policy, ref, sample, rec, cfg, nullptr, true);
    return {terms.deviations.at(k), terms.latent_ratios.at(k).value()};
}

inline double kl_to_reference(const Model& policy, const Model& ref, const SynthSample& sample,
                              const RolloutRecord& rec, const VlpoConfig& cfg) {
    RecordTerms terms = record_terms(policy, ref, sample, rec, cfg, nullptr, false);
    return terms.kl_mean.value();
}

struct VlpoStepMetrics {
    int step = 0;
    double reward_mean = 0.0;
    double reward_std = 0.0;
    double acc_mean = 0.0;
    double fmt_mean = 0.0;
    double kl = 0.0;
    double clip_frac_txt = 0.0;
    double clip_frac_lat = 0.0;
    double mean_d = 0.0;
    double loss = 0.0;
    bool has_latent_metrics = true;  // false in grpo mode: clip_frac_lat / mean_d absent
    bool step_skipped = false;
    // loss breakdown (per-trajectory means), used by equivalence checks
    double surr_txt = 0.0;
    double surr_lat = 0.0;

    json to_json() const {
        json js;
        js["step"] = step;
        js["reward_mean"] = reward_mean;
        js["reward_std"] = reward_std;
        js["acc_mean"] = acc_mean;
        js["fmt_mean"] = fmt_mean;
        js["kl"] = kl;
        js["clip_frac_txt"] = clip_frac_txt;
        if (has_latent_metrics) {
            js["clip_frac_lat"] = clip_frac_lat;
            js["mean_d"] = mean_d;
        }
        js["loss"] = loss;
        if (step_skipped) js["step_skipped"] = true;
        return js;
    }
};

// Assembles the negated clipped objective for a batch of groups on one tape.
// Exposed separately from the optimizer step so invariants (grpo/vlpo
// equivalence, null updates) can inspect the loss without stepping.
struct StepLoss {
    Tensor loss;  // scalar on the tape
    VlpoStepMetrics metrics;
};

inline StepLoss assemble_step_loss(const Model& policy, const Model& ref,
                                   const std::vector<TrajectoryGroup>& groups,
                                   const std::vector<SynthSample>& samples, const VlpoConfig& cfg, Tape* tape) {
    cfg.validate();
    const bool latent_mode = cfg.mode == RlMode::vlpo;
    Tensor total;
    int n_records = 0;
    VlpoStepMetrics ms;
    ms.has_latent_metrics = latent_mode;
    long txt_terms = 0, txt_clipped = 0, lat_terms = 0, lat_clipped = 0;
    double dev_sum = 0.0, kl_sum = 0.0, surr_txt_sum = 0.0, surr_lat_sum = 0.0;
    std::vector<double> rewards;

    auto sample_by_index = [&](int idx) -> const SynthSample& {
        for (const SynthSample& s : samples) {
            if (s.index == idx) return s;
        }
        throw std::invalid_argument("assemble_step_loss: no sample with index " + std::to_string(idx));
    };

    int usable_groups = 0;
    for (const TrajectoryGroup& group : groups) {
        if (group.degenerate) continue;
        ++usable_groups;
        for (const RolloutRecord& rec : group.records) {
            rewards.push_back(rec.reward);
            ms.acc_mean += rec.acc_reward;
            ms.fmt_mean += rec.fmt_reward;
            const SynthSample& s = sample_by_index(rec.sample_index);
            RecordTerms terms = record_terms(policy, ref, s, rec, cfg, tape, latent_mode);

            Tensor obj;
            bool have_obj = false;
            auto add_clipped = [&](const Tensor& r, bool is_text) {
                Tensor unclipped = scale(r, rec.advantage, tape);
                Tensor clipped = scale(clip(r, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps, tape), rec.advantage, tape);
                Tensor term = min_scalar(unclipped, clipped, tape);
                obj = have_obj ? add(obj, term, tape) : term;
                have_obj = true;
                const bool outside = std::fabs(r.value() - 1.0) > cfg.clip_eps;
                if (is_text) {
                    ++txt_terms;
                    txt_clipped += outside ? 1 : 0;
                    surr_txt_sum += term.value();
                } else {
                    ++lat_terms;
                    lat_clipped += outside ? 1 : 0;
                    surr_lat_sum += term.value();
                }
            };
            for (const Tensor& r : terms.text_ratios) add_clipped(r, true);
            for (const Tensor& r : terms.latent_ratios) add_clipped(r, false);
            for (double dv : terms.deviations) dev_sum += dv;

            Tensor obj_total = have_obj ? obj : Tensor::scalar(0.0);
            Tensor with_kl = sub(obj_total, scale(terms.kl_mean, cfg.kl_beta, tape), tape);
            kl_sum += terms.kl_mean.value();
            total = (n_records == 0) ? with_kl : add(total, with_kl, tape);
            ++n_records;
        }
    }
    if (usable_groups == 0) throw std::invalid_argument("assemble_step_loss: no non-degenerate groups");
    if (n_records == 0) throw std::invalid_argument("assemble_step_loss: no records");

    // maximize the mean objective == minimize its negation
    StepLoss out;
    out.loss = scale(total, -1.0 / static_cast<double>(n_records), tape);

    double mean = 0.0, var = 0.0;
    for (double r : rewards) mean += r;
    mean /= rewards.size();
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= rewards.size();
    ms.reward_mean = mean;
    ms.reward_std = std::sqrt(var);
    ms.acc_mean /= n_records;
    ms.fmt_mean /= n_records;
    ms.kl = kl_sum / n_records;
    ms.clip_frac_txt = txt_terms ? static_cast<double>(txt_clipped) / txt_terms : 0.0;
    ms.clip_frac_lat = lat_terms ? static_cast<double>(lat_clipped) / lat_terms : 0.0;
    ms.mean_d = lat_terms ? dev_sum / lat_terms : 0.0;
    ms.loss = out.loss.value();
    ms.surr_txt = surr_txt_sum / n_records;
    ms.surr_lat = surr_lat_sum / n_records;
    out.metrics = ms;
    return out;
}

// One optimization step over sampled groups. Advantages must already be
// normalized. Returns the step metrics; a non-finite loss skips the update.
inline VlpoStepMetrics vlpo_step(Model& policy, const Model& ref, const std::vector<TrajectoryGroup>& groups,
                                 const std::vector<SynthSample>& samples, const VlpoConfig& cfg, AdamW& opt) {
    Tape tape;
    StepLoss sl = assemble_step_loss(policy, ref, groups, samples, cfg, &tape);
    if (!std::isfinite(sl.loss.value())) {
        std::cerr << "vlpo_step: non-finite loss, step skipped\n";
        sl.metrics.step_skipped = true;
        return sl.metrics;
    }
    policy.params.zero_grads();
    tape.backward(sl.loss);
    if (!opt.step(policy.params)) sl.metrics.step_skipped = true;
    return sl.metrics;
}

// Rollout store: one JSON record per line.

inline json rollout_to_json(const RolloutRecord& rec) {
    json js;
    js["sample_index"] = rec.sample_index;
    js["reward"] = rec.reward;
    js["acc_reward"] = rec.acc_reward;
    js["fmt_reward"] = rec.fmt_reward;
    js["advantage"] = rec.advantage;
    js["decode"] = decode_to_json(rec.decode);
    return js;
}

inline RolloutRecord rollout_from_json(const json& js) {
    RolloutRecord rec;
    rec.sample_index = js.at("sample_index");
    rec.reward = js.at("reward");
    rec.acc_reward = js.at("acc_reward");
    rec.fmt_reward = js.at("fmt_reward");
    rec.advantage = js.at("advantage");
    rec.decode = decode_from_json(js.at("decode"));
    return rec;
}

inline void write_rollouts(const std::string& path, const std::vector<TrajectoryGroup>& groups) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_rollouts: cannot open " + path);
    for (const TrajectoryGroup& g : groups) {
        for (const RolloutRecord& r : g.records) out << rollout_to_json(r).dump() << "\n";
    }
}

inline std::vector<RolloutRecord> read_rollouts(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_rollouts: cannot open " + path);
    std::vector<RolloutRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(rollout_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error("read_rollouts: " + path + " line " + std::to_string(line_no) + ": " +
                                     e.what());
        }
    }
    return out;
}

}  // namespace lvr
