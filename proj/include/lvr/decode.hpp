#pragma once

// Latent-segment decoding and teacher-forced replay.
//
// Generation runs token-by-token until START_LATENT appears (or is forced),
// then switches to a fixed-budget rollout in which each last-layer hidden
// state is fed back as the next position's input embedding, appends
// END_LATENT deterministically, and resumes token sampling for the answer.
// The trajectory records exactly the K vectors that served as inputs at the
// K latent positions, so patching them back during replay reproduces the
// original computation bitwise at unchanged parameters.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "lvr/model.hpp"

namespace lvr {

struct LatentTrajectory {
    std::vector<std::vector<double>> states;  // K vectors of embed_dim values

    int k() const { return static_cast<int>(states.size()); }
};

struct DecodeResult {
    std::vector<int> pre_latent;      // token inputs before the latent segment, incl. START when present
    std::vector<int> answer;          // answer-span tokens (after END, or everything when no latent), excl. EOS
    std::vector<int> step_tokens;     // every sampled token in order
    std::vector<double> step_probs;   // probability of each sampled token under the decode policy
    LatentTrajectory latents;         // k() states iff has_start
    bool has_start = false;
    bool has_end = false;
    bool hit_eos = false;
    bool truncated = false;
    bool forced_start = false;        // START was placed by force_latent, not sampled
    int k = 0;
    double temperature = 0.0;
};

namespace detail {

inline Tensor latent_input(const Model& m, const Tensor& state, Tape* tape) {
    if (!m.cfg.rescale_latent_inputs) return state;
    double sq = 0.0;
    for (double v : *state.data) sq += v * v;
    const double norm = std::sqrt(sq);
    const double target = m.mean_embedding_norm();
    return scale(state, norm > 1e-12 ? target / norm : 1.0, tape);
}

inline Tensor const_row(const std::vector<double>& v) {
    return Tensor::from({1, static_cast<int>(v.size())}, v);
}

}  // namespace detail

// Rolls K latent steps on a run whose last position holds the START token.
// Returns the K fed-back states as tensor handles (tape-tracked when the run
// records one). Aborts with the step index if a state goes non-finite.
inline std::vector<Tensor> roll_latents(SequenceRun& run, const Model& m, int K, Tape* tape) {
    if (K < 1) throw std::invalid_argument("latent rollout: K must be >= 1");
    std::vector<Tensor> states;
    states.reserve(K);
    Tensor prev = run.hidden(run.length() - 1);
    for (int k = 1; k <= K; ++k) {
        if (!all_finite(prev)) {
            throw std::runtime_error("latent rollout diverged at step " + std::to_string(k));
        }
        states.push_back(prev);
        try {
            run.append(MixedElement::embed(detail::latent_input(m, prev, tape)));
        } catch (const std::invalid_argument& e) {
            // Overflow inside the block stack (e.g. an all-NaN attention row)
            // is a divergence of the segment, reported with its step index.
            throw std::runtime_error("latent rollout diverged at step " + std::to_string(k + 1) + ": " +
                                     e.what());
        }
        prev = run.hidden(run.length() - 1);
    }
    return states;
}

// The fixed-budget rollout as a standalone operation over a prefix that ends
// with the START_LATENT token element. Deterministic; no sampling.
inline LatentTrajectory latent_rollout(const Model& m, const MixedSequence& prefix, int K) {
    if (K < 1) throw std::invalid_argument("latent_rollout: K must be >= 1");
    if (prefix.empty() || !prefix.back().is_token() || prefix.back().token != m.vocab.start_latent()) {
        throw std::invalid_argument("latent_rollout: prefix must end with the START_LATENT token");
    }
    SequenceRun run(m, nullptr);
    for (const MixedElement& e : prefix) run.append(e);
    std::vector<Tensor> states = roll_latents(run, m, K, nullptr);
    LatentTrajectory traj;
    for (const Tensor& s : states) traj.states.push_back(*s.data);
    return traj;
}

// Autoregressive decoding with one optional latent segment.
inline DecodeResult decode_with_latent(const Model& m, const MixedSequence& x0, int K, double temperature,
                                       int max_answer_len, Rng& rng, bool force_latent,
                                       int max_prelatent = 8, AttnTrace* trace = nullptr) {
    if (max_answer_len < 1) throw std::invalid_argument("decode_with_latent: max_answer_len must be >= 1");
    if (K < 1) throw std::invalid_argument("decode_with_latent: K must be >= 1");
    DecodeResult res;
    res.k = K;
    res.temperature = temperature;

    SequenceRun run(m, nullptr, trace);
    for (const MixedElement& e : x0) run.append(e);
    int cursor = run.length() - 1;

    const int start_id = m.vocab.start_latent();
    const int eos_id = m.vocab.eos();

    std::vector<int> provisional;  // sampled tokens not yet assigned to a span
    bool entered_latent = false;
    if (force_latent) {
        res.pre_latent.push_back(start_id);
        res.forced_start = true;
        cursor = run.append(MixedElement::tok(start_id));
        entered_latent = true;
    } else {
        for (int step = 0; step < max_prelatent; ++step) {
            TokenDraw draw = sample_token(run.logits(cursor), temperature, rng);
            res.step_tokens.push_back(draw.id);
            res.step_probs.push_back(draw.prob);
            if (draw.id == start_id) {
                res.pre_latent = provisional;
                res.pre_latent.push_back(start_id);
                cursor = run.append(MixedElement::tok(start_id));
                entered_latent = true;
                break;
            }
            if (draw.id == eos_id) {
                res.hit_eos = true;
                res.answer = provisional;
                return res;
            }
            provisional.push_back(draw.id);
            cursor = run.append(MixedElement::tok(draw.id));
        }
        if (!entered_latent) {
            res.truncated = true;
            res.answer = provisional;
            return res;
        }
    }

    std::vector<Tensor> states = roll_latents(run, m, K, nullptr);
    for (const Tensor& s : states) res.latents.states.push_back(*s.data);
    res.has_start = true;
    cursor = run.append(MixedElement::tok(m.vocab.end_latent()));
    res.has_end = true;

    for (int step = 0; step < max_answer_len; ++step) {
        TokenDraw draw = sample_token(run.logits(cursor), temperature, rng);
        res.step_tokens.push_back(draw.id);
        res.step_probs.push_back(draw.prob);
        if (draw.id == eos_id) {
            res.hit_eos = true;
            return res;
        }
        res.answer.push_back(draw.id);
        cursor = run.append(MixedElement::tok(draw.id));
    }
    res.truncated = true;  // cap reached without EOS; not an error
    return res;
}

// Where each token of a generation sits relative to the latent segment, and
// which positions carry a sampled decision. Derivable from a DecodeResult;
// Stage-1 training builds one directly.
struct ReplayLayout {
    std::vector<int> pre_latent;  // ends with START when has_latent
    bool start_is_decision = true;
    bool has_latent = false;
    int k = 0;
    std::vector<int> answer;
    bool predict_eos = false;

    static ReplayLayout of(const DecodeResult& d) {
        ReplayLayout lay;
        lay.pre_latent = d.pre_latent;
        lay.start_is_decision = !d.forced_start;
        lay.has_latent = d.has_start;
        lay.k = d.k;
        lay.answer = d.answer;
        lay.predict_eos = d.hit_eos;
        return lay;
    }
};

struct TeacherForcedResult {
    std::vector<Tensor> decision_logits;  // logits row addressing each predicted token
    std::vector<int> decision_tokens;
    int answer_decision_begin = 0;        // decisions [begin, end) form the answer span
    std::vector<Tensor> latent_states;    // in-line mode: fed-back states h_k;
                                          // patched mode: current-policy states mu_k
    bool has_latent = false;
};

// Teacher-forced pass over [X0; pre-latent tokens; latent segment; END;
// answer tokens]. With `patched` set, the recorded trajectory is inserted at
// the latent positions and `latent_states` holds the states the current
// parameters produce under that replayed prefix; with `patched` null the
// latent segment is rolled out in-line and `latent_states` holds the
// fed-back states themselves.
inline TeacherForcedResult teacher_forced_forward(const Model& m, const MixedSequence& x0,
                                                  const ReplayLayout& lay,
                                                  const std::vector<std::vector<double>>* patched, Tape* tape,
                                                  AttnTrace* trace = nullptr) {
    if (lay.has_latent) {
        if (lay.pre_latent.empty() || lay.pre_latent.back() != m.vocab.start_latent()) {
            throw std::invalid_argument("teacher_forced_forward: latent layout must end pre-latent with START");
        }
        if (patched && static_cast<int>(patched->size()) != lay.k) {
            throw std::invalid_argument("teacher_forced_forward: patched trajectory has " +
                                        std::to_string(patched->size()) + " states, layout declares " +
                                        std::to_string(lay.k));
        }
    }
    // Control tokens inside the answer span are allowed here: sampled rollouts
    // may contain stray control tokens and replay must reproduce them.
    TeacherForcedResult res;
    res.has_latent = lay.has_latent;
    SequenceRun run(m, tape, trace);
    for (const MixedElement& e : x0) run.append(e);
    int cursor = run.length() - 1;

    for (size_t i = 0; i < lay.pre_latent.size(); ++i) {
        const bool is_start_slot = lay.has_latent && i + 1 == lay.pre_latent.size();
        if (!is_start_slot || lay.start_is_decision) {
            res.decision_logits.push_back(run.logits(cursor));
            res.decision_tokens.push_back(lay.pre_latent[i]);
        }
        cursor = run.append(MixedElement::tok(lay.pre_latent[i]));
    }

    if (lay.has_latent) {
        if (patched) {
            for (int k = 0; k < lay.k; ++k) {
                res.latent_states.push_back(run.hidden(cursor));  // mu_k under current parameters
                Tensor h = detail::const_row((*patched)[k]);
                cursor = run.append(MixedElement::embed(detail::latent_input(m, h, tape)));
            }
        } else {
            std::vector<Tensor> states = roll_latents(run, m, lay.k, tape);
            res.latent_states = std::move(states);
            cursor = run.length() - 1;
        }
        cursor = run.append(MixedElement::tok(m.vocab.end_latent()));
    }

    res.answer_decision_begin = static_cast<int>(res.decision_logits.size());
    for (int t : lay.answer) {
        res.decision_logits.push_back(run.logits(cursor));
        res.decision_tokens.push_back(t);
        cursor = run.append(MixedElement::tok(t));
    }
    if (lay.predict_eos) {
        res.decision_logits.push_back(run.logits(cursor));
        res.decision_tokens.push_back(m.vocab.eos());
    }
    return res;
}

// Probability of each decision token under the temperature-scaled policy,
// computed along the same arithmetic path as decode-time sampling so replay
// at unchanged parameters reproduces recorded probabilities bitwise.
inline std::vector<Tensor> decision_prob_tensors(const TeacherForcedResult& r, double temperature, Tape* tape) {
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("decision_prob_tensors: temperature must be positive");
    }
    const double inv = 1.0 / temperature;
    std::vector<Tensor> out;
    out.reserve(r.decision_logits.size());
    for (size_t i = 0; i < r.decision_logits.size(); ++i) {
        Tensor p = softmax_rows(scale(r.decision_logits[i], inv, tape), tape);
        out.push_back(pick(p, 0, r.decision_tokens[i], tape));
    }
    return out;
}

}  // namespace lvr
