#pragma once

// A tiny multimodal causal decoder over mixed discrete/continuous sequences:
// a linear patch embedder with a projector into the decoder embedding space,
// pre-norm self-attention blocks, and a token head. The forward pass is
// incremental: positions are appended one at a time against cached per-layer
// key/value rows, so a position's values never depend on how much of the
// sequence is processed afterwards. That makes causality, prefix consistency,
// and decode/replay bitwise agreement structural properties rather than
// things to verify numerically.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lvr/param_store.hpp"
#include "lvr/rng.hpp"
#include "lvr/tensor.hpp"
#include "lvr/vocab.hpp"

namespace lvr {

struct ModelConfig {
    int embed_dim = 32;
    int num_layers = 2;
    int num_heads = 2;
    int vocab_size = 0;  // filled from the Vocabulary at init
    int patch_size = 7;
    int image_side = 56;
    int max_positions = 128;
    uint64_t init_seed = 42;
    // Rescale fed-back latent inputs to the mean embedding norm. Off by
    // default: hidden states are reused directly.
    bool rescale_latent_inputs = false;

    int head_dim() const { return embed_dim / num_heads; }
    int grid_side() const { return image_side / patch_size; }
    int num_patches() const { return grid_side() * grid_side(); }

    void validate() const {
        if (embed_dim <= 0 || num_layers <= 0 || num_heads <= 0) {
            throw std::invalid_argument("ModelConfig: dimensions must be positive");
        }
        if (embed_dim % num_heads != 0) {
            throw std::invalid_argument("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                                        " not divisible by num_heads " + std::to_string(num_heads));
        }
        if (patch_size <= 0 || image_side % patch_size != 0) {
            throw std::invalid_argument("ModelConfig: image side " + std::to_string(image_side) +
                                        " not divisible by patch size " + std::to_string(patch_size));
        }
        if (max_positions <= 0) throw std::invalid_argument("ModelConfig: max_positions must be positive");
    }
};

// One element of a MixedSequence: either a token id or a d-vector.
struct MixedElement {
    int token = -1;
    Tensor embedding;

    bool is_token() const { return token >= 0; }

    static MixedElement tok(int id) {
        if (id < 0) throw std::invalid_argument("MixedElement: negative token id");
        MixedElement e;
        e.token = id;
        return e;
    }

    static MixedElement embed(Tensor t) {
        MixedElement e;
        e.embedding = std::move(t);
        return e;
    }
};

using MixedSequence = std::vector<MixedElement>;

// Head-averaged attention weights per appended position, for the
// visual-attention diagnostic.
struct AttnTrace {
    int num_layers = 0;
    int num_heads = 0;
    // probs[pos][layer][source]
    std::vector<std::vector<std::vector<double>>> probs;

    void start_position(int pos_len) {
        probs.emplace_back(num_layers, std::vector<double>(pos_len, 0.0));
    }

    void add(int layer, const std::vector<double>& p) {
        auto& row = probs.back()[layer];
        for (size_t i = 0; i < p.size(); ++i) row[i] += p[i] / num_heads;
    }
};

struct ForwardOutput {
    std::vector<Tensor> hiddens;  // last-layer state per position, 1 x d
    std::vector<Tensor> logits;   // per position, 1 x vocab
};

struct TokenDraw {
    int id = -1;
    double prob = 1.0;  // probability of the drawn token under the decode policy
};

class Model;

// Incremental forward state over one sequence. Appending an element runs the
// block stack for exactly one position.
class SequenceRun {
public:
    SequenceRun(const Model& model, Tape* tape, AttnTrace* trace = nullptr);

    int append(const MixedElement& elem);

    int length() const { return static_cast<int>(hiddens_.size()); }
    const Tensor& hidden(int pos) const { return hiddens_.at(pos); }
    const Tensor& logits(int pos) const { return logits_.at(pos); }

private:
    const Model& model_;
    Tape* tape_;
    AttnTrace* trace_;
    std::vector<std::vector<std::vector<Tensor>>> keys_;    // [layer][head][pos]
    std::vector<std::vector<std::vector<Tensor>>> values_;  // [layer][head][pos]
    std::vector<Tensor> hiddens_;
    std::vector<Tensor> logits_;
};

class Model {
public:
    static constexpr double ln_eps = 1e-5;

    ModelConfig cfg;
    Vocabulary vocab;
    ParamStore params;

    struct HeadParams {
        Tensor wq, wk, wv, wo;
    };
    struct LayerParams {
        std::vector<HeadParams> heads;
        Tensor fc1_w, fc1_b, fc2_w, fc2_b;
    };
    // Cached handles into `params`; they share storage, so in-place updates
    // through the optimizer are visible here.
    Tensor patch_w, patch_b, proj_w, proj_b, tok_embed, pos_embed, head_w, head_b;
    std::vector<LayerParams> layers;

    Model() = default;

    static Model init(ModelConfig cfg, const Vocabulary& vocab) {
        cfg.vocab_size = vocab.size();
        cfg.validate();
        Model m;
        m.cfg = cfg;
        m.vocab = vocab;
        Rng rng(cfg.init_seed);
        const int d = cfg.embed_dim;
        const int hd = cfg.head_dim();
        const int p2 = cfg.patch_size * cfg.patch_size;

        m.params.add("vision.patch.w", uniform_init({p2, d}, p2, rng));
        m.params.add("vision.patch.b", Tensor::zeros({1, d}));
        m.params.add("vision.proj.w", uniform_init({d, d}, d, rng));
        m.params.add("vision.proj.b", Tensor::zeros({1, d}));
        m.params.add("tok_embed", uniform_init({cfg.vocab_size, d}, d, rng));
        m.params.add("pos_embed", uniform_init({cfg.max_positions, d}, d, rng));
        for (int l = 0; l < cfg.num_layers; ++l) {
            const std::string lp = "layers." + std::to_string(l) + ".";
            for (int h = 0; h < cfg.num_heads; ++h) {
                const std::string hp = lp + "attn.h" + std::to_string(h) + ".";
                m.params.add(hp + "wq", uniform_init({d, hd}, d, rng));
                m.params.add(hp + "wk", uniform_init({d, hd}, d, rng));
                m.params.add(hp + "wv", uniform_init({d, hd}, d, rng));
                m.params.add(hp + "wo", uniform_init({hd, d}, hd, rng));
            }
            m.params.add(lp + "mlp.fc1.w", uniform_init({d, 4 * d}, d, rng));
            m.params.add(lp + "mlp.fc1.b", Tensor::zeros({1, 4 * d}));
            m.params.add(lp + "mlp.fc2.w", uniform_init({4 * d, d}, 4 * d, rng));
            m.params.add(lp + "mlp.fc2.b", Tensor::zeros({1, d}));
        }
        m.params.add("head.w", uniform_init({d, cfg.vocab_size}, d, rng));
        m.params.add("head.b", Tensor::zeros({1, cfg.vocab_size}));
        m.cache_handles();
        return m;
    }

    // Deep copy with independent parameters.
    Model clone() const {
        Model m;
        m.cfg = cfg;
        m.vocab = vocab;
        m.params = params.clone();
        m.cache_handles();
        return m;
    }

    void freeze_visual_pathway(bool frozen = true) { params.set_frozen("vision.", frozen); }

    // Maps a grayscale image (row-major, image_side^2 values) to one
    // projected d-vector per patch cell, in row-major patch order. Token j
    // covers pixel rows [ (j/grid)*P, ... ) and columns [ (j%grid)*P, ... ).
    std::vector<Tensor> embed_patches(const std::vector<double>& image, Tape* tape) const {
        const int side = cfg.image_side;
        const int P = cfg.patch_size;
        if (static_cast<int>(image.size()) != side * side) {
            throw std::invalid_argument("embed_patches: image has " + std::to_string(image.size()) +
                                        " pixels, expected " + std::to_string(side * side));
        }
        if (side % P != 0) throw std::invalid_argument("embed_patches: image side not divisible by patch size");
        const int g = cfg.grid_side();
        std::vector<Tensor> out;
        out.reserve(cfg.num_patches());
        for (int pr = 0; pr < g; ++pr) {
            for (int pc = 0; pc < g; ++pc) {
                Tensor px = Tensor::zeros({1, P * P});
                for (int r = 0; r < P; ++r) {
                    for (int c = 0; c < P; ++c) {
                        px.at(0, r * P + c) = image[static_cast<size_t>(pr * P + r) * side + pc * P + c];
                    }
                }
                Tensor v = add_row(matmul(px, patch_w, tape), patch_b, tape);
                out.push_back(add_row(matmul(v, proj_w, tape), proj_b, tape));
            }
        }
        return out;
    }

    // Unified context: visual embeddings first, then the question token ids.
    MixedSequence build_context(const std::vector<Tensor>& visual, const std::vector<int>& question) const {
        if (question.empty()) throw std::invalid_argument("build_context: question must be nonempty");
        MixedSequence seq;
        seq.reserve(visual.size() + question.size());
        for (const Tensor& v : visual) seq.push_back(MixedElement::embed(v));
        for (int id : question) seq.push_back(MixedElement::tok(id));
        return seq;
    }

    MixedSequence context_for_image(const std::vector<double>& image, Tape* tape) const {
        return build_context(embed_patches(image, tape), vocab.question_tokens());
    }

    ForwardOutput forward(const MixedSequence& seq, Tape* tape, AttnTrace* trace = nullptr) const {
        SequenceRun run(*this, tape, trace);
        ForwardOutput out;
        for (const MixedElement& e : seq) {
            run.append(e);
            out.hiddens.push_back(run.hidden(run.length() - 1));
            out.logits.push_back(run.logits(run.length() - 1));
        }
        return out;
    }

    // Mean Euclidean norm of the token-embedding rows; the optional rescaling
    // of fed-back latent states targets this value.
    double mean_embedding_norm() const {
        const int d = cfg.embed_dim;
        double acc = 0.0;
        for (int i = 0; i < cfg.vocab_size; ++i) {
            double sq = 0.0;
            for (int j = 0; j < d; ++j) sq += tok_embed.at(i, j) * tok_embed.at(i, j);
            acc += std::sqrt(sq);
        }
        return acc / cfg.vocab_size;
    }

    void cache_handles() {
        patch_w = params.find("vision.patch.w");
        patch_b = params.find("vision.patch.b");
        proj_w = params.find("vision.proj.w");
        proj_b = params.find("vision.proj.b");
        tok_embed = params.find("tok_embed");
        pos_embed = params.find("pos_embed");
        head_w = params.find("head.w");
        head_b = params.find("head.b");
        layers.clear();
        for (int l = 0; l < cfg.num_layers; ++l) {
            const std::string lp = "layers." + std::to_string(l) + ".";
            LayerParams layer;
            for (int h = 0; h < cfg.num_heads; ++h) {
                const std::string hp = lp + "attn.h" + std::to_string(h) + ".";
                layer.heads.push_back({params.find(hp + "wq"), params.find(hp + "wk"), params.find(hp + "wv"),
                                       params.find(hp + "wo")});
            }
            layer.fc1_w = params.find(lp + "mlp.fc1.w");
            layer.fc1_b = params.find(lp + "mlp.fc1.b");
            layer.fc2_w = params.find(lp + "mlp.fc2.w");
            layer.fc2_b = params.find(lp + "mlp.fc2.b");
            layers.push_back(std::move(layer));
        }
    }

private:
    static Tensor uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
        Tensor t = Tensor::zeros(std::move(shape));
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : *t.data) v = rng.uniform(-s, s);
        return t;
    }
};

inline SequenceRun::SequenceRun(const Model& model, Tape* tape, AttnTrace* trace)
    : model_(model), tape_(tape), trace_(trace) {
    keys_.assign(model.cfg.num_layers, std::vector<std::vector<Tensor>>(model.cfg.num_heads));
    values_.assign(model.cfg.num_layers, std::vector<std::vector<Tensor>>(model.cfg.num_heads));
    if (trace_) {
        trace_->num_layers = model.cfg.num_layers;
        trace_->num_heads = model.cfg.num_heads;
    }
}

inline int SequenceRun::append(const MixedElement& elem) {
    const int pos = length();
    if (pos >= model_.cfg.max_positions) {
        throw std::invalid_argument("SequenceRun: sequence length exceeds max positions " +
                                    std::to_string(model_.cfg.max_positions));
    }
    Tensor input;
    if (elem.is_token()) {
        if (elem.token >= model_.cfg.vocab_size) {
            throw std::invalid_argument("SequenceRun: token id " + std::to_string(elem.token) +
                                        " outside vocabulary");
        }
        input = embedding_rows(model_.tok_embed, {elem.token}, tape_);
    } else {
        if (static_cast<int>(elem.embedding.numel()) != model_.cfg.embed_dim) {
            throw std::invalid_argument("SequenceRun: embedding element has " +
                                        std::to_string(elem.embedding.numel()) + " components, expected " +
                                        std::to_string(model_.cfg.embed_dim));
        }
        input = elem.embedding;
    }
    Tensor x = add(input, embedding_rows(model_.pos_embed, {pos}, tape_), tape_);

    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(model_.cfg.head_dim()));
    if (trace_) trace_->start_position(pos + 1);
    for (int l = 0; l < model_.cfg.num_layers; ++l) {
        const Model::LayerParams& lay = model_.layers[l];
        Tensor xn = layer_norm_rows(x, Model::ln_eps, tape_);
        Tensor attn_out;
        for (int h = 0; h < model_.cfg.num_heads; ++h) {
            const Model::HeadParams& hp = lay.heads[h];
            Tensor q = matmul(xn, hp.wq, tape_);
            keys_[l][h].push_back(matmul(xn, hp.wk, tape_));
            values_[l][h].push_back(matmul(xn, hp.wv, tape_));
            std::vector<double> probs;
            Tensor ctx = attend(q, keys_[l][h], values_[l][h], attn_scale, tape_, trace_ ? &probs : nullptr);
            if (trace_) trace_->add(l, probs);
            Tensor o = matmul(ctx, hp.wo, tape_);
            attn_out = (h == 0) ? o : add(attn_out, o, tape_);
        }
        x = add(x, attn_out, tape_);
        Tensor xn2 = layer_norm_rows(x, Model::ln_eps, tape_);
        Tensor hmid = tanh(add_row(matmul(xn2, lay.fc1_w, tape_), lay.fc1_b, tape_), tape_);
        x = add(x, add_row(matmul(hmid, lay.fc2_w, tape_), lay.fc2_b, tape_), tape_);
    }
    hiddens_.push_back(x);
    logits_.push_back(
        add_row(matmul(layer_norm_rows(x, Model::ln_eps, tape_), model_.head_w, tape_), model_.head_b, tape_));
    return pos;
}

// Draws one token from a logits row. Temperature zero is argmax with the
// lowest id winning ties; otherwise the row is scaled by 1/temperature and
// sampled through the shared softmax.
inline TokenDraw sample_token(const Tensor& logits_row, double temperature, Rng& rng) {
    if (temperature < 0.0) throw std::invalid_argument("sample_token: temperature must be >= 0");
    const int n = static_cast<int>(logits_row.numel());
    if (n == 0) throw std::invalid_argument("sample_token: empty logits row");
    const double* lp = logits_row.ptr();
    if (temperature == 0.0) {
        int best = -1;
        double bv = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
            if (std::isfinite(lp[i]) && lp[i] > bv) {
                bv = lp[i];
                best = i;
            }
        }
        if (best < 0) throw std::invalid_argument("sample_token: no finite logit in row");
        return {best, 1.0};
    }
    std::vector<double> probs(lp, lp + n);
    const double inv = 1.0 / temperature;
    for (double& v : probs) v *= inv;
    softmax_row_inplace(probs.data(), n);
    const int id = categorical(probs, rng);
    return {id, probs[id]};
}

}  // namespace lvr
