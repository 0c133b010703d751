#pragma once

// Checkpoint and encoding helpers. Checkpoints are single-line JSON holding
// the config and every named parameter tensor; identical parameter values
// serialize to identical bytes. Latent vectors in rollout records are
// base64-encoded raw doubles so replay sees bit-exact values.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lvr/decode.hpp"
#include "lvr/model.hpp"

namespace lvr {

using json = nlohmann::ordered_json;

inline std::string base64_encode_doubles(const std::vector<double>& values) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::vector<unsigned char> bytes(values.size() * sizeof(double));
    std::memcpy(bytes.data(), values.data(), bytes.size());
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (size_t i = 0; i < bytes.size(); i += 3) {
        uint32_t chunk = static_cast<uint32_t>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) chunk |= static_cast<uint32_t>(bytes[i + 1]) << 8;
        if (i + 2 < bytes.size()) chunk |= bytes[i + 2];
        out.push_back(tbl[(chunk >> 18) & 63]);
        out.push_back(tbl[(chunk >> 12) & 63]);
        out.push_back(i + 1 < bytes.size() ? tbl[(chunk >> 6) & 63] : '=');
        out.push_back(i + 2 < bytes.size() ? tbl[chunk & 63] : '=');
    }
    return out;
}

inline std::vector<double> base64_decode_doubles(const std::string& s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw std::invalid_argument("base64: invalid character");
    };
    if (s.size() % 4 != 0) throw std::invalid_argument("base64: truncated input");
    std::vector<unsigned char> bytes;
    bytes.reserve(s.size() / 4 * 3);
    for (size_t i = 0; i < s.size(); i += 4) {
        const int a = val(s[i]), b = val(s[i + 1]), c = val(s[i + 2]), d = val(s[i + 3]);
        if (a < 0 || b < 0) throw std::invalid_argument("base64: malformed quartet");
        bytes.push_back(static_cast<unsigned char>((a << 2) | (b >> 4)));
        if (c >= 0) bytes.push_back(static_cast<unsigned char>(((b & 15) << 4) | (c >> 2)));
        if (d >= 0) bytes.push_back(static_cast<unsigned char>(((c & 3) << 6) | d));
    }
    if (bytes.size() % sizeof(double) != 0) throw std::invalid_argument("base64: payload is not whole doubles");
    std::vector<double> out(bytes.size() / sizeof(double));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

inline json decode_to_json(const DecodeResult& d) {
    json js;
    js["pre_latent"] = d.pre_latent;
    js["answer"] = d.answer;
    js["step_tokens"] = d.step_tokens;
    js["step_probs"] = d.step_probs;
    js["k"] = d.k;
    js["temperature"] = d.temperature;
    js["has_start"] = d.has_start;
    js["has_end"] = d.has_end;
    js["hit_eos"] = d.hit_eos;
    js["truncated"] = d.truncated;
    js["forced_start"] = d.forced_start;
    json lat = json::array();
    for (const auto& s : d.latents.states) lat.push_back(base64_encode_doubles(s));
    js["latents"] = std::move(lat);
    return js;
}

inline DecodeResult decode_from_json(const json& js) {
    DecodeResult d;
    d.pre_latent = js.at("pre_latent").get<std::vector<int>>();
    d.answer = js.at("answer").get<std::vector<int>>();
    d.step_tokens = js.at("step_tokens").get<std::vector<int>>();
    d.step_probs = js.at("step_probs").get<std::vector<double>>();
    d.k = js.at("k");
    d.temperature = js.at("temperature");
    d.has_start = js.at("has_start");
    d.has_end = js.at("has_end");
    d.hit_eos = js.at("hit_eos");
    d.truncated = js.at("truncated");
    d.forced_start = js.at("forced_start");
    for (const json& s : js.at("latents")) d.latents.states.push_back(base64_decode_doubles(s.get<std::string>()));
    if (d.has_end && !d.has_start) throw std::invalid_argument("decode_from_json: has_end without has_start");
    if (d.has_start != (d.latents.k() > 0)) {
        throw std::invalid_argument("decode_from_json: latent trajectory presence does not match has_start");
    }
    return d;
}

inline json checkpoint_to_json(const Model& m) {
    json js;
    js["format"] = "lvr-checkpoint-v1";
    js["model"] = {{"embed_dim", m.cfg.embed_dim},
                   {"num_layers", m.cfg.num_layers},
                   {"num_heads", m.cfg.num_heads},
                   {"vocab_size", m.cfg.vocab_size},
                   {"patch_size", m.cfg.patch_size},
                   {"image_side", m.cfg.image_side},
                   {"max_positions", m.cfg.max_positions},
                   {"init_seed", m.cfg.init_seed},
                   {"rescale_latent_inputs", m.cfg.rescale_latent_inputs}};
    js["vocab"] = {{"alphabet", m.vocab.alphabet}};
    json plist = json::array();
    for (const auto& e : m.params.entries()) {
        plist.push_back({{"name", e.name}, {"shape", e.tensor.shape}, {"data", *e.tensor.data}});
    }
    js["params"] = std::move(plist);
    return js;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << checkpoint_to_json(m).dump() << "\n";
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    json js;
    try {
        in >> js;
    } catch (const std::exception& e) {
        throw std::runtime_error("load_checkpoint: " + path + " is not valid JSON: " + e.what());
    }
    if (js.value("format", "") != "lvr-checkpoint-v1") {
        throw std::runtime_error("load_checkpoint: " + path + " has unknown format tag");
    }
    const json& mc = js.at("model");
    ModelConfig cfg;
    cfg.embed_dim = mc.at("embed_dim");
    cfg.num_layers = mc.at("num_layers");
    cfg.num_heads = mc.at("num_heads");
    cfg.patch_size = mc.at("patch_size");
    cfg.image_side = mc.at("image_side");
    cfg.max_positions = mc.at("max_positions");
    cfg.init_seed = mc.at("init_seed");
    cfg.rescale_latent_inputs = mc.at("rescale_latent_inputs");
    Vocabulary vocab;
    vocab.alphabet = js.at("vocab").at("alphabet");
    Model m = Model::init(cfg, vocab);
    if (m.cfg.vocab_size != mc.at("vocab_size").get<int>()) {
        throw std::runtime_error("load_checkpoint: vocab size mismatch in " + path);
    }
    size_t seen = 0;
    for (const json& p : js.at("params")) {
        const std::string name = p.at("name");
        Tensor t = m.params.find(name);
        const std::vector<int> shape = p.at("shape").get<std::vector<int>>();
        if (shape != t.shape) {
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name + " in " + path);
        }
        const std::vector<double> data = p.at("data").get<std::vector<double>>();
        if (data.size() != t.numel()) throw std::runtime_error("load_checkpoint: bad data length for " + name);
        *t.data = data;
        ++seen;
    }
    if (seen != m.params.entries().size()) {
        throw std::runtime_error("load_checkpoint: " + path + " is missing parameters");
    }
    return m;
}

}  // namespace lvr
