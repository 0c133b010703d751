#pragma once

// Line-based `key = value` configuration with dotted section keys. Unknown
// keys are rejected so typos surface immediately.

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "lvr/model.hpp"
#include "lvr/synth.hpp"
#include "lvr/vlpo.hpp"

namespace lvr {

struct SftConfig {
    int epochs = 20;
    int batch_size = 16;
    double lr = 1e-3;
    double lambda = 1.0;
    int eval_samples = 200;  // per-epoch eval subset; 0 means the full test set
    int max_answer_len = 4;
};

struct VlpoTrainConfig {
    int steps = 300;
    double lr = 1e-4;
    int inputs_per_step = 2;
    VlpoConfig rl;
    double kl_ceiling = 1.0;        // advisory ceiling reported against mean KL
    std::string rollout_store;      // optional JSONL path for sampled rollouts
};

struct TrainConfig {
    ModelConfig model;
    TaskConfig task;
    SftConfig sft;
    VlpoTrainConfig vlpo;
    int k = 8;
    uint64_t seed = 1234;
    std::string out_dir = "runs/default";

    // Geometry and vocabulary come from the task; the model mirrors them.
    TrainConfig resolved() const {
        TrainConfig c = *this;
        c.model.image_side = c.task.image_side;
        c.model.patch_size = c.task.patch_size;
        c.model.init_seed = derive_seed(c.seed, 0x6d6f64656cull);
        c.task.master_seed = c.seed;
        c.task.validate();
        Vocabulary vocab{c.task.alphabet};
        ModelConfig probe = c.model;
        probe.vocab_size = vocab.size();
        probe.validate();
        c.vlpo.rl.validate();
        if (c.k < 1) throw std::invalid_argument("config: k must be >= 1");
        return c;
    }

    Vocabulary vocabulary() const { return Vocabulary{task.alphabet}; }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline TrainConfig parse_config_text(std::istream& in, const std::string& origin) {
    TrainConfig cfg;
    std::map<std::string, std::function<void(const std::string&)>> setters;
    auto set_int = [](int& dst) {
        return [&dst](const std::string& v) { dst = std::stoi(v); };
    };
    auto set_u64 = [](uint64_t& dst) {
        return [&dst](const std::string& v) { dst = std::stoull(v); };
    };
    auto set_double = [](double& dst) {
        return [&dst](const std::string& v) { dst = std::stod(v); };
    };
    auto set_bool = [](bool& dst) {
        return [&dst](const std::string& v) {
            if (v == "true" || v == "1" || v == "on") dst = true;
            else if (v == "false" || v == "0" || v == "off") dst = false;
            else throw std::invalid_argument("expected boolean, got '" + v + "'");
        };
    };
    auto set_string = [](std::string& dst) {
        return [&dst](const std::string& v) { dst = v; };
    };

    setters["model.embed_dim"] = set_int(cfg.model.embed_dim);
    setters["model.num_layers"] = set_int(cfg.model.num_layers);
    setters["model.num_heads"] = set_int(cfg.model.num_heads);
    setters["model.max_positions"] = set_int(cfg.model.max_positions);
    setters["model.rescale_latent_inputs"] = set_bool(cfg.model.rescale_latent_inputs);

    setters["task.image_side"] = set_int(cfg.task.image_side);
    setters["task.patch_size"] = set_int(cfg.task.patch_size);
    setters["task.alphabet"] = set_int(cfg.task.alphabet);
    setters["task.min_distractors"] = set_int(cfg.task.min_distractors);
    setters["task.max_distractors"] = set_int(cfg.task.max_distractors);
    setters["task.train_count"] = set_int(cfg.task.train_count);
    setters["task.test_count"] = set_int(cfg.task.test_count);
    setters["task.pixel_noise"] = set_double(cfg.task.pixel_noise);
    setters["task.marker_intensity"] = set_double(cfg.task.marker_intensity);

    setters["sft.epochs"] = set_int(cfg.sft.epochs);
    setters["sft.batch_size"] = set_int(cfg.sft.batch_size);
    setters["sft.lr"] = set_double(cfg.sft.lr);
    setters["sft.lambda"] = set_double(cfg.sft.lambda);
    setters["sft.eval_samples"] = set_int(cfg.sft.eval_samples);
    setters["sft.max_answer_len"] = set_int(cfg.sft.max_answer_len);

    setters["vlpo.steps"] = set_int(cfg.vlpo.steps);
    setters["vlpo.lr"] = set_double(cfg.vlpo.lr);
    setters["vlpo.inputs_per_step"] = set_int(cfg.vlpo.inputs_per_step);
    setters["vlpo.group_size"] = set_int(cfg.vlpo.rl.group_size);
    setters["vlpo.clip_eps"] = set_double(cfg.vlpo.rl.clip_eps);
    setters["vlpo.adv_eps"] = set_double(cfg.vlpo.rl.adv_eps);
    setters["vlpo.sigma"] = set_double(cfg.vlpo.rl.sigma);
    setters["vlpo.beta"] = set_double(cfg.vlpo.rl.kl_beta);
    setters["vlpo.temperature"] = set_double(cfg.vlpo.rl.temperature);
    setters["vlpo.max_answer_len"] = set_int(cfg.vlpo.rl.max_answer_len);
    setters["vlpo.max_prelatent"] = set_int(cfg.vlpo.rl.max_prelatent);
    setters["vlpo.kl_ceiling"] = set_double(cfg.vlpo.kl_ceiling);
    setters["vlpo.rollout_store"] = set_string(cfg.vlpo.rollout_store);
    setters["vlpo.mode"] = [&cfg](const std::string& v) {
        if (v == "vlpo") cfg.vlpo.rl.mode = RlMode::vlpo;
        else if (v == "grpo") cfg.vlpo.rl.mode = RlMode::grpo;
        else throw std::invalid_argument("vlpo.mode must be 'vlpo' or 'grpo', got '" + v + "'");
    };

    setters["k"] = set_int(cfg.k);
    setters["seed"] = set_u64(cfg.seed);
    setters["out"] = set_string(cfg.out_dir);

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(origin + " line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end()) {
            throw std::invalid_argument(origin + " line " + std::to_string(line_no) + ": unknown key '" + key +
                                        "'");
        }
        try {
            it->second(value);
        } catch (const std::exception& e) {
            throw std::invalid_argument(origin + " line " + std::to_string(line_no) + ": bad value for '" + key +
                                        "': " + e.what());
        }
    }
    return cfg;
}

inline TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    return parse_config_text(in, path);
}

}  // namespace lvr
