// Command-line entry points: data generation, both training stages,
// evaluation, the latent-budget sweep, the attention diagnostic, and the
// end-to-end gradient check.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lvr/train.hpp"

namespace fs = std::filesystem;
using namespace lvr;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
};

TrainConfig load_config(const CommonOpts& opts) {
    TrainConfig cfg = opts.config_path.empty() ? TrainConfig{} : parse_config_file(opts.config_path);
    if (opts.seed_set) cfg.seed = opts.seed;
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "key = value configuration file");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "master seed override")->each([&](const std::string&) {
        opts.seed_set = true;
    });
}

std::string train_path(const TrainConfig& cfg) { return cfg.out_dir + "/train.jsonl"; }
std::string test_path(const TrainConfig& cfg) { return cfg.out_dir + "/test.jsonl"; }

int cmd_gen_data(const CommonOpts& opts, bool overwrite) {
    TrainConfig cfg = load_config(opts).resolved();
    fs::create_directories(cfg.out_dir);
    for (const std::string& p : {train_path(cfg), test_path(cfg)}) {
        if (fs::exists(p) && !overwrite) {
            throw std::runtime_error("refusing to overwrite existing " + p + " (pass --overwrite)");
        }
    }
    const Vocabulary vocab = cfg.vocabulary();
    write_dataset(train_path(cfg), generate_dataset(cfg.task, derive_seed(cfg.seed, 0x747261696eull),
                                                    cfg.task.train_count, vocab));
    write_dataset(test_path(cfg), generate_dataset(cfg.task, derive_seed(cfg.seed, 0x74657374ull),
                                                   cfg.task.test_count, vocab));
    std::cout << "wrote " << cfg.task.train_count << " train and " << cfg.task.test_count << " test samples to "
              << cfg.out_dir << "\n";
    return 0;
}

int cmd_train_sft(const CommonOpts& opts, const std::string& train_file, const std::string& test_file) {
    TrainConfig cfg = load_config(opts).resolved();
    fs::create_directories(cfg.out_dir);
    const std::string train_p = train_file.empty() ? train_path(cfg) : train_file;
    const std::string test_p = test_file.empty() ? test_path(cfg) : test_file;
    auto train = read_dataset(train_p);
    auto test = read_dataset(test_p);
    if (train.empty()) throw std::runtime_error("training set " + train_p + " is empty (run gen-data first)");
    std::ofstream metrics(cfg.out_dir + "/sft_metrics.jsonl", std::ios::binary);
    SftResult res = train_sft(cfg, train, test, &metrics, cfg.out_dir + "/sft_checkpoint.json");
    json report = {{"accuracy", res.final_eval.accuracy},
                   {"format_rate", res.final_eval.format_rate},
                   {"mean_tokens", res.final_eval.mean_answer_len},
                   {"wall_time", res.final_eval.wall_seconds}};
    std::cout << report.dump() << "\n";
    return 0;
}

int cmd_train_vlpo(const CommonOpts& opts, std::string init_path, const std::string& mode,
                   const std::string& train_file) {
    TrainConfig cfg = load_config(opts).resolved();
    if (mode == "grpo") cfg.vlpo.rl.mode = RlMode::grpo;
    else if (mode == "vlpo") cfg.vlpo.rl.mode = RlMode::vlpo;
    else if (!mode.empty()) throw std::runtime_error("unknown mode '" + mode + "' (use vlpo or grpo)");
    fs::create_directories(cfg.out_dir);
    if (init_path.empty()) init_path = cfg.out_dir + "/sft_checkpoint.json";
    Model init = load_checkpoint(init_path);
    auto train = read_dataset(train_file.empty() ? train_path(cfg) : train_file);
    if (train.empty()) throw std::runtime_error("training set is empty (run gen-data first)");
    std::ofstream metrics(cfg.out_dir + "/vlpo_metrics.jsonl", std::ios::binary);
    VlpoTrainResult res = train_vlpo(cfg, init, train, &metrics);
    save_checkpoint(res.model, cfg.out_dir + "/vlpo_checkpoint.json");
    double last_acc = res.metrics.empty() ? 0.0 : res.metrics.back().acc_mean;
    std::cout << json{{"steps", cfg.vlpo.steps}, {"final_acc_reward", last_acc}}.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, int k, const std::string& force_latent,
             int max_answer) {
    Model m = load_checkpoint(ckpt);
    auto data = read_dataset(data_path);
    EvalReport rep;
    if (force_latent == "on") {
        Rng rng(0);
        rep = evaluate_with(
            [&](const SynthSample& s) {
                MixedSequence x0 = m.context_for_image(s.image, nullptr);
                return decode_with_latent(m, x0, k, 0.0, max_answer, rng, true);
            },
            data);
    } else if (force_latent == "off" || force_latent.empty()) {
        rep = evaluate(m, data, k, max_answer);
    } else {
        throw std::runtime_error("--force-latent takes 'on' or 'off'");
    }
    json report = {{"accuracy", rep.accuracy},
                   {"format_rate", rep.format_rate},
                   {"mean_tokens", rep.mean_answer_len},
                   {"wall_time", rep.wall_seconds}};
    std::cout << report.dump() << "\n";
    return 0;
}

int cmd_sweep_k(const std::string& ckpt, const std::string& data_path, const std::vector<int>& ks,
                int max_answer) {
    if (ks.empty()) throw std::runtime_error("sweep-k needs at least one --k value");
    Model m = load_checkpoint(ckpt);
    auto data = read_dataset(data_path);
    for (const SweepRow& row : sweep_k(m, data, ks, max_answer)) {
        std::cout << row.k << "\t" << row.accuracy << "\n";
    }
    return 0;
}

int cmd_attn_frac(const std::string& ckpt, const std::string& data_path, int k, int limit) {
    Model m = load_checkpoint(ckpt);
    auto data = read_dataset(data_path);
    if (limit > 0 && static_cast<int>(data.size()) > limit) data.resize(limit);
    std::vector<double> fr = attention_fractions(m, data, k);
    for (size_t l = 0; l < fr.size(); ++l) std::cout << l << "\t" << fr[l] << "\n";
    return 0;
}

int cmd_grad_check(const CommonOpts& opts, int coords) {
    TrainConfig cfg = load_config(opts);
    GradCheckSummary sum = run_grad_checks(cfg.seed, 1e-4, 1e-3, coords);
    auto line = [](const char* name, const GradCheckReport& r) {
        std::cout << name << ": " << (r.pass ? "pass" : "FAIL") << " max_rel_err=" << r.max_rel_err
                  << " worst=" << r.worst_param << "[" << r.worst_index << "]"
                  << " coords=" << r.coords_checked;
        if (!r.failure.empty()) std::cout << " failure=" << r.failure;
        std::cout << "\n";
    };
    line("sft_loss", sum.sft);
    line("vlpo_surrogate", sum.vlpo);
    return sum.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent visual reasoning on a synthetic grounded-VQA task"};
    app.require_subcommand(1);

    CommonOpts gen_opts, sft_opts, vlpo_opts, gc_opts;
    bool overwrite = false;
    std::string train_file, test_file, vlpo_train_file;
    std::string init_ckpt, mode;
    std::string eval_ckpt, eval_data, force_latent;
    int eval_k = 8, max_answer = 4;
    std::string sweep_ckpt, sweep_data;
    std::vector<int> sweep_ks;
    std::string attn_ckpt, attn_data;
    int attn_k = 8, attn_limit = 50;
    int gc_coords = 6;

    CLI::App* gen = app.add_subcommand("gen-data", "generate train/test dataset files");
    add_common(gen, gen_opts);
    gen->add_flag("--overwrite", overwrite, "replace existing dataset files");

    CLI::App* sft = app.add_subcommand("train-sft", "Stage-1 supervised fine-tuning");
    add_common(sft, sft_opts);
    sft->add_option("--train-file", train_file, "training dataset (default <out>/train.jsonl)");
    sft->add_option("--test-file", test_file, "test dataset (default <out>/test.jsonl)");

    CLI::App* vlpo = app.add_subcommand("train-vlpo", "Stage-2 policy optimization");
    add_common(vlpo, vlpo_opts);
    vlpo->add_option("--init", init_ckpt, "initial checkpoint (default <out>/sft_checkpoint.json)");
    vlpo->add_option("--mode", mode, "vlpo (default) or grpo");
    vlpo->add_option("--train-file", vlpo_train_file, "training dataset (default <out>/train.jsonl)");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    ev->add_option("--data", eval_data, "dataset file")->required();
    ev->add_option("--k", eval_k, "latent budget at inference");
    ev->add_option("--force-latent", force_latent, "on|off (default off)");
    ev->add_option("--max-answer", max_answer, "answer-length cap");

    CLI::App* sweep = app.add_subcommand("sweep-k", "accuracy across inference latent budgets");
    sweep->add_option("--checkpoint", sweep_ckpt, "model checkpoint")->required();
    sweep->add_option("--data", sweep_data, "dataset file")->required();
    sweep->add_option("--k", sweep_ks, "latent budget (repeatable)")->required();

    CLI::App* attn = app.add_subcommand("attn-frac", "per-layer visual-attention fractions");
    attn->add_option("--checkpoint", attn_ckpt, "model checkpoint")->required();
    attn->add_option("--data", attn_data, "dataset file")->required();
    attn->add_option("--k", attn_k, "latent budget");
    attn->add_option("--limit", attn_limit, "max samples to trace");

    CLI::App* gc = app.add_subcommand("grad-check", "finite-difference check of both training objectives");
    add_common(gc, gc_opts);
    gc->add_option("--coords", gc_coords, "coordinates checked per tensor");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_opts, overwrite);
        if (sft->parsed()) return cmd_train_sft(sft_opts, train_file, test_file);
        if (vlpo->parsed()) return cmd_train_vlpo(vlpo_opts, init_ckpt, mode, vlpo_train_file);
        if (ev->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_k, force_latent, max_answer);
        if (sweep->parsed()) return cmd_sweep_k(sweep_ckpt, sweep_data, sweep_ks, max_answer);
        if (attn->parsed()) return cmd_attn_frac(attn_ckpt, attn_data, attn_k, attn_limit);
        if (gc->parsed()) return cmd_grad_check(gc_opts, gc_coords);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
