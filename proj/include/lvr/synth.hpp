#pragma once

// Deterministic generator of grounded-VQA problems. Each image holds one
// target glyph inside a marked ROI and several distractor glyphs of other
// classes elsewhere; the marker rectangle is drawn into the image, so the
// answer is decidable from pixels alone but only by looking at the ROI.

#include <chrono>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lvr/decode.hpp"
#include "lvr/model.hpp"
#include "lvr/roi.hpp"

namespace lvr {

struct TaskConfig {
    int image_side = 56;
    int patch_size = 7;
    int alphabet = 8;
    int min_distractors = 2;
    int max_distractors = 4;
    int train_count = 2000;
    int test_count = 500;
    double pixel_noise = 0.0;       // optional uniform noise amplitude
    double marker_intensity = 0.5;  // contrast of the ROI outline; the subtlety dial
    uint64_t master_seed = 1234;

    int grid_side() const { return image_side / patch_size; }

    void validate() const {
        if (image_side <= 0 || patch_size <= 0 || image_side % patch_size != 0) {
            throw std::invalid_argument("TaskConfig: image side must be a positive multiple of patch size");
        }
        if (alphabet < 2 || alphabet > 8) throw std::invalid_argument("TaskConfig: alphabet must be in [2, 8]");
        if (min_distractors < 2 || max_distractors < min_distractors) {
            throw std::invalid_argument("TaskConfig: need at least two distractors and a valid range");
        }
        if (max_distractors > alphabet - 1) {
            throw std::invalid_argument("TaskConfig: distractor classes must be distinct and differ from target");
        }
        if (patch_size < 7) throw std::invalid_argument("TaskConfig: patch size must fit a 5x5 glyph plus border");
        if (!(marker_intensity > 0.0 && marker_intensity < 1.0)) {
            throw std::invalid_argument("TaskConfig: marker intensity must be in (0, 1) and below the glyph value");
        }
    }
};

struct SynthSample {
    std::vector<double> image;  // row-major, side*side values in [0, 1]
    int side = 0;
    RoiBox roi;
    std::vector<int> question;
    int answer = -1;  // glyph token id
    uint64_t master_seed = 0;
    int index = 0;
};

constexpr double glyph_intensity = 1.0;

// 5x5 bitmaps, one per glyph class.
inline const std::vector<std::string>& glyph_bitmaps() {
    static const std::vector<std::string> shapes = {
        "#####"
        "#...#"
        "#...#"
        "#...#"
        "#####",  // box
        "..#.."
        "..#.."
        "#####"
        "..#.."
        "..#..",  // plus
        "#...#"
        ".#.#."
        "..#.."
        ".#.#."
        "#...#",  // x
        "#####"
        "....."
        "#####"
        "....."
        "#####",  // bars
        "#.#.#"
        "#.#.#"
        "#.#.#"
        "#.#.#"
        "#.#.#",  // pillars
        "..#.."
        ".#.#."
        "#...#"
        ".#.#."
        "..#..",  // diamond
        "#...."
        "#...."
        "#...."
        "#...."
        "#####",  // corner
        "#.#.#"
        ".#.#."
        "#.#.#"
        ".#.#."
        "#.#.#",  // checker
    };
    return shapes;
}

namespace detail {

inline void stamp_glyph(std::vector<double>& image, int side, int cell, int grid, int patch, int cls) {
    const std::string& bm = glyph_bitmaps()[cls];
    const int r0 = (cell / grid) * patch + 1;
    const int c0 = (cell % grid) * patch + 1;
    for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < 5; ++c) {
            if (bm[r * 5 + c] == '#') image[static_cast<size_t>(r0 + r) * side + c0 + c] = glyph_intensity;
        }
    }
}

// The visible marker is the ROI box outline, drawn at a distinct intensity
// just inside the box. With a nonzero margin the outline falls outside the
// target cell, so locating the marked cell takes genuinely relational
// reading of the surrounding fragments rather than a single-patch feature.
inline void draw_marker(std::vector<double>& image, int side, const RoiBox& b, double intensity) {
    for (int x = b.x0; x < b.x1; ++x) {
        image[static_cast<size_t>(b.y0) * side + x] = intensity;
        image[static_cast<size_t>(b.y1 - 1) * side + x] = intensity;
    }
    for (int y = b.y0; y < b.y1; ++y) {
        image[static_cast<size_t>(y) * side + b.x0] = intensity;
        image[static_cast<size_t>(y) * side + b.x1 - 1] = intensity;
    }
}

inline bool cell_intersects(const RoiBox& b, int cell, int grid, int patch) {
    const int cx0 = (cell % grid) * patch, cy0 = (cell / grid) * patch;
    return cx0 < b.x1 && b.x0 < cx0 + patch && cy0 < b.y1 && b.y0 < cy0 + patch;
}

}  // namespace detail

inline SynthSample generate_sample(const TaskConfig& cfg, uint64_t master_seed, int index,
                                   const Vocabulary& vocab) {
    cfg.validate();
    if (vocab.alphabet != cfg.alphabet) throw std::invalid_argument("generate_sample: vocab/alphabet mismatch");
    const int side = cfg.image_side, patch = cfg.patch_size, grid = cfg.grid_side();
    for (int attempt = 0; attempt < 8; ++attempt) {
        Rng rng(derive_seed(master_seed, static_cast<uint64_t>(index), static_cast<uint64_t>(attempt)));
        SynthSample s;
        s.side = side;
        s.master_seed = master_seed;
        s.index = index;
        s.image.assign(static_cast<size_t>(side) * side, 0.0);

        const int target_class = static_cast<int>(rng.below(cfg.alphabet));
        const int target_cell = static_cast<int>(rng.below(static_cast<uint64_t>(grid) * grid));
        const int ml = static_cast<int>(rng.below(4)), mt = static_cast<int>(rng.below(4));
        const int mr = static_cast<int>(rng.below(4)), mb = static_cast<int>(rng.below(4));
        const int cx0 = (target_cell % grid) * patch, cy0 = (target_cell / grid) * patch;
        s.roi = {std::max(0, cx0 - ml), std::max(0, cy0 - mt), std::min(side, cx0 + patch + mr),
                 std::min(side, cy0 + patch + mb)};

        const int count = cfg.min_distractors +
                          static_cast<int>(rng.below(static_cast<uint64_t>(cfg.max_distractors - cfg.min_distractors + 1)));
        std::vector<int> classes;
        for (int c = 0; c < cfg.alphabet; ++c) {
            if (c != target_class) classes.push_back(c);
        }
        rng.shuffle(classes);
        std::vector<int> cells;
        for (int c = 0; c < grid * grid; ++c) {
            if (c != target_cell && !detail::cell_intersects(s.roi, c, grid, patch)) cells.push_back(c);
        }
        rng.shuffle(cells);
        if (static_cast<int>(cells.size()) < count) continue;  // placement failed; next sub-seed

        detail::stamp_glyph(s.image, side, target_cell, grid, patch, target_class);
        for (int i = 0; i < count; ++i) detail::stamp_glyph(s.image, side, cells[i], grid, patch, classes[i]);
        detail::draw_marker(s.image, side, s.roi, cfg.marker_intensity);
        if (cfg.pixel_noise > 0.0) {
            for (double& v : s.image) {
                v = std::min(1.0, std::max(0.0, v + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise)));
            }
        }
        s.question = vocab.question_tokens();
        s.answer = vocab.glyph_token(target_class);
        return s;
    }
    throw std::runtime_error("generate_sample: placement failed after bounded retries for index " +
                             std::to_string(index));
}

inline std::vector<SynthSample> generate_dataset(const TaskConfig& cfg, uint64_t master_seed, int count,
                                                 const Vocabulary& vocab) {
    std::vector<SynthSample> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) out.push_back(generate_sample(cfg, master_seed, i, vocab));
    return out;
}

inline void write_dataset(const std::string& path, const std::vector<SynthSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_dataset: cannot open " + path);
    for (const SynthSample& s : samples) {
        nlohmann::ordered_json js;
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (int r = 0; r < s.side; ++r) {
            rows.push_back(std::vector<double>(s.image.begin() + static_cast<size_t>(r) * s.side,
                                               s.image.begin() + static_cast<size_t>(r + 1) * s.side));
        }
        js["image"] = std::move(rows);
        js["box"] = {s.roi.x0, s.roi.y0, s.roi.x1, s.roi.y1};
        js["question"] = s.question;
        js["answer"] = s.answer;
        js["seed"] = {s.master_seed, static_cast<uint64_t>(s.index)};
        out << js.dump() << "\n";
    }
    if (!out) throw std::runtime_error("write_dataset: write failed for " + path);
}

inline std::vector<SynthSample> read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_dataset: cannot open " + path);
    std::vector<SynthSample> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            nlohmann::json js = nlohmann::json::parse(line);
            SynthSample s;
            const auto& rows = js.at("image");
            s.side = static_cast<int>(rows.size());
            for (const auto& row : rows) {
                if (static_cast<int>(row.size()) != s.side) throw std::runtime_error("image is not square");
                for (const auto& v : row) s.image.push_back(v.get<double>());
            }
            const auto& box = js.at("box");
            s.roi = {box.at(0), box.at(1), box.at(2), box.at(3)};
            s.roi.validate(s.side, s.side);
            s.question = js.at("question").get<std::vector<int>>();
            s.answer = js.at("answer");
            s.master_seed = js.at("seed").at(0);
            s.index = js.at("seed").at(1);
            out.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw std::runtime_error("read_dataset: " + path + " line " + std::to_string(line_no) + ": " +
                                     e.what());
        }
    }
    return out;
}

struct EvalReport {
    double accuracy = 0.0;
    double format_rate = 0.0;
    double mean_answer_len = 0.0;
    int count = 0;
    double wall_seconds = 0.0;
};

// Gold answers are single tokens; a generation is correct iff its answer
// span matches exactly. Empty answers count as incorrect.
inline bool answer_matches(const std::vector<int>& answer, int gold) {
    return answer.size() == 1 && answer[0] == gold;
}

template <class DecodeFn>
EvalReport evaluate_with(DecodeFn&& decode_fn, const std::vector<SynthSample>& data) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport rep;
    rep.count = static_cast<int>(data.size());
    for (const SynthSample& s : data) {
        DecodeResult d = decode_fn(s);
        if (answer_matches(d.answer, s.answer)) rep.accuracy += 1.0;
        if (d.has_start && d.has_end) rep.format_rate += 1.0;
        rep.mean_answer_len += static_cast<double>(d.answer.size());
    }
    rep.accuracy /= rep.count;
    rep.format_rate /= rep.count;
    rep.mean_answer_len /= rep.count;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

// Greedy evaluation: temperature 0, natural latent entry.
inline EvalReport evaluate(const Model& m, const std::vector<SynthSample>& data, int k, int max_answer_len = 4) {
    Rng rng(0);  // unused at temperature 0
    return evaluate_with(
        [&](const SynthSample& s) {
            MixedSequence x0 = m.context_for_image(s.image, nullptr);
            return decode_with_latent(m, x0, k, 0.0, max_answer_len, rng, false);
        },
        data);
}

}  // namespace lvr
