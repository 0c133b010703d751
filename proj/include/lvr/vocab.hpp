#pragma once

// Token inventory for the synthetic grounded-VQA task: glyph-class answer
// tokens, the fixed question-template words, and four specials. Ids are a
// pure function of the alphabet size, so they survive save/load unchanged.

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace lvr {

struct Vocabulary {
    int alphabet = 8;  // number of glyph classes; their token ids are 0..alphabet-1

    static constexpr std::array<const char*, 7> question_words = {"what", "glyph", "is", "in",
                                                                  "the", "marked", "region"};

    int size() const { return alphabet + static_cast<int>(question_words.size()) + 4; }

    int glyph_token(int cls) const {
        if (cls < 0 || cls >= alphabet) throw std::invalid_argument("Vocabulary: glyph class out of range");
        return cls;
    }

    int word_token(int w) const { return alphabet + w; }

    int bos() const { return alphabet + static_cast<int>(question_words.size()); }
    int eos() const { return bos() + 1; }
    int start_latent() const { return bos() + 2; }
    int end_latent() const { return bos() + 3; }

    bool is_glyph(int id) const { return id >= 0 && id < alphabet; }
    bool is_control(int id) const { return id == start_latent() || id == end_latent(); }

    // The fixed question template, tokenized.
    std::vector<int> question_tokens() const {
        std::vector<int> out;
        for (size_t w = 0; w < question_words.size(); ++w) out.push_back(word_token(static_cast<int>(w)));
        return out;
    }

    std::string token_name(int id) const {
        if (is_glyph(id)) return "glyph" + std::to_string(id);
        if (id >= alphabet && id < bos()) return question_words[id - alphabet];
        if (id == bos()) return "<bos>";
        if (id == eos()) return "<eos>";
        if (id == start_latent()) return "<lat_start>";
        if (id == end_latent()) return "<lat_end>";
        return "<invalid:" + std::to_string(id) + ">";
    }
};

}  // namespace lvr
