#include "data/text_stub.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "common/error.hpp"

namespace stldm {

const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> words = {
        // colours
        "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white",
        // shapes
        "circle", "square", "triangle",
        // relations
        "left", "right", "of", "above", "below", "beside", "between", "and",
        // filler the grammar may use
        "a", "the", "small", "large", "big", "tiny", "near", "next", "to", "on", "top", "under", "in", "front",
        "behind", "one", "two", "with", "shape", "object", "image",
    };
    return words;
}

const Tensor& embedding_table() {
    static const Tensor table = [] {
        Rng rng(kEmbeddingSeed);
        return random_normal({vocabulary().size(), kTextDim}, 1.0 / std::sqrt(static_cast<double>(kTextDim)), rng);
    }();
    return table;
}

namespace {

std::size_t word_index(const std::string& word) {
    const auto& words = vocabulary();
    auto it = std::find(words.begin(), words.end(), word);
    if (it == words.end()) fail(ErrorKind::Vocabulary, "unknown token '" + word + "'");
    return static_cast<std::size_t>(it - words.begin());
}

}  // namespace

TextEmbedding embed_text_stub(const std::string& caption) {
    TextEmbedding text;
    std::vector<bool> inside;
    bool open = false, seen_group = false;
    std::string word;
    const auto flush = [&] {
        if (word.empty()) return;
        text.tokens.push_back(word);
        inside.push_back(open);
        word.clear();
    };
    for (char ch : caption) {
        if (ch == '[') {
            flush();
            if (open || seen_group) fail(ErrorKind::Data, "caption must contain one bracketed spatial group: " + caption);
            open = seen_group = true;
        } else if (ch == ']') {
            flush();
            if (!open) fail(ErrorKind::Data, "unbalanced ']' in caption: " + caption);
            open = false;
        } else if (ch == ' ' || ch == '\t') {
            flush();
        } else {
            word.push_back(ch);
        }
    }
    flush();
    if (open) fail(ErrorKind::Data, "unbalanced '[' in caption: " + caption);
    if (text.tokens.empty()) fail(ErrorKind::Data, "empty caption");

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < text.tokens.size(); ++i)
        if (!inside[i]) order.push_back(i);
    const std::size_t appearance = order.size();
    for (std::size_t i = 0; i < text.tokens.size(); ++i)
        if (inside[i]) order.push_back(i);

    // Appearance tokens first, then spatial, each in caption order.
    const Tensor& table = embedding_table();
    std::vector<std::string> tokens;
    text.data = Tensor({order.size(), kTextDim});
    for (std::size_t r = 0; r < order.size(); ++r) {
        const std::string& w = text.tokens[order[r]];
        const std::size_t row = word_index(w);
        std::copy_n(table.data() + row * kTextDim, kTextDim, text.data.data() + r * kTextDim);
        tokens.push_back(w);
    }
    text.tokens = std::move(tokens);
    text.appearance = {0, appearance};
    text.spatial = {appearance, order.size()};
    return text;
}

}  // namespace stldm
