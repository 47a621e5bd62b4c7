#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusion/text.hpp"

namespace stldm {

inline constexpr std::size_t kTextDim = 64;
inline constexpr std::uint64_t kEmbeddingSeed = 0x5eed7e47ULL;

// Closed caption vocabulary; row i of the embedding table belongs to word i.
const std::vector<std::string>& vocabulary();

// Fixed seeded [|vocabulary| x 64] table.
const Tensor& embedding_table();

// "red circle [left of blue square]": words outside the brackets form L_a,
// words inside form L_s. Throws Vocabulary on unknown words.
TextEmbedding embed_text_stub(const std::string& caption);

}  // namespace stldm
