#include "fusion/text.hpp"

#include <algorithm>

#include "common/error.hpp"

namespace stldm {

Tensor rows_of(const Tensor& matrix, TokenRange range) {
    if (range.empty() || range.end > matrix.rows()) {
        fail(ErrorKind::Shape, "token range [" + std::to_string(range.begin) + ", " + std::to_string(range.end) +
                                   ") invalid for " + std::to_string(matrix.rows()) + " tokens");
    }
    const std::size_t cols = matrix.cols();
    std::vector<double> data(matrix.data() + range.begin * cols, matrix.data() + range.end * cols);
    return Tensor({range.size(), cols}, std::move(data));
}

Tensor TextEmbedding::appearance_part() const {
    if (appearance.empty()) fail(ErrorKind::Data, "no appearance tokens");
    return rows_of(data, appearance);
}

Tensor TextEmbedding::spatial_part() const {
    if (spatial.empty()) fail(ErrorKind::Data, "no spatial tokens");
    return rows_of(data, spatial);
}

Tensor TextEmbedding::with_positions() const { return add(data, sinusoidal_positional_encoding(length(), dim())); }

}  // namespace stldm
