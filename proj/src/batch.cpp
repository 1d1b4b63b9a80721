#include "dice/batch.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace dice {

Batch Dataset::batch(std::span<const std::size_t> rows) const {
    Batch b;
    b.inputs = Tensor(rows.size(), inputs.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= size())
            throw std::out_of_range("dataset row out of range");
        auto src = inputs.row_span(rows[r]);
        std::copy(src.begin(), src.end(), b.inputs.row_span(r).begin());
        b.labels.push_back(labels[rows[r]]);
        b.ids.push_back(rows[r]);
    }
    return b;
}

Batch Dataset::all() const {
    std::vector<std::size_t> rows(size());
    std::iota(rows.begin(), rows.end(), 0);
    return batch(rows);
}

} // namespace dice
