#pragma once

#include "dice/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace dice {

/// Rows of a dataset: inputs (B x D), class labels and the dataset row ids
/// they came from. Ids let samplers tell two inputs apart.
struct Batch {
    Tensor inputs;
    std::vector<int> labels;
    std::vector<std::size_t> ids;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
};

/// Labelled inputs (N x D). Row indices serve as input ids.
struct Dataset {
    Tensor inputs;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    Batch batch(std::span<const std::size_t> rows) const;
    Batch all() const;
};

} // namespace dice
