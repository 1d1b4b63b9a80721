#pragma once

#include "dice/batch.hpp"
#include "dice/models.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace dice {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Binary checkpoint: magic, version, then for the member and discriminator
/// parameter sets every (name, shape, value, velocity, sq_avg) as
/// little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const EnsembleModel& model);
/// Overwrites the parameters of `model`, which must have the same layout.
void load_checkpoint(const std::filesystem::path& path, EnsembleModel& model);

struct DatasetFile {
    Dataset data;
    std::size_t classes = 0;
    std::uint64_t seed = 0;
    std::vector<bool> nuisance_mask; // one flag per input coordinate
};

/// Header (dims, classes, count, seed, nuisance mask), then the N x D matrix
/// as little-endian doubles and the labels as little-endian int32.
void save_dataset(const std::filesystem::path& path, const DatasetFile& file);
DatasetFile load_dataset(const std::filesystem::path& path);

} // namespace dice
