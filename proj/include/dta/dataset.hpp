// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "dta/tensor.hpp"

namespace dta {

/// Labeled images, (N, C, H, W) in [0, 1].
struct Dataset {
    Tensor images;
    std::vector<uint32_t> labels;
    uint32_t num_classes = 0;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
    void validate() const;
};

Dataset subset(const Dataset& data, std::span<const int64_t> indices);

/// Per-class first `per_class` samples go to the first set, the rest to the second.
std::pair<Dataset, Dataset> split_per_class(const Dataset& data, int64_t per_class);

enum class DataRole { pretrain, downstream };

DataRole parse_data_role(std::string_view name);

struct SyntheticSpec {
    DataRole role = DataRole::pretrain;
    int64_t classes = 10;
    int64_t per_class = 500;
    int64_t image_size = 32;
    int64_t channels = 3;
    float noise = 0.1f;
    float amplitude = 0.35f;
    uint64_t seed = 0;
};

/// One fixed sinusoidal grating per class plus clamped Gaussian pixel
/// noise. The two roles draw frequencies from disjoint bands. Samples are
/// ordered round-robin over classes.
Dataset generate_synthetic(const SyntheticSpec& spec);

inline constexpr uint32_t kDatasetVersion = 1;

void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

} // namespace dta
