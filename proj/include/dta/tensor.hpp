// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dta {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. Storage is shared and treated as
/// immutable once published; `mutable_data()` copies on write when the
/// buffer is shared, so copies of a Tensor behave as values.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
    static Tensor scalar(float v) { return Tensor(Shape{1}, v); }
    static Tensor from(std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    int64_t rank() const noexcept { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t axis) const;
    int64_t size() const noexcept { return static_cast<int64_t>(data_->size()); }

    std::span<const float> data() const noexcept { return {data_->data(), data_->size()}; }
    std::span<float> mutable_data();
    float operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    float item() const;

    /// Same buffer, new shape; element count must match.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;
    bool bit_equal(const Tensor& other) const noexcept;
    bool shares_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<float>> data_;
};

float max_abs_diff(const Tensor& a, const Tensor& b);

// Leading-axis helpers for batches.
Tensor row(const Tensor& t, int64_t index);
Tensor take_rows(const Tensor& t, std::span<const int64_t> indices);
Tensor stack(std::span<const Tensor> rows);

} // namespace dta
