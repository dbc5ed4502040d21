// SPDX-License-Identifier: Apache-2.0
#include "dta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "dta/error.hpp"

namespace dta {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

static void check_shape(const Shape& shape) {
    for (int64_t e : shape)
        if (e <= 0) throw ContractError("tensor extents must be positive, got " + shape_str(shape));
}

Tensor::Tensor() : shape_{1}, data_(std::make_shared<std::vector<float>>(1, 0.0f)) {}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = std::make_shared<std::vector<float>>(static_cast<size_t>(numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
    check_shape(shape_);
    if (static_cast<int64_t>(values.size()) != numel(shape_))
        throw ContractError("tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<float>>(std::move(values));
}

Tensor Tensor::from(std::initializer_list<float> values) {
    return Tensor(Shape{static_cast<int64_t>(values.size())}, std::vector<float>(values));
}

int64_t Tensor::dim(int64_t axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank())
        throw ContractError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[static_cast<size_t>(axis)];
}

std::span<float> Tensor::mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<float>>(*data_);
    return {data_->data(), data_->size()};
}

float Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    check_shape(shape);
    if (numel(shape) != size())
        throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_->begin(), data_->end(), [](float v) { return std::isfinite(v); });
}

bool Tensor::bit_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ &&
           std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ContractError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    float m = 0.0f;
    auto x = a.data();
    auto y = b.data();
    for (size_t i = 0; i < x.size(); ++i) m = std::max(m, std::fabs(x[i] - y[i]));
    return m;
}

Tensor row(const Tensor& t, int64_t index) {
    const int64_t i = index;
    return take_rows(t, std::span<const int64_t>(&i, 1)).reshaped(Shape(t.shape().begin() + 1, t.shape().end()));
}

Tensor take_rows(const Tensor& t, std::span<const int64_t> indices) {
    if (t.rank() < 2 || indices.empty()) throw ContractError("take_rows: need a batched tensor and at least one index");
    const int64_t n = t.dim(0);
    const int64_t stride = t.size() / n;
    Shape shape = t.shape();
    shape[0] = static_cast<int64_t>(indices.size());
    std::vector<float> out;
    out.reserve(static_cast<size_t>(stride) * indices.size());
    auto src = t.data();
    for (int64_t i : indices) {
        if (i < 0 || i >= n) throw ContractError("take_rows: index " + std::to_string(i) + " out of range");
        out.insert(out.end(), src.begin() + i * stride, src.begin() + (i + 1) * stride);
    }
    return Tensor(std::move(shape), std::move(out));
}

Tensor stack(std::span<const Tensor> rows) {
    if (rows.empty()) throw ContractError("stack: no tensors");
    Shape shape{static_cast<int64_t>(rows.size())};
    shape.insert(shape.end(), rows[0].shape().begin(), rows[0].shape().end());
    std::vector<float> out;
    out.reserve(static_cast<size_t>(numel(shape)));
    for (const auto& r : rows) {
        if (r.shape() != rows[0].shape())
            throw ContractError("stack: shape mismatch " + shape_str(rows[0].shape()) + " and " + shape_str(r.shape()));
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    return Tensor(std::move(shape), std::move(out));
}

} // namespace dta
