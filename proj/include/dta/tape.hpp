// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dta/tensor.hpp"

namespace dta {

enum class PrimitiveKind {
    leaf,
    add,
    sub,
    mul,
    scale,
    matmul,
    transpose,
    reshape,
    concat,
    slice,
    sum,
    mean,
    softmax,
    layer_norm,
    gelu,
    relu,
    l2_norm,
    dot,
    cosine_similarity,
    broadcast_add,
    cross_entropy,
};

std::string_view kind_name(PrimitiveKind kind);

/// Per-op parameters. Only the fields relevant to the op kind are read.
struct OpAttrs {
    float scalar = 1.0f;          // scale
    int axis = -1;                // concat, slice
    int64_t start = 0;            // slice
    int64_t length = 0;           // slice
    std::vector<int> perm;        // transpose; empty swaps the last two axes
    Shape shape;                  // reshape
    bool reduce_all = true;       // sum, mean; false reduces the last axis only
    float eps = 1e-6f;            // layer_norm
    std::vector<int32_t> labels;  // cross_entropy, one per row
};

class Tape;

/// Handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

class Gradients;

/// Append-only record of a computation. Nodes are created in evaluation
/// order, so the node list is topologically sorted by construction.
class Tape {
public:
    struct Node {
        PrimitiveKind kind = PrimitiveKind::leaf;
        std::vector<int32_t> inputs;
        Tensor value;
        std::vector<Tensor> saved;
        OpAttrs attrs;
        bool requires_grad = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Evaluates `kind` on the input nodes and records the result.
    Var apply(PrimitiveKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

    /// Reverse sweep from a single-element root.
    Gradients backward(Var root) const;

    const Node& node(int32_t id) const;
    const Tensor& value(int32_t id) const { return node(id).value; }
    size_t size() const noexcept { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

/// Result of Tape::backward: d(root)/d(node) for every node that requires
/// a gradient. Nodes with no path to the root read back as zeros.
class Gradients {
public:
    Gradients(const Tape* tape, std::vector<std::optional<Tensor>> grads)
        : tape_(tape), grads_(std::move(grads)) {}

    Tensor of(Var v) const;
    bool reached(Var v) const;

private:
    const Tape* tape_;
    std::vector<std::optional<Tensor>> grads_;
};

/// Generic entry point used by property tests; identical to tape.apply.
Tensor apply_primitive(PrimitiveKind kind, std::span<const Var> inputs, Tape& tape, const OpAttrs& attrs = {});

// Typed builders over Tape::apply.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var matmul(Var a, Var b);
Var transpose(Var a, std::vector<int> perm = {});
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, int axis);
Var slice(Var a, int axis, int64_t start, int64_t length);
Var sum(Var a);
Var sum_last(Var a);
Var mean(Var a);
Var mean_last(Var a);
Var softmax(Var a);
Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-6f);
Var gelu(Var a);
Var relu(Var a);
Var l2_norm(Var a);
Var dot(Var a, Var b);
Var cosine_similarity(Var a, Var b);
Var broadcast_add(Var a, Var b);
Var cross_entropy(Var logits, std::vector<int32_t> labels);

/// Central differences of a scalar function, one coordinate at a time.
/// The divisor is the representable float step (x+h) - (x-h), which equals
/// 2h up to rounding of the perturbed coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

} // namespace dta
