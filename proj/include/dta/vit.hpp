// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "dta/tape.hpp"
#include "dta/tensor.hpp"

namespace dta {

struct ModelConfig {
    int64_t image_size = 32;
    int64_t channels = 3;
    int64_t patch_size = 8;
    int64_t embed_dim = 64;
    int64_t depth = 6;
    int64_t num_heads = 4;
    int64_t mlp_hidden = 128;
    int64_t num_classes = 10;

    void validate() const;
    int64_t grid() const { return image_size / patch_size; }
    int64_t patches() const { return grid() * grid(); }
    // Patch tokens plus the class token.
    int64_t tokens() const { return patches() + 1; }
    int64_t head_dim() const { return embed_dim / num_heads; }
    int64_t patch_dim() const { return channels * patch_size * patch_size; }
    Shape image_shape() const { return {channels, image_size, image_size}; }

    bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor qkv_weight, qkv_bias;    // (d, 3d), (3d): columns are [q | k | v]
    Tensor proj_weight, proj_bias;  // (d, d), (d)
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1_weight, fc1_bias;    // (d, hidden), (hidden)
    Tensor fc2_weight, fc2_bias;    // (hidden, d), (d)
};

struct ViTParams {
    Tensor patch_weight, patch_bias;  // (C*p*p, d), (d)
    Tensor class_token;               // (1, d)
    Tensor pos_embed;                 // (T, d)
    std::vector<BlockParams> blocks;
    Tensor norm_gamma, norm_beta;
    Tensor head_weight, head_bias;    // (d, classes), (classes)
};

struct LoRABlock {
    Tensor q_down, q_up;  // A (r, d), B (d, r)
    Tensor v_down, v_up;
};

/// Low-rank updates of the query and value projections: W + (alpha/r) B A.
struct LoRAParams {
    int64_t rank = 4;
    float alpha = 8.0f;
    std::vector<LoRABlock> blocks;

    float scale() const { return rank == 0 ? 0.0f : alpha / static_cast<float>(rank); }
};

struct AdaptFormerBlock {
    Tensor down_weight, down_bias;  // (d, bottleneck), (bottleneck)
    Tensor up_weight, up_bias;      // (bottleneck, d), (d)
};

/// Bottleneck adapter running beside each block's MLP, output scaled by
/// `scale` and added to the residual stream.
struct AdaptFormerParams {
    int64_t bottleneck = 16;
    float scale = 0.1f;
    std::vector<AdaptFormerBlock> blocks;
};

using Adapters = std::variant<std::monostate, LoRAParams, AdaptFormerParams>;

/// Everything needed to run a forward pass.
struct Model {
    ModelConfig config;
    ViTParams params;
    Adapters adapters;
};

struct FeatureMap {
    int layer = 0;  // 1-based block index
    Tensor tokens;  // (T, d)
};

ViTParams init_params(const ModelConfig& config, uint64_t seed);
LoRAParams init_lora(const ModelConfig& config, int64_t rank, float alpha, uint64_t seed);
AdaptFormerParams init_adaptformer(const ModelConfig& config, int64_t bottleneck, float scale, uint64_t seed);

// Fresh zero-bias head with the given class count.
void reset_head(ViTParams& params, int64_t num_classes, uint64_t seed);

void check_params(const ModelConfig& config, const ViTParams& params);
void check_adapters(const ModelConfig& config, const Adapters& adapters);

/// Stable names for every tensor, in serialization order.
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const ViTParams& params);
std::vector<std::pair<std::string, Tensor*>> named_tensors(ViTParams& params);
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const Adapters& adapters);
std::vector<std::pair<std::string, Tensor*>> named_tensors(Adapters& adapters);

/// Options for the batched, tape-recording forward pass.
struct ForwardSpec {
    // Number of blocks to run; 0 runs all of them and computes logits.
    int64_t max_layer = 0;
    // Tensor names that become gradient-tracked leaves. Empty: none.
    std::function<bool(std::string_view)> trainable;
};

struct ForwardTrace {
    Var logits;                    // (B, classes); unbound when truncated
    std::vector<Var> features;     // per executed block, (B, T, d)
    std::vector<std::pair<std::string, Var>> trainable;  // leaves that track gradients
};

/// Batched forward over `images` of shape (B, C, H, W). Rows of the batch
/// never interact, so a sample's outputs do not depend on its batch mates.
ForwardTrace forward_batch(Tape& tape, const ModelConfig& config, const ViTParams& params, const Adapters& adapters,
                           Var images, const ForwardSpec& spec = {});

struct ForwardResult {
    Tensor logits;                      // (classes)
    std::vector<FeatureMap> features;   // M entries
};

/// Single image (C, H, W) in [0,1]. With a tape, every op is recorded on it
/// and the image itself is a gradient-tracked leaf.
ForwardResult forward_with_features(const ModelConfig& config, const ViTParams& params, const Adapters& adapters,
                                    const Tensor& image, Tape* tape = nullptr);

/// Folds the low-rank updates into the query/value weights.
ViTParams merge_lora(const ModelConfig& config, const ViTParams& params, const LoRAParams& lora);

} // namespace dta
