// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "dta/rng.hpp"
#include "dta/tensor.hpp"
#include "dta/vit.hpp"

namespace dta {

enum class LossKind { atcs, l1, l2, l3, l4 };

std::string_view loss_kind_name(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

enum class Stage { shallow_only, multi_layer };

std::string_view stage_name(Stage stage);

struct AttackConfig {
    float epsilon = 10.0f / 255.0f;
    float eta_shallow = 0.05f;
    int steps_shallow = 3;
    float eta_deep = 0.02f;
    int steps_deep = 20;
    double gamma = 0.25;
    int n_layers = 4;
    LossKind loss = LossKind::atcs;
    uint64_t seed = 0;

    // Checks the ranges; n_layers is checked against the model depth.
    void validate(int64_t depth) const;
};

struct AttackResult {
    Tensor x_adv;
    Tensor delta;
    Stage stage = Stage::shallow_only;
    std::map<int, double> atcs_per_layer;  // every layer, measured on x_adv
    std::vector<int> selected_layers;
    double stage1_final_atcs = 0.0;
};

/// Mean over tokens of the per-token cosine similarity.
double atcs(const FeatureMap& a, const FeatureMap& b);

/// Objective value for one layer. Every kind is oriented so that a lower
/// value means a stronger attack.
double loss_value(LossKind kind, const FeatureMap& fx, const FeatureMap& fxadv);

/// Per-sample objective on the tape: clean and adversarial (B, T, d) -> (B).
Var loss_var(LossKind kind, Var clean, Var adv);

/// Layers {floor(M/3), ..., M}, never starting below 1.
std::vector<int> candidate_layers(int64_t depth);

/// N smallest entries of `values` (keyed by layer), lower layer on ties.
std::vector<int> select_smallest(const std::map<int, double>& values, int n);

int default_nrdm_layer(int64_t depth);

struct PgdOutput {
    Tensor x_adv;
    std::vector<double> layer_losses;  // aligned with the layer set
};

// Called after initialization (step 0) and after every update with the
// current batch of adversarial images.
using StepObserver = std::function<void(int step, const Tensor& x_adv)>;

/// Batched sign-gradient descent. `x` is (B, C, H, W); sample b minimizes the
/// summed objective over layer_sets[b] and draws its noise from rngs[b].
/// Each sample's result is bit-identical to running it alone.
std::vector<PgdOutput> pgd_minimize_batch(const Model& model, const Tensor& x,
                                          const std::vector<std::vector<int>>& layer_sets, LossKind kind,
                                          float epsilon, float eta, int steps, std::span<Rng> rngs,
                                          const StepObserver& observer = {});

PgdOutput pgd_minimize(const Model& model, const Tensor& x, const std::vector<int>& layer_set, LossKind kind,
                       float epsilon, float eta, int steps, uint64_t seed);

/// Full shallow-first attack with vulnerable-layer selection. The noise
/// stream is derived from cfg.seed and `sample_index`.
AttackResult dta_attack(const Model& model, const Tensor& x, const AttackConfig& cfg, uint64_t sample_index = 0);

/// Same as calling dta_attack on every image; `x` is (B, C, H, W) and
/// sample_indices[b] names the noise stream of row b.
std::vector<AttackResult> dta_attack_batch(const Model& model, const Tensor& x, const AttackConfig& cfg,
                                           std::span<const uint64_t> sample_indices);

/// Feature-distortion baseline: ascent on ||f^k(x') - f^k(x)||_2.
Tensor nrdm_attack(const Model& model, const Tensor& x, int k, float epsilon, float eta, int steps, uint64_t seed,
                   uint64_t sample_index = 0);

std::vector<Tensor> nrdm_attack_batch(const Model& model, const Tensor& x, int k, float epsilon, float eta,
                                      int steps, uint64_t seed, std::span<const uint64_t> sample_indices);

/// Whole-dataset drivers over a (N, C, H, W) batch; row i uses sample index
/// i. Chunking does not change the result.
std::vector<AttackResult> dta_attack_all(const Model& model, const Tensor& images, const AttackConfig& cfg,
                                         int64_t chunk = 32);
Tensor nrdm_attack_all(const Model& model, const Tensor& images, int k, float epsilon, float eta, int steps,
                       uint64_t seed, int64_t chunk = 32);

/// Baseline: x + U(-epsilon, epsilon) projected, one "noise" stream per row.
Tensor uniform_noise_attack(const Tensor& images, float epsilon, uint64_t seed);

/// Universal perturbation maximizing the batch mean of ||f^k(x + delta)||_2.
/// Each batch is (B, C, H, W); one sign step per batch per epoch.
Tensor pap_uap(const Model& model, const std::vector<Tensor>& batches, int k, float epsilon, float eta, int epochs,
               uint64_t seed);

/// Mean over the batches of the UAP objective, for diagnostics.
double pap_objective(const Model& model, const std::vector<Tensor>& batches, int k, const Tensor& delta);

/// x + delta projected onto the epsilon-ball around x and [0, 1]. `x` is one
/// image or a (B, C, H, W) batch; delta has the image shape.
Tensor apply_perturbation(const Tensor& x, const Tensor& delta, float epsilon);

/// Largest float <= v and smallest float >= v.
float float_at_most(double v);
float float_at_least(double v);

/// Per-layer features (1..max_layer) of every row of a (B, C, H, W) batch.
std::vector<std::vector<FeatureMap>> batch_features(const Model& model, const Tensor& x, int max_layer);

} // namespace dta
