// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dta/attacks.hpp"
#include "dta/dataset.hpp"

namespace dta {

/// Fraction of x_adv rows (N, C, H, W) the model does not label correctly.
double attack_success_rate(const Model& downstream, const Tensor& x_adv, std::span<const uint32_t> labels);

double clean_accuracy(const Model& downstream, const Dataset& data);

/// What the attacker recorded about one adversarial example.
struct AttackRecord {
    std::string stage;  // "shallow-only", "multi-layer" or a baseline name
    std::vector<int> selected_layers;
    std::map<int, double> atcs_per_layer;
};

struct EvalRecord {
    int64_t id = 0;
    uint32_t label = 0;
    uint32_t clean_prediction = 0;
    uint32_t adversarial_prediction = 0;
    double linf = 0.0;
    AttackRecord attack;
};

struct EvalReport {
    double asr = 0.0;
    double clean_accuracy = 0.0;
    // ASR over the samples the model classifies correctly when clean.
    double asr_clean_correct = 0.0;
    float epsilon = 0.0f;
    std::vector<EvalRecord> records;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

/// `attacks` may be empty or hold one entry per sample. Throws if any
/// adversarial example leaves the epsilon-ball.
EvalReport evaluate_attack(const Model& downstream, const Dataset& clean, const Tensor& x_adv, float epsilon,
                           const std::vector<AttackRecord>& attacks = {});

struct CurvePoint {
    int layer = 0;
    int step = 0;
    double atcs = 0.0;
    double asr = 0.0;
};

struct SweepSchedule {
    float epsilon = 10.0f / 255.0f;
    float eta = 0.02f;
    int steps = 20;
    uint64_t seed = 0;
};

/// Steps at which the sweep records a point: all of them up to 20, an even
/// grid of about 20 beyond that. Always includes 0 and the last step.
std::vector<int> logged_steps(int steps);

/// Single-layer attacks on the pretrained model, recording mean ATCS at the
/// attacked layer and transfer ASR on the downstream model.
std::vector<CurvePoint> atcs_asr_sweep(const Model& pretrained, const Model& downstream, const Dataset& samples,
                                       const std::vector<int>& layers, const SweepSchedule& schedule);

std::string curve_csv(const std::vector<CurvePoint>& points, std::string_view loss_kind = "atcs", double gamma = 0.0);

/// Mean ATCS between the two models' layer-k features on clean inputs and,
/// when asked, on DTA examples crafted against the pretrained model.
std::pair<double, double> feature_shift_atcs(const Model& pretrained, const Model& finetuned, const Dataset& samples,
                                             int k, bool use_adversarial, const AttackConfig& attack);

/// Rank correlation with average ranks for ties.
double spearman(std::span<const double> xs, std::span<const double> ys);

} // namespace dta
