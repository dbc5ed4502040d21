// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <optional>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dta/checkpoint.hpp"
#include "dta/dataset.hpp"
#include "dta/tape.hpp"

namespace dta {

enum class TrainMode { pretrain, full, lora, adaptformer };
enum class Generator { dta, pap };

std::string_view train_mode_name(TrainMode mode);
TrainMode parse_train_mode(std::string_view name);
std::string_view generator_name(Generator g);
Generator parse_generator(std::string_view name);

struct AdversarialConfig {
    float epsilon = 4.0f / 255.0f;
    // DTA: stage-2/3 schedule. PAP: epochs over the training set and step size.
    int steps = 20;
    float eta = 0.02f;
    Generator generator = Generator::dta;
};

struct TrainConfig {
    TrainMode mode = TrainMode::pretrain;
    int epochs = 20;
    int batch_size = 32;
    float learning_rate = 1e-3f;
    float weight_decay = 0.0f;
    uint64_t seed = 0;
    int64_t lora_rank = 4;
    float lora_alpha = 8.0f;
    int64_t adapter_bottleneck = 16;
    float adapter_scale = 0.1f;
    std::optional<AdversarialConfig> adversarial;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);

/// Adam with decoupled weight decay; state is keyed by tensor name.
class Adam {
public:
    Adam(float lr, float weight_decay) : lr_(lr), wd_(weight_decay) {}
    void step(std::string_view name, Tensor& param, const Tensor& grad);

    static constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

private:
    struct Slot {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    float lr_, wd_;
    std::map<std::string, Slot, std::less<>> slots_;
};

struct TrainMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Loss and accuracy of the model's predictions on `data`.
TrainMetrics evaluate_model(const Model& model, const Dataset& data, int batch_size = 64);

/// Predicted class of every image in a (N, C, H, W) batch.
std::vector<uint32_t> predict(const Model& model, const Tensor& images, int batch_size = 64);

Checkpoint pretrain_supervised(const ModelConfig& config, const Dataset& data, const TrainConfig& cfg);

/// New head for the downstream classes; which tensors train depends on the mode.
Checkpoint finetune(const Checkpoint& pretrained, TrainMode mode, const Dataset& data, const TrainConfig& cfg);

/// Fine-tuning on adversarial versions of `data` crafted against the
/// pretrained backbone.
Checkpoint adversarial_finetune(const Checkpoint& pretrained, TrainMode mode, const Dataset& data,
                                const TrainConfig& cfg);

/// The perturbed training images adversarial_finetune trains on.
Tensor adversarial_training_images(const Model& pretrained, const Dataset& data, const AdversarialConfig& adv,
                                   uint64_t seed);

} // namespace dta
