// SPDX-License-Identifier: Apache-2.0
#include "dta/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dta/attacks.hpp"
#include "dta/error.hpp"
#include "dta/rng.hpp"

namespace dta {

using nlohmann::json;

std::string_view train_mode_name(TrainMode mode) {
    switch (mode) {
    case TrainMode::pretrain: return "pretrain";
    case TrainMode::full: return "full";
    case TrainMode::lora: return "lora";
    case TrainMode::adaptformer: return "adaptformer";
    }
    throw ContractError("unknown training mode");
}

TrainMode parse_train_mode(std::string_view name) {
    for (TrainMode m : {TrainMode::pretrain, TrainMode::full, TrainMode::lora, TrainMode::adaptformer})
        if (train_mode_name(m) == name) return m;
    throw ContractError("unknown training mode '" + std::string(name) + "' (expected pretrain, full, lora or adaptformer)");
}

std::string_view generator_name(Generator g) { return g == Generator::dta ? "dta" : "pap"; }

Generator parse_generator(std::string_view name) {
    if (name == "dta") return Generator::dta;
    if (name == "pap") return Generator::pap;
    throw ContractError("unknown generator '" + std::string(name) + "' (expected dta or pap)");
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ContractError("train config: epochs must be >= 0");
    if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
    if (!(learning_rate >= 0.0f) || !std::isfinite(learning_rate))
        throw ContractError("train config: learning_rate must be finite and >= 0");
    if (!(weight_decay >= 0.0f)) throw ContractError("train config: weight_decay must be >= 0");
    if (mode == TrainMode::pretrain && adversarial) throw ContractError("train config: pretraining cannot be adversarial");
    if (adversarial) {
        if (!(adversarial->epsilon >= 0.0f && adversarial->epsilon <= 1.0f))
            throw ContractError("train config: adversarial epsilon must lie in [0, 1]");
        if (adversarial->steps < 1) throw ContractError("train config: adversarial steps must be >= 1");
        if (!(adversarial->eta > 0.0f)) throw ContractError("train config: adversarial eta must be > 0");
    }
}

json to_json(const TrainConfig& c) {
    json j = {{"mode", train_mode_name(c.mode)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed},
              {"optimizer", {{"name", "adam"}, {"beta1", Adam::beta1}, {"beta2", Adam::beta2}, {"eps", Adam::eps}}}};
    if (c.mode == TrainMode::lora) j["lora"] = {{"rank", c.lora_rank}, {"alpha", c.lora_alpha}};
    if (c.mode == TrainMode::adaptformer)
        j["adaptformer"] = {{"bottleneck", c.adapter_bottleneck}, {"scale", c.adapter_scale}};
    if (c.adversarial)
        j["adversarial"] = {{"epsilon", c.adversarial->epsilon},
                            {"steps", c.adversarial->steps},
                            {"eta", c.adversarial->eta},
                            {"generator", generator_name(c.adversarial->generator)}};
    return j;
}

void Adam::step(std::string_view name, Tensor& param, const Tensor& grad) {
    if (grad.shape() != param.shape())
        throw ContractError("adam: gradient shape " + shape_str(grad.shape()) + " for '" + std::string(name) + "' " +
                            shape_str(param.shape()));
    auto it = slots_.find(name);
    if (it == slots_.end()) {
        Slot s;
        s.m.assign(static_cast<size_t>(param.size()), 0.0);
        s.v.assign(static_cast<size_t>(param.size()), 0.0);
        it = slots_.emplace(std::string(name), std::move(s)).first;
    }
    Slot& s = it->second;
    ++s.t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
    auto p = param.mutable_data();
    auto g = grad.data();
    for (size_t i = 0; i < p.size(); ++i) {
        s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g[i];
        s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * static_cast<double>(g[i]) * g[i];
        const double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps) + static_cast<double>(wd_) * p[i];
        p[i] = static_cast<float>(p[i] - static_cast<double>(lr_) * update);
    }
}

namespace {

std::vector<int32_t> as_int(std::span<const uint32_t> labels) { return {labels.begin(), labels.end()}; }

uint32_t argmax_row(std::span<const float> row) {
    return static_cast<uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

void check_data(const Model& model, const Dataset& data) {
    data.validate();
    if (data.image_shape() != model.config.image_shape())
        throw ContractError("dataset images " + shape_str(data.image_shape()) + " do not match the model's " +
                            shape_str(model.config.image_shape()));
    if (static_cast<int64_t>(data.num_classes) != model.config.num_classes)
        throw ContractError("dataset has " + std::to_string(data.num_classes) + " classes, model head has " +
                            std::to_string(model.config.num_classes));
}

std::function<bool(std::string_view)> trainable_for(TrainMode mode) {
    switch (mode) {
    case TrainMode::pretrain:
    case TrainMode::full: return [](std::string_view n) { return !n.starts_with("lora.") && !n.starts_with("adaptformer."); };
    case TrainMode::lora: return [](std::string_view n) { return n.starts_with("lora.") || n.starts_with("head."); };
    case TrainMode::adaptformer:
        return [](std::string_view n) { return n.starts_with("adaptformer.") || n.starts_with("head."); };
    }
    throw ContractError("unknown training mode");
}

Checkpoint train_loop(Model model, const Tensor& images, const std::vector<uint32_t>& labels, const TrainConfig& cfg,
                      TrainMode mode, json provenance) {
    std::map<std::string, Tensor*, std::less<>> by_name;
    for (auto& [n, t] : named_tensors(model.params)) by_name[n] = t;
    for (auto& [n, t] : named_tensors(model.adapters)) by_name[n] = t;

    Adam opt(cfg.learning_rate, cfg.weight_decay);
    ForwardSpec spec;
    spec.trainable = trainable_for(mode);
    const int64_t n = static_cast<int64_t>(labels.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng rng = make_rng(cfg.seed, "training", static_cast<uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);
        int step = 0;
        for (int64_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const int64_t len = std::min<int64_t>(cfg.batch_size, n - start);
            std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(len));
            std::vector<uint32_t> ys;
            for (int64_t i : idx) ys.push_back(labels[static_cast<size_t>(i)]);
            Tape tape;
            Var loss;
            ForwardTrace trace;
            try {
                trace = forward_batch(tape, model.config, model.params, model.adapters, tape.constant(take_rows(images, idx)),
                                      spec);
                loss = mean(cross_entropy(trace.logits, as_int(ys)));
            } catch (const NumericError& e) {
                throw TrainingError(std::string("non-finite loss: ") + e.what(), epoch, step);
            }
            if (!std::isfinite(loss.value().item())) throw TrainingError("non-finite loss", epoch, step);
            Gradients grads = tape.backward(loss);
            for (const auto& [name, var] : trace.trainable) {
                Tensor g = grads.of(var);
                if (!g.all_finite()) throw TrainingError("non-finite gradient for '" + name + "'", epoch, step);
                opt.step(name, *by_name.at(name), g);
            }
        }
    }

    Dataset train_view;
    train_view.images = images;
    train_view.labels = labels;
    train_view.num_classes = static_cast<uint32_t>(model.config.num_classes);
    const TrainMetrics m = evaluate_model(model, train_view);
    provenance["mode"] = train_mode_name(mode);
    provenance["seed"] = cfg.seed;
    provenance["train_config"] = to_json(cfg);
    provenance["metrics"] = {{"train_loss", m.loss}, {"train_accuracy", m.accuracy}};
    return {std::move(model), std::move(provenance)};
}

Model downstream_model(const Checkpoint& pretrained, TrainMode mode, const Dataset& data, const TrainConfig& cfg) {
    if (mode == TrainMode::pretrain) throw ContractError("finetune: mode must be full, lora or adaptformer");
    Model m = pretrained.model;
    m.config.num_classes = data.num_classes;
    reset_head(m.params, data.num_classes, cfg.seed);
    switch (mode) {
    case TrainMode::lora: m.adapters = init_lora(m.config, cfg.lora_rank, cfg.lora_alpha, cfg.seed); break;
    case TrainMode::adaptformer:
        m.adapters = init_adaptformer(m.config, cfg.adapter_bottleneck, cfg.adapter_scale, cfg.seed);
        break;
    default: m.adapters = std::monostate{};
    }
    check_data(m, data);
    return m;
}

json parent_provenance(const Checkpoint& parent) { return {{"parent_hash", content_hash(parent.model)}}; }

} // namespace

std::vector<uint32_t> predict(const Model& model, const Tensor& images, int batch_size) {
    std::vector<uint32_t> out;
    const int64_t n = images.dim(0);
    for (int64_t start = 0; start < n; start += batch_size) {
        std::vector<int64_t> idx(static_cast<size_t>(std::min<int64_t>(batch_size, n - start)));
        std::iota(idx.begin(), idx.end(), start);
        Tape tape;
        auto trace = forward_batch(tape, model.config, model.params, model.adapters, tape.constant(take_rows(images, idx)));
        const Tensor& logits = trace.logits.value();
        const int64_t C = logits.dim(1);
        for (size_t b = 0; b < idx.size(); ++b)
            out.push_back(argmax_row(logits.data().subspan(b * static_cast<size_t>(C), static_cast<size_t>(C))));
    }
    return out;
}

TrainMetrics evaluate_model(const Model& model, const Dataset& data, int batch_size) {
    check_data(model, data);
    if (data.size() == 0) throw ContractError("evaluate_model: empty dataset");
    double loss = 0.0;
    int64_t correct = 0;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        std::vector<int64_t> idx(static_cast<size_t>(std::min<int64_t>(batch_size, data.size() - start)));
        std::iota(idx.begin(), idx.end(), start);
        std::vector<uint32_t> ys;
        for (int64_t i : idx) ys.push_back(data.labels[static_cast<size_t>(i)]);
        Tape tape;
        auto trace = forward_batch(tape, model.config, model.params, model.adapters,
                                   tape.constant(take_rows(data.images, idx)));
        const Tensor per = cross_entropy(trace.logits, as_int(ys)).value();
        const Tensor& logits = trace.logits.value();
        const int64_t C = logits.dim(1);
        for (size_t b = 0; b < idx.size(); ++b) {
            loss += per[static_cast<int64_t>(b)];
            correct += argmax_row(logits.data().subspan(b * static_cast<size_t>(C), static_cast<size_t>(C))) == ys[b];
        }
    }
    return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
}

Checkpoint pretrain_supervised(const ModelConfig& config, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.mode != TrainMode::pretrain) throw ContractError("pretrain_supervised: mode must be pretrain");
    Model m;
    m.config = config;
    m.params = init_params(config, cfg.seed);
    check_data(m, data);
    return train_loop(std::move(m), data.images, data.labels, cfg, TrainMode::pretrain, {{"parent_hash", nullptr}});
}

Checkpoint finetune(const Checkpoint& pretrained, TrainMode mode, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    Model m = downstream_model(pretrained, mode, data, cfg);
    return train_loop(std::move(m), data.images, data.labels, cfg, mode, parent_provenance(pretrained));
}

Tensor adversarial_training_images(const Model& pretrained, const Dataset& data, const AdversarialConfig& adv,
                                   uint64_t seed) {
    if (adv.epsilon == 0.0f) return data.images;
    constexpr int64_t chunk = 32;
    const int64_t n = data.size();
    if (adv.generator == Generator::pap) {
        std::vector<Tensor> batches;
        for (int64_t start = 0; start < n; start += chunk) {
            std::vector<int64_t> idx(static_cast<size_t>(std::min(chunk, n - start)));
            std::iota(idx.begin(), idx.end(), start);
            batches.push_back(take_rows(data.images, idx));
        }
        const Tensor delta = pap_uap(pretrained, batches, 1, adv.epsilon, adv.eta, adv.steps, seed);
        return apply_perturbation(data.images, delta, adv.epsilon);
    }
    AttackConfig cfg;
    cfg.epsilon = adv.epsilon;
    cfg.eta_deep = adv.eta;
    cfg.steps_deep = adv.steps;
    cfg.seed = seed;
    cfg.n_layers = static_cast<int>(std::min<int64_t>(cfg.n_layers, pretrained.config.depth));
    std::vector<Tensor> rows;
    for (int64_t start = 0; start < n; start += chunk) {
        std::vector<int64_t> idx(static_cast<size_t>(std::min(chunk, n - start)));
        std::iota(idx.begin(), idx.end(), start);
        std::vector<uint64_t> ids(idx.begin(), idx.end());
        for (auto& r : dta_attack_batch(pretrained, take_rows(data.images, idx), cfg, ids)) rows.push_back(r.x_adv);
    }
    return stack(rows);
}

Checkpoint adversarial_finetune(const Checkpoint& pretrained, TrainMode mode, const Dataset& data,
                                const TrainConfig& cfg) {
    cfg.validate();
    if (!cfg.adversarial) throw ContractError("adversarial_finetune: adversarial config is required");
    Model m = downstream_model(pretrained, mode, data, cfg);
    const Tensor images = adversarial_training_images(pretrained.model, data, *cfg.adversarial, cfg.seed);
    return train_loop(std::move(m), images, data.labels, cfg, mode, parent_provenance(pretrained));
}

} // namespace dta
