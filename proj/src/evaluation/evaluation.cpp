// SPDX-License-Identifier: Apache-2.0
#include "dta/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dta/error.hpp"
#include "dta/training.hpp"

namespace dta {

using nlohmann::json;

namespace {

constexpr int64_t kChunk = 50;

std::vector<std::vector<int64_t>> chunks(int64_t n) {
    std::vector<std::vector<int64_t>> out;
    for (int64_t s = 0; s < n; s += kChunk) {
        std::vector<int64_t> idx(static_cast<size_t>(std::min(kChunk, n - s)));
        std::iota(idx.begin(), idx.end(), s);
        out.push_back(std::move(idx));
    }
    return out;
}

void check_backbones(const Model& a, const Model& b, const char* who) {
    ModelConfig ca = a.config, cb = b.config;
    ca.num_classes = cb.num_classes = 0;
    if (!(ca == cb)) throw ContractError(std::string(who) + ": models do not share a backbone configuration");
}

std::vector<double> ranks(std::span<const double> v) {
    std::vector<size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < order.size();) {
        size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

} // namespace

double attack_success_rate(const Model& downstream, const Tensor& x_adv, std::span<const uint32_t> labels) {
    if (labels.empty()) throw ContractError("attack_success_rate: empty sample set");
    if (x_adv.rank() != 4 || x_adv.dim(0) != static_cast<int64_t>(labels.size()))
        throw ContractError("attack_success_rate: need one (C, H, W) image per label");
    const auto pred = predict(downstream, x_adv);
    int64_t wrong = 0;
    for (size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i];
    return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

double clean_accuracy(const Model& downstream, const Dataset& data) {
    if (data.size() == 0) throw ContractError("clean_accuracy: empty dataset");
    return 1.0 - attack_success_rate(downstream, data.images, data.labels);
}

EvalReport evaluate_attack(const Model& downstream, const Dataset& clean, const Tensor& x_adv, float epsilon,
                           const std::vector<AttackRecord>& attacks) {
    if (clean.size() == 0) throw ContractError("evaluate_attack: empty dataset");
    if (x_adv.shape() != clean.images.shape())
        throw ContractError("evaluate_attack: adversarial set " + shape_str(x_adv.shape()) + " does not match " +
                            shape_str(clean.images.shape()));
    if (!attacks.empty() && static_cast<int64_t>(attacks.size()) != clean.size())
        throw ContractError("evaluate_attack: need one attack record per sample");
    const auto clean_pred = predict(downstream, clean.images);
    const auto adv_pred = predict(downstream, x_adv);
    EvalReport rep;
    rep.epsilon = epsilon;
    const int64_t per = x_adv.size() / clean.size();
    int64_t wrong = 0, correct = 0, flipped = 0;
    for (int64_t i = 0; i < clean.size(); ++i) {
        EvalRecord r;
        r.id = i;
        r.label = clean.labels[static_cast<size_t>(i)];
        r.clean_prediction = clean_pred[static_cast<size_t>(i)];
        r.adversarial_prediction = adv_pred[static_cast<size_t>(i)];
        for (int64_t j = i * per; j < (i + 1) * per; ++j)
            r.linf = std::max(r.linf, std::fabs(static_cast<double>(x_adv[j]) - clean.images[j]));
        if (r.linf > static_cast<double>(epsilon))
            throw ContractError("evaluate_attack: sample " + std::to_string(i) + " exceeds the epsilon budget");
        if (!attacks.empty()) r.attack = attacks[static_cast<size_t>(i)];
        wrong += r.adversarial_prediction != r.label;
        if (r.clean_prediction == r.label) {
            ++correct;
            flipped += r.adversarial_prediction != r.label;
        }
        rep.records.push_back(std::move(r));
    }
    const double n = static_cast<double>(clean.size());
    rep.asr = static_cast<double>(wrong) / n;
    rep.clean_accuracy = static_cast<double>(correct) / n;
    rep.asr_clean_correct = correct ? static_cast<double>(flipped) / static_cast<double>(correct) : 0.0;
    return rep;
}

json EvalReport::to_json() const {
    json recs = json::array();
    for (const auto& r : records) {
        json atcs = json::object();
        for (const auto& [l, v] : r.attack.atcs_per_layer) atcs[std::to_string(l)] = v;
        recs.push_back({{"id", r.id},
                        {"label", r.label},
                        {"clean_prediction", r.clean_prediction},
                        {"adversarial_prediction", r.adversarial_prediction},
                        {"linf", r.linf},
                        {"stage", r.attack.stage},
                        {"selected_layers", r.attack.selected_layers},
                        {"atcs_per_layer", atcs}});
    }
    return {{"asr", asr},
            {"clean_accuracy", clean_accuracy},
            {"asr_clean_correct", asr_clean_correct},
            {"epsilon", epsilon},
            {"count", records.size()},
            {"records", recs}};
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "id,label,clean_prediction,adversarial_prediction,linf,stage,selected_layers\n";
    for (const auto& r : records) {
        os << r.id << ',' << r.label << ',' << r.clean_prediction << ',' << r.adversarial_prediction << ',' << r.linf
           << ',' << r.attack.stage << ',';
        for (size_t i = 0; i < r.attack.selected_layers.size(); ++i)
            os << (i ? ";" : "") << r.attack.selected_layers[i];
        os << '\n';
    }
    return os.str();
}

std::vector<int> logged_steps(int steps) {
    std::vector<int> out;
    const int stride = steps <= 20 ? 1 : (steps + 19) / 20;
    for (int t = 0; t <= steps; t += stride) out.push_back(t);
    if (out.back() != steps) out.push_back(steps);
    return out;
}

std::vector<CurvePoint> atcs_asr_sweep(const Model& pretrained, const Model& downstream, const Dataset& samples,
                                       const std::vector<int>& layers, const SweepSchedule& schedule) {
    if (layers.empty()) throw ContractError("atcs_asr_sweep: no layers");
    if (samples.size() == 0) throw ContractError("atcs_asr_sweep: no samples");
    check_backbones(pretrained, downstream, "atcs_asr_sweep");
    const std::vector<int> steps = logged_steps(schedule.steps);
    std::vector<CurvePoint> out;
    for (int layer : layers) {
        std::map<int, std::pair<double, int64_t>> acc;  // step -> (atcs sum, wrong)
        for (const auto& idx : chunks(samples.size())) {
            const Tensor x = take_rows(samples.images, idx);
            const auto clean = batch_features(pretrained, x, layer);
            std::vector<Rng> rngs;
            for (int64_t i : idx) rngs.push_back(make_rng(schedule.seed, "attack", static_cast<uint64_t>(i)));
            auto observe = [&](int step, const Tensor& adv) {
                if (!std::binary_search(steps.begin(), steps.end(), step)) return;
                const auto f = batch_features(pretrained, adv, layer);
                const auto pred = predict(downstream, adv);
                auto& [a, w] = acc[step];
                for (size_t b = 0; b < idx.size(); ++b) {
                    a += atcs(clean[b][static_cast<size_t>(layer - 1)], f[b][static_cast<size_t>(layer - 1)]);
                    w += pred[b] != samples.labels[static_cast<size_t>(idx[b])];
                }
            };
            pgd_minimize_batch(pretrained, x, std::vector<std::vector<int>>(idx.size(), {layer}), LossKind::atcs,
                               schedule.epsilon, schedule.eta, schedule.steps, rngs, observe);
        }
        const double n = static_cast<double>(samples.size());
        for (const auto& [step, v] : acc) out.push_back({layer, step, v.first / n, static_cast<double>(v.second) / n});
    }
    return out;
}

std::string curve_csv(const std::vector<CurvePoint>& points, std::string_view loss_kind, double gamma) {
    std::ostringstream os;
    os.precision(10);
    os << "layer,step,atcs,asr,loss_kind,gamma\n";
    for (const auto& p : points)
        os << p.layer << ',' << p.step << ',' << p.atcs << ',' << p.asr << ',' << loss_kind << ',' << gamma << '\n';
    return os.str();
}

std::pair<double, double> feature_shift_atcs(const Model& pretrained, const Model& finetuned, const Dataset& samples,
                                             int k, bool use_adversarial, const AttackConfig& attack) {
    check_backbones(pretrained, finetuned, "feature_shift_atcs");
    if (samples.size() == 0) throw ContractError("feature_shift_atcs: no samples");
    if (k < 1 || k > pretrained.config.depth) throw ContractError("feature_shift_atcs: layer out of range");
    double clean = 0.0, adv = 0.0;
    for (const auto& idx : chunks(samples.size())) {
        const Tensor x = take_rows(samples.images, idx);
        const auto a = batch_features(pretrained, x, k);
        const auto b = batch_features(finetuned, x, k);
        for (size_t i = 0; i < idx.size(); ++i) clean += atcs(a[i].back(), b[i].back());
        if (use_adversarial) {
            std::vector<uint64_t> ids(idx.begin(), idx.end());
            std::vector<Tensor> rows;
            for (auto& r : dta_attack_batch(pretrained, x, attack, ids)) rows.push_back(std::move(r.x_adv));
            const Tensor xa = stack(rows);
            const auto pa = batch_features(pretrained, xa, k);
            const auto fa = batch_features(finetuned, xa, k);
            for (size_t i = 0; i < idx.size(); ++i) adv += atcs(pa[i].back(), fa[i].back());
        }
    }
    const double n = static_cast<double>(samples.size());
    return {clean / n, use_adversarial ? adv / n : 0.0};
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw ContractError("spearman: need two equal-length series of length >= 2");
    auto constant = [](std::span<const double> v) { return std::all_of(v.begin(), v.end(), [&](double e) { return e == v[0]; }); };
    if (constant(xs) || constant(ys)) throw ContractError("spearman: a series is constant");
    const auto rx = ranks(xs), ry = ranks(ys);
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(rx.size());
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(ry.size());
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace dta
