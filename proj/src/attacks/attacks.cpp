// SPDX-License-Identifier: Apache-2.0
#include "dta/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dta/error.hpp"
#include "dta/tape.hpp"

namespace dta {

namespace {

void check_same(const FeatureMap& a, const FeatureMap& b, const char* who) {
    if (a.tokens.shape() != b.tokens.shape())
        throw ContractError(std::string(who) + ": shape mismatch " + shape_str(a.tokens.shape()) + " and " +
                            shape_str(b.tokens.shape()));
    if (a.layer != b.layer)
        throw ContractError(std::string(who) + ": layer mismatch " + std::to_string(a.layer) + " and " +
                            std::to_string(b.layer));
}

double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    const double den = std::sqrt(aa) * std::sqrt(bb);
    return den == 0.0 ? 0.0 : ab / den;
}

double norm(std::span<const float> a) {
    double s = 0.0;
    for (float v : a) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

void check_image_batch(const Model& model, const Tensor& x, const char* who) {
    const Shape img = model.config.image_shape();
    if (x.rank() != 4 || !std::equal(img.begin(), img.end(), x.shape().begin() + 1))
        throw ContractError(std::string(who) + ": expected (B, " + std::to_string(img[0]) + ", " +
                            std::to_string(img[1]) + ", " + std::to_string(img[2]) + ") images, got " +
                            shape_str(x.shape()));
    for (float v : x.data())
        if (!(v >= 0.0f && v <= 1.0f)) throw ContractError(std::string(who) + ": image values must lie in [0, 1]");
}

void check_schedule(float epsilon, float eta, int steps, const char* who) {
    if (!(epsilon > 0.0f) || !std::isfinite(epsilon)) throw ContractError(std::string(who) + ": epsilon must be > 0");
    if (!(eta > 0.0f) || !std::isfinite(eta)) throw ContractError(std::string(who) + ": step size must be > 0");
    if (steps < 1) throw ContractError(std::string(who) + ": steps must be >= 1");
}

Tensor batched(const Tensor& image) {
    Shape s{1};
    s.insert(s.end(), image.shape().begin(), image.shape().end());
    return image.reshaped(s);
}

// Clips every element of `v` to the epsilon-ball around x and to [0, 1],
// using float bounds that keep |v - x| <= epsilon exact.
void project(std::span<float> v, std::span<const float> x, float epsilon) {
    for (size_t i = 0; i < v.size(); ++i) {
        const double xi = x[i];
        const float lo = float_at_least(std::max(xi - epsilon, 0.0));
        const float hi = float_at_most(std::min(xi + epsilon, 1.0));
        v[i] = std::clamp(v[i], lo, hi);
    }
}

float sign(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

} // namespace

std::string_view loss_kind_name(LossKind kind) {
    switch (kind) {
    case LossKind::atcs: return "atcs";
    case LossKind::l1: return "l1";
    case LossKind::l2: return "l2";
    case LossKind::l3: return "l3";
    case LossKind::l4: return "l4";
    }
    throw ContractError("unknown loss kind");
}

LossKind parse_loss_kind(std::string_view name) {
    for (LossKind k : {LossKind::atcs, LossKind::l1, LossKind::l2, LossKind::l3, LossKind::l4})
        if (loss_kind_name(k) == name) return k;
    throw ContractError("unknown loss kind '" + std::string(name) + "' (expected atcs, l1, l2, l3 or l4)");
}

std::string_view stage_name(Stage stage) {
    return stage == Stage::shallow_only ? "shallow-only" : "multi-layer";
}

void AttackConfig::validate(int64_t depth) const {
    check_schedule(epsilon, eta_shallow, steps_shallow, "attack config");
    check_schedule(epsilon, eta_deep, steps_deep, "attack config");
    if (epsilon > 1.0f) throw ContractError("attack config: epsilon must be <= 1");
    if (!(gamma >= -1.0 && gamma <= 1.0)) throw ContractError("attack config: gamma must lie in [-1, 1]");
    if (n_layers < 1 || n_layers > depth)
        throw ContractError("attack config: N must lie in [1, " + std::to_string(depth) + "]");
}

float float_at_most(double v) {
    float f = static_cast<float>(v);
    if (static_cast<double>(f) > v) f = std::nextafter(f, -INFINITY);
    return f;
}

float float_at_least(double v) {
    float f = static_cast<float>(v);
    if (static_cast<double>(f) < v) f = std::nextafter(f, INFINITY);
    return f;
}

double atcs(const FeatureMap& a, const FeatureMap& b) {
    check_same(a, b, "atcs");
    if (a.tokens.rank() != 2) throw ContractError("atcs: feature maps must be (T, d)");
    const int64_t T = a.tokens.dim(0), d = a.tokens.dim(1);
    auto da = a.tokens.data();
    auto db = b.tokens.data();
    double total = 0.0;
    for (int64_t t = 0; t < T; ++t) total += cosine(da.subspan(t * d, d), db.subspan(t * d, d));
    return total / static_cast<double>(T);
}

double loss_value(LossKind kind, const FeatureMap& fx, const FeatureMap& fxadv) {
    if (kind != LossKind::l4) check_same(fx, fxadv, "loss_value");
    switch (kind) {
    case LossKind::atcs: return atcs(fx, fxadv);
    case LossKind::l1: return cosine(fx.tokens.data(), fxadv.tokens.data());
    case LossKind::l2: {
        double s = 0.0;
        auto a = fx.tokens.data();
        auto b = fxadv.tokens.data();
        for (size_t i = 0; i < a.size(); ++i) {
            const double e = static_cast<double>(a[i]) - b[i];
            s += e * e;
        }
        return -std::sqrt(s);
    }
    case LossKind::l3: {
        double s = 0.0;
        auto a = fx.tokens.data();
        auto b = fxadv.tokens.data();
        for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
        return s;
    }
    case LossKind::l4: return -norm(fxadv.tokens.data());
    }
    throw ContractError("loss_value: unknown loss kind");
}

Var loss_var(LossKind kind, Var clean, Var adv) {
    const Shape& s = adv.shape();
    if (s.size() != 3) throw ContractError("loss_var: features must be (B, T, d)");
    const Shape flat{s[0], s[1] * s[2]};
    switch (kind) {
    case LossKind::atcs: return mean_last(cosine_similarity(clean, adv));
    case LossKind::l1: return cosine_similarity(reshape(clean, flat), reshape(adv, flat));
    case LossKind::l2: return scale(l2_norm(reshape(sub(adv, clean), flat)), -1.0f);
    case LossKind::l3: return dot(reshape(clean, flat), reshape(adv, flat));
    case LossKind::l4: return scale(l2_norm(reshape(adv, flat)), -1.0f);
    }
    throw ContractError("loss_var: unknown loss kind");
}

std::vector<int> candidate_layers(int64_t depth) {
    std::vector<int> layers;
    for (int64_t l = std::max<int64_t>(depth / 3, 1); l <= depth; ++l) layers.push_back(static_cast<int>(l));
    return layers;
}

std::vector<int> select_smallest(const std::map<int, double>& values, int n) {
    std::vector<std::pair<double, int>> order;
    for (const auto& [layer, v] : values) order.emplace_back(v, layer);
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        return a.first < b.first || (a.first == b.first && a.second < b.second);
    });
    std::vector<int> out;
    for (int i = 0; i < n && i < static_cast<int>(order.size()); ++i) out.push_back(order[static_cast<size_t>(i)].second);
    std::sort(out.begin(), out.end());
    return out;
}

int default_nrdm_layer(int64_t depth) {
    return static_cast<int>(std::lround(2.0 * static_cast<double>(depth) / 3.0));
}

std::vector<std::vector<FeatureMap>> batch_features(const Model& model, const Tensor& x, int max_layer) {
    check_image_batch(model, x, "batch_features");
    if (max_layer < 1 || max_layer > model.config.depth)
        throw ContractError("batch_features: layer " + std::to_string(max_layer) + " out of range");
    Tape tape;
    ForwardSpec spec;
    spec.max_layer = max_layer;
    ForwardTrace trace = forward_batch(tape, model.config, model.params, model.adapters, tape.constant(x), spec);
    const int64_t B = x.dim(0);
    std::vector<std::vector<FeatureMap>> out(static_cast<size_t>(B));
    for (int l = 0; l < max_layer; ++l) {
        const Tensor& f = trace.features[static_cast<size_t>(l)].value();
        for (int64_t b = 0; b < B; ++b) out[static_cast<size_t>(b)].push_back({l + 1, row(f, b)});
    }
    return out;
}

Tensor apply_perturbation(const Tensor& x, const Tensor& delta, float epsilon) {
    const bool single = x.shape() == delta.shape();
    if (!single && (x.rank() != delta.rank() + 1 || !std::equal(delta.shape().begin(), delta.shape().end(),
                                                                x.shape().begin() + 1)))
        throw ContractError("apply_perturbation: shape mismatch " + shape_str(x.shape()) + " and " +
                            shape_str(delta.shape()));
    Tensor out(x.shape());
    auto o = out.mutable_data();
    auto xs = x.data();
    auto ds = delta.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] = xs[i] + ds[i % ds.size()];
    project(o, xs, epsilon);
    return out;
}

std::vector<PgdOutput> pgd_minimize_batch(const Model& model, const Tensor& x,
                                          const std::vector<std::vector<int>>& layer_sets, LossKind kind,
                                          float epsilon, float eta, int steps, std::span<Rng> rngs,
                                          const StepObserver& observer) {
    check_image_batch(model, x, "pgd_minimize");
    check_schedule(epsilon, eta, steps, "pgd_minimize");
    const int64_t B = x.dim(0);
    if (static_cast<int64_t>(layer_sets.size()) != B || static_cast<int64_t>(rngs.size()) != B)
        throw ContractError("pgd_minimize: need one layer set and one rng per sample");
    const int M = static_cast<int>(model.config.depth);
    int max_layer = 0;
    std::vector<std::vector<float>> weight(static_cast<size_t>(M), std::vector<float>(static_cast<size_t>(B), 0.0f));
    for (int64_t b = 0; b < B; ++b) {
        const auto& set = layer_sets[static_cast<size_t>(b)];
        if (set.empty()) throw ContractError("pgd_minimize: layer set is empty");
        for (int l : set) {
            if (l < 1 || l > M)
                throw ContractError("pgd_minimize: layer " + std::to_string(l) + " outside 1.." + std::to_string(M));
            weight[static_cast<size_t>(l - 1)][static_cast<size_t>(b)] = 1.0f;
            max_layer = std::max(max_layer, l);
        }
    }

    ForwardSpec spec;
    spec.max_layer = max_layer;
    std::vector<Tensor> clean;
    {
        Tape tape;
        ForwardTrace trace = forward_batch(tape, model.config, model.params, model.adapters, tape.constant(x), spec);
        for (const Var& f : trace.features) clean.push_back(f.value());
    }

    auto xs = x.data();
    const size_t per = static_cast<size_t>(x.size() / B);
    Tensor adv(x.shape());
    {
        auto a = adv.mutable_data();
        for (int64_t b = 0; b < B; ++b) {
            std::uniform_real_distribution<double> noise(-static_cast<double>(epsilon), static_cast<double>(epsilon));
            Rng& rng = rngs[static_cast<size_t>(b)];
            for (size_t i = static_cast<size_t>(b) * per; i < static_cast<size_t>(b + 1) * per; ++i)
                a[i] = xs[i] + static_cast<float>(noise(rng));
        }
        project(a, xs, epsilon);
    }
    if (observer) observer(0, adv);

    for (int step = 1; step <= steps; ++step) {
        Tape tape;
        Var input = tape.leaf(adv, true);
        ForwardTrace trace = forward_batch(tape, model.config, model.params, model.adapters, input, spec);
        Var total;
        for (int l = 1; l <= max_layer; ++l) {
            const auto& w = weight[static_cast<size_t>(l - 1)];
            if (std::all_of(w.begin(), w.end(), [](float v) { return v == 0.0f; })) continue;
            Var per_sample = loss_var(kind, tape.constant(clean[static_cast<size_t>(l - 1)]),
                                      trace.features[static_cast<size_t>(l - 1)]);
            Var term = sum(mul(per_sample, tape.constant(Tensor({B}, w))));
            total = total.valid() ? add(total, term) : term;
        }
        Tensor grad = tape.backward(total).of(input);
        if (!grad.all_finite())
            throw NumericError("pgd_minimize: non-finite gradient at step " + std::to_string(step));
        auto a = adv.mutable_data();
        auto g = grad.data();
        for (size_t i = 0; i < a.size(); ++i) a[i] -= eta * sign(g[i]);
        project(a, xs, epsilon);
        if (observer) observer(step, adv);
    }

    std::vector<PgdOutput> out(static_cast<size_t>(B));
    auto clean_rows = batch_features(model, x, max_layer);
    auto adv_rows = batch_features(model, adv, max_layer);
    for (int64_t b = 0; b < B; ++b) {
        auto& o = out[static_cast<size_t>(b)];
        o.x_adv = row(adv, b);
        for (int l : layer_sets[static_cast<size_t>(b)])
            o.layer_losses.push_back(loss_value(kind, clean_rows[static_cast<size_t>(b)][static_cast<size_t>(l - 1)],
                                                adv_rows[static_cast<size_t>(b)][static_cast<size_t>(l - 1)]));
    }
    return out;
}

PgdOutput pgd_minimize(const Model& model, const Tensor& x, const std::vector<int>& layer_set, LossKind kind,
                       float epsilon, float eta, int steps, uint64_t seed) {
    Rng rng = make_rng(seed, "attack", 0);
    return std::move(pgd_minimize_batch(model, batched(x), {layer_set}, kind, epsilon, eta, steps,
                                        std::span<Rng>(&rng, 1))[0]);
}

std::vector<AttackResult> dta_attack_batch(const Model& model, const Tensor& x, const AttackConfig& cfg,
                                           std::span<const uint64_t> sample_indices) {
    const int64_t M = model.config.depth;
    cfg.validate(M);
    check_image_batch(model, x, "dta_attack");
    const int64_t B = x.dim(0);
    if (static_cast<int64_t>(sample_indices.size()) != B)
        throw ContractError("dta_attack: need one sample index per image");
    std::vector<Rng> rngs;
    for (uint64_t idx : sample_indices) rngs.push_back(make_rng(cfg.seed, "attack", idx));

    std::vector<AttackResult> results(static_cast<size_t>(B));
    std::vector<Tensor> final_adv(static_cast<size_t>(B));

    // Stage 1: shallow layer only.
    auto stage1 = pgd_minimize_batch(model, x, std::vector<std::vector<int>>(static_cast<size_t>(B), {1}), cfg.loss,
                                     cfg.epsilon, cfg.eta_shallow, cfg.steps_shallow, rngs);
    std::vector<Tensor> stage1_adv;
    for (auto& o : stage1) stage1_adv.push_back(o.x_adv);
    auto f_clean = batch_features(model, x, 1);
    auto f_adv = batch_features(model, stack(stage1_adv), 1);
    std::vector<int64_t> deep;
    for (int64_t b = 0; b < B; ++b) {
        auto& r = results[static_cast<size_t>(b)];
        r.stage1_final_atcs = atcs(f_clean[static_cast<size_t>(b)][0], f_adv[static_cast<size_t>(b)][0]);
        if (r.stage1_final_atcs < cfg.gamma) {
            r.stage = Stage::shallow_only;
            r.selected_layers = {1};
            final_adv[static_cast<size_t>(b)] = stage1_adv[static_cast<size_t>(b)];
        } else {
            r.stage = Stage::multi_layer;
            deep.push_back(b);
        }
    }

    if (!deep.empty()) {
        const Tensor xd = take_rows(x, deep);
        std::vector<Rng> deep_rngs;
        for (int64_t b : deep) deep_rngs.push_back(rngs[static_cast<size_t>(b)]);
        const std::vector<int> candidates = candidate_layers(M);
        const int n = std::min<int>(cfg.n_layers, static_cast<int>(candidates.size()));

        // Stage 2: joint attack on the candidate layers, then rank them.
        auto stage2 = pgd_minimize_batch(model, xd, std::vector<std::vector<int>>(deep.size(), candidates), cfg.loss,
                                         cfg.epsilon, cfg.eta_deep, cfg.steps_deep, deep_rngs);
        std::vector<std::vector<int>> chosen;
        for (size_t i = 0; i < deep.size(); ++i) {
            std::map<int, double> per_layer;
            for (size_t j = 0; j < candidates.size(); ++j) per_layer[candidates[j]] = stage2[i].layer_losses[j];
            chosen.push_back(select_smallest(per_layer, n));
        }

        // Stage 3: fresh start on the selected layers.
        auto stage3 = pgd_minimize_batch(model, xd, chosen, cfg.loss, cfg.epsilon, cfg.eta_deep, cfg.steps_deep,
                                         deep_rngs);
        for (size_t i = 0; i < deep.size(); ++i) {
            const auto b = static_cast<size_t>(deep[i]);
            results[b].selected_layers = chosen[i];
            final_adv[b] = stage3[i].x_adv;
        }
    }

    auto clean_all = batch_features(model, x, static_cast<int>(M));
    auto adv_all = batch_features(model, stack(final_adv), static_cast<int>(M));
    for (int64_t b = 0; b < B; ++b) {
        auto& r = results[static_cast<size_t>(b)];
        r.x_adv = final_adv[static_cast<size_t>(b)];
        const Tensor xb = row(x, b);
        r.delta = Tensor(xb.shape());
        auto d = r.delta.mutable_data();
        for (size_t i = 0; i < d.size(); ++i) d[i] = r.x_adv[static_cast<int64_t>(i)] - xb[static_cast<int64_t>(i)];
        for (int l = 1; l <= M; ++l)
            r.atcs_per_layer[l] = atcs(clean_all[static_cast<size_t>(b)][static_cast<size_t>(l - 1)],
                                       adv_all[static_cast<size_t>(b)][static_cast<size_t>(l - 1)]);
    }
    return results;
}

AttackResult dta_attack(const Model& model, const Tensor& x, const AttackConfig& cfg, uint64_t sample_index) {
    return std::move(dta_attack_batch(model, batched(x), cfg, std::span<const uint64_t>(&sample_index, 1))[0]);
}

std::vector<Tensor> nrdm_attack_batch(const Model& model, const Tensor& x, int k, float epsilon, float eta,
                                      int steps, uint64_t seed, std::span<const uint64_t> sample_indices) {
    check_image_batch(model, x, "nrdm_attack");
    if (static_cast<int64_t>(sample_indices.size()) != x.dim(0))
        throw ContractError("nrdm_attack: need one sample index per image");
    std::vector<Rng> rngs;
    for (uint64_t idx : sample_indices) rngs.push_back(make_rng(seed, "attack", idx));
    // Descent on the negated distance is ascent on the distance.
    auto out = pgd_minimize_batch(model, x, std::vector<std::vector<int>>(sample_indices.size(), {k}), LossKind::l2,
                                  epsilon, eta, steps, rngs);
    std::vector<Tensor> adv;
    for (auto& o : out) adv.push_back(std::move(o.x_adv));
    return adv;
}

Tensor nrdm_attack(const Model& model, const Tensor& x, int k, float epsilon, float eta, int steps, uint64_t seed,
                   uint64_t sample_index) {
    return nrdm_attack_batch(model, batched(x), k, epsilon, eta, steps, seed,
                             std::span<const uint64_t>(&sample_index, 1))[0];
}

std::vector<AttackResult> dta_attack_all(const Model& model, const Tensor& images, const AttackConfig& cfg,
                                         int64_t chunk) {
    if (chunk < 1) throw ContractError("dta_attack_all: chunk must be >= 1");
    std::vector<AttackResult> out;
    for (int64_t s = 0; s < images.dim(0); s += chunk) {
        std::vector<int64_t> rows(static_cast<size_t>(std::min(chunk, images.dim(0) - s)));
        std::iota(rows.begin(), rows.end(), s);
        const std::vector<uint64_t> ids(rows.begin(), rows.end());
        for (auto& r : dta_attack_batch(model, take_rows(images, rows), cfg, ids)) out.push_back(std::move(r));
    }
    return out;
}

Tensor nrdm_attack_all(const Model& model, const Tensor& images, int k, float epsilon, float eta, int steps,
                       uint64_t seed, int64_t chunk) {
    if (chunk < 1) throw ContractError("nrdm_attack_all: chunk must be >= 1");
    std::vector<Tensor> out;
    for (int64_t s = 0; s < images.dim(0); s += chunk) {
        std::vector<int64_t> rows(static_cast<size_t>(std::min(chunk, images.dim(0) - s)));
        std::iota(rows.begin(), rows.end(), s);
        const std::vector<uint64_t> ids(rows.begin(), rows.end());
        for (auto& t : nrdm_attack_batch(model, take_rows(images, rows), k, epsilon, eta, steps, seed, ids))
            out.push_back(std::move(t));
    }
    return stack(out);
}

Tensor uniform_noise_attack(const Tensor& images, float epsilon, uint64_t seed) {
    if (images.rank() < 2 || images.dim(0) < 1) throw ContractError("uniform_noise_attack: expected a batch");
    if (!(epsilon > 0.0f)) throw ContractError("uniform_noise_attack: epsilon must be > 0");
    Tensor out = images;
    auto o = out.mutable_data();
    const size_t per = o.size() / static_cast<size_t>(images.dim(0));
    std::uniform_real_distribution<double> u(-static_cast<double>(epsilon), static_cast<double>(epsilon));
    for (int64_t i = 0; i < images.dim(0); ++i) {
        Rng rng = make_rng(seed, "noise", static_cast<uint64_t>(i));
        auto v = o.subspan(static_cast<size_t>(i) * per, per);
        for (float& p : v) p += static_cast<float>(u(rng));
        project(v, images.data().subspan(static_cast<size_t>(i) * per, per), epsilon);
    }
    return out;
}

namespace {

// Batch-mean feature norm at layer k and, when wanted, its gradient with
// respect to delta.
double pap_step(const Model& model, const Tensor& batch, int k, const Tensor& delta, Tensor* grad_delta) {
    const int64_t B = batch.dim(0);
    Tensor input(batch.shape());
    auto in = input.mutable_data();
    auto xs = batch.data();
    auto ds = delta.data();
    for (size_t i = 0; i < in.size(); ++i) in[i] = std::clamp(xs[i] + ds[i % ds.size()], 0.0f, 1.0f);
    Tape tape;
    Var leaf = tape.leaf(input, grad_delta != nullptr);
    ForwardSpec spec;
    spec.max_layer = k;
    ForwardTrace trace = forward_batch(tape, model.config, model.params, model.adapters, leaf, spec);
    const Var f = trace.features.back();
    Var obj = mean(l2_norm(reshape(f, {B, f.shape()[1] * f.shape()[2]})));
    if (grad_delta) {
        Tensor g = tape.backward(obj).of(leaf);
        if (!g.all_finite()) throw NumericError("pap_uap: non-finite gradient");
        Tensor gd(delta.shape());
        auto out = gd.mutable_data();
        auto gs = g.data();
        std::vector<double> acc(out.size(), 0.0);
        for (size_t i = 0; i < gs.size(); ++i) {
            const float s = xs[i] + ds[i % ds.size()];
            if (s > 0.0f && s < 1.0f) acc[i % ds.size()] += gs[i];
        }
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i]);
        *grad_delta = gd;
    }
    return obj.value().item();
}

void check_batches(const Model& model, const std::vector<Tensor>& batches, int k, const char* who) {
    if (batches.empty()) throw ContractError(std::string(who) + ": no batches");
    for (const auto& b : batches) check_image_batch(model, b, who);
    if (k < 1 || k > model.config.depth)
        throw ContractError(std::string(who) + ": layer " + std::to_string(k) + " out of range");
}

} // namespace

Tensor pap_uap(const Model& model, const std::vector<Tensor>& batches, int k, float epsilon, float eta, int epochs,
               uint64_t seed) {
    check_batches(model, batches, k, "pap_uap");
    check_schedule(epsilon, eta, epochs, "pap_uap");
    Rng rng = make_rng(seed, "pap");
    std::uniform_real_distribution<double> noise(-static_cast<double>(epsilon), static_cast<double>(epsilon));
    Tensor delta(model.config.image_shape());
    for (float& v : delta.mutable_data()) v = std::clamp(static_cast<float>(noise(rng)), -epsilon, epsilon);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (const auto& batch : batches) {
            Tensor g;
            pap_step(model, batch, k, delta, &g);
            auto d = delta.mutable_data();
            auto gs = g.data();
            for (size_t i = 0; i < d.size(); ++i) d[i] = std::clamp(d[i] + eta * sign(gs[i]), -epsilon, epsilon);
        }
    }
    return delta;
}

double pap_objective(const Model& model, const std::vector<Tensor>& batches, int k, const Tensor& delta) {
    check_batches(model, batches, k, "pap_objective");
    double total = 0.0;
    for (const auto& b : batches) total += pap_step(model, b, k, delta, nullptr);
    return total / static_cast<double>(batches.size());
}

} // namespace dta
