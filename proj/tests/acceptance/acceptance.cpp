// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, then a summary.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "dta/attacks.hpp"
#include "dta/checkpoint.hpp"
#include "dta/dataset.hpp"
#include "dta/evaluation.hpp"
#include "dta/training.hpp"
#include "support/gradcheck.hpp"
#include "support/reference_vit.hpp"

using namespace dta;
using dta::testing::compare_gradients;
using dta::testing::random_tensor;
using clk = std::chrono::steady_clock;
using nlohmann::json;

namespace {

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Outcome {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

// ---------------------------------------------------------------------------
// 1. gradients

// A random chain of shape-preserving ops on (3, 4) values, replayable on
// any tape so the same graph can be differentiated and probed.
struct ToyGraph {
    std::vector<int> ops;
    int head = 0;
    float factor = 1.0f;
    std::vector<Tensor> leaves;  // x, y (3,4); w (4,4); g, b (4)
    Tensor weights;
    std::vector<int32_t> labels{0, 2, 3};

    Var build(const std::vector<Var>& v) const {
        Var cur = v[0];
        for (int op : ops) {
            switch (op) {
            case 0: cur = add(cur, v[1]); break;
            case 1: cur = sub(cur, v[1]); break;
            case 2: cur = mul(cur, v[1]); break;
            case 3: cur = scale(cur, factor); break;
            case 4: cur = matmul(cur, v[2]); break;
            case 5: cur = gelu(cur); break;
            case 6: cur = softmax(cur); break;
            case 7: cur = layer_norm(cur, v[3], v[4]); break;
            case 8: cur = broadcast_add(cur, v[4]); break;
            default: cur = transpose(transpose(cur)); break;
            }
        }
        switch (head) {
        case 0: return cur;
        case 1: return l2_norm(cur);
        case 2: return cosine_similarity(cur, v[1]);
        default: return cross_entropy(cur, labels);
        }
    }
};

// Float64 evaluation of the same graph, projected on the weights: the
// finite-difference oracle. Values are row-major (rows, cols).
double reference_value(const ToyGraph& g, const std::vector<Tensor>& leaves, const Tensor& weights) {
    using M = std::vector<double>;
    const auto load = [](const Tensor& t) { return M(t.data().begin(), t.data().end()); };
    const int R = 3, C = 4;
    M cur = load(leaves[0]);
    const M y = load(leaves[1]), w = load(leaves[2]), gam = load(leaves[3]), bet = load(leaves[4]);
    for (int op : g.ops) {
        M next(cur.size());
        switch (op) {
        case 0: for (size_t i = 0; i < cur.size(); ++i) next[i] = cur[i] + y[i]; break;
        case 1: for (size_t i = 0; i < cur.size(); ++i) next[i] = cur[i] - y[i]; break;
        case 2: for (size_t i = 0; i < cur.size(); ++i) next[i] = cur[i] * y[i]; break;
        case 3: for (size_t i = 0; i < cur.size(); ++i) next[i] = cur[i] * g.factor; break;
        case 4:
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    for (int k = 0; k < C; ++k) next[r * C + c] += cur[r * C + k] * w[k * C + c];
            break;
        case 5:
            for (size_t i = 0; i < cur.size(); ++i) next[i] = 0.5 * cur[i] * (1.0 + std::erf(cur[i] / std::sqrt(2.0)));
            break;
        case 6:
            for (int r = 0; r < R; ++r) {
                double mx = -1e300, z = 0.0;
                for (int c = 0; c < C; ++c) mx = std::max(mx, cur[r * C + c]);
                for (int c = 0; c < C; ++c) z += std::exp(cur[r * C + c] - mx);
                for (int c = 0; c < C; ++c) next[r * C + c] = std::exp(cur[r * C + c] - mx) / z;
            }
            break;
        case 7:
            for (int r = 0; r < R; ++r) {
                double m = 0.0, v = 0.0;
                for (int c = 0; c < C; ++c) m += cur[r * C + c] / C;
                for (int c = 0; c < C; ++c) v += (cur[r * C + c] - m) * (cur[r * C + c] - m) / C;
                for (int c = 0; c < C; ++c) next[r * C + c] = (cur[r * C + c] - m) / std::sqrt(v + 1e-6) * gam[c] + bet[c];
            }
            break;
        case 8: for (size_t i = 0; i < cur.size(); ++i) next[i] = cur[i] + bet[i % C]; break;
        default: next = cur; break;
        }
        cur = std::move(next);
    }
    M out;
    if (g.head == 0) {
        out = cur;
    } else {
        for (int r = 0; r < R; ++r) {
            double aa = 0.0, bb = 0.0, ab = 0.0, mx = -1e300, z = 0.0;
            for (int c = 0; c < C; ++c) {
                const double a = cur[r * C + c], b = y[r * C + c];
                aa += a * a;
                bb += b * b;
                ab += a * b;
                mx = std::max(mx, a);
            }
            for (int c = 0; c < C; ++c) z += std::exp(cur[r * C + c] - mx);
            if (g.head == 1) out.push_back(std::sqrt(aa));
            else if (g.head == 2) out.push_back(ab / (std::sqrt(aa) * std::sqrt(bb)));
            else out.push_back(std::log(z) + mx - cur[r * C + g.labels[static_cast<size_t>(r)]]);
        }
    }
    double acc = 0.0;
    for (size_t i = 0; i < out.size(); ++i) acc += out[i] * weights[static_cast<int64_t>(i)];
    return acc;
}

ToyGraph random_graph(std::mt19937_64& rng) {
    ToyGraph g;
    std::uniform_int_distribution<int> nops(2, 6), op(0, 9), head(0, 3);
    const int n = nops(rng);
    for (int i = 0; i < n; ++i) g.ops.push_back(op(rng));
    g.head = head(rng);
    g.factor = std::uniform_real_distribution<float>(-2.0f, 2.0f)(rng);
    g.leaves = {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), random_tensor(rng, {4, 4}),
                random_tensor(rng, {4}, 0.5f, 1.5f), random_tensor(rng, {4})};
    return g;
}

Outcome criterion_gradients() {
    const auto t0 = clk::now();
    std::mt19937_64 rng(1);
    int graphs_ok = 0;
    const int graphs = 24;
    double worst_cos = 1.0, worst_frac = 1.0;
    for (int k = 0; k < graphs; ++k) {
        const ToyGraph g = random_graph(rng);
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& l : g.leaves) leaves.push_back(tape.leaf(l, true));
        const Var out = g.build(leaves);
        ToyGraph gw = g;
        gw.weights = random_tensor(rng, out.shape());
        auto grads = tape.backward(sum(mul(out, tape.constant(gw.weights))));
        // The oracle has to agree with the engine's forward value first.
        const double ref = reference_value(g, g.leaves, gw.weights);
        bool ok = std::fabs(ref - dta::testing::project(out.value(), gw.weights)) <= 1e-4 * (1.0 + std::fabs(ref));
        for (size_t i = 0; i < g.leaves.size(); ++i) {
            auto f = [&](const Tensor& probe) {
                std::vector<Tensor> vs = g.leaves;
                vs[i] = probe;
                return reference_value(g, vs, gw.weights);
            };
            const auto a = compare_gradients(grads.of(leaves[i]), finite_difference_gradient(f, g.leaves[i], 1e-3));
            worst_cos = std::min(worst_cos, a.cosine);
            worst_frac = std::min(worst_frac, a.fraction_within);
            ok = ok && dta::testing::passes(a);
        }
        graphs_ok += ok;
    }

    // Depth-2 ViT with d = 16: input and parameter gradients against central
    // differences of an independent float64 forward.
    ModelConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.embed_dim = 16;
    c.depth = 2;
    c.num_heads = 2;
    c.mlp_hidden = 32;
    c.num_classes = 3;
    int vit_ok = 0, vit_checks = 0;
    for (int trial = 0; trial < 3; ++trial) {
        ViTParams p = init_params(c, 100 + static_cast<uint64_t>(trial));
        for (auto [name, t] : named_tensors(p))
            if (name.find("weight") != std::string::npos) *t = random_tensor(rng, t->shape(), -0.5f, 0.5f);
        const Tensor x = random_tensor(rng, c.image_shape(), 0.0f, 1.0f);
        const int label = trial % 3;
        Tape tape;
        ForwardSpec spec;
        spec.trainable = [](std::string_view n) { return n == "blocks.0.qkv.weight" || n == "head.weight"; };
        Var xv = tape.leaf(x.reshaped({1, 3, 16, 16}), true);
        auto trace = forward_batch(tape, c, p, {}, xv, spec);
        auto grads = tape.backward(sum(cross_entropy(trace.logits, {label})));
        const auto ref_loss = [&](const ViTParams& q, const Tensor& img) {
            return dta::testing::reference_cross_entropy(dta::testing::reference_forward(c, q, {}, img).logits, label);
        };
        const auto in = compare_gradients(grads.of(xv).reshaped(x.shape()),
                                          finite_difference_gradient([&](const Tensor& probe) { return ref_loss(p, probe); },
                                                                     x, 1e-3));
        vit_checks++;
        vit_ok += dta::testing::passes(in);
        worst_cos = std::min(worst_cos, in.cosine);
        worst_frac = std::min(worst_frac, in.fraction_within);
        for (const auto& [name, var] : trace.trainable) {
            Tensor* target = nullptr;
            for (auto [n, t] : named_tensors(p))
                if (n == name) target = t;
            const Tensor base = *target;
            auto f = [&](const Tensor& probe) {
                ViTParams q = p;
                for (auto [n, t] : named_tensors(q))
                    if (n == name) *t = probe;
                return ref_loss(q, x);
            };
            const auto a = compare_gradients(grads.of(var), finite_difference_gradient(f, base, 1e-3));
            vit_checks++;
            vit_ok += dta::testing::passes(a);
            worst_cos = std::min(worst_cos, a.cosine);
            worst_frac = std::min(worst_frac, a.fraction_within);
        }
    }
    const double secs = seconds_since(t0);
    Outcome o{1, "gradient correctness", graphs_ok == graphs && vit_ok == vit_checks && secs < 120.0, "", secs};
    o.detail = fmt("toy graphs %d/%d, vit checks %d/%d, worst cosine %.6f, worst within-1e-2 fraction %.3f, %.1fs (< 120s)",
                   graphs_ok, graphs, vit_ok, vit_checks, worst_cos, worst_frac, secs);
    return o;
}

// ---------------------------------------------------------------------------
// 2. ATCS axioms

Outcome criterion_atcs() {
    const auto t0 = clk::now();
    std::mt19937_64 rng(2);
    double worst_self = 0.0;
    for (int i = 0; i < 50; ++i) {
        const FeatureMap a{1, random_tensor(rng, {17, 64}, -3.0f, 3.0f)};
        worst_self = std::max(worst_self, std::fabs(atcs(a, a) - 1.0));
    }
    const double orth = atcs({1, Tensor({2, 2}, {1, 0, 0, 1})}, {1, Tensor({2, 2}, {0, 1, 1, 0})});
    const double mixed = atcs({1, Tensor({2, 2}, {1, 0, 1, 0})}, {1, Tensor({2, 2}, {1, 1, -1, 0})});
    const bool pass = worst_self <= 1e-6 && std::fabs(orth) <= 1e-6 && std::fabs(mixed + 0.14645) <= 1e-4;
    return {2, "ATCS axioms", pass,
            fmt("max |atcs(a,a)-1| %.2e (<= 1e-6), orthogonal %.2e (|.| <= 1e-6), mixed %.6f (-0.14645 +- 1e-4)",
                worst_self, orth, mixed),
            seconds_since(t0)};
}

// ---------------------------------------------------------------------------
// 3. constraint safety

Outcome criterion_constraints() {
    const auto t0 = clk::now();
    Model m;
    m.config.image_size = 16;
    m.config.patch_size = 8;
    m.config.embed_dim = 16;
    m.config.depth = 4;
    m.config.num_heads = 2;
    m.config.mlp_hidden = 32;
    m.config.num_classes = 4;
    m.params = init_params(m.config, 3);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> eps_d(1.0 / 255.0, 32.0 / 255.0), eta_d(0.001, 0.1), u(0.0, 1.0);
    std::uniform_int_distribution<int> steps_d(1, 5), layer_d(1, 4), n_d(1, 3);
    int ok = 0;
    int64_t on_bound = 0, pixels = 0;
    const int runs = 1000;
    const auto image_batch = [&](int64_t n) {
        Tensor x = random_tensor(rng, {n, 3, 16, 16}, 0.0f, 1.0f);
        // Saturated pixels exercise the [0, 1] clamp.
        for (float& v : x.mutable_data()) {
            const double r = u(rng);
            if (r < 0.1) v = 0.0f;
            else if (r < 0.2) v = 1.0f;
        }
        return x;
    };
    for (int i = 0; i < runs; ++i) {
        const float eps = static_cast<float>(eps_d(rng));
        const float eta = static_cast<float>(eta_d(rng));
        const int steps = steps_d(rng);
        const uint64_t seed = rng();
        Tensor x, adv;
        switch (i % 4) {
        case 0: {
            x = image_batch(1);
            const LossKind kind = static_cast<LossKind>(i / 4 % 5);
            adv = pgd_minimize(m, row(x, 0), {layer_d(rng)}, kind, eps, eta, steps, seed).x_adv;
            x = row(x, 0);
            break;
        }
        case 1: {
            x = image_batch(1);
            AttackConfig cfg;
            cfg.epsilon = eps;
            cfg.eta_shallow = static_cast<float>(eta_d(rng));
            cfg.steps_shallow = steps_d(rng);
            cfg.eta_deep = eta;
            cfg.steps_deep = steps;
            cfg.gamma = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
            cfg.n_layers = n_d(rng);
            cfg.loss = static_cast<LossKind>(i / 4 % 5);
            cfg.seed = seed;
            x = row(x, 0);
            adv = dta_attack(m, x, cfg, static_cast<uint64_t>(i)).x_adv;
            break;
        }
        case 2:
            x = row(image_batch(1), 0);
            adv = nrdm_attack(m, x, layer_d(rng), eps, eta, steps, seed, static_cast<uint64_t>(i));
            break;
        default: {
            x = image_batch(2);
            const Tensor delta = pap_uap(m, {x}, layer_d(rng), eps, eta, std::min(steps, 2), seed);
            adv = apply_perturbation(x, delta, eps);
            break;
        }
        }
        bool good = adv.shape() == x.shape();
        for (int64_t j = 0; good && j < x.size(); ++j) {
            const double a = adv[j], xv = x[j];
            good = a >= 0.0 && a <= 1.0 && std::fabs(a - xv) <= static_cast<double>(eps);
            on_bound += a == static_cast<double>(float_at_least(std::max(xv - eps, 0.0))) ||
                        a == static_cast<double>(float_at_most(std::min(xv + eps, 1.0)));
        }
        pixels += x.size();
        ok += good;
    }
    return {3, "constraint safety", ok == runs,
            fmt("%d/%d fuzzed invocations inside the ball and [0,1] with zero tolerance; %lld of %lld pixels sit exactly on a bound",
                ok, runs, static_cast<long long>(on_bound), static_cast<long long>(pixels)),
            seconds_since(t0)};
}

// ---------------------------------------------------------------------------
// desk experiment

struct Desk {
    Dataset pretrain_data, train, eval;
    Checkpoint pretrained;
    Checkpoint full, lora, adaptformer;
    Tensor dta_adv, nrdm_adv, noise_adv;
    std::vector<AttackResult> dta_results;
    double seconds = 0.0;
};

TrainConfig finetune_config(TrainMode mode) {
    TrainConfig f;
    f.mode = mode;
    f.epochs = 5;
    f.learning_rate = mode == TrainMode::full ? 1e-4f : 1e-3f;
    return f;
}

Desk build_desk(std::FILE* log) {
    const auto t0 = clk::now();
    Desk d;
    SyntheticSpec ps;
    ps.role = DataRole::pretrain;
    ps.classes = 10;
    ps.per_class = 500;
    ps.seed = 1;
    SyntheticSpec ds = ps;
    ds.role = DataRole::downstream;
    ds.classes = 5;
    ds.per_class = 400;
    d.pretrain_data = generate_synthetic(ps);
    auto [train, test] = split_per_class(generate_synthetic(ds), 320);
    d.train = std::move(train);
    std::vector<int64_t> first(200);
    std::iota(first.begin(), first.end(), 0);
    d.eval = subset(test, first);

    ModelConfig mc;
    TrainConfig tc;
    tc.epochs = 10;
    tc.learning_rate = 1e-3f;
    d.pretrained = pretrain_supervised(mc, d.pretrain_data, tc);
    std::fprintf(log, "  desk: pretrain accuracy %.3f (%.0fs)\n",
                 d.pretrained.provenance["metrics"]["train_accuracy"].get<double>(), seconds_since(t0));
    d.full = finetune(d.pretrained, TrainMode::full, d.train, finetune_config(TrainMode::full));
    d.lora = finetune(d.pretrained, TrainMode::lora, d.train, finetune_config(TrainMode::lora));
    d.adaptformer = finetune(d.pretrained, TrainMode::adaptformer, d.train, finetune_config(TrainMode::adaptformer));
    std::fprintf(log, "  desk: clean test accuracy full %.3f lora %.3f adaptformer %.3f (%.0fs)\n",
                 clean_accuracy(d.full.model, d.eval), clean_accuracy(d.lora.model, d.eval),
                 clean_accuracy(d.adaptformer.model, d.eval), seconds_since(t0));
    const AttackConfig ac;
    d.dta_results = dta_attack_all(d.pretrained.model, d.eval.images, ac);
    std::vector<Tensor> rows;
    for (const auto& r : d.dta_results) rows.push_back(r.x_adv);
    d.dta_adv = stack(rows);
    d.nrdm_adv = nrdm_attack_all(d.pretrained.model, d.eval.images, default_nrdm_layer(mc.depth), ac.epsilon,
                                 ac.eta_deep, ac.steps_deep, ac.seed);
    d.noise_adv = uniform_noise_attack(d.eval.images, ac.epsilon, ac.seed);
    d.seconds = seconds_since(t0);
    std::fflush(log);
    return d;
}

// Measured once on the desk preset and frozen; +-5 points.
constexpr double kFrozenDtaFull = 0.37, kFrozenDtaLora = 0.525, kFrozenDtaAdaptformer = 0.495;
constexpr double kFrozenNrdmFull = 0.30, kFrozenNrdmLora = 0.455;
constexpr double kTolerance = 0.05;

// ---------------------------------------------------------------------------
// 4. control flow

Outcome criterion_control_flow(const Desk& d) {
    const auto t0 = clk::now();
    const Model& m = d.pretrained.model;
    std::vector<int64_t> first(100);
    std::iota(first.begin(), first.end(), 0);
    const Tensor x = take_rows(d.eval.images, first);
    AttackConfig cfg;
    cfg.gamma = 1.0;
    int shallow = 0;
    for (const auto& r : dta_attack_all(m, x, cfg)) shallow += r.stage == Stage::shallow_only;
    cfg.gamma = -1.0;
    const auto deep = dta_attack_all(m, x, cfg);
    int multi = 0, oracle_ok = 0;
    const std::vector<int> mprime = candidate_layers(m.config.depth);
    for (int64_t i = 0; i < 100; ++i) {
        const AttackResult& r = deep[static_cast<size_t>(i)];
        multi += r.stage == Stage::multi_layer;
        // Replay stages one and two on the sample's stream, then rank every
        // candidate layer by ATCS.
        Rng rng = make_rng(cfg.seed, "attack", static_cast<uint64_t>(i));
        const Tensor xs = take_rows(x, std::vector<int64_t>{i});
        pgd_minimize_batch(m, xs, {{1}}, cfg.loss, cfg.epsilon, cfg.eta_shallow, cfg.steps_shallow,
                           std::span<Rng>(&rng, 1));
        auto s2 = pgd_minimize_batch(m, xs, {mprime}, cfg.loss, cfg.epsilon, cfg.eta_deep, cfg.steps_deep,
                                     std::span<Rng>(&rng, 1));
        const auto fc = batch_features(m, xs, static_cast<int>(m.config.depth))[0];
        const auto fa = batch_features(m, stack(std::vector<Tensor>{s2[0].x_adv}), static_cast<int>(m.config.depth))[0];
        std::vector<std::pair<double, int>> ranked;
        for (int l : mprime) ranked.emplace_back(atcs(fc[static_cast<size_t>(l - 1)], fa[static_cast<size_t>(l - 1)]), l);
        std::sort(ranked.begin(), ranked.end());
        std::vector<int> expect;
        for (int k = 0; k < std::min<int>(cfg.n_layers, static_cast<int>(ranked.size())); ++k)
            expect.push_back(ranked[static_cast<size_t>(k)].second);
        std::sort(expect.begin(), expect.end());
        oracle_ok += r.selected_layers == expect;
    }
    std::vector<int> twelve(9);
    std::iota(twelve.begin(), twelve.end(), 4);
    const bool m12 = candidate_layers(12) == twelve;
    // A depth-12 model picks its layers from {4..12}.
    Model deep12;
    deep12.config.image_size = 16;
    deep12.config.patch_size = 8;
    deep12.config.embed_dim = 16;
    deep12.config.depth = 12;
    deep12.config.num_heads = 2;
    deep12.config.mlp_hidden = 32;
    deep12.params = init_params(deep12.config, 12);
    AttackConfig c12;
    c12.gamma = -1.0;
    c12.steps_deep = 3;
    std::mt19937_64 rng(12);
    bool within = true;
    for (const auto& r : dta_attack_all(deep12, random_tensor(rng, {4, 3, 16, 16}, 0.0f, 1.0f), c12))
        for (int l : r.selected_layers) within = within && l >= 4 && l <= 12 && r.selected_layers.size() == 4;
    const bool pass = shallow == 100 && multi == 100 && oracle_ok == 100 && m12 && within;
    return {4, "shallow-first control flow", pass,
            fmt("gamma=+1 shallow-only %d/100, gamma=-1 multi-layer %d/100, M* matches oracle %d/100, M=12 gives "
                "M'={4..12} %s, depth-12 selections inside M' %s",
                shallow, multi, oracle_ok, m12 ? "yes" : "no", within ? "yes" : "no"),
            seconds_since(t0)};
}

// ---------------------------------------------------------------------------
// 5. transfer experiment

Outcome criterion_transfer(const Desk& d, double total_seconds) {
    const auto asr = [&](const Checkpoint& c, const Tensor& x) { return attack_success_rate(c.model, x, d.eval.labels); };
    const double dta_f = asr(d.full, d.dta_adv), dta_l = asr(d.lora, d.dta_adv);
    const double nrdm_f = asr(d.full, d.nrdm_adv), nrdm_l = asr(d.lora, d.nrdm_adv);
    const double noise_f = asr(d.full, d.noise_adv), noise_l = asr(d.lora, d.noise_adv);
    const bool beats_noise = dta_f - noise_f >= 0.20 && dta_l - noise_l >= 0.20;
    const bool vs_nrdm = dta_f - nrdm_f >= -0.02 && dta_l - nrdm_l >= -0.02;
    const bool frozen = std::fabs(dta_f - kFrozenDtaFull) <= kTolerance && std::fabs(dta_l - kFrozenDtaLora) <= kTolerance &&
                        std::fabs(nrdm_f - kFrozenNrdmFull) <= kTolerance &&
                        std::fabs(nrdm_l - kFrozenNrdmLora) <= kTolerance;
    int shallow = 0;
    for (const auto& r : d.dta_results) shallow += r.stage == Stage::shallow_only;
    return {5, "desk transfer experiment", beats_noise && vs_nrdm && frozen && total_seconds < 1800.0,
            fmt("ASR full: dta %.3f nrdm %.3f noise %.3f; lora: dta %.3f nrdm %.3f noise %.3f; dta-noise >= 0.20 %s, "
                "dta-nrdm >= -0.02 %s, within +-0.05 of frozen (%.3f/%.3f, %.3f/%.3f) %s; shallow-only %d/200; "
                "desk run %.0fs (< 1800s)",
                dta_f, nrdm_f, noise_f, dta_l, nrdm_l, noise_l, beats_noise ? "yes" : "no", vs_nrdm ? "yes" : "no",
                kFrozenDtaFull, kFrozenNrdmFull, kFrozenDtaLora, kFrozenNrdmLora, frozen ? "yes" : "no", shallow,
                total_seconds),
            d.seconds};
}

// ---------------------------------------------------------------------------
// 6. ATCS vs ASR across per-layer attacks

Outcome criterion_sweep(const Desk& d, std::FILE* log) {
    const auto t0 = clk::now();
    SweepSchedule s;
    std::vector<int> layers(static_cast<size_t>(d.pretrained.model.config.depth));
    std::iota(layers.begin(), layers.end(), 1);
    const auto points = atcs_asr_sweep(d.pretrained.model, d.full.model, d.eval, layers, s);
    std::vector<double> fa, fr, aa, ar;
    std::string per_layer;
    for (const auto& p : points) {
        aa.push_back(p.atcs);
        ar.push_back(p.asr);
        if (p.step == s.steps) {
            fa.push_back(p.atcs);
            fr.push_back(p.asr);
            per_layer += fmt(" L%d %.3f/%.3f", p.layer, p.atcs, p.asr);
        }
    }
    const double rho = spearman(fa, fr);
    // Not the criterion: every (layer, step) point pooled.
    std::fprintf(log, "  info: pooled spearman over all %zu sweep points %.3f\n", points.size(), spearman(aa, ar));
    return {6, "final ATCS vs transfer ASR", rho <= -0.5,
            fmt("spearman over per-layer final (ATCS, ASR) on the full fine-tune %.3f (<= -0.5); atcs/asr:%s", rho,
                per_layer.c_str()),
            seconds_since(t0)};
}

// ---------------------------------------------------------------------------
// 7. PETL vulnerability

Outcome criterion_petl(const Desk& d, std::FILE* log) {
    const auto t0 = clk::now();
    const auto asr = [&](const Checkpoint& c) { return attack_success_rate(c.model, d.dta_adv, d.eval.labels); };
    const double full = asr(d.full), lora = asr(d.lora), af = asr(d.adaptformer);
    const int k = static_cast<int>(d.pretrained.model.config.depth);
    const AttackConfig ac;
    const auto shift = [&](const Checkpoint& c, int layer) {
        return feature_shift_atcs(d.pretrained.model, c.model, d.eval, layer, false, ac).first;
    };
    const double sf = shift(d.full, k), sl = shift(d.lora, k), sa = shift(d.adaptformer, k);
    std::string layers;
    for (int l = 1; l <= k; ++l)
        layers += fmt(" L%d %.3f/%.3f/%.3f", l, shift(d.full, l), shift(d.lora, l), shift(d.adaptformer, l));
    std::fprintf(log, "  info: clean feature ATCS full/lora/adaptformer per layer:%s\n", layers.c_str());
    const bool pass = lora >= full - 0.02 && af >= full - 0.02 && sl >= sf && sa >= sf &&
                      std::fabs(af - kFrozenDtaAdaptformer) <= kTolerance;
    return {7, "PETL vulnerability ordering", pass,
            fmt("DTA ASR full %.3f lora %.3f adaptformer %.3f (PETL >= full - 0.02, adaptformer within +-0.05 of %.3f); "
                "clean feature ATCS at layer %d full %.4f lora %.4f adaptformer %.4f (PETL >= full)",
                full, lora, af, kFrozenDtaAdaptformer, k, sf, sl, sa),
            seconds_since(t0)};
}

// ---------------------------------------------------------------------------
// 8. adversarial fine-tuning defense

Outcome criterion_defense(const Desk& d) {
    const auto t0 = clk::now();
    const auto adv_model = [&](Generator g) {
        TrainConfig tc = finetune_config(TrainMode::full);
        tc.adversarial = AdversarialConfig{};
        tc.adversarial->generator = g;
        return adversarial_finetune(d.pretrained, TrainMode::full, d.train, tc);
    };
    const Checkpoint by_dta = adv_model(Generator::dta);
    const Checkpoint by_pap = adv_model(Generator::pap);
    const auto asr = [&](const Checkpoint& c) { return attack_success_rate(c.model, d.dta_adv, d.eval.labels); };
    const double base = asr(d.full), a_dta = asr(by_dta), a_pap = asr(by_pap);
    const double clean_base = clean_accuracy(d.full.model, d.eval), clean_dta = clean_accuracy(by_dta.model, d.eval);
    const double red_dta = base - a_dta, red_pap = base - a_pap;
    const bool pass = red_dta >= 0.30 && clean_base - clean_dta <= 0.15 && red_pap < red_dta;
    return {8, "adversarial fine-tuning defense", pass,
            fmt("full fine-tune DTA ASR %.3f; DTA-trained %.3f (reduction %.3f >= 0.30), clean accuracy %.3f -> %.3f "
                "(drop <= 0.15); PAP-trained %.3f (reduction %.3f < %.3f)",
                base, a_dta, red_dta, clean_base, clean_dta, a_pap, red_pap, red_dta),
            seconds_since(t0)};
}

// ---------------------------------------------------------------------------
// 9. LoRA merge

Outcome criterion_merge(const Desk& d) {
    const auto t0 = clk::now();
    const Model& m = d.lora.model;
    const auto& lora = std::get<LoRAParams>(m.adapters);
    const ViTParams merged = merge_lora(m.config, m.params, lora);
    std::mt19937_64 rng(9);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Tensor x = random_tensor(rng, m.config.image_shape(), 0.0f, 1.0f);
        const auto a = forward_with_features(m.config, m.params, m.adapters, x);
        const auto b = forward_with_features(m.config, merged, {}, x);
        worst = std::max(worst, static_cast<double>(max_abs_diff(a.logits, b.logits)));
    }
    return {9, "LoRA merge oracle", worst <= 1e-4,
            fmt("max |logits| difference over 100 inputs %.2e (<= 1e-4) on the trained desk LoRA model", worst),
            seconds_since(t0)};
}

// ---------------------------------------------------------------------------
// 10. persistence

Outcome criterion_persistence(const Desk& d) {
    const auto t0 = clk::now();
    const auto dir = std::filesystem::temp_directory_path() / "dta_acceptance";
    std::filesystem::create_directories(dir);
    bool ok = true;
    int models = 0;
    std::mt19937_64 rng(10);
    for (const Checkpoint* c : {&d.pretrained, &d.full, &d.lora, &d.adaptformer}) {
        const auto path = dir / "model.dtac";
        save_checkpoint(path, *c);
        const Checkpoint back = load_checkpoint(path);
        ok = ok && back.model.config == c->model.config && back.provenance == c->provenance &&
             content_hash(back.model) == content_hash(c->model);
        const auto ta = named_tensors(c->model.params), tb = named_tensors(back.model.params);
        for (size_t i = 0; i < ta.size(); ++i) ok = ok && ta[i].second->bit_equal(*tb[i].second);
        const auto aa = named_tensors(c->model.adapters), ab = named_tensors(back.model.adapters);
        ok = ok && aa.size() == ab.size();
        for (size_t i = 0; ok && i < aa.size(); ++i) ok = ok && aa[i].second->bit_equal(*ab[i].second);
        for (int i = 0; i < 100; ++i) {
            const Tensor x = random_tensor(rng, c->model.config.image_shape(), 0.0f, 1.0f);
            ok = ok && forward_with_features(c->model.config, c->model.params, c->model.adapters, x)
                           .logits.bit_equal(
                               forward_with_features(back.model.config, back.model.params, back.model.adapters, x).logits);
        }
        ++models;
    }
    int sets = 0;
    for (const Dataset* s : {&d.pretrain_data, &d.train, &d.eval}) {
        const auto path = dir / "data.dtad";
        write_dataset(path, *s);
        const Dataset back = read_dataset(path);
        ok = ok && back.images.bit_equal(s->images) && back.labels == s->labels && back.num_classes == s->num_classes;
        ++sets;
    }
    std::filesystem::remove_all(dir);
    return {10, "persistence", ok,
            fmt("%d checkpoints (bit-exact tensors, bit-identical logits on 100 inputs each) and %d datasets round-trip %s",
                models, sets, ok ? "exactly" : "with differences"),
            seconds_since(t0)};
}

void print(std::FILE* out, const Outcome& o) {
    std::fprintf(out, "criterion %2d %s  %s: %s [%.1fs]\n", o.id, o.pass ? "PASS" : "FAIL", o.name.c_str(),
                 o.detail.c_str(), o.seconds);
    std::fflush(out);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria for the transfer attack lab.", "acceptance"};
    std::vector<int> expected;
    std::string report;
    std::vector<int> only;
    app.add_option("--expected-failure", expected,
                   "criterion known to fail at desk scale; it is still run and reported but does not fail the exit code");
    app.add_option("--report", report, "also write results as JSON");
    app.add_option("--only", only, "run just these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const auto t0 = clk::now();
    std::vector<Outcome> results;
    const auto wanted = [&](int id) { return only.empty() || std::count(only.begin(), only.end(), id) > 0; };
    const auto run = [&](int id, auto&& criterion) {
        if (!wanted(id)) return;
        Outcome o = criterion();
        print(stdout, o);
        results.push_back(std::move(o));
    };
    run(1, [] { return criterion_gradients(); });
    run(2, [] { return criterion_atcs(); });
    run(3, [] { return criterion_constraints(); });
    bool need_desk = false;
    for (int id = 4; id <= 10; ++id) need_desk = need_desk || wanted(id);
    if (need_desk) {
        const Desk desk = build_desk(stdout);
        run(4, [&] { return criterion_control_flow(desk); });
        // Criterion 5 reports the whole desk run, so it waits for 6-8.
        run(6, [&] { return criterion_sweep(desk, stdout); });
        run(7, [&] { return criterion_petl(desk, stdout); });
        run(8, [&] { return criterion_defense(desk); });
        run(5, [&] { return criterion_transfer(desk, seconds_since(t0)); });
        run(9, [&] { return criterion_merge(desk); });
        run(10, [&] { return criterion_persistence(desk); });
    }
    std::sort(results.begin(), results.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });

    std::printf("\nsummary (criterion order):\n");
    int passed = 0;
    bool exit_ok = true;
    const std::set<int> known(expected.begin(), expected.end());
    json j = json::array();
    for (const auto& o : results) {
        print(stdout, o);
        passed += o.pass;
        if (!o.pass && !known.count(o.id)) exit_ok = false;
        if (o.pass && known.count(o.id)) std::printf("note: criterion %d was listed as an expected failure but passed\n", o.id);
        j.push_back({{"criterion", o.id}, {"name", o.name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", o.seconds}});
    }
    std::string listed;
    for (int e : known) listed += (listed.empty() ? "" : ",") + std::to_string(e);
    std::printf("%d/%zu criteria pass; total runtime %.0fs; expected failures: %s\n", passed, results.size(),
                seconds_since(t0), listed.empty() ? "none" : listed.c_str());
    if (!report.empty()) std::ofstream(report) << j.dump(2) << "\n";
    return exit_ok ? 0 : 1;
}
