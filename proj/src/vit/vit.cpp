// SPDX-License-Identifier: Apache-2.0
#include "dta/vit.hpp"

#include <cmath>

#include "dta/error.hpp"
#include "dta/rng.hpp"

namespace dta {

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ContractError("model config: " + m); };
    if (image_size <= 0 || channels <= 0 || patch_size <= 0 || embed_dim <= 0 || num_heads <= 0 || mlp_hidden <= 0 ||
        num_classes <= 0)
        fail("all extents must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (depth < 1) fail("depth must be at least 1");
}

namespace {

Tensor trunc_normal(Rng& rng, Shape shape) {
    Tensor t(std::move(shape));
    for (float& v : t.mutable_data()) v = truncated_normal(rng, 0.02f);
    return t;
}

void expect_shape(const Tensor& t, const Shape& s, const std::string& name) {
    if (t.shape() != s)
        throw ContractError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " + shape_str(s));
}

template <typename P, typename T>
auto collect(P& params) {
    std::vector<std::pair<std::string, T*>> out;
    out.emplace_back("patch.weight", &params.patch_weight);
    out.emplace_back("patch.bias", &params.patch_bias);
    out.emplace_back("class_token", &params.class_token);
    out.emplace_back("pos_embed", &params.pos_embed);
    for (size_t i = 0; i < params.blocks.size(); ++i) {
        auto& b = params.blocks[i];
        const std::string p = "blocks." + std::to_string(i) + ".";
        out.emplace_back(p + "ln1.gamma", &b.ln1_gamma);
        out.emplace_back(p + "ln1.beta", &b.ln1_beta);
        out.emplace_back(p + "qkv.weight", &b.qkv_weight);
        out.emplace_back(p + "qkv.bias", &b.qkv_bias);
        out.emplace_back(p + "proj.weight", &b.proj_weight);
        out.emplace_back(p + "proj.bias", &b.proj_bias);
        out.emplace_back(p + "ln2.gamma", &b.ln2_gamma);
        out.emplace_back(p + "ln2.beta", &b.ln2_beta);
        out.emplace_back(p + "fc1.weight", &b.fc1_weight);
        out.emplace_back(p + "fc1.bias", &b.fc1_bias);
        out.emplace_back(p + "fc2.weight", &b.fc2_weight);
        out.emplace_back(p + "fc2.bias", &b.fc2_bias);
    }
    out.emplace_back("norm.gamma", &params.norm_gamma);
    out.emplace_back("norm.beta", &params.norm_beta);
    out.emplace_back("head.weight", &params.head_weight);
    out.emplace_back("head.bias", &params.head_bias);
    return out;
}

template <typename A, typename T>
auto collect_adapters(A& adapters) {
    std::vector<std::pair<std::string, T*>> out;
    if (auto* l = std::get_if<LoRAParams>(&adapters)) {
        for (size_t i = 0; i < l->blocks.size(); ++i) {
            const std::string p = "lora." + std::to_string(i) + ".";
            out.emplace_back(p + "q_down", &l->blocks[i].q_down);
            out.emplace_back(p + "q_up", &l->blocks[i].q_up);
            out.emplace_back(p + "v_down", &l->blocks[i].v_down);
            out.emplace_back(p + "v_up", &l->blocks[i].v_up);
        }
    } else if (auto* a = std::get_if<AdaptFormerParams>(&adapters)) {
        for (size_t i = 0; i < a->blocks.size(); ++i) {
            const std::string p = "adaptformer." + std::to_string(i) + ".";
            out.emplace_back(p + "down.weight", &a->blocks[i].down_weight);
            out.emplace_back(p + "down.bias", &a->blocks[i].down_bias);
            out.emplace_back(p + "up.weight", &a->blocks[i].up_weight);
            out.emplace_back(p + "up.bias", &a->blocks[i].up_bias);
        }
    }
    return out;
}

} // namespace

std::vector<std::pair<std::string, const Tensor*>> named_tensors(const ViTParams& params) {
    return collect<const ViTParams, const Tensor>(params);
}
std::vector<std::pair<std::string, Tensor*>> named_tensors(ViTParams& params) {
    return collect<ViTParams, Tensor>(params);
}
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const Adapters& adapters) {
    return collect_adapters<const Adapters, const Tensor>(adapters);
}
std::vector<std::pair<std::string, Tensor*>> named_tensors(Adapters& adapters) {
    return collect_adapters<Adapters, Tensor>(adapters);
}

ViTParams init_params(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng = make_rng(seed, "init");
    const int64_t d = config.embed_dim;
    ViTParams p;
    p.patch_weight = trunc_normal(rng, {config.patch_dim(), d});
    p.patch_bias = Tensor::zeros({d});
    p.class_token = trunc_normal(rng, {1, d});
    p.pos_embed = trunc_normal(rng, {config.tokens(), d});
    for (int64_t i = 0; i < config.depth; ++i) {
        BlockParams b;
        b.ln1_gamma = Tensor::ones({d});
        b.ln1_beta = Tensor::zeros({d});
        b.qkv_weight = trunc_normal(rng, {d, 3 * d});
        b.qkv_bias = Tensor::zeros({3 * d});
        b.proj_weight = trunc_normal(rng, {d, d});
        b.proj_bias = Tensor::zeros({d});
        b.ln2_gamma = Tensor::ones({d});
        b.ln2_beta = Tensor::zeros({d});
        b.fc1_weight = trunc_normal(rng, {d, config.mlp_hidden});
        b.fc1_bias = Tensor::zeros({config.mlp_hidden});
        b.fc2_weight = trunc_normal(rng, {config.mlp_hidden, d});
        b.fc2_bias = Tensor::zeros({d});
        p.blocks.push_back(std::move(b));
    }
    p.norm_gamma = Tensor::ones({d});
    p.norm_beta = Tensor::zeros({d});
    p.head_weight = trunc_normal(rng, {d, config.num_classes});
    p.head_bias = Tensor::zeros({config.num_classes});
    return p;
}

void reset_head(ViTParams& params, int64_t num_classes, uint64_t seed) {
    Rng rng = make_rng(seed, "head");
    const int64_t d = params.norm_gamma.size();
    params.head_weight = trunc_normal(rng, {d, num_classes});
    params.head_bias = Tensor::zeros({num_classes});
}

LoRAParams init_lora(const ModelConfig& config, int64_t rank, float alpha, uint64_t seed) {
    config.validate();
    if (rank < 0 || rank > config.embed_dim) throw ContractError("lora rank must be in [0, embed_dim]");
    LoRAParams l;
    l.rank = rank;
    l.alpha = alpha;
    if (rank == 0) {
        l.blocks.resize(static_cast<size_t>(config.depth));
        return l;
    }
    Rng rng = make_rng(seed, "lora");
    const int64_t d = config.embed_dim;
    for (int64_t i = 0; i < config.depth; ++i) {
        LoRABlock b;
        b.q_down = trunc_normal(rng, {rank, d});
        b.q_up = Tensor::zeros({d, rank});
        b.v_down = trunc_normal(rng, {rank, d});
        b.v_up = Tensor::zeros({d, rank});
        l.blocks.push_back(std::move(b));
    }
    return l;
}

AdaptFormerParams init_adaptformer(const ModelConfig& config, int64_t bottleneck, float scale, uint64_t seed) {
    config.validate();
    if (bottleneck < 1) throw ContractError("adaptformer bottleneck must be >= 1");
    Rng rng = make_rng(seed, "adaptformer");
    AdaptFormerParams a;
    a.bottleneck = bottleneck;
    a.scale = scale;
    const int64_t d = config.embed_dim;
    for (int64_t i = 0; i < config.depth; ++i) {
        AdaptFormerBlock b;
        b.down_weight = trunc_normal(rng, {d, bottleneck});
        b.down_bias = Tensor::zeros({bottleneck});
        b.up_weight = Tensor::zeros({bottleneck, d});
        b.up_bias = Tensor::zeros({d});
        a.blocks.push_back(std::move(b));
    }
    return a;
}

void check_params(const ModelConfig& config, const ViTParams& p) {
    config.validate();
    const int64_t d = config.embed_dim;
    if (static_cast<int64_t>(p.blocks.size()) != config.depth)
        throw ContractError("params have " + std::to_string(p.blocks.size()) + " blocks, config depth is " +
                            std::to_string(config.depth));
    expect_shape(p.patch_weight, {config.patch_dim(), d}, "patch.weight");
    expect_shape(p.patch_bias, {d}, "patch.bias");
    expect_shape(p.class_token, {1, d}, "class_token");
    expect_shape(p.pos_embed, {config.tokens(), d}, "pos_embed");
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const auto& b = p.blocks[i];
        const std::string n = "blocks." + std::to_string(i) + ".";
        expect_shape(b.ln1_gamma, {d}, n + "ln1.gamma");
        expect_shape(b.ln1_beta, {d}, n + "ln1.beta");
        expect_shape(b.qkv_weight, {d, 3 * d}, n + "qkv.weight");
        expect_shape(b.qkv_bias, {3 * d}, n + "qkv.bias");
        expect_shape(b.proj_weight, {d, d}, n + "proj.weight");
        expect_shape(b.proj_bias, {d}, n + "proj.bias");
        expect_shape(b.ln2_gamma, {d}, n + "ln2.gamma");
        expect_shape(b.ln2_beta, {d}, n + "ln2.beta");
        expect_shape(b.fc1_weight, {d, config.mlp_hidden}, n + "fc1.weight");
        expect_shape(b.fc1_bias, {config.mlp_hidden}, n + "fc1.bias");
        expect_shape(b.fc2_weight, {config.mlp_hidden, d}, n + "fc2.weight");
        expect_shape(b.fc2_bias, {d}, n + "fc2.bias");
    }
    expect_shape(p.norm_gamma, {d}, "norm.gamma");
    expect_shape(p.norm_beta, {d}, "norm.beta");
    expect_shape(p.head_weight, {d, config.num_classes}, "head.weight");
    expect_shape(p.head_bias, {config.num_classes}, "head.bias");
}

void check_adapters(const ModelConfig& config, const Adapters& adapters) {
    const int64_t d = config.embed_dim;
    if (auto* l = std::get_if<LoRAParams>(&adapters)) {
        if (static_cast<int64_t>(l->blocks.size()) != config.depth)
            throw ContractError("lora has " + std::to_string(l->blocks.size()) + " blocks, config depth is " +
                                std::to_string(config.depth));
        if (l->rank < 0 || l->rank > d) throw ContractError("lora rank must be in [0, embed_dim]");
        if (l->rank == 0) return;
        for (size_t i = 0; i < l->blocks.size(); ++i) {
            const std::string n = "lora." + std::to_string(i) + ".";
            expect_shape(l->blocks[i].q_down, {l->rank, d}, n + "q_down");
            expect_shape(l->blocks[i].q_up, {d, l->rank}, n + "q_up");
            expect_shape(l->blocks[i].v_down, {l->rank, d}, n + "v_down");
            expect_shape(l->blocks[i].v_up, {d, l->rank}, n + "v_up");
        }
    } else if (auto* a = std::get_if<AdaptFormerParams>(&adapters)) {
        if (static_cast<int64_t>(a->blocks.size()) != config.depth)
            throw ContractError("adaptformer has " + std::to_string(a->blocks.size()) + " blocks, config depth is " +
                                std::to_string(config.depth));
        if (a->bottleneck < 1) throw ContractError("adaptformer bottleneck must be >= 1");
        for (size_t i = 0; i < a->blocks.size(); ++i) {
            const std::string n = "adaptformer." + std::to_string(i) + ".";
            expect_shape(a->blocks[i].down_weight, {d, a->bottleneck}, n + "down.weight");
            expect_shape(a->blocks[i].down_bias, {a->bottleneck}, n + "down.bias");
            expect_shape(a->blocks[i].up_weight, {a->bottleneck, d}, n + "up.weight");
            expect_shape(a->blocks[i].up_bias, {d}, n + "up.bias");
        }
    }
}

namespace {

// Places parameter tensors on the tape, tracking the ones `trainable`
// selects.
class Binder {
public:
    Binder(Tape& tape, const ForwardSpec& spec, ForwardTrace& trace) : tape_(tape), spec_(spec), trace_(trace) {}

    Var operator()(const std::string& name, const Tensor& t) {
        const bool track = spec_.trainable && spec_.trainable(name);
        Var v = tape_.leaf(t, track);
        if (track) trace_.trainable.emplace_back(name, v);
        return v;
    }

private:
    Tape& tape_;
    const ForwardSpec& spec_;
    ForwardTrace& trace_;
};

Var linear(Var x, Var w, Var b) { return broadcast_add(matmul(x, w), b); }

} // namespace

ForwardTrace forward_batch(Tape& tape, const ModelConfig& cfg, const ViTParams& params, const Adapters& adapters,
                           Var images, const ForwardSpec& spec) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size)
        throw ContractError("forward: images must be (B, " + std::to_string(cfg.channels) + ", " +
                            std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) + "), got " +
                            shape_str(s));
    if (spec.max_layer < 0 || spec.max_layer > cfg.depth)
        throw ContractError("forward: max_layer " + std::to_string(spec.max_layer) + " outside [0, depth]");
    const int64_t batch = s[0];
    const int64_t d = cfg.embed_dim;
    const int64_t p = cfg.patch_size;
    const int64_t g = cfg.grid();
    const int64_t T = cfg.tokens();
    const int64_t heads = cfg.num_heads;
    const int64_t dh = cfg.head_dim();
    const int64_t layers = spec.max_layer == 0 ? cfg.depth : spec.max_layer;

    ForwardTrace trace;
    Binder bind(tape, spec, trace);
    const auto* lora = std::get_if<LoRAParams>(&adapters);
    const auto* adapt = std::get_if<AdaptFormerParams>(&adapters);
    if (lora && lora->rank == 0) lora = nullptr;

    // (B, C, H, W) -> (B, P, C*p*p) with channel-major patch vectors.
    Var patches = reshape(images, {batch, cfg.channels, g, p, g, p});
    patches = transpose(patches, {0, 2, 4, 1, 3, 5});
    patches = reshape(patches, {batch, cfg.patches(), cfg.patch_dim()});
    Var x = linear(patches, bind("patch.weight", params.patch_weight), bind("patch.bias", params.patch_bias));
    Var cls = broadcast_add(tape.constant(Tensor::zeros({batch, 1, d})), bind("class_token", params.class_token));
    const Var tokens[] = {cls, x};
    x = concat(tokens, 1);
    x = broadcast_add(x, bind("pos_embed", params.pos_embed));

    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int64_t layer = 0; layer < layers; ++layer) {
        const auto& b = params.blocks[static_cast<size_t>(layer)];
        const std::string n = "blocks." + std::to_string(layer) + ".";

        Var h = layer_norm(x, bind(n + "ln1.gamma", b.ln1_gamma), bind(n + "ln1.beta", b.ln1_beta));
        Var qkv = linear(h, bind(n + "qkv.weight", b.qkv_weight), bind(n + "qkv.bias", b.qkv_bias));
        if (lora) {
            const auto& lb = lora->blocks[static_cast<size_t>(layer)];
            const std::string ln = "lora." + std::to_string(layer) + ".";
            auto low_rank = [&](const char* down, const Tensor& a, const char* up, const Tensor& bt) {
                Var u = matmul(h, transpose(bind(ln + down, a)));
                return scale(matmul(u, transpose(bind(ln + up, bt))), lora->scale());
            };
            const Var parts[] = {low_rank("q_down", lb.q_down, "q_up", lb.q_up),
                                 tape.constant(Tensor::zeros({batch, T, d})),
                                 low_rank("v_down", lb.v_down, "v_up", lb.v_up)};
            qkv = add(qkv, concat(parts, -1));
        }
        std::vector<Var> head_out;
        for (int64_t hd = 0; hd < heads; ++hd) {
            Var q = slice(qkv, -1, hd * dh, dh);
            Var k = slice(qkv, -1, d + hd * dh, dh);
            Var v = slice(qkv, -1, 2 * d + hd * dh, dh);
            Var att = softmax(scale(matmul(q, transpose(k)), attn_scale));
            head_out.push_back(matmul(att, v));
        }
        Var attn = heads == 1 ? head_out[0] : concat(head_out, -1);
        attn = linear(attn, bind(n + "proj.weight", b.proj_weight), bind(n + "proj.bias", b.proj_bias));
        Var stream = add(x, attn);

        Var h2 = layer_norm(stream, bind(n + "ln2.gamma", b.ln2_gamma), bind(n + "ln2.beta", b.ln2_beta));
        Var mlp = linear(gelu(linear(h2, bind(n + "fc1.weight", b.fc1_weight), bind(n + "fc1.bias", b.fc1_bias))),
                         bind(n + "fc2.weight", b.fc2_weight), bind(n + "fc2.bias", b.fc2_bias));
        Var out = add(stream, mlp);
        if (adapt) {
            const auto& ab = adapt->blocks[static_cast<size_t>(layer)];
            const std::string an = "adaptformer." + std::to_string(layer) + ".";
            Var down = relu(linear(stream, bind(an + "down.weight", ab.down_weight), bind(an + "down.bias", ab.down_bias)));
            Var up = linear(down, bind(an + "up.weight", ab.up_weight), bind(an + "up.bias", ab.up_bias));
            out = add(out, scale(up, adapt->scale));
        }
        x = out;
        trace.features.push_back(x);
    }

    if (spec.max_layer == 0) {
        Var cls_out = reshape(slice(x, 1, 0, 1), {batch, d});
        cls_out = layer_norm(cls_out, bind("norm.gamma", params.norm_gamma), bind("norm.beta", params.norm_beta));
        trace.logits = linear(cls_out, bind("head.weight", params.head_weight), bind("head.bias", params.head_bias));
    }
    return trace;
}

ForwardResult forward_with_features(const ModelConfig& config, const ViTParams& params, const Adapters& adapters,
                                    const Tensor& image, Tape* tape) {
    if (image.shape() != config.image_shape())
        throw ContractError("forward: image must be " + shape_str(config.image_shape()) + ", got " +
                            shape_str(image.shape()));
    for (float v : image.data())
        if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("forward: image values must lie in [0, 1]");
    Tape local;
    Tape& t = tape ? *tape : local;
    Var x = t.leaf(image.reshaped({1, config.channels, config.image_size, config.image_size}), tape != nullptr);
    ForwardTrace trace = forward_batch(t, config, params, adapters, x);
    ForwardResult r;
    r.logits = trace.logits.value().reshaped({config.num_classes});
    for (size_t i = 0; i < trace.features.size(); ++i)
        r.features.push_back({static_cast<int>(i + 1), trace.features[i].value().reshaped({config.tokens(), config.embed_dim})});
    return r;
}

ViTParams merge_lora(const ModelConfig& config, const ViTParams& params, const LoRAParams& lora) {
    check_adapters(config, Adapters{lora});
    ViTParams merged = params;
    if (lora.rank == 0) return merged;
    const int64_t d = config.embed_dim;
    const int64_t r = lora.rank;
    const double s = lora.scale();
    for (size_t layer = 0; layer < merged.blocks.size(); ++layer) {
        const auto& lb = lora.blocks[layer];
        auto w = merged.blocks[layer].qkv_weight.mutable_data();
        // Row-vector convention: y = h W, so the update enters as (B A)^T.
        auto fold = [&](const Tensor& down, const Tensor& up, int64_t col0) {
            auto a = down.data();
            auto b = up.data();
            for (int64_t i = 0; i < d; ++i)
                for (int64_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (int64_t k = 0; k < r; ++k) acc += static_cast<double>(b[j * r + k]) * a[k * d + i];
                    w[static_cast<size_t>(i * 3 * d + col0 + j)] += static_cast<float>(s * acc);
                }
        };
        fold(lb.q_down, lb.q_up, 0);
        fold(lb.v_down, lb.v_up, 2 * d);
    }
    return merged;
}

} // namespace dta
