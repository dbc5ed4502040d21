// SPDX-License-Identifier: Apache-2.0
#include "dta/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>

#include "binary_io.hpp"
#include "dta/error.hpp"

namespace dta {

using nlohmann::json;

namespace {

std::vector<std::pair<std::string, const Tensor*>> all_tensors(const Model& model) {
    auto out = named_tensors(model.params);
    auto extra = named_tensors(model.adapters);
    out.insert(out.end(), extra.begin(), extra.end());
    return out;
}

std::string blob_of(const Model& model) {
    std::string blob;
    for (const auto& [name, t] : all_tensors(model))
        for (float v : t->data()) io::put_f32(blob, v);
    return blob;
}

std::string sha256_hex(const std::string& bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

json adapters_to_json(const Adapters& a) {
    if (const auto* l = std::get_if<LoRAParams>(&a)) return {{"kind", "lora"}, {"rank", l->rank}, {"alpha", l->alpha}};
    if (const auto* f = std::get_if<AdaptFormerParams>(&a))
        return {{"kind", "adaptformer"}, {"bottleneck", f->bottleneck}, {"scale", f->scale}};
    return {{"kind", "none"}};
}

// Zero-filled adapters of the described kind; tensors are filled from the blob.
Adapters adapters_from_json(const ModelConfig& config, const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "none") return std::monostate{};
    if (kind == "lora") return init_lora(config, j.at("rank").get<int64_t>(), j.at("alpha").get<float>(), 0);
    if (kind == "adaptformer")
        return init_adaptformer(config, j.at("bottleneck").get<int64_t>(), j.at("scale").get<float>(), 0);
    throw CorruptionError("checkpoint: unknown adapter kind '" + kind + "'");
}

} // namespace

std::string content_hash(const Model& model) { return sha256_hex(blob_of(model)); }

json config_to_json(const ModelConfig& c) {
    return {{"image_size", c.image_size}, {"channels", c.channels},   {"patch_size", c.patch_size},
            {"embed_dim", c.embed_dim},   {"depth", c.depth},         {"num_heads", c.num_heads},
            {"mlp_hidden", c.mlp_hidden}, {"num_classes", c.num_classes}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size").get<int64_t>();
    c.channels = j.at("channels").get<int64_t>();
    c.patch_size = j.at("patch_size").get<int64_t>();
    c.embed_dim = j.at("embed_dim").get<int64_t>();
    c.depth = j.at("depth").get<int64_t>();
    c.num_heads = j.at("num_heads").get<int64_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<int64_t>();
    c.num_classes = j.at("num_classes").get<int64_t>();
    c.validate();
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    check_params(ckpt.model.config, ckpt.model.params);
    check_adapters(ckpt.model.config, ckpt.model.adapters);
    json tensors = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : all_tensors(ckpt.model)) {
        tensors.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
        offset += static_cast<uint64_t>(t->size()) * 4;
    }
    const std::string blob = blob_of(ckpt.model);
    const json manifest = {{"config", config_to_json(ckpt.model.config)},
                           {"adapters", adapters_to_json(ckpt.model.adapters)},
                           {"tensors", tensors},
                           {"provenance", ckpt.provenance},
                           {"blob_bytes", blob.size()},
                           {"hash", "sha256:" + sha256_hex(blob)}};
    const std::string text = manifest.dump();
    std::string out = "DTAC";
    io::put_u32(out, kCheckpointVersion);
    io::put_u64(out, text.size());
    out += text;
    out += blob;
    io::write_file(path.string(), out);
}

namespace {

Checkpoint load_impl(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path.string());
    io::Reader r(bytes, "checkpoint");
    if (r.take(4) != "DTAC") throw CorruptionError("checkpoint: bad magic in '" + path.string() + "'");
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw VersionError("checkpoint: unsupported version " + std::to_string(version));
    const uint64_t manifest_len = r.u64();
    if (manifest_len > r.remaining()) throw CorruptionError("checkpoint: truncated manifest");
    json manifest;
    try {
        manifest = json::parse(r.take(manifest_len));
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("checkpoint: unreadable manifest: ") + e.what());
    }

    Checkpoint ckpt;
    std::vector<std::pair<std::string, Tensor*>> slots;
    try {
        ckpt.model.config = config_from_json(manifest.at("config"));
        ckpt.model.params = init_params(ckpt.model.config, 0);
        ckpt.model.adapters = adapters_from_json(ckpt.model.config, manifest.at("adapters"));
        ckpt.provenance = manifest.at("provenance");
        slots = named_tensors(ckpt.model.params);
        auto extra = named_tensors(ckpt.model.adapters);
        slots.insert(slots.end(), extra.begin(), extra.end());
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("checkpoint: malformed manifest: ") + e.what());
    } catch (const ContractError& e) {
        throw CorruptionError(std::string("checkpoint: ") + e.what());
    }

    const json& tensors = manifest.at("tensors");
    const std::string blob = bytes.substr(r.position());
    uint64_t expect_offset = 0;
    for (size_t i = 0; i < std::max(slots.size(), tensors.size()); ++i) {
        if (i >= tensors.size()) throw CorruptionError("checkpoint: missing tensor '" + slots[i].first + "'");
        const std::string name = tensors[i].at("name").get<std::string>();
        if (i >= slots.size()) throw CorruptionError("checkpoint: unexpected tensor '" + name + "'");
        if (name != slots[i].first)
            throw CorruptionError("checkpoint: tensor '" + name + "' where '" + slots[i].first + "' was expected");
        const Shape shape = tensors[i].at("shape").get<Shape>();
        if (shape != slots[i].second->shape())
            throw CorruptionError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                  shape_str(slots[i].second->shape()));
        if (tensors[i].at("offset").get<uint64_t>() != expect_offset)
            throw CorruptionError("checkpoint: tensor '" + name + "' is not contiguous");
        expect_offset += static_cast<uint64_t>(numel(shape)) * 4;
    }
    if (blob.size() != expect_offset)
        throw CorruptionError("checkpoint: blob has " + std::to_string(blob.size()) + " bytes, manifest describes " +
                              std::to_string(expect_offset));
    if (manifest.at("hash").get<std::string>() != "sha256:" + sha256_hex(blob))
        throw CorruptionError("checkpoint: content hash mismatch");
    io::Reader br(blob, "checkpoint blob");
    for (auto& [name, t] : slots) {
        Tensor filled(t->shape());
        for (float& v : filled.mutable_data()) v = br.f32();
        *t = std::move(filled);
    }
    return ckpt;
}

} // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    try {
        return load_impl(path);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
}

} // namespace dta
