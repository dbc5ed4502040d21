// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "dta/checkpoint.hpp"
#include "dta/dataset.hpp"
#include "dta/error.hpp"
#include "dta/tape.hpp"
#include "support/gradcheck.hpp"

using namespace dta;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "dta_test_harness";
    fs::create_directories(dir);
    return dir / name;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Model toy_model(Adapters adapters = {}) {
    Model m;
    m.config.image_size = 16;
    m.config.patch_size = 8;
    m.config.embed_dim = 16;
    m.config.depth = 2;
    m.config.num_heads = 2;
    m.config.mlp_hidden = 32;
    m.config.num_classes = 3;
    m.params = init_params(m.config, 4);
    m.adapters = std::move(adapters);
    return m;
}

} // namespace

TEST_CASE("synthetic data is deterministic and well formed") {
    SyntheticSpec s;
    s.classes = 3;
    s.per_class = 4;
    s.image_size = 8;
    s.noise = 0.0f;
    const Dataset a = generate_synthetic(s);
    const Dataset b = generate_synthetic(s);
    CHECK(a.images.bit_equal(b.images));
    CHECK(a.labels == b.labels);
    CHECK(a.images.shape() == Shape{12, 3, 8, 8});
    CHECK(a.labels[0] == 0);
    CHECK(a.labels[4] == 1);
    CHECK_NOTHROW(a.validate());
    // Noise-free samples of one class are identical.
    CHECK(row(a.images, 0).bit_equal(row(a.images, 3)));
    CHECK(!row(a.images, 0).bit_equal(row(a.images, 1)));
    s.noise = 0.2f;
    const Dataset noisy = generate_synthetic(s);
    for (float v : noisy.images.data()) CHECK((v >= 0.0f && v <= 1.0f));
    s.role = DataRole::downstream;
    CHECK(!generate_synthetic(s).images.bit_equal(noisy.images));
    s.classes = 1;
    CHECK_THROWS_AS(generate_synthetic(s), ContractError);
}

TEST_CASE("two noise-free classes are linearly separable") {
    SyntheticSpec s;
    s.classes = 2;
    s.per_class = 20;
    s.image_size = 16;
    s.noise = 0.0f;
    const Dataset d = generate_synthetic(s);
    const int64_t dim = 3 * 16 * 16;
    Tensor w({dim, 2}), b({2});
    const Tensor x = d.images.reshaped({d.size(), dim});
    std::vector<int32_t> y(d.labels.begin(), d.labels.end());
    for (int step = 0; step < 50; ++step) {
        Tape tape;
        Var wv = tape.leaf(w, true), bv = tape.leaf(b, true);
        Var loss = mean(cross_entropy(broadcast_add(matmul(tape.constant(x), wv), bv), y));
        auto g = tape.backward(loss);
        auto gw = g.of(wv), gb = g.of(bv);
        auto pw = w.mutable_data();
        for (size_t i = 0; i < pw.size(); ++i) pw[i] -= 0.05f * gw[static_cast<int64_t>(i)];
        auto pb = b.mutable_data();
        for (size_t i = 0; i < pb.size(); ++i) pb[i] -= 0.05f * gb[static_cast<int64_t>(i)];
    }
    Tape tape;
    const Tensor logits = broadcast_add(matmul(tape.constant(x), tape.constant(w)), tape.constant(b)).value();
    int correct = 0;
    for (int64_t i = 0; i < d.size(); ++i)
        correct += (logits[2 * i + 1] > logits[2 * i]) == (d.labels[static_cast<size_t>(i)] == 1);
    CHECK(correct == d.size());
}

TEST_CASE("dataset file round trip and validation") {
    SyntheticSpec s;
    s.classes = 4;
    s.per_class = 25;
    s.image_size = 32;
    s.noise = 0.1f;
    const Dataset d = generate_synthetic(s);
    const fs::path p = scratch("data.dtad");
    write_dataset(p, d);
    CHECK(fs::file_size(p) == 4 + 4 * 6 + 100 * 3 * 32 * 32 * 4 + 400);
    const Dataset back = read_dataset(p);
    CHECK(back.images.bit_equal(d.images));
    CHECK(back.labels == d.labels);
    CHECK(back.num_classes == 4);

    const std::string bytes = slurp(p);
    spit(p, bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_dataset(p), CorruptionError);
    spit(p, "XXXX" + bytes.substr(4));
    CHECK_THROWS_AS(read_dataset(p), CorruptionError);
    std::string v2 = bytes;
    v2[4] = 2;
    spit(p, v2);
    CHECK_THROWS_AS(read_dataset(p), VersionError);
    std::string bad_label = bytes;
    bad_label[bad_label.size() - 4] = 9;
    spit(p, bad_label);
    CHECK_THROWS_AS(read_dataset(p), CorruptionError);
}

TEST_CASE("split per class") {
    SyntheticSpec s;
    s.classes = 3;
    s.per_class = 5;
    s.image_size = 8;
    const auto [a, b] = split_per_class(generate_synthetic(s), 4);
    CHECK(a.size() == 12);
    CHECK(b.size() == 3);
    CHECK(b.labels == std::vector<uint32_t>{0, 1, 2});
}

TEST_CASE("checkpoint round trip is bit exact") {
    std::mt19937_64 rng(3);
    LoRAParams lora = init_lora(toy_model().config, 2, 4.0f, 1);
    for (auto& blk : lora.blocks) blk.q_up = dta::testing::random_tensor(rng, blk.q_up.shape());
    for (Adapters a : {Adapters{}, Adapters{lora}, Adapters{init_adaptformer(toy_model().config, 4, 0.5f, 2)}}) {
        Checkpoint c{toy_model(a), {{"mode", "test"}, {"seed", 7}}};
        const fs::path p = scratch("model.dtac");
        save_checkpoint(p, c);
        const Checkpoint back = load_checkpoint(p);
        CHECK(back.model.config == c.model.config);
        CHECK(back.provenance == c.provenance);
        CHECK(content_hash(back.model) == content_hash(c.model));
        auto na = named_tensors(c.model.params);
        auto nb = named_tensors(back.model.params);
        for (size_t i = 0; i < na.size(); ++i) CHECK(na[i].second->bit_equal(*nb[i].second));
        auto aa = named_tensors(c.model.adapters);
        auto ab = named_tensors(back.model.adapters);
        REQUIRE(aa.size() == ab.size());
        for (size_t i = 0; i < aa.size(); ++i) CHECK(aa[i].second->bit_equal(*ab[i].second));
        const Tensor x = dta::testing::random_tensor(rng, {3, 16, 16}, 0.0f, 1.0f);
        CHECK(forward_with_features(c.model.config, c.model.params, c.model.adapters, x)
                  .logits.bit_equal(forward_with_features(back.model.config, back.model.params, back.model.adapters, x).logits));
    }
}

TEST_CASE("checkpoint corruption is detected") {
    const fs::path p = scratch("bad.dtac");
    save_checkpoint(p, Checkpoint{toy_model(), {}});
    const std::string bytes = slurp(p);

    spit(p, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(p), CorruptionError);
    spit(p, bytes.substr(0, 10));
    CHECK_THROWS_AS(load_checkpoint(p), CorruptionError);

    std::string flipped = bytes;
    flipped[flipped.size() - 5] ^= 0x01;
    spit(p, flipped);
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("hash"), CorruptionError);

    std::string v9 = bytes;
    v9[4] = 9;
    spit(p, v9);
    CHECK_THROWS_AS(load_checkpoint(p), VersionError);

    // Rename a tensor in the manifest; the error names it.
    std::string renamed = bytes;
    const auto at = renamed.find("blocks.1.fc2.bias");
    REQUIRE(at != std::string::npos);
    renamed.replace(at, 17, "blocks.1.fc2.bies");
    spit(p, renamed);
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("blocks.1.fc2.bies"), CorruptionError);

    // Config says three blocks but only two are stored.
    std::string deeper = bytes;
    const auto d = deeper.find("\"depth\":2");
    REQUIRE(d != std::string::npos);
    deeper.replace(d, 9, "\"depth\":3");
    spit(p, deeper);
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("blocks.2"), CorruptionError);
}
