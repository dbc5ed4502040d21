// SPDX-License-Identifier: Apache-2.0
#include "dta/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "dta/error.hpp"
#include "dta/rng.hpp"

namespace dta {

namespace io {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ContractError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ContractError("write to '" + path + "' failed");
}

} // namespace io

void Dataset::validate() const {
    if (images.rank() != 4) throw ContractError("dataset: images must be (N, C, H, W), got " + shape_str(images.shape()));
    if (images.dim(0) != size())
        throw ContractError("dataset: " + std::to_string(images.dim(0)) + " images but " + std::to_string(size()) +
                            " labels");
    if (num_classes < 1) throw ContractError("dataset: num_classes must be >= 1");
    for (uint32_t y : labels)
        if (y >= num_classes) throw ContractError("dataset: label " + std::to_string(y) + " >= num_classes");
    for (float v : images.data())
        if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("dataset: pixel outside [0, 1]");
}

Dataset subset(const Dataset& data, std::span<const int64_t> indices) {
    Dataset out;
    out.num_classes = data.num_classes;
    out.images = take_rows(data.images, indices);
    for (int64_t i : indices) out.labels.push_back(data.labels[static_cast<size_t>(i)]);
    return out;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& data, int64_t per_class) {
    std::vector<int64_t> seen(data.num_classes, 0);
    std::vector<int64_t> first, second;
    for (int64_t i = 0; i < data.size(); ++i) {
        auto& n = seen[data.labels[static_cast<size_t>(i)]];
        (n++ < per_class ? first : second).push_back(i);
    }
    if (first.empty() || second.empty()) throw ContractError("split_per_class: one side of the split is empty");
    return {subset(data, first), subset(data, second)};
}

DataRole parse_data_role(std::string_view name) {
    if (name == "pretrain") return DataRole::pretrain;
    if (name == "downstream") return DataRole::downstream;
    throw ContractError("unknown data role '" + std::string(name) + "' (expected pretrain or downstream)");
}

namespace {

struct Grating {
    double kx, ky, phase;
};

// Wave vectors in cycles per image, kept apart (up to sign) so classes
// stay distinguishable.
std::vector<Grating> class_gratings(const SyntheticSpec& spec) {
    const bool pre = spec.role == DataRole::pretrain;
    const double lo = pre ? 1.5 : 5.5;
    const double hi = pre ? 5.0 : 9.0;
    Rng rng = make_rng(spec.seed, pre ? "data.pretrain" : "data.downstream");
    std::uniform_real_distribution<double> freq(lo, hi), angle(0.0, std::numbers::pi), phase(0.0, 2.0 * std::numbers::pi);
    double min_gap = 1.2;
    std::vector<Grating> out;
    int tries = 0;
    while (static_cast<int64_t>(out.size()) < spec.classes) {
        const double f = freq(rng), a = angle(rng), p = phase(rng);
        const Grating g{f * std::cos(a), f * std::sin(a), p};
        bool ok = true;
        for (const auto& o : out) {
            const double d1 = std::hypot(g.kx - o.kx, g.ky - o.ky);
            const double d2 = std::hypot(g.kx + o.kx, g.ky + o.ky);
            ok = ok && std::min(d1, d2) >= min_gap;
        }
        if (ok) out.push_back(g);
        if (++tries % 2000 == 0) min_gap *= 0.9;
    }
    return out;
}

} // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 2) throw ContractError("generate_synthetic: classes must be >= 2");
    if (spec.per_class < 1) throw ContractError("generate_synthetic: samples per class must be >= 1");
    if (spec.image_size < 1 || spec.channels < 1) throw ContractError("generate_synthetic: bad image shape");
    if (!(spec.noise >= 0.0f) || !(spec.amplitude >= 0.0f))
        throw ContractError("generate_synthetic: noise and amplitude must be >= 0");
    const auto gratings = class_gratings(spec);
    const int64_t n = spec.classes * spec.per_class;
    const int64_t S = spec.image_size, C = spec.channels;
    Dataset data;
    data.num_classes = static_cast<uint32_t>(spec.classes);
    data.images = Tensor({n, C, S, S});
    auto px = data.images.mutable_data();
    for (int64_t i = 0; i < n; ++i) {
        const int64_t cls = i % spec.classes;
        data.labels.push_back(static_cast<uint32_t>(cls));
        const Grating& g = gratings[static_cast<size_t>(cls)];
        Rng rng = make_rng(spec.seed, "data", static_cast<uint64_t>(i));
        std::normal_distribution<double> noise(0.0, 1.0);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < S; ++y)
                for (int64_t x = 0; x < S; ++x) {
                    const double t = 2.0 * std::numbers::pi * (g.kx * static_cast<double>(x) + g.ky * static_cast<double>(y)) /
                                         static_cast<double>(S) + g.phase;
                    double v = 0.5 + spec.amplitude * std::sin(t);
                    if (spec.noise > 0.0f) v += spec.noise * noise(rng);
                    px[static_cast<size_t>(((i * C + c) * S + y) * S + x)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
    }
    return data;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
    data.validate();
    std::string out = "DTAD";
    io::put_u32(out, kDatasetVersion);
    io::put_u32(out, static_cast<uint32_t>(data.size()));
    for (int axis = 1; axis < 4; ++axis) io::put_u32(out, static_cast<uint32_t>(data.images.dim(axis)));
    io::put_u32(out, data.num_classes);
    out.reserve(out.size() + static_cast<size_t>(data.images.size()) * 4 + data.labels.size() * 4);
    for (float v : data.images.data()) io::put_f32(out, v);
    for (uint32_t y : data.labels) io::put_u32(out, y);
    io::write_file(path.string(), out);
}

Dataset read_dataset(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path.string());
    io::Reader r(bytes, "dataset");
    if (r.take(4) != "DTAD") throw CorruptionError("dataset: bad magic in '" + path.string() + "'");
    const uint32_t version = r.u32();
    if (version != kDatasetVersion) throw VersionError("dataset: unsupported version " + std::to_string(version));
    const uint64_t n = r.u32(), c = r.u32(), h = r.u32(), w = r.u32();
    Dataset data;
    data.num_classes = r.u32();
    const uint64_t pixels = n * c * h * w;
    if (n == 0 || c == 0 || h == 0 || w == 0) throw CorruptionError("dataset: empty dimension in header");
    if (r.remaining() != pixels * 4 + n * 4)
        throw CorruptionError("dataset: expected " + std::to_string(pixels * 4 + n * 4) + " payload bytes, found " +
                              std::to_string(r.remaining()));
    std::vector<float> values(pixels);
    for (auto& v : values) v = r.f32();
    data.images = Tensor({static_cast<int64_t>(n), static_cast<int64_t>(c), static_cast<int64_t>(h),
                          static_cast<int64_t>(w)}, std::move(values));
    data.labels.resize(n);
    for (auto& y : data.labels) y = r.u32();
    try {
        data.validate();
    } catch (const ContractError& e) {
        throw CorruptionError(e.what());
    }
    return data;
}

} // namespace dta
