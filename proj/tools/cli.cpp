// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"

#include "dta/attacks.hpp"
#include "dta/checkpoint.hpp"
#include "dta/dataset.hpp"
#include "dta/evaluation.hpp"
#include "dta/training.hpp"

namespace dta::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& items, const char* sep) {
    std::string s;
    for (size_t i = 0; i < items.size(); ++i) s += (i ? sep : "") + items[i];
    return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep))
        if (!cur.empty()) out.push_back(cur);
    return out;
}

template <class T>
bool parse_exact(std::string_view s, T& v) {
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    return ec == std::errc() && p == s.data() + s.size();
}

// Accepts plain numbers and fractions such as "10/255".
bool parse_real(std::string_view s, double& v) {
    const auto slash = s.find('/');
    if (slash == std::string_view::npos) return parse_exact(s, v);
    double num = 0.0, den = 0.0;
    if (!parse_exact(s.substr(0, slash), num) || !parse_exact(s.substr(slash + 1), den) || den == 0.0) return false;
    v = num / den;
    return true;
}

} // namespace

UnknownKeyError::UnknownKeyError(const std::string& key, std::vector<std::string> valid)
    : UsageError("unknown config key '" + key + "'; valid keys: " + join(valid, ", ")), valid_(std::move(valid)) {}

Settings::Settings() {
    values_ = {
        // gen-data
        {"data.role", "pretrain"},
        {"data.classes", 10},
        {"data.per_class", 500},
        {"data.test_per_class", 0},
        {"data.image_size", 32},
        {"data.channels", 3},
        {"data.noise", 0.1},
        {"data.amplitude", 0.35},
        // backbone shape for pretrain
        {"model.patch_size", 8},
        {"model.embed_dim", 64},
        {"model.depth", 6},
        {"model.num_heads", 4},
        {"model.mlp_hidden", 128},
        // pretrain, finetune, advtrain
        {"train.mode", "full"},
        {"train.epochs", 20},
        {"train.batch_size", 32},
        {"train.learning_rate", 1e-3},
        {"train.weight_decay", 0.0},
        {"train.lora_rank", 4},
        {"train.lora_alpha", 8.0},
        {"train.adapter_bottleneck", 16},
        {"train.adapter_scale", 0.1},
        {"adv.epsilon", 4.0 / 255.0},
        {"adv.steps", 20},
        {"adv.eta", 0.02},
        {"adv.generator", "dta"},
        // attack, eval, sweep, ablate
        {"attack.method", "dta"},
        {"attack.epsilon", 10.0 / 255.0},
        {"attack.eta_shallow", 0.05},
        {"attack.steps_shallow", 3},
        {"attack.eta_deep", 0.02},
        {"attack.steps_deep", 20},
        {"attack.gamma", 0.25},
        {"attack.n_layers", 4},
        {"attack.loss", "atcs"},
        {"attack.layer", 0},
        {"attack.pap_epochs", 5},
        {"samples.limit", 0},
        {"sweep.layers", ""},
        {"sweep.steps", 20},
        {"sweep.eta", 0.02},
        {"ablate.axes", "loss,layers,gamma"},
        {"ablate.gammas", "-1,0,0.25,0.5,0.75,1"},
        // inputs
        {"paths.data", ""},
        {"paths.pretrained", ""},
        {"paths.downstream", ""},
        {"paths.adversarial", ""},
        {"paths.records", ""},
        {"paths.test", ""},
    };
}

std::vector<std::string> Settings::keys() const {
    std::vector<std::string> k;
    for (const auto& [key, v] : values_) k.push_back(key);
    return k;
}

json Settings::resolved() const {
    json j = json::object();
    for (const auto& [key, v] : values_) j[key] = v;
    return j;
}

void Settings::assign(const std::string& key, const json& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw UnknownKeyError(key, keys());
    json& slot = it->second;
    const auto bad = [&] {
        return UsageError("config key '" + key + "' expects " +
                          (slot.is_string() ? "a string" : slot.is_number_integer() ? "an integer" : "a number") +
                          ", got " + value.dump());
    };
    if (slot.is_string()) {
        if (!value.is_string()) throw bad();
        slot = value;
    } else if (slot.is_number_integer()) {
        if (!value.is_number_integer()) throw bad();
        slot = value.get<int64_t>();
    } else {
        double v = 0.0;
        if (value.is_number()) v = value.get<double>();
        else if (!value.is_string() || !parse_real(value.get<std::string>(), v)) throw bad();
        slot = v;
    }
}

void Settings::load_json(const json& j) {
    if (!j.is_object()) throw UsageError("config must be a JSON object");
    std::function<void(const json&, const std::string&)> walk = [&](const json& node, const std::string& prefix) {
        for (const auto& [k, v] : node.items()) {
            const std::string key = prefix.empty() ? k : prefix + "." + k;
            if (v.is_object()) walk(v, key);
            else assign(key, v);
        }
    };
    walk(j, "");
}

void Settings::load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    load_json(j);
}

void Settings::apply_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) throw UsageError("override must look like key=value");
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    auto it = values_.find(key);
    if (it == values_.end()) throw UnknownKeyError(key, keys());
    if (it->second.is_string()) {
        assign(key, text);
    } else if (it->second.is_number_integer()) {
        int64_t v = 0;
        if (!parse_exact(std::string_view(text), v))
            throw UsageError("config key '" + key + "' expects an integer, got '" + text + "'");
        assign(key, v);
    } else {
        double v = 0.0;
        if (!parse_real(text, v)) throw UsageError("config key '" + key + "' expects a number, got '" + text + "'");
        assign(key, v);
    }
}

const json& Settings::at(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UnknownKeyError(key, keys());
    return it->second;
}

int64_t Settings::integer(const std::string& key) const { return at(key).get<int64_t>(); }
double Settings::number(const std::string& key) const { return at(key).get<double>(); }
const std::string& Settings::text(const std::string& key) const { return at(key).get_ref<const std::string&>(); }

namespace {

struct Run {
    std::string command;
    Settings settings;
    uint64_t seed = 0;
    fs::path out;

    json provenance() const { return {{"command", command}, {"seed", seed}, {"config", settings.resolved()}}; }

    float f(const std::string& key) const { return static_cast<float>(settings.number(key)); }
    int i(const std::string& key) const {
        const int64_t v = settings.integer(key);
        if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
            throw ContractError("config key '" + key + "' is out of range");
        return static_cast<int>(v);
    }

    fs::path input(const std::string& key) const {
        const std::string& p = settings.text(key);
        if (p.empty()) throw UsageError(key + " is required for " + command);
        if (!fs::exists(p)) throw UsageError(key + ": '" + p + "' does not exist");
        return p;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    if (!o) throw ContractError("cannot open '" + path.string() + "' for writing");
    o << text;
    if (!o) throw ContractError("write to '" + path.string() + "' failed");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw CorruptionError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

Dataset limited(Dataset d, const Run& run) {
    const int64_t limit = run.settings.integer("samples.limit");
    if (limit < 0) throw ContractError("samples.limit must be >= 0");
    if (limit == 0 || limit >= d.size()) return d;
    std::vector<int64_t> rows(static_cast<size_t>(limit));
    std::iota(rows.begin(), rows.end(), 0);
    return subset(d, rows);
}

TrainConfig train_config(const Run& run, TrainMode mode) {
    TrainConfig tc;
    tc.mode = mode;
    tc.epochs = run.i("train.epochs");
    tc.batch_size = run.i("train.batch_size");
    tc.learning_rate = run.f("train.learning_rate");
    tc.weight_decay = run.f("train.weight_decay");
    tc.seed = run.seed;
    tc.lora_rank = run.settings.integer("train.lora_rank");
    tc.lora_alpha = run.f("train.lora_alpha");
    tc.adapter_bottleneck = run.settings.integer("train.adapter_bottleneck");
    tc.adapter_scale = run.f("train.adapter_scale");
    return tc;
}

AttackConfig attack_config(const Run& run) {
    AttackConfig c;
    c.epsilon = run.f("attack.epsilon");
    c.eta_shallow = run.f("attack.eta_shallow");
    c.steps_shallow = run.i("attack.steps_shallow");
    c.eta_deep = run.f("attack.eta_deep");
    c.steps_deep = run.i("attack.steps_deep");
    c.gamma = run.settings.number("attack.gamma");
    c.n_layers = run.i("attack.n_layers");
    c.loss = parse_loss_kind(run.settings.text("attack.loss"));
    c.seed = run.seed;
    return c;
}

json metrics_json(const TrainMetrics& m) { return {{"loss", m.loss}, {"accuracy", m.accuracy}}; }

// Single-layer-set attack over every row, same streams as the DTA stages.
Tensor fixed_layers_attack(const Model& model, const Tensor& images, const std::vector<int>& layers, LossKind kind,
                           float eps, float eta, int steps, uint64_t seed, std::vector<double>* losses = nullptr) {
    std::vector<Tensor> adv;
    for (int64_t s = 0; s < images.dim(0); s += 32) {
        std::vector<int64_t> rows(static_cast<size_t>(std::min<int64_t>(32, images.dim(0) - s)));
        std::iota(rows.begin(), rows.end(), s);
        std::vector<Rng> rngs;
        for (int64_t r : rows) rngs.push_back(make_rng(seed, "attack", static_cast<uint64_t>(r)));
        auto out = pgd_minimize_batch(model, take_rows(images, rows), std::vector<std::vector<int>>(rows.size(), layers),
                                      kind, eps, eta, steps, rngs);
        for (auto& o : out) {
            if (losses) losses->push_back(std::accumulate(o.layer_losses.begin(), o.layer_losses.end(), 0.0));
            adv.push_back(std::move(o.x_adv));
        }
    }
    return stack(adv);
}

// ---- commands -------------------------------------------------------------

json cmd_gen_data(const Run& run) {
    SyntheticSpec spec;
    spec.role = parse_data_role(run.settings.text("data.role"));
    spec.classes = run.settings.integer("data.classes");
    spec.per_class = run.settings.integer("data.per_class");
    spec.image_size = run.settings.integer("data.image_size");
    spec.channels = run.settings.integer("data.channels");
    spec.noise = run.f("data.noise");
    spec.amplitude = run.f("data.amplitude");
    spec.seed = run.seed;
    const int64_t held = run.settings.integer("data.test_per_class");
    if (held < 0 || held >= spec.per_class)
        throw ContractError("data.test_per_class must lie in [0, data.per_class)");
    const Dataset all = generate_synthetic(spec);
    json summary = {{"command", "gen-data"}, {"role", run.settings.text("data.role")}};
    if (held == 0) {
        write_dataset(run.out / "train.dtad", all);
        summary["train"] = all.size();
    } else {
        auto [train, test] = split_per_class(all, spec.per_class - held);
        write_dataset(run.out / "train.dtad", train);
        write_dataset(run.out / "test.dtad", test);
        summary["train"] = train.size();
        summary["test"] = test.size();
    }
    write_json(run.out / "run.json", run.provenance());
    return summary;
}

json cmd_pretrain(const Run& run) {
    const Dataset data = read_dataset(run.input("paths.data"));
    ModelConfig mc;
    const Shape img = data.image_shape();
    mc.channels = img[0];
    mc.image_size = img[1];
    if (img[1] != img[2]) throw ContractError("pretrain: images must be square");
    mc.patch_size = run.settings.integer("model.patch_size");
    mc.embed_dim = run.settings.integer("model.embed_dim");
    mc.depth = run.settings.integer("model.depth");
    mc.num_heads = run.settings.integer("model.num_heads");
    mc.mlp_hidden = run.settings.integer("model.mlp_hidden");
    mc.num_classes = data.num_classes;
    Checkpoint ck = pretrain_supervised(mc, data, train_config(run, TrainMode::pretrain));
    ck.provenance["run"] = run.provenance();
    save_checkpoint(run.out / "model.dtac", ck);
    return {{"command", "pretrain"}, {"hash", content_hash(ck.model)}, {"metrics", ck.provenance["metrics"]}};
}

json finetune_like(const Run& run, bool adversarial) {
    const Checkpoint pt = load_checkpoint(run.input("paths.pretrained"));
    const Dataset data = read_dataset(run.input("paths.data"));
    const TrainMode mode = parse_train_mode(run.settings.text("train.mode"));
    TrainConfig tc = train_config(run, mode);
    Checkpoint ck;
    if (adversarial) {
        AdversarialConfig adv;
        adv.epsilon = run.f("adv.epsilon");
        adv.steps = run.i("adv.steps");
        adv.eta = run.f("adv.eta");
        adv.generator = parse_generator(run.settings.text("adv.generator"));
        tc.adversarial = adv;
        ck = adversarial_finetune(pt, mode, data, tc);
    } else {
        ck = finetune(pt, mode, data, tc);
    }
    ck.provenance["run"] = run.provenance();
    save_checkpoint(run.out / "model.dtac", ck);
    json summary = {{"command", run.command},
                    {"mode", train_mode_name(mode)},
                    {"hash", content_hash(ck.model)},
                    {"metrics", ck.provenance["metrics"]}};
    if (!run.settings.text("paths.test").empty()) {
        const Dataset test = read_dataset(run.input("paths.test"));
        summary["test"] = metrics_json(evaluate_model(ck.model, test));
    }
    write_json(run.out / "metrics.json", summary);
    return summary;
}

json cmd_attack(const Run& run) {
    const Checkpoint pt = load_checkpoint(run.input("paths.pretrained"));
    const Dataset data = limited(read_dataset(run.input("paths.data")), run);
    const Model& model = pt.model;
    const std::string method = run.settings.text("attack.method");
    const AttackConfig cfg = attack_config(run);
    cfg.validate(model.config.depth);
    json records = {{"method", method},
                    {"epsilon", cfg.epsilon},
                    {"seed", run.seed},
                    {"pretrained_hash", content_hash(model)},
                    {"samples", json::array()}};
    Tensor adv;
    std::vector<AttackResult> results;
    if (method == "dta") {
        results = dta_attack_all(model, data.images, cfg);
        std::vector<Tensor> rows;
        for (const auto& r : results) rows.push_back(r.x_adv);
        adv = stack(rows);
    } else if (method == "nrdm") {
        const int k = run.i("attack.layer") > 0 ? run.i("attack.layer") : default_nrdm_layer(model.config.depth);
        records["layer"] = k;
        adv = nrdm_attack_all(model, data.images, k, cfg.epsilon, cfg.eta_deep, cfg.steps_deep, run.seed);
    } else if (method == "pap") {
        const int k = run.i("attack.layer") > 0 ? run.i("attack.layer") : 1;
        records["layer"] = k;
        std::vector<Tensor> batches;
        for (int64_t s = 0; s < data.size(); s += 32) {
            std::vector<int64_t> rows(static_cast<size_t>(std::min<int64_t>(32, data.size() - s)));
            std::iota(rows.begin(), rows.end(), s);
            batches.push_back(take_rows(data.images, rows));
        }
        const Tensor delta = pap_uap(model, batches, k, cfg.epsilon, cfg.eta_deep, run.i("attack.pap_epochs"), run.seed);
        adv = apply_perturbation(data.images, delta, cfg.epsilon);
    } else if (method == "noise") {
        adv = uniform_noise_attack(data.images, cfg.epsilon, run.seed);
    } else {
        throw ContractError("attack.method must be dta, nrdm, pap or noise, got '" + method + "'");
    }
    for (int64_t i = 0; i < data.size(); ++i) {
        json s = {{"id", i}, {"label", data.labels[static_cast<size_t>(i)]}};
        if (!results.empty()) {
            const AttackResult& r = results[static_cast<size_t>(i)];
            s["stage"] = stage_name(r.stage);
            s["selected_layers"] = r.selected_layers;
            s["stage1_final_atcs"] = r.stage1_final_atcs;
            json per = json::object();
            for (const auto& [layer, v] : r.atcs_per_layer) per[std::to_string(layer)] = v;
            s["atcs_per_layer"] = per;
        } else {
            s["stage"] = method;
        }
        records["samples"].push_back(s);
    }
    write_dataset(run.out / "adversarial.dtad", Dataset{adv, data.labels, data.num_classes});
    write_json(run.out / "records.json", records);
    json summary = {{"command", "attack"}, {"method", method}, {"samples", data.size()}};
    if (!results.empty()) {
        int64_t shallow = 0;
        for (const auto& r : results) shallow += r.stage == Stage::shallow_only;
        summary["shallow_only"] = shallow;
    }
    return summary;
}

std::vector<AttackRecord> read_records(const fs::path& path, int64_t n) {
    const json j = read_json(path);
    try {
        const auto& samples = j.at("samples");
        if (static_cast<int64_t>(samples.size()) != n)
            throw ContractError("records: " + std::to_string(samples.size()) + " samples for " + std::to_string(n) +
                                " adversarial images");
        std::vector<AttackRecord> out;
        for (const auto& s : samples) {
            AttackRecord r;
            r.stage = s.at("stage").get<std::string>();
            if (s.contains("selected_layers")) r.selected_layers = s["selected_layers"].get<std::vector<int>>();
            if (s.contains("atcs_per_layer"))
                for (const auto& [k, v] : s["atcs_per_layer"].items()) r.atcs_per_layer[std::stoi(k)] = v.get<double>();
            out.push_back(std::move(r));
        }
        return out;
    } catch (const json::exception& e) {
        throw CorruptionError("records '" + path.string() + "': " + e.what());
    }
}

json cmd_eval(const Run& run) {
    const Checkpoint ft = load_checkpoint(run.input("paths.downstream"));
    const Dataset clean = limited(read_dataset(run.input("paths.data")), run);
    const Dataset adv = read_dataset(run.input("paths.adversarial"));
    if (adv.size() != clean.size() || adv.labels != clean.labels)
        throw ContractError("eval: adversarial set (" + std::to_string(adv.size()) + ") does not line up with the clean set (" +
                            std::to_string(clean.size()) + "); use the same samples.limit as the attack");
    std::vector<AttackRecord> attacks;
    if (!run.settings.text("paths.records").empty()) attacks = read_records(run.input("paths.records"), adv.size());
    const EvalReport report = evaluate_attack(ft.model, clean, adv.images, run.f("attack.epsilon"), attacks);
    json j = report.to_json();
    j["downstream_hash"] = content_hash(ft.model);
    write_json(run.out / "report.json", j);
    write_text(run.out / "report.csv", report.to_csv());
    return {{"command", "eval"}, {"asr", report.asr}, {"clean_accuracy", report.clean_accuracy}};
}

std::vector<int> sweep_layers(const Run& run, int64_t depth) {
    std::vector<int> layers;
    for (const auto& t : split(run.settings.text("sweep.layers"), ',')) {
        int v = 0;
        if (!parse_exact(std::string_view(t), v)) throw ContractError("sweep.layers: bad layer '" + t + "'");
        layers.push_back(v);
    }
    if (layers.empty())
        for (int l = 1; l <= depth; ++l) layers.push_back(l);
    return layers;
}

json cmd_sweep(const Run& run) {
    const Checkpoint pt = load_checkpoint(run.input("paths.pretrained"));
    const Checkpoint ft = load_checkpoint(run.input("paths.downstream"));
    const Dataset data = limited(read_dataset(run.input("paths.data")), run);
    SweepSchedule sched;
    sched.epsilon = run.f("attack.epsilon");
    sched.eta = run.f("sweep.eta");
    sched.steps = run.i("sweep.steps");
    sched.seed = run.seed;
    const auto layers = sweep_layers(run, pt.model.config.depth);
    const auto points = atcs_asr_sweep(pt.model, ft.model, data, layers, sched);
    write_text(run.out / "sweep.csv", curve_csv(points, "atcs", run.settings.number("attack.gamma")));
    std::vector<double> fa, fr;
    json finals = json::array();
    for (const auto& p : points)
        if (p.step == sched.steps) {
            fa.push_back(p.atcs);
            fr.push_back(p.asr);
            finals.push_back({{"layer", p.layer}, {"atcs", p.atcs}, {"asr", p.asr}});
        }
    json rho = nullptr;
    try {
        rho = spearman(fa, fr);
    } catch (const ContractError&) {
        // fewer than two layers or constant values
    }
    const json j = {{"final", finals}, {"spearman_atcs_asr", rho}};
    write_json(run.out / "sweep.json", j);
    return {{"command", "sweep"}, {"points", points.size()}, {"spearman_atcs_asr", rho}};
}

json cmd_ablate(const Run& run) {
    const Checkpoint pt = load_checkpoint(run.input("paths.pretrained"));
    const Checkpoint ft = load_checkpoint(run.input("paths.downstream"));
    const Dataset data = limited(read_dataset(run.input("paths.data")), run);
    const Model& model = pt.model;
    const AttackConfig base = attack_config(run);
    base.validate(model.config.depth);
    json rows = json::array();
    std::string csv = "axis,setting,asr\n";
    const auto record = [&](const std::string& axis, const std::string& setting, const Tensor& adv) {
        const double asr = attack_success_rate(ft.model, adv, data.labels);
        rows.push_back({{"axis", axis}, {"setting", setting}, {"asr", asr}});
        std::ostringstream line;
        line.precision(17);
        line << axis << ',' << setting << ',' << asr << '\n';
        csv += line.str();
    };
    const auto run_dta = [&](const AttackConfig& cfg) {
        std::vector<Tensor> out;
        for (auto& r : dta_attack_all(model, data.images, cfg)) out.push_back(std::move(r.x_adv));
        return stack(out);
    };
    const auto axes = split(run.settings.text("ablate.axes"), ',');
    for (const auto& axis : axes) {
        if (axis == "loss") {
            for (LossKind k : {LossKind::atcs, LossKind::l1, LossKind::l2, LossKind::l3, LossKind::l4}) {
                AttackConfig c = base;
                c.loss = k;
                record(axis, std::string(loss_kind_name(k)), run_dta(c));
            }
        } else if (axis == "layers") {
            record(axis, "dta", run_dta(base));
            record(axis, "all-candidates",
                   fixed_layers_attack(model, data.images, candidate_layers(model.config.depth), base.loss, base.epsilon,
                                       base.eta_deep, base.steps_deep, run.seed));
            for (int l = 1; l <= model.config.depth; ++l)
                record(axis, "single-" + std::to_string(l),
                       fixed_layers_attack(model, data.images, {l}, base.loss, base.epsilon, base.eta_deep,
                                           base.steps_deep, run.seed));
        } else if (axis == "gamma") {
            for (const auto& g : split(run.settings.text("ablate.gammas"), ',')) {
                AttackConfig c = base;
                if (!parse_exact(std::string_view(g), c.gamma)) throw ContractError("ablate.gammas: bad value '" + g + "'");
                c.validate(model.config.depth);
                record(axis, g, run_dta(c));
            }
        } else {
            throw ContractError("ablate.axes: unknown axis '" + axis + "' (use loss, layers, gamma)");
        }
    }
    write_text(run.out / "ablate.csv", csv);
    write_json(run.out / "ablate.json", {{"rows", rows}});
    return {{"command", "ablate"}, {"rows", rows.size()}};
}

void emit_error(std::ostream& err, const char* kind, const std::string& message, json extra = json::object()) {
    json e = {{"kind", kind}, {"message", message}};
    e.update(extra);
    err << json{{"error", e}}.dump() << "\n";
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Downstream transfer attack lab on a small vision transformer.", "dta"};
    app.require_subcommand(1);
    std::string config;
    uint64_t seed = 0;
    std::string out_dir = ".";
    std::vector<std::string> overrides;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "write a synthetic dataset (train.dtad, optional test.dtad)"},
        {"pretrain", "supervised pretraining of the backbone"},
        {"finetune", "fine-tune a pretrained checkpoint (full, lora, adaptformer)"},
        {"attack", "craft adversarial examples against a pretrained checkpoint"},
        {"eval", "score adversarial examples on a downstream checkpoint"},
        {"sweep", "per-layer ATCS/ASR curves"},
        {"ablate", "loss kinds, layer strategies and gamma grid"},
        {"advtrain", "adversarial fine-tuning"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config, "JSON config file");
        sub->add_option("--seed", seed, "run seed")->capture_default_str();
        sub->add_option("--out", out_dir, "output directory")->capture_default_str();
        sub->add_option("--override", overrides, "key=value, repeatable")->allow_extra_args(false);
    }

    std::vector<std::string> argv_store{"dta"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        emit_error(err, "usage", e.what());
        return 2;
    }

    try {
        Run run;
        run.command = app.get_subcommands().front()->get_name();
        run.seed = seed;
        run.out = out_dir;
        if (!config.empty()) run.settings.load_file(config);
        for (const auto& o : overrides) run.settings.apply_override(o);
        fs::create_directories(run.out);
        json summary;
        if (run.command == "gen-data") summary = cmd_gen_data(run);
        else if (run.command == "pretrain") summary = cmd_pretrain(run);
        else if (run.command == "finetune") summary = finetune_like(run, false);
        else if (run.command == "advtrain") summary = finetune_like(run, true);
        else if (run.command == "attack") summary = cmd_attack(run);
        else if (run.command == "eval") summary = cmd_eval(run);
        else if (run.command == "sweep") summary = cmd_sweep(run);
        else summary = cmd_ablate(run);
        out << summary.dump() << "\n";
        return 0;
    } catch (const UnknownKeyError& e) {
        emit_error(err, e.kind(), e.what(), {{"valid_keys", e.valid_keys()}});
        return 2;
    } catch (const UsageError& e) {
        emit_error(err, e.kind(), e.what());
        return 2;
    } catch (const TrainingError& e) {
        emit_error(err, e.kind(), e.what(), {{"epoch", e.epoch()}, {"step", e.step()}});
        return 1;
    } catch (const Error& e) {
        emit_error(err, e.kind(), e.what());
        return 1;
    } catch (const fs::filesystem_error& e) {
        emit_error(err, "io", e.what());
        return 1;
    } catch (const std::exception& e) {
        emit_error(err, "internal", e.what());
        return 1;
    }
}

} // namespace dta::cli
