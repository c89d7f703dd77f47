#pragma once

// Batch commands behind the numprobe executable. Each command reads a JSON
// config, writes results.json, CSVs, SVGs and config.json into its output
// directory, and never touches its inputs.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "numprobe/actstore.hpp"
#include "numprobe/contexts.hpp"
#include "numprobe/errors.hpp"
#include "numprobe/probes.hpp"
#include "numprobe/report.hpp"
#include "numprobe/spectra.hpp"
#include "numprobe/toylm.hpp"
#include "numprobe/trace.hpp"

#ifndef NUMPROBE_DATA_DIR
#define NUMPROBE_DATA_DIR "data"
#endif

namespace numprobe {

inline constexpr const char* numprobe_version = "0.1.0";

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config access with JSON-pointer error paths
// ---------------------------------------------------------------------------

class ConfigReader {
public:
    explicit ConfigReader(json& root) : root_(&root), known_(std::make_shared<std::set<std::string>>()) {
        if (!root.is_object()) {
            throw ConfigError("/: config must be a JSON object");
        }
    }

    ConfigReader child(const std::string& key) {
        json& j = node();
        if (!j.contains(key)) {
            j[key] = json::object();
        }
        if (!j[key].is_object()) {
            throw ConfigError(ptr(key) + ": expected an object");
        }
        known_->insert(ptr(key));
        return ConfigReader(root_, known_, ptr(key));
    }

    bool has(const std::string& key) const { return node().contains(key) && !node()[key].is_null(); }

    template <class T>
    T get(const std::string& key, const T& def) {
        known_->insert(ptr(key));
        json& j = node();
        if (!j.contains(key) || j[key].is_null()) {
            j[key] = def;
            return def;
        }
        return convert<T>(j[key], ptr(key));
    }

    template <class T>
    T require(const std::string& key) {
        known_->insert(ptr(key));
        if (!has(key)) {
            throw ConfigError(ptr(key) + ": required key missing");
        }
        return convert<T>(node()[key], ptr(key));
    }

    fs::path input_path(const std::string& key) {
        const fs::path p = require<std::string>(key);
        if (!fs::exists(p)) {
            throw StoreError(ptr(key) + ": no such file or directory: " + p.string());
        }
        return p;
    }

    template <class T>
    T choice(const std::string& key, const T& def, const std::vector<T>& allowed) {
        const T v = get<T>(key, def);
        if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
            throw ConfigError(ptr(key) + ": value not allowed");
        }
        return v;
    }

    // Rejects keys no reader asked for.
    void finish() const { check_unknown(*root_, ""); }

    const std::string& pointer() const { return base_; }

private:
    ConfigReader(json* root, std::shared_ptr<std::set<std::string>> known, std::string base)
        : root_(root), known_(std::move(known)), base_(std::move(base)) {}

    json& node() const { return base_.empty() ? *root_ : root_->at(json::json_pointer(base_)); }

    std::string ptr(const std::string& key) const {
        std::string k;
        for (char c : key) {
            k += c == '~' ? "~0" : c == '/' ? "~1" : std::string(1, c);
        }
        return base_ + "/" + k;
    }

    void check_unknown(const json& j, const std::string& at) const {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string p = at + "/" + it.key();
            if (!known_->count(p)) {
                throw ConfigError(p + ": unknown key");
            }
            if (it.value().is_object() && known_->count(p) && is_object_reader(p)) {
                check_unknown(it.value(), p);
            }
        }
    }

    bool is_object_reader(const std::string& p) const {
        const std::string prefix = p + "/";
        return std::any_of(known_->begin(), known_->end(), [&](const std::string& k) { return k.rfind(prefix, 0) == 0; });
    }

    template <class T>
    static T convert(const json& v, const std::string& where) {
        auto bad = [&](const char* what) { return ConfigError(where + ": expected " + what); };
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw bad("a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw bad("a string");
            return v.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw bad("a number");
            return v.get<T>();
        } else if constexpr (std::is_unsigned_v<T>) {
            if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
                throw bad("a non-negative integer");
            }
            return v.get<T>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw bad("an integer");
            return v.get<T>();
        } else {
            if (!v.is_array()) throw bad("an array");
            T out;
            for (std::size_t i = 0; i < v.size(); ++i) {
                out.push_back(convert<typename T::value_type>(v[i], where + "/" + std::to_string(i)));
            }
            return out;
        }
    }

    json* root_;
    std::shared_ptr<std::set<std::string>> known_;
    std::string base_;
};

// ---------------------------------------------------------------------------
// Command plumbing
// ---------------------------------------------------------------------------

struct CommandContext {
    ConfigReader& cfg;
    fs::path out;
    std::uint64_t seed;
    std::size_t jobs;
};

using CommandFn = std::function<json(CommandContext&)>;

namespace cli_detail {

inline json read_json_file(const fs::path& p) {
    std::ifstream f(p);
    if (!f) {
        throw StoreError("cannot open " + p.string());
    }
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

inline MathOp read_op(ConfigReader& c) {
    return parse_op(c.choice<std::string>("op", "+", {"+", "-", "*", "/", "add", "sub", "mul", "div"}));
}

inline OperandRange read_range(ConfigReader& c, std::vector<std::int64_t> def = {0, 999}) {
    const auto r = c.get<std::vector<std::int64_t>>("operand_range", def);
    if (r.size() != 2) {
        throw ConfigError(c.pointer() + "/operand_range: expected [lo, hi]");
    }
    return {r[0], r[1]};
}

inline TrainConfig read_train(ConfigReader& c, std::uint64_t seed) {
    auto t = c.child("train");
    TrainConfig tc;
    tc.learning_rate = t.get<double>("learning_rate", tc.learning_rate);
    tc.max_epochs = t.get<std::size_t>("max_epochs", tc.max_epochs);
    tc.batch_size = t.get<std::size_t>("batch_size", tc.batch_size);
    tc.early_stop_patience = t.get<std::size_t>("early_stop_patience", tc.early_stop_patience);
    tc.seed = seed;
    tc.validate();
    return tc;
}

inline ProbeOptions read_probe_options(ConfigReader& c) {
    auto p = c.child("probe");
    ProbeOptions o;
    o.n_classes = p.get<std::size_t>("n_classes", o.n_classes);
    o.n_features = p.get<std::size_t>("n_features", o.n_features);
    o.proj_dim = p.get<std::size_t>("proj_dim", o.proj_dim);
    o.mlp_hidden = p.get<std::size_t>("mlp_hidden", o.mlp_hidden);
    return o;
}

inline ProbeKind read_kind(ConfigReader& c) {
    return parse_probe_kind(c.choice<std::string>("kind", "sin", {"sin", "linear", "mlp"}));
}

struct LayerData {
    std::vector<ActivationSet> sets;
    Splits splits;
};

inline LayerData read_layers(ConfigReader& c, std::uint64_t seed) {
    const auto dump = c.input_path("dump");
    const auto site = parse_site(c.get<std::string>("site", "residual_out"));
    const auto manifest = load_manifest(dump);
    std::set<int> available;
    for (const auto& e : manifest.entries) {
        if (e.site == site) {
            available.insert(e.layer);
        }
    }
    auto layers = c.get<std::vector<int>>("layers", std::vector<int>(available.begin(), available.end()));
    if (layers.empty()) {
        throw ConfigError(c.pointer() + "/layers: no layers selected");
    }
    const auto hv = c.get<std::size_t>("holdout_val", 100);
    const auto ht = c.get<std::size_t>("holdout_test", 100);
    const auto split_seed = c.get<std::uint64_t>("split_seed", seed);
    LayerData out;
    for (int l : layers) {
        if (!available.count(l)) {
            throw ConfigError(c.pointer() + "/layers: layer " + std::to_string(l) + " not in dump");
        }
        out.sets.push_back(read_dump(dump, {l, site, std::nullopt}));
    }
    detail::check_aligned(out.sets);
    out.splits = split_by_value(out.sets[0].labels, hv, ht, split_seed);
    return out;
}

inline std::string layer_dir(int l) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "layer_%02d", l);
    return buf;
}

inline json report_row(const AccuracyReport& r) {
    json j = to_json(r);
    j.erase("test_values");
    return j;
}

inline std::vector<PromptRecord> math_prompts(ConfigReader& c, std::uint64_t seed) {
    const auto op = read_op(c);
    const auto range = read_range(c);
    const auto n = c.get<std::size_t>("n_prompts", 2000);
    const auto ps = c.get<std::uint64_t>("prompt_seed", seed);
    return gen_math_prompts(op, range, n, ps);
}

inline std::vector<EmbeddingTable> read_tables(ConfigReader& c) {
    const auto specs = c.require<std::vector<std::string>>("tables");
    if (specs.empty()) {
        throw ConfigError(c.pointer() + "/tables: empty");
    }
    const auto layer = c.get<int>("layer", 0);
    const auto site = parse_site(c.get<std::string>("site", "embedding"));
    std::vector<EmbeddingTable> out;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const fs::path p = specs[i];
        if (!fs::exists(p)) {
            throw StoreError(c.pointer() + "/tables/" + std::to_string(i) + ": no such file or directory: " + p.string());
        }
        if (fs::is_directory(p)) {
            auto t = EmbeddingTable::from_activations(read_dump(p, {layer, site, std::nullopt}));
            t.model_id = p.filename().string();
            out.push_back(std::move(t));
        } else {
            out.push_back(EmbeddingTable::numeric(p.stem().string(), read_npad_matrix(p)));
        }
    }
    return out;
}

inline json matrix_json(const Matrix& m) {
    json j = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < m.cols(); ++c) {
            row.push_back(m(r, c));
        }
        j.push_back(row);
    }
    return j;
}

inline void matrix_csv(const fs::path& p, const std::vector<std::string>& names, const Matrix& m,
                       const std::string& corner) {
    std::vector<std::string> header{corner};
    header.insert(header.end(), names.begin(), names.end());
    CsvTable t(header);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        std::vector<std::string> row{names[r]};
        for (std::size_t c = 0; c < m.cols(); ++c) {
            row.push_back(fmt_num(m(r, c)));
        }
        t.add(row);
    }
    t.write(p);
}

inline std::string opt_str(const std::optional<double>& v) { return v ? fmt_num(*v) : ""; }

// Removes the files a previous dump-toy run left in `dir`.
inline void clear_dump(const fs::path& dir) {
    if (!fs::exists(dir / manifest_name)) {
        return;
    }
    const auto m = load_manifest(dir);
    for (const auto& e : m.entries) {
        fs::remove(dir / e.file);
        fs::remove(dir / e.labels_file);
    }
    fs::remove(dir / manifest_name);
}

inline std::vector<Probe> fit_layers(const LayerData& d, ProbeKind kind, const TrainConfig& tc,
                                     const ProbeOptions& po, std::size_t jobs, std::vector<AccuracyReport>& reports) {
    std::vector<std::optional<FitResult>> fits(d.sets.size());
    parallel_for(d.sets.size(), jobs, [&](std::size_t k) { fits[k] = fit_probe(kind, d.sets[k], d.splits, tc, po); });
    std::vector<Probe> probes;
    reports.clear();
    for (auto& f : fits) {
        probes.push_back(std::move(f->probe));
        reports.push_back(std::move(f->report));
    }
    return probes;
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline json cmd_train_toy(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto op = cli_detail::read_op(c);
    // Training defaults to the 0..499 box: every pair is valid and the sum stays a single token.
    const auto range = cli_detail::read_range(c, {0, 499});
    const auto templates = c.get<std::string>("templates", NUMPROBE_DATA_DIR "/templates");
    auto m = c.child("model");
    ToyConfig mc;
    mc.n_layers = m.get<int>("n_layers", mc.n_layers);
    mc.d_model = m.get<int>("d_model", mc.d_model);
    mc.n_heads = m.get<int>("n_heads", mc.n_heads);
    mc.d_ff = m.get<int>("d_ff", mc.d_ff);
    mc.vocab_size = m.get<int>("vocab_size", mc.vocab_size);
    mc.max_seq_len = m.get<int>("max_seq_len", mc.max_seq_len);
    mc.rope_base = m.get<double>("rope_base", mc.rope_base);
    mc.norm_eps = m.get<double>("norm_eps", mc.norm_eps);
    mc.sinusoidal_number_init = m.get<bool>("sinusoidal_number_init", mc.sinusoidal_number_init);
    mc.seed = ctx.seed;
    auto t = c.child("train");
    ToyTrainConfig tc;
    tc.steps = t.get<std::size_t>("steps", tc.steps);
    tc.batch_size = t.get<std::size_t>("batch_size", tc.batch_size);
    tc.learning_rate = t.get<double>("learning_rate", tc.learning_rate);
    tc.weight_decay = t.get<double>("weight_decay", tc.weight_decay);
    tc.beta1 = t.get<double>("beta1", tc.beta1);
    tc.beta2 = t.get<double>("beta2", tc.beta2);
    tc.warmup = t.get<std::size_t>("warmup", tc.warmup);
    tc.eval_size = t.get<std::size_t>("eval_size", tc.eval_size);
    tc.holdout_mod = t.get<std::uint64_t>("holdout_mod", tc.holdout_mod);
    const auto log_every = t.get<std::size_t>("log_every", 500);
    tc.seed = ctx.seed;
    c.finish();

    Tokenizer tok;
    if (!templates.empty()) {
        if (!fs::exists(templates)) {
            throw StoreError("/templates: no such directory: " + templates);
        }
        tok = Tokenizer::from_bank(TemplateBank::load(templates));
    }
    ToyLM model(mc, tok);
    const auto metrics = train_arithmetic(model, op, range, tc, {}, log_every);
    model.save(ctx.out / "model");

    json curve = json::array();
    CsvTable csv({"step", "loss"});
    for (const auto& [step, loss] : metrics.loss_curve) {
        curve.push_back({{"step", step}, {"loss", loss}});
        csv.add({std::to_string(step), fmt_num(loss)});
    }
    csv.write(ctx.out / "loss_curve.csv");
    return {{"parameter_count", model.parameter_count()},
            {"steps", metrics.steps},
            {"train_accuracy", metrics.train_accuracy},
            {"eval_accuracy", metrics.eval_accuracy},
            {"final_loss", metrics.final_loss},
            {"loss_curve", curve},
            {"checkpoint", "model"}};
}

inline json cmd_dump_toy(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto model_dir = c.input_path("model");
    const auto target = c.choice<std::string>("target", "operand1", {"operand1", "operand2", "result", "embedding"});
    const auto prompts = target == "embedding" ? std::vector<PromptRecord>{} : cli_detail::math_prompts(c, ctx.seed);
    const auto model_id = c.get<std::string>("model_id", model_dir.filename().string());
    std::vector<int> layers;
    if (target != "embedding") {
        layers = c.get<std::vector<int>>("layers", {});
    }
    c.finish();

    const auto model = ToyLM::load(model_dir);
    const int L = model.n_layers();
    cli_detail::clear_dump(ctx.out);
    json written = json::array();
    if (target == "embedding") {
        for (auto [site, m] : {std::pair{Site::embedding, model.number_embeddings()},
                               std::pair{Site::output_embedding, model.number_unembeddings()}}) {
            ActivationSet s{model_id, 0, site, m, {}, {}};
            for (int v = 0; v < static_cast<int>(m.rows()); ++v) {
                s.labels.push_back(v);
                s.meta.push_back({"token-" + std::to_string(v), 0, "", ""});
            }
            write_dump(s, ctx.out, L);
            written.push_back({{"layer", 0}, {"site", site_name(site)}, {"n_rows", s.size()}});
        }
        return {{"target", target}, {"model_id", model_id}, {"d_model", model.config().d_model}, {"entries", written}};
    }

    std::vector<int> positions, labels;
    for (const auto& p : prompts) {
        if (target == "result") {
            positions.push_back(-1);
            labels.push_back(p.target ? static_cast<int>(*p.target) : -1);
        } else {
            const auto& span = p.number_spans[target == "operand1" ? 0 : 1];
            positions.push_back(static_cast<int>(span.positions.back()));
            labels.push_back(static_cast<int>(span.value));
        }
    }
    const auto sets = capture_toy_layers(model, prompts, positions, labels, model_id);
    if (layers.empty()) {
        for (int l = 0; l <= L + 1; ++l) {
            layers.push_back(l);
        }
    }
    for (int l : layers) {
        if (l < 0 || l > L + 1) {
            throw ConfigError("/layers: layer " + std::to_string(l) + " outside 0.." + std::to_string(L + 1));
        }
        write_dump(sets[l], ctx.out, L);
        written.push_back({{"layer", l}, {"site", "residual_out"}, {"n_rows", sets[l].size()}});
    }
    write_prompts_jsonl(ctx.out / "prompts.jsonl", prompts);
    return {{"target", target}, {"model_id", model_id}, {"d_model", model.config().d_model}, {"entries", written}};
}

inline json cmd_probe_train(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto kind = cli_detail::read_kind(c);
    auto data = cli_detail::read_layers(c, ctx.seed);
    const auto tc = cli_detail::read_train(c, ctx.seed);
    const auto po = cli_detail::read_probe_options(c);
    c.finish();

    std::vector<AccuracyReport> reports;
    const auto probes = cli_detail::fit_layers(data, kind, tc, po, ctx.jobs, reports);
    json rows = json::array();
    CsvTable csv({"layer", "train_accuracy", "val_accuracy", "test_accuracy", "best_epoch"});
    for (std::size_t k = 0; k < probes.size(); ++k) {
        save_probe(probes[k], reports[k], tc, ctx.out / "probes" / cli_detail::layer_dir(reports[k].layer));
        rows.push_back(cli_detail::report_row(reports[k]));
        csv.add({std::to_string(reports[k].layer), fmt_num(reports[k].train_accuracy),
                 fmt_num(reports[k].val_accuracy), fmt_num(reports[k].test_accuracy),
                 std::to_string(reports[k].best_epoch)});
    }
    csv.write(ctx.out / "probe_accuracy.csv");
    return {{"kind", probe_kind_name(kind)}, {"layers", rows}, {"test_values", reports[0].test_values}};
}

inline json cmd_probe_eval(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto probe_dir = c.input_path("probe");
    const auto dump = c.input_path("dump");
    const auto loaded = load_probe(probe_dir);
    const auto layer = c.get<int>("layer", loaded.report.layer);
    const auto rows = c.choice<std::string>("rows", "test", {"test", "all"});
    c.finish();

    const auto set = read_dump(dump, {layer, parse_site(loaded.report.site), std::nullopt});
    const std::set<int> values(loaded.report.test_values.begin(), loaded.report.test_values.end());
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (set.labels[i] >= 0 && (rows == "all" || values.count(set.labels[i]))) {
            idx.push_back(i);
        }
    }
    std::vector<int> y;
    for (auto i : idx) {
        y.push_back(set.labels[i]);
    }
    const double acc = probe_accuracy(loaded.probe, set.vectors.select_rows(idx), y);
    return {{"layer", layer}, {"rows", rows}, {"n", idx.size()}, {"accuracy", acc},
            {"probe_layer", loaded.report.layer}};
}

inline json cmd_probe_cross_layer(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto kind = cli_detail::read_kind(c);
    auto data = cli_detail::read_layers(c, ctx.seed);
    const auto tc = cli_detail::read_train(c, ctx.seed);
    const auto po = cli_detail::read_probe_options(c);
    c.finish();

    std::vector<AccuracyReport> reports;
    const auto probes = cli_detail::fit_layers(data, kind, tc, po, ctx.jobs, reports);
    const auto cl = cross_layer_matrix(probes, data.sets, data.splits, po, ctx.jobs);
    std::vector<std::string> names;
    json diag = json::array();
    for (std::size_t k = 0; k < cl.layers.size(); ++k) {
        names.push_back(std::to_string(cl.layers[k]));
        diag.push_back(cli_detail::report_row(reports[k]));
    }
    cli_detail::matrix_csv(ctx.out / "cross_layer.csv", names, cl.accuracy, "trained_on\\evaluated_on");
    return {{"kind", probe_kind_name(kind)},
            {"layers", cl.layers},
            {"accuracy", cli_detail::matrix_json(cl.accuracy)},
            {"reports", diag}};
}

inline json cmd_probe_loo(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto kind = cli_detail::read_kind(c);
    auto data = cli_detail::read_layers(c, ctx.seed);
    const auto tc = cli_detail::read_train(c, ctx.seed);
    const auto po = cli_detail::read_probe_options(c);
    c.finish();

    std::vector<LeaveOneOut> res(data.sets.size());
    parallel_for(data.sets.size(), ctx.jobs,
                 [&](std::size_t k) { res[k] = leave_one_out_eval(k, data.sets, data.splits, kind, tc, po); });
    json rows = json::array();
    CsvTable csv({"layer", "accuracy", "pooled_test_accuracy"});
    for (const auto& r : res) {
        rows.push_back({{"layer", r.layer}, {"accuracy", r.accuracy}, {"pooled_test_accuracy", r.pooled.test_accuracy}});
        csv.add({std::to_string(r.layer), fmt_num(r.accuracy), fmt_num(r.pooled.test_accuracy)});
    }
    csv.write(ctx.out / "loo.csv");
    return {{"kind", probe_kind_name(kind)}, {"layers", rows}};
}

inline json cmd_rsa(CommandContext& ctx) {
    auto& c = ctx.cfg;
    auto tables = cli_detail::read_tables(c);
    const auto rounds = c.get<std::size_t>("permutation_rounds", 200);
    c.finish();

    const auto n = tables.size();
    Matrix scores(n, n);
    json tests = json::array();
    std::vector<std::string> names;
    for (const auto& t : tables) {
        names.push_back(t.model_id);
    }
    for (std::size_t i = 0; i < n; ++i) {
        scores(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto [a, b] = align_tables(tables[i], tables[j]);
            const auto pt = rsa_permutation_test(a, b, rounds, ctx.seed);
            scores(i, j) = scores(j, i) = pt.observed;
            tests.push_back({{"a", names[i]},
                             {"b", names[j]},
                             {"n_keys", a.size()},
                             {"score", pt.observed},
                             {"null_band", pt.band},
                             {"p_value", pt.p_value}});
        }
    }
    cli_detail::matrix_csv(ctx.out / "rsa.csv", names, scores, "table");
    return {{"tables", names}, {"scores", cli_detail::matrix_json(scores)}, {"permutation_rounds", rounds},
            {"pairs", tests}};
}

inline json cmd_fft_iou(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto tables = cli_detail::read_tables(c);
    const auto k = c.get<std::size_t>("k", default_top_k);
    const auto pca = c.get<std::size_t>("pca_dims", default_pca_dims);
    const auto k_max = c.get<std::size_t>("k_max", k);
    c.finish();

    std::vector<SpectralProfile> profiles;
    std::vector<FreqSet> sets;
    std::vector<std::string> names;
    json top = json::object();
    for (const auto& t : tables) {
        profiles.push_back(fourier_profile(t, pca));
        sets.push_back(topk_freqs(profiles.back(), k));
        names.push_back(t.model_id);
        top[t.model_id] = sets.back().bins;
    }
    const auto m = pairwise_iou(sets);
    cli_detail::matrix_csv(ctx.out / "fft_iou.csv", names, m, "table");
    json res{{"tables", names}, {"k", k}, {"pca_dims", pca}, {"iou", cli_detail::matrix_json(m)}, {"top_bins", top}};
    if (tables.size() >= 2) {
        const auto sw = iou_sweep(profiles, k_max);
        json rows = json::array();
        CsvTable csv({"k", "min_iou", "mean_iou"});
        for (std::size_t i = 0; i < sw.k.size(); ++i) {
            rows.push_back({{"k", sw.k[i]}, {"min_iou", sw.min_iou[i]}, {"mean_iou", sw.mean_iou[i]}});
            csv.add({std::to_string(sw.k[i]), fmt_num(sw.min_iou[i]), fmt_num(sw.mean_iou[i])});
        }
        csv.write(ctx.out / "iou_sweep.csv");
        res["sweep"] = rows;
        res["optimal_k"] = optimal_k(profiles, k_max);
    } else {
        res["sweep"] = json::array({{{"k", k}, {"min_iou", 1.0}, {"mean_iou", 1.0}}});
        res["optimal_k"] = nullptr;
    }
    return res;
}

inline json cmd_multitok(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto model_dir = c.input_path("model");
    const auto templates = c.get<std::string>("templates", NUMPROBE_DATA_DIR "/templates");
    const auto domains = c.get<std::vector<std::string>>("domains", {"culinary", "temporal", "medical", "arithmetic_word"});
    const auto n = c.get<std::size_t>("n_prompts", 1000);
    const auto layer = c.get<int>("layer", 1);
    MultitokConfig mc;
    mc.offsets = c.get<std::vector<int>>("offsets", mc.offsets);
    mc.kind = cli_detail::read_kind(c);
    mc.holdout_val = c.get<std::size_t>("holdout_val", mc.holdout_val);
    mc.holdout_test = c.get<std::size_t>("holdout_test", mc.holdout_test);
    mc.train = cli_detail::read_train(c, ctx.seed);
    mc.probe = cli_detail::read_probe_options(c);
    mc.seed = ctx.seed;
    auto lc = c.child("lens");
    const bool lens_on = lc.get<bool>("enabled", true);
    LensConfig lens_cfg;
    lens_cfg.epochs = lc.get<std::size_t>("epochs", lens_cfg.epochs);
    lens_cfg.learning_rate = lc.get<double>("learning_rate", lens_cfg.learning_rate);
    lens_cfg.seed = ctx.seed;
    const auto label_skip = lc.get<std::size_t>("label_rank_offset", 0);
    c.finish();

    if (!fs::exists(templates)) {
        throw StoreError("/templates: no such directory: " + templates);
    }
    const auto model = ToyLM::load(model_dir);
    if (layer < 0 || layer > model.n_layers() + 1) {
        throw ConfigError("/layer: outside 0.." + std::to_string(model.n_layers() + 1));
    }
    const auto bank = TemplateBank::load(templates);
    std::vector<PromptRecord> prompts;
    for (std::size_t d = 0; d < domains.size(); ++d) {
        auto part = gen_natural_prompts(bank, parse_context(domains[d]), n, balanced_multitoken(),
                                        Rng(ctx.seed).split(d).next_u64());
        prompts.insert(prompts.end(), part.begin(), part.end());
    }
    // One row per number span, taken at its last chunk.
    std::vector<PromptRecord> rows_prompts;
    std::vector<int> positions, labels;
    std::vector<std::vector<int>> chunks;
    for (const auto& p : prompts) {
        for (const auto& s : p.number_spans) {
            rows_prompts.push_back(p);
            positions.push_back(static_cast<int>(s.positions.back()));
            labels.push_back(s.chunks.back());
            chunks.push_back(s.chunks);
        }
    }
    const auto sets = capture_toy_layers(model, rows_prompts, positions, labels, model_dir.filename().string());
    const auto rec = multitok_recovery(sets[layer], chunks, mc, ctx.jobs);
    json offs = json::array();
    CsvTable csv({"method", "offset", "n_samples", "accuracy"});
    for (const auto& r : rec) {
        offs.push_back({{"offset", r.offset}, {"n_samples", r.n_samples}, {"accuracy", optional_json(r.accuracy)}});
        csv.add({"probe", std::to_string(r.offset), std::to_string(r.n_samples), cli_detail::opt_str(r.accuracy)});
    }
    json res{{"layer", layer}, {"n_prompts", prompts.size()}, {"n_rows", chunks.size()}, {"offsets", offs}};
    if (lens_on && layer <= model.n_layers()) {
        // Lens fit on half the prompts, scored on the rest.
        const std::size_t half = prompts.size() / 2;
        const std::span<const PromptRecord> all(prompts);
        const auto lens = fit_tuned_lens(model, collect_lens_data(model, all.first(half), layer), layer, lens_cfg);
        const auto eval = all.subspan(half);
        std::vector<int> numbers(Tokenizer::n_numbers);
        std::iota(numbers.begin(), numbers.end(), 0);
        const auto words = frequent_token_subset(model.tokenizer(), all, 1000, label_skip);
        const auto num_rec = lens_recovery(model, lens, eval, mc.offsets, numbers, true);
        const auto word_rec = lens_recovery(model, lens, eval, mc.offsets, words, false);
        json lo = json::array(), lw = json::array();
        for (std::size_t k = 0; k < num_rec.size(); ++k) {
            lo.push_back({{"offset", num_rec[k].offset}, {"n_samples", num_rec[k].n_samples},
                          {"accuracy", optional_json(num_rec[k].accuracy)}});
            lw.push_back({{"offset", word_rec[k].offset}, {"n_samples", word_rec[k].n_samples},
                          {"accuracy", optional_json(word_rec[k].accuracy)}});
            csv.add({"lens-numeric", std::to_string(num_rec[k].offset), std::to_string(num_rec[k].n_samples),
                     cli_detail::opt_str(num_rec[k].accuracy)});
            csv.add({"lens-words", std::to_string(word_rec[k].offset), std::to_string(word_rec[k].n_samples),
                     cli_detail::opt_str(word_rec[k].accuracy)});
        }
        res["lens_offsets"] = lo;
        res["lens_word_offsets"] = lw;
        res["lens_label_space"] = words.size();
    }
    csv.write(ctx.out / "multitok.csv");
    return res;
}

inline json cmd_trace_errors(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto model_dir = c.input_path("model");
    const auto probes_dir = c.input_path("probes");
    const auto prompts = cli_detail::math_prompts(c, ctx.seed);
    c.finish();

    const auto model = ToyLM::load(model_dir);
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(probes_dir)) {
        if (e.is_directory() && fs::exists(e.path() / "probe.json")) {
            dirs.push_back(e.path());
        }
    }
    if (dirs.empty()) {
        throw StoreError("/probes: no probe directories in " + probes_dir.string());
    }
    std::vector<std::pair<int, Probe>> loaded;
    for (const auto& d : dirs) {
        auto lp = load_probe(d);
        loaded.emplace_back(lp.report.layer, std::move(lp.probe));
    }
    std::stable_sort(loaded.begin(), loaded.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<int> layers;
    std::vector<Probe> probes;
    for (auto& [l, p] : loaded) {
        layers.push_back(l);
        probes.push_back(std::move(p));
    }
    const auto t = result_probe_eval(model, prompts, probes, layers, ctx.jobs);
    const auto ex = extraction_stats(t);
    const auto agg = error_aggregation(t);
    CsvTable csv({"layer", "accuracy", "accuracy_correct", "accuracy_incorrect", "mean_abs_error", "breaks",
                  "break_fraction", "extracted_given_incorrect", "not_extracted_given_correct"});
    for (std::size_t l = 0; l < t.summary.size(); ++l) {
        const auto& s = t.summary[l];
        csv.add({std::to_string(s.layer), fmt_num(s.accuracy), cli_detail::opt_str(s.accuracy_correct),
                 cli_detail::opt_str(s.accuracy_incorrect), fmt_num(s.mean_abs_error), std::to_string(s.breaks),
                 fmt_num(agg[l]), cli_detail::opt_str(ex.layer_extracted_given_incorrect[l]),
                 cli_detail::opt_str(ex.layer_not_extracted_given_correct[l])});
    }
    csv.write(ctx.out / "trace_layers.csv");
    const auto st = stratify(t);
    return {{"model_accuracy", t.size() ? static_cast<double>(st.correct.size()) / static_cast<double>(t.size()) : 0.0},
            {"trace", to_json(t)},
            {"extraction", to_json(ex)}};
}

inline json cmd_ablate(CommandContext& ctx) {
    auto& c = ctx.cfg;
    const auto model_dir = c.input_path("model");
    const auto prompts = cli_detail::math_prompts(c, ctx.seed);
    auto candidates = c.get<std::vector<int>>("candidates", {});
    const auto joint = c.get<bool>("joint", false);
    c.finish();

    const auto model = ToyLM::load(model_dir);
    if (candidates.empty()) {
        for (int l = 1; l <= model.n_layers(); ++l) {
            candidates.push_back(l);
        }
    }
    auto scores = ablate_and_score(model, prompts, candidates, ctx.jobs);
    json rows = json::array();
    CsvTable csv({"skipped", "accuracy_before", "accuracy_after", "error_reduction"});
    auto add = [&](const AblationScore& s) {
        rows.push_back(to_json(s));
        std::string sk;
        for (int l : s.skipped) {
            sk += (sk.empty() ? "" : " ") + std::to_string(l);
        }
        csv.add({sk, fmt_num(s.accuracy_before), fmt_num(s.accuracy_after), fmt_num(s.error_reduction)});
    };
    for (const auto& s : scores) {
        add(s);
    }
    json res{{"ablations", rows}};
    if (joint) {
        const auto s = ablate_set(model, prompts, std::set<int>(candidates.begin(), candidates.end()));
        res["joint"] = to_json(s);
        add(s);
    }
    csv.write(ctx.out / "ablation.csv");
    return res;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline const std::map<std::string, CommandFn>& command_table() {
    static const std::map<std::string, CommandFn> t{
        {"train-toy", cmd_train_toy},         {"dump-toy", cmd_dump_toy},
        {"probe-train", cmd_probe_train},     {"probe-eval", cmd_probe_eval},
        {"probe-cross-layer", cmd_probe_cross_layer}, {"probe-loo", cmd_probe_loo},
        {"rsa", cmd_rsa},                     {"fft-iou", cmd_fft_iou},
        {"multitok", cmd_multitok},           {"trace-errors", cmd_trace_errors},
        {"ablate", cmd_ablate},
    };
    return t;
}

// The kind string recorded in results.json (the report renderer keys on it).
inline std::string result_kind(const std::string& command) {
    if (command == "probe-cross-layer") return "cross-layer";
    if (command == "probe-loo") return "loo";
    return command;
}

// Sets a value at a dotted path ("train.max_epochs") in `cfg`.
inline void apply_override(json& cfg, const std::string& path, const json& value) {
    json* node = &cfg;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) {
            throw ConfigError("bad override path '" + path + "'");
        }
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) {
            (*node)[key] = json::object();
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

// "key=value"; the value is parsed as JSON when possible, else taken as a string.
inline std::pair<std::string, json> parse_assignment(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + s + "' is not key=value");
    }
    const std::string raw = s.substr(eq + 1);
    json v;
    try {
        v = json::parse(raw);
    } catch (const json::exception&) {
        v = raw;
    }
    return {s.substr(0, eq), v};
}

inline json load_config(const fs::path& p) {
    if (p.extension() == ".toml") {
        throw ConfigError(p.string() + ": TOML configs are not supported; use JSON");
    }
    return cli_detail::read_json_file(p);
}

// Runs `command` with `cfg`; writes results.json, config.json and figures under cfg["out"].
inline json run_command(const std::string& command, json cfg, std::size_t jobs = 1) {
    const auto& table = command_table();
    const auto it = table.find(command);
    if (it == table.end()) {
        throw ConfigError("unknown command '" + command + "'");
    }
    if (!cfg.is_object()) {
        throw ConfigError("/: config must be a JSON object");
    }
    ConfigReader reader(cfg);
    const auto declared = reader.get<std::string>("command", command);
    if (declared != command) {
        throw ConfigError("/command: config is for '" + declared + "', not '" + command + "'");
    }
    const auto seed = reader.get<std::uint64_t>("seed", 0);
    const fs::path out = reader.require<std::string>("out");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) {
        throw StoreError("/out: cannot create " + out.string() + ": " + ec.message());
    }
    CommandContext ctx{reader, out, seed, std::max<std::size_t>(1, jobs)};
    json results = it->second(ctx);
    json doc{{"kind", result_kind(command)},
             {"command", command},
             {"version", numprobe_version},
             {"seed", seed},
             {"config", cfg},
             {"results", std::move(results)}};
    write_text(out / "config.json", cfg.dump(2) + "\n");
    write_text(out / "results.json", doc.dump(2) + "\n");
    render_report(out);
    return doc;
}

inline int exit_code(const Error& e) {
    switch (e.error_class()) {
        case ErrorClass::config: return 2;
        case ErrorClass::input: return 3;
        case ErrorClass::numeric: return 4;
        case ErrorClass::report: return 3;
    }
    return 1;
}

}  // namespace numprobe
