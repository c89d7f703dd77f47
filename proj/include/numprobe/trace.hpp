#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "numprobe/actstore.hpp"
#include "numprobe/contexts.hpp"
#include "numprobe/errors.hpp"
#include "numprobe/numcore.hpp"
#include "numprobe/probes.hpp"
#include "numprobe/toylm.hpp"

namespace numprobe {

// Runs fn(0..n-1) on up to `jobs` threads. Each index writes only its own output slot.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += jobs) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

// ---------------------------------------------------------------------------
// Toy-model activation capture
// ---------------------------------------------------------------------------

// One residual row per prompt at each layer 0..L+1. Layer L+1 is the normed
// final state fed to the unembedding. `positions[i]` may be negative (from the end).
inline std::vector<ActivationSet> capture_toy_layers(const ToyLM& model, std::span<const PromptRecord> prompts,
                                                     std::span<const int> positions, std::span<const int> labels,
                                                     const std::string& model_id, std::size_t chunk = 512) {
    if (positions.size() != prompts.size() || labels.size() != prompts.size()) {
        throw DimensionError("capture_toy_layers: prompts, positions and labels differ in length");
    }
    const int L = model.n_layers();
    const auto d = static_cast<std::size_t>(model.config().d_model);
    std::vector<ActivationSet> sets(static_cast<std::size_t>(L + 2));
    std::vector<RowMatrix> rows(sets.size(), RowMatrix(static_cast<Eigen::Index>(prompts.size()),
                                                       static_cast<Eigen::Index>(d)));
    std::vector<int> resolved(prompts.size());

    // Batches need equal lengths and a shared capture position.
    std::map<std::pair<std::size_t, int>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto n = prompts[i].tokens.size();
        const int p = positions[i] < 0 ? static_cast<int>(n) + positions[i] : positions[i];
        if (p < 0 || p >= static_cast<int>(n)) {
            throw RangeError("capture position " + std::to_string(positions[i]) + " outside prompt " +
                             prompts[i].prompt_id);
        }
        resolved[i] = p;
        groups[{n, p}].push_back(i);
    }
    for (const auto& [key, members] : groups) {
        for (std::size_t s = 0; s < members.size(); s += chunk) {
            const auto stop = std::min(members.size(), s + chunk);
            std::vector<std::vector<int>> seqs;
            for (auto k = s; k < stop; ++k) {
                seqs.push_back(model.tokenizer().encode(prompts[members[k]].tokens));
            }
            const auto cap = model.forward_capture(TokenBatch::from(seqs), {{Site::residual_out}, {key.second}});
            for (int l = 0; l <= L + 1; ++l) {
                const auto& a = cap.acts.at({Site::residual_out, l});
                for (auto k = s; k < stop; ++k) {
                    rows[l].row(static_cast<Eigen::Index>(members[k])) =
                        a.row(static_cast<Eigen::Index>(k - s)).template cast<double>();
                }
            }
        }
    }
    for (int l = 0; l <= L + 1; ++l) {
        auto& set = sets[l];
        set.model_id = model_id;
        set.layer = l;
        set.site = Site::residual_out;
        set.vectors = Matrix::from_eigen(rows[l]);
        set.labels.assign(labels.begin(), labels.end());
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            set.meta.push_back({prompts[i].prompt_id + "@" + std::to_string(resolved[i]), resolved[i],
                                std::string(context_name(prompts[i].context_type)), prompts[i].prompt_id});
        }
    }
    return sets;
}

// ---------------------------------------------------------------------------
// Cross-layer generalization
// ---------------------------------------------------------------------------

struct CrossLayerMatrix {
    std::vector<int> layers;
    Matrix accuracy;  // (probe-source layer) x (evaluation layer)
};

namespace detail {

inline double split_accuracy(const Probe& p, const ActivationSet& acts, const std::vector<std::size_t>& rows,
                             std::size_t n_classes) {
    // Same row order and evaluation path as fit_probe, so the diagonal matches its report bit for bit.
    const auto ds = make_dataset(acts, canonical_order(acts, rows), n_classes);
    return std::visit([&](const auto& m) { return evaluate_classifier(m, ds).accuracy; }, p);
}

inline void check_aligned(std::span<const ActivationSet> sets) {
    for (const auto& s : sets) {
        if (s.size() != sets[0].size() || s.labels != sets[0].labels) {
            throw AlignmentError("per-layer activation sets must hold the same samples in the same order");
        }
    }
}

}  // namespace detail

// Entry (i, j): probe trained on layer i, scored on the test rows of layer j.
inline CrossLayerMatrix cross_layer_matrix(std::span<const Probe> probes, std::span<const ActivationSet> sets,
                                           const Splits& splits, const ProbeOptions& opt = {},
                                           std::size_t jobs = 1) {
    if (probes.size() != sets.size()) {
        throw ConfigError("cross_layer_matrix: " + std::to_string(sets.size()) + " layers but " +
                          std::to_string(probes.size()) + " probes");
    }
    if (sets.empty()) {
        throw ConfigError("cross_layer_matrix: no layers");
    }
    detail::check_aligned(sets);
    const auto n = sets.size();
    CrossLayerMatrix out{{}, Matrix(n, n)};
    for (const auto& s : sets) {
        out.layers.push_back(s.layer);
    }
    parallel_for(n * n, jobs, [&](std::size_t k) {
        const auto i = k / n, j = k % n;
        out.accuracy(i, j) = detail::split_accuracy(probes[i], sets[j], splits.test, opt.n_classes);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Leave-one-layer-out probing
// ---------------------------------------------------------------------------

struct LeaveOneOut {
    int layer = 0;            // held-out layer
    double accuracy = 0;      // on that layer's test rows
    AccuracyReport pooled;    // fit on the other layers
    std::vector<int> pooled_layers;  // source layer of every pooled row
};

// Pools the train/val/test rows of every layer except `held_out` (an index into
// `sets`), fits one probe and scores it on the held-out layer's test rows.
inline LeaveOneOut leave_one_out_eval(std::size_t held_out, std::span<const ActivationSet> sets, const Splits& splits,
                                      ProbeKind kind, const TrainConfig& cfg, const ProbeOptions& opt = {}) {
    if (held_out >= sets.size()) {
        throw ConfigError("leave_one_out_eval: layer index out of range");
    }
    if (sets.size() < 3) {
        throw ConfigError("leave_one_out_eval needs at least two layers besides the held-out one");
    }
    detail::check_aligned(sets);
    ActivationSet pooled{sets[0].model_id, -1, sets[0].site, Matrix(0, sets[0].dim()), {}, {}};
    Splits ps;
    std::vector<int> source;
    for (std::size_t l = 0; l < sets.size(); ++l) {
        if (l == held_out) {
            continue;
        }
        const auto base = pooled.size();
        for (std::size_t r = 0; r < sets[l].size(); ++r) {
            pooled.append(sets[l].vectors.row(r), sets[l].labels[r], sets[l].meta[r]);
            source.push_back(sets[l].layer);
        }
        for (auto i : splits.train) ps.train.push_back(base + i);
        for (auto i : splits.val) ps.val.push_back(base + i);
        for (auto i : splits.test) ps.test.push_back(base + i);
    }
    if (ps.train.empty() || ps.val.empty() || ps.test.empty()) {
        throw SplitError("leave_one_out_eval: pooling left an empty split");
    }
    auto fit = fit_probe(kind, pooled, ps, cfg, opt);
    LeaveOneOut out;
    out.layer = sets[held_out].layer;
    out.accuracy = detail::split_accuracy(fit.probe, sets[held_out], splits.test, opt.n_classes);
    out.pooled = std::move(fit.report);
    out.pooled_layers = std::move(source);
    return out;
}

// ---------------------------------------------------------------------------
// Multi-token recovery
// ---------------------------------------------------------------------------

struct OffsetRecovery {
    int offset = 0;
    std::size_t n_samples = 0;
    std::optional<double> accuracy;  // absent when no sample reaches this offset
    std::optional<AccuracyReport> report;
};

struct MultitokConfig {
    std::vector<int> offsets{1, 2, 3, 4, 5};
    ProbeKind kind = ProbeKind::sin;
    TrainConfig train;
    ProbeOptions probe;
    std::size_t holdout_val = 100;
    std::size_t holdout_test = 100;
    std::uint64_t seed = 0;
};

// `chunks[i]` lists the chunk values of row i's number, most significant first;
// the row is the representation of its last chunk. Offset o targets chunks[n-1-o].
inline std::vector<OffsetRecovery> multitok_recovery(const ActivationSet& acts,
                                                     std::span<const std::vector<int>> chunks,
                                                     const MultitokConfig& cfg, std::size_t jobs = 1) {
    if (chunks.size() != acts.size()) {
        throw DimensionError("multitok_recovery: one chunk list per activation row required");
    }
    std::vector<OffsetRecovery> out(cfg.offsets.size());
    parallel_for(cfg.offsets.size(), jobs, [&](std::size_t k) {
        const int o = cfg.offsets[k];
        if (o < 1) {
            throw ConfigError("multitok offsets start at 1");
        }
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            if (chunks[i].size() > static_cast<std::size_t>(o)) {
                rows.push_back(i);
            }
        }
        auto& r = out[k];
        r.offset = o;
        r.n_samples = rows.size();
        if (rows.empty()) {
            return;
        }
        ActivationSet sub = acts.subset(rows);
        for (std::size_t j = 0; j < rows.size(); ++j) {
            const auto& c = chunks[rows[j]];
            sub.labels[j] = c[c.size() - 1 - static_cast<std::size_t>(o)];
        }
        const auto splits = split_by_value(sub.labels, cfg.holdout_val, cfg.holdout_test,
                                           Rng(cfg.seed).split(static_cast<std::uint64_t>(o)).next_u64());
        auto fit = fit_probe(cfg.kind, sub, splits, cfg.train, cfg.probe);
        r.accuracy = fit.report.test_accuracy;
        r.report = std::move(fit.report);
    });
    return out;
}

// Token ids ranked by corpus frequency (ties by id), keeping ranks [skip, skip + n).
// Number tokens are excluded unless `numbers` is set, in which case only they are kept.
inline std::vector<int> frequent_token_subset(const Tokenizer& tok, std::span<const PromptRecord> prompts,
                                              std::size_t n, std::size_t skip = 0, bool numbers = false) {
    std::map<int, std::size_t> counts;
    for (const auto& p : prompts) {
        for (const auto& t : p.tokens) {
            if (Tokenizer::is_number(t) == numbers) {
                ++counts[tok.id(t)];
            }
        }
    }
    std::vector<std::pair<int, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<int> out;
    for (std::size_t i = skip; i < ranked.size() && out.size() < n; ++i) {
        out.push_back(ranked[i].first);
    }
    return out;
}

struct LensOffsetRecovery {
    int offset = 0;
    std::size_t n_samples = 0;
    std::optional<double> accuracy;
};

// Tuned-lens baseline for previous-token recovery: at each query position the lens
// logits, restricted to `label_space`, should rank the token `offset` steps back first.
// With numeric=true the query is the last chunk of each number span; otherwise every
// position whose target token lies in `label_space`.
inline std::vector<LensOffsetRecovery> lens_recovery(const ToyLM& model, const LensTranslator& lens,
                                                     std::span<const PromptRecord> prompts,
                                                     std::span<const int> offsets, std::span<const int> label_space,
                                                     bool numeric) {
    if (label_space.empty()) {
        throw ConfigError("lens_recovery: empty label space");
    }
    const std::set<int> allowed(label_space.begin(), label_space.end());
    std::vector<std::size_t> hits(offsets.size()), total(offsets.size());
    for (const auto& p : prompts) {
        const auto ids = model.tokenizer().encode(p.tokens);
        std::vector<std::pair<std::size_t, std::size_t>> queries;  // (position, earliest reachable position)
        if (numeric) {
            for (const auto& s : p.number_spans) {
                if (!s.positions.empty()) {
                    queries.emplace_back(s.positions.back(), s.positions.front());
                }
            }
        } else {
            for (std::size_t t = 0; t < ids.size(); ++t) {
                queries.emplace_back(t, 0);
            }
        }
        if (queries.empty()) {
            continue;
        }
        const auto cap = model.forward_capture(TokenBatch::single(ids), {{Site::residual_out}, {}});
        const RowMatrix h = cap.acts.at({Site::residual_out, lens.layer}).template cast<double>();
        const RowMatrix lg = detail::lens_logits(model, lens, h);
        for (const auto& [t, first] : queries) {
            for (std::size_t k = 0; k < offsets.size(); ++k) {
                const auto o = static_cast<std::size_t>(offsets[k]);
                if (t < first + o) {
                    continue;
                }
                const int want = ids[t - o];
                if (!allowed.count(want)) {
                    continue;
                }
                int best = -1;
                double best_v = -std::numeric_limits<double>::infinity();
                for (int c : label_space) {
                    if (lg(static_cast<Eigen::Index>(t), c) > best_v) {
                        best_v = lg(static_cast<Eigen::Index>(t), c);
                        best = c;
                    }
                }
                ++total[k];
                hits[k] += best == want;
            }
        }
    }
    std::vector<LensOffsetRecovery> out;
    for (std::size_t k = 0; k < offsets.size(); ++k) {
        LensOffsetRecovery r{offsets[k], total[k], std::nullopt};
        if (total[k] > 0) {
            r.accuracy = static_cast<double>(hits[k]) / static_cast<double>(total[k]);
        }
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-layer result probing and error tracing
// ---------------------------------------------------------------------------

struct LayerSummary {
    int layer = 0;
    double accuracy = 0;  // probed value == model prediction, all samples
    std::optional<double> accuracy_correct;    // same, model-correct stratum
    std::optional<double> accuracy_incorrect;  // same, model-incorrect stratum
    double mean_abs_error = 0;                 // |probed - truth|
    std::size_t breaks = 0;                    // v_{i-1} == truth, v_i != truth

    friend bool operator==(const LayerSummary&, const LayerSummary&) = default;
};

struct LayerErrorTrace {
    std::vector<int> layers;
    std::vector<int> truth;
    std::vector<int> prediction;
    std::vector<std::vector<int>> probed;  // [sample][layer index]
    std::vector<LayerSummary> summary;

    std::size_t size() const { return truth.size(); }
    bool correct(std::size_t i) const { return prediction[i] == truth[i]; }
};

// Layer indices (into trace.layers) at which sample i breaks a correct value.
inline std::vector<std::size_t> sample_breaks(const LayerErrorTrace& t, std::size_t i) {
    std::vector<std::size_t> out;
    for (std::size_t l = 1; l < t.layers.size(); ++l) {
        if (t.probed[i][l - 1] == t.truth[i] && t.probed[i][l] != t.truth[i]) {
            out.push_back(l);
        }
    }
    return out;
}

inline LayerErrorTrace build_trace(std::vector<int> layers, std::vector<int> truth, std::vector<int> prediction,
                                   std::vector<std::vector<int>> probed) {
    if (prediction.size() != truth.size() || probed.size() != truth.size()) {
        throw DimensionError("build_trace: per-sample vectors differ in length");
    }
    for (const auto& row : probed) {
        if (row.size() != layers.size()) {
            throw DimensionError("build_trace: probed row width != layer count");
        }
    }
    LayerErrorTrace t{std::move(layers), std::move(truth), std::move(prediction), std::move(probed), {}};
    const std::size_t n = t.size();
    t.summary.resize(t.layers.size());
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
        std::size_t hit = 0, hit_c = 0, n_c = 0, hit_i = 0;
        double abs_err = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool h = t.probed[i][l] == t.prediction[i];
            hit += h;
            if (t.correct(i)) {
                ++n_c;
                hit_c += h;
            } else {
                hit_i += h;
            }
            abs_err += std::abs(static_cast<double>(t.probed[i][l]) - static_cast<double>(t.truth[i]));
        }
        auto& s = t.summary[l];
        s.layer = t.layers[l];
        if (n > 0) {
            s.accuracy = static_cast<double>(hit) / static_cast<double>(n);
            s.mean_abs_error = abs_err / static_cast<double>(n);
        }
        if (n_c > 0) {
            s.accuracy_correct = static_cast<double>(hit_c) / static_cast<double>(n_c);
        }
        if (n > n_c) {
            s.accuracy_incorrect = static_cast<double>(hit_i) / static_cast<double>(n - n_c);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (auto l : sample_breaks(t, i)) {
            ++t.summary[l].breaks;
        }
    }
    return t;
}

struct Strata {
    std::vector<std::size_t> correct;
    std::vector<std::size_t> incorrect;
};

inline Strata stratify(const LayerErrorTrace& t) {
    Strata s;
    for (std::size_t i = 0; i < t.size(); ++i) {
        (t.correct(i) ? s.correct : s.incorrect).push_back(i);
    }
    return s;
}

// Probes each layer's answer-position state with that layer's probe and records
// the model's greedy answer. `probes[k]` belongs to layer `layers[k]` (0..L+1).
inline LayerErrorTrace result_probe_eval(const ToyLM& model, std::span<const PromptRecord> prompts,
                                         std::span<const Probe> probes, std::span<const int> layers,
                                         std::size_t jobs = 1) {
    if (probes.size() != layers.size()) {
        throw ConfigError("result_probe_eval: one probe per layer required");
    }
    std::vector<int> truth, positions(prompts.size(), -1);
    for (const auto& p : prompts) {
        if (!p.target) {
            throw ConfigError("result_probe_eval: prompt " + p.prompt_id + " has no single-token target");
        }
        truth.push_back(static_cast<int>(*p.target));
    }
    const auto sets = capture_toy_layers(model, prompts, positions, truth, "trace");
    for (int l : layers) {
        if (l < 0 || l >= static_cast<int>(sets.size())) {
            throw ConfigError("result_probe_eval: layer " + std::to_string(l) + " outside 0.." +
                              std::to_string(sets.size() - 1));
        }
    }
    std::vector<std::vector<int>> per_layer(layers.size());
    parallel_for(layers.size(), jobs,
                 [&](std::size_t k) { per_layer[k] = probe_predict(probes[k], sets[layers[k]].vectors); });
    std::vector<std::vector<int>> probed(prompts.size(), std::vector<int>(layers.size()));
    for (std::size_t k = 0; k < layers.size(); ++k) {
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            probed[i][k] = per_layer[k][i];
        }
    }
    return build_trace({layers.begin(), layers.end()}, std::move(truth), predict_last(model, prompts),
                       std::move(probed));
}

// Fraction of all samples whose value breaks at each layer; entry 0 has no predecessor and is 0.
inline std::vector<double> error_aggregation(const LayerErrorTrace& t) {
    std::vector<double> out(t.layers.size(), 0.0);
    if (t.size() == 0) {
        return out;
    }
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
        out[l] = static_cast<double>(t.summary.at(l).breaks) / static_cast<double>(t.size());
    }
    return out;
}

struct ExtractionStats {
    std::optional<double> extracted_given_incorrect;
    std::optional<double> not_extracted_given_correct;
    std::vector<std::optional<double>> layer_extracted_given_incorrect;
    std::vector<std::optional<double>> layer_not_extracted_given_correct;
};

// "Extracted" means some layer's probed value equals the true result.
inline ExtractionStats extraction_stats(const LayerErrorTrace& t) {
    const auto strata = stratify(t);
    const auto nl = t.layers.size();
    ExtractionStats s;
    std::size_t ext_inc = 0, not_ext_cor = 0;
    std::vector<std::size_t> layer_inc(nl), layer_cor(nl);
    auto extracted_at = [&](std::size_t i, std::size_t l) { return t.probed[i][l] == t.truth[i]; };
    for (auto i : strata.incorrect) {
        bool any = false;
        for (std::size_t l = 0; l < nl; ++l) {
            layer_inc[l] += extracted_at(i, l);
            any = any || extracted_at(i, l);
        }
        ext_inc += any;
    }
    for (auto i : strata.correct) {
        bool any = false;
        for (std::size_t l = 0; l < nl; ++l) {
            layer_cor[l] += !extracted_at(i, l);
            any = any || extracted_at(i, l);
        }
        not_ext_cor += !any;
    }
    const auto ni = static_cast<double>(strata.incorrect.size());
    const auto nc = static_cast<double>(strata.correct.size());
    if (!strata.incorrect.empty()) {
        s.extracted_given_incorrect = static_cast<double>(ext_inc) / ni;
    }
    if (!strata.correct.empty()) {
        s.not_extracted_given_correct = static_cast<double>(not_ext_cor) / nc;
    }
    for (std::size_t l = 0; l < nl; ++l) {
        s.layer_extracted_given_incorrect.push_back(strata.incorrect.empty()
                                                        ? std::nullopt
                                                        : std::optional(static_cast<double>(layer_inc[l]) / ni));
        s.layer_not_extracted_given_correct.push_back(strata.correct.empty()
                                                          ? std::nullopt
                                                          : std::optional(static_cast<double>(layer_cor[l]) / nc));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Layer ablation
// ---------------------------------------------------------------------------

struct AblationScore {
    std::set<int> skipped;
    double accuracy_before = 0;
    double accuracy_after = 0;
    double error_reduction = 0;  // (err_before - err_after) / err_before; 0 when err_before == 0
};

inline double error_reduction(double accuracy_before, double accuracy_after) {
    const double before = 1.0 - accuracy_before;
    if (before == 0.0) {
        return 0.0;
    }
    return (before - (1.0 - accuracy_after)) / before;
}

inline AblationScore ablate_set(const ToyLM& model, std::span<const PromptRecord> prompts, const std::set<int>& skip) {
    AblationScore s;
    s.skipped = skip;
    s.accuracy_before = answer_accuracy(model, prompts);
    s.accuracy_after = skip.empty() ? s.accuracy_before : answer_accuracy(model, prompts, skip);
    s.error_reduction = error_reduction(s.accuracy_before, s.accuracy_after);
    return s;
}

// Skips each candidate layer on its own.
inline std::vector<AblationScore> ablate_and_score(const ToyLM& model, std::span<const PromptRecord> prompts,
                                                   std::span<const int> candidates, std::size_t jobs = 1) {
    for (int l : candidates) {
        if (l < 1 || l > model.n_layers()) {
            throw ConfigError("ablation candidate " + std::to_string(l) + " outside 1.." +
                              std::to_string(model.n_layers()));
        }
    }
    const double before = answer_accuracy(model, prompts);
    std::vector<AblationScore> out(candidates.size());
    parallel_for(candidates.size(), jobs, [&](std::size_t k) {
        auto& s = out[k];
        s.skipped = {candidates[k]};
        s.accuracy_before = before;
        s.accuracy_after = answer_accuracy(model, prompts, s.skipped);
        s.error_reduction = error_reduction(before, s.accuracy_after);
    });
    return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const LayerErrorTrace& t) {
    nlohmann::json layers = nlohmann::json::array();
    const auto agg = error_aggregation(t);
    for (std::size_t l = 0; l < t.summary.size(); ++l) {
        const auto& s = t.summary[l];
        layers.push_back({{"layer", s.layer},
                          {"accuracy", s.accuracy},
                          {"accuracy_correct", optional_json(s.accuracy_correct)},
                          {"accuracy_incorrect", optional_json(s.accuracy_incorrect)},
                          {"mean_abs_error", s.mean_abs_error},
                          {"breaks", s.breaks},
                          {"break_fraction", agg[l]}});
    }
    const auto st = stratify(t);
    return {{"n_samples", t.size()},
            {"n_correct", st.correct.size()},
            {"n_incorrect", st.incorrect.size()},
            {"layers", layers}};
}

inline nlohmann::json to_json(const ExtractionStats& s) {
    nlohmann::json inc = nlohmann::json::array(), cor = nlohmann::json::array();
    for (const auto& v : s.layer_extracted_given_incorrect) inc.push_back(optional_json(v));
    for (const auto& v : s.layer_not_extracted_given_correct) cor.push_back(optional_json(v));
    return {{"extracted_given_incorrect", optional_json(s.extracted_given_incorrect)},
            {"not_extracted_given_correct", optional_json(s.not_extracted_given_correct)},
            {"per_layer_extracted_given_incorrect", inc},
            {"per_layer_not_extracted_given_correct", cor}};
}

inline nlohmann::json to_json(const AblationScore& s) {
    return {{"skipped", std::vector<int>(s.skipped.begin(), s.skipped.end())},
            {"accuracy_before", s.accuracy_before},
            {"accuracy_after", s.accuracy_after},
            {"error_reduction", s.error_reduction}};
}

}  // namespace numprobe
