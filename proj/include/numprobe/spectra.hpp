#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "numprobe/actstore.hpp"
#include "numprobe/errors.hpp"
#include "numprobe/matrix.hpp"
#include "numprobe/numcore.hpp"
#include "numprobe/rng.hpp"

namespace numprobe {

struct EmbeddingTable {
    std::string model_id;
    std::vector<std::string> keys;
    Matrix vectors;  // one row per key

    std::size_t size() const { return keys.size(); }

    // Rows keyed "0".."n-1" in order.
    static EmbeddingTable numeric(std::string model_id, Matrix vectors) {
        EmbeddingTable t{std::move(model_id), {}, std::move(vectors)};
        for (std::size_t i = 0; i < t.vectors.rows(); ++i) {
            t.keys.push_back(std::to_string(i));
        }
        return t;
    }

    // Value-keyed table from an embedding dump; rows sorted by label, duplicates rejected.
    static EmbeddingTable from_activations(const ActivationSet& s) {
        std::vector<std::size_t> order(s.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return s.labels[a] < s.labels[b]; });
        EmbeddingTable t{s.model_id, {}, s.vectors.select_rows(order)};
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (i > 0 && s.labels[order[i]] == s.labels[order[i - 1]]) {
                throw AlignmentError("embedding dump has duplicate key " + std::to_string(s.labels[order[i]]));
            }
            t.keys.push_back(std::to_string(s.labels[order[i]]));
        }
        return t;
    }

    void validate() const {
        if (keys.size() != vectors.rows()) {
            throw AlignmentError("embedding table " + model_id + " has " + std::to_string(keys.size()) +
                                 " keys for " + std::to_string(vectors.rows()) + " rows");
        }
        std::set<std::string> seen(keys.begin(), keys.end());
        if (seen.size() != keys.size()) {
            throw AlignmentError("embedding table " + model_id + " has duplicate keys");
        }
    }
};

// Restricts both tables to their shared keys, in the order of `a`.
inline std::pair<EmbeddingTable, EmbeddingTable> align_tables(const EmbeddingTable& a, const EmbeddingTable& b) {
    std::map<std::string, std::size_t> where;
    for (std::size_t i = 0; i < b.keys.size(); ++i) {
        where.emplace(b.keys[i], i);
    }
    std::vector<std::size_t> ia, ib;
    for (std::size_t i = 0; i < a.keys.size(); ++i) {
        if (auto it = where.find(a.keys[i]); it != where.end()) {
            ia.push_back(i);
            ib.push_back(it->second);
        }
    }
    EmbeddingTable ra{a.model_id, {}, a.vectors.select_rows(ia)};
    EmbeddingTable rb{b.model_id, {}, b.vectors.select_rows(ib)};
    for (auto i : ia) {
        ra.keys.push_back(a.keys[i]);
    }
    rb.keys = ra.keys;
    return {std::move(ra), std::move(rb)};
}

// ---------------------------------------------------------------------------
// RSA
// ---------------------------------------------------------------------------

namespace detail {

inline void check_paired(const EmbeddingTable& a, const EmbeddingTable& b) {
    a.validate();
    b.validate();
    if (a.keys != b.keys) {
        throw AlignmentError("tables " + a.model_id + " and " + b.model_id + " do not share a key sequence");
    }
    if (a.size() < 3) {
        throw AlignmentError("rsa needs at least 3 shared keys");
    }
}

}  // namespace detail

inline double rsa_score(const EmbeddingTable& a, const EmbeddingTable& b) {
    detail::check_paired(a, b);
    const auto ua = pairwise_cosine(a.vectors);
    const auto ub = pairwise_cosine(b.vectors);
    return spearman_rho(ua, ub);
}

struct PermutationTest {
    double observed = 0;
    std::vector<double> null_scores;
    double band = 0;     // 0.99 quantile of |null score|
    double p_value = 0;  // (1 + #{|null| >= |observed|}) / (1 + rounds)
};

// Null distribution of rsa_score from shuffling the key assignment of `b`.
// Ranks are computed once; each round re-pairs them, which equals recomputing
// Spearman on the permuted table.
inline PermutationTest rsa_permutation_test(const EmbeddingTable& a, const EmbeddingTable& b, std::size_t rounds,
                                            std::uint64_t seed) {
    detail::check_paired(a, b);
    const std::size_t n = a.size();
    const auto ra = fractional_ranks(pairwise_cosine(a.vectors));
    const auto rb_flat = fractional_ranks(pairwise_cosine(b.vectors));
    // Square (symmetric) rank matrix for b so permuted lookups are direct.
    Matrix rb(n, n);
    for (std::size_t i = 0, k = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j, ++k) {
            rb(i, j) = rb_flat[k];
            rb(j, i) = rb_flat[k];
        }
    }
    PermutationTest out;
    out.observed = pearson(ra, rb_flat);
    std::vector<std::size_t> perm(n);
    std::vector<double> permuted(ra.size());
    Rng rng(seed);
    for (std::size_t r = 0; r < rounds; ++r) {
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(std::span(perm));
        for (std::size_t i = 0, k = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j, ++k) {
                permuted[k] = rb(perm[i], perm[j]);
            }
        }
        out.null_scores.push_back(pearson(ra, permuted));
    }
    std::vector<double> mags;
    std::size_t extreme = 0;
    for (double s : out.null_scores) {
        mags.push_back(std::abs(s));
        extreme += std::abs(s) >= std::abs(out.observed);
    }
    std::sort(mags.begin(), mags.end());
    if (!mags.empty()) {
        out.band = mags[std::min(mags.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * mags.size())) - 1)];
    }
    out.p_value = static_cast<double>(1 + extreme) / static_cast<double>(1 + rounds);
    return out;
}

// ---------------------------------------------------------------------------
// Fourier profiles and top-k agreement
// ---------------------------------------------------------------------------

inline constexpr std::size_t default_pca_dims = 64;
inline constexpr std::size_t default_top_k = 63;

// PCA (clamped to the table's rank bound), then per-component rfft magnitude
// along the value axis; each bin keeps the max over components.
inline SpectralProfile fourier_profile(const EmbeddingTable& t, std::size_t pca_dims = default_pca_dims) {
    t.validate();
    for (std::size_t i = 0; i < t.keys.size(); ++i) {
        if (t.keys[i] != std::to_string(i)) {
            throw AlignmentError("fourier_profile needs keys 0..n-1 in order; key " + std::to_string(i) + " is '" +
                                 t.keys[i] + "'");
        }
    }
    if (t.size() < 2) {
        throw AlignmentError("fourier_profile needs at least 2 rows");
    }
    const std::size_t k = std::min({pca_dims, t.vectors.rows(), t.vectors.cols()});
    const auto pca = pca_project(t.vectors, k);
    SpectralProfile out;
    std::vector<double> col(t.size());
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t r = 0; r < t.size(); ++r) {
            col[r] = pca.projected(r, c);
        }
        const auto p = rfft_magnitude(col);
        if (out.magnitude.empty()) {
            out.magnitude = p.magnitude;
        } else {
            for (std::size_t b = 0; b < p.magnitude.size(); ++b) {
                out.magnitude[b] = std::max(out.magnitude[b], p.magnitude[b]);
            }
        }
    }
    return out;
}

struct FreqSet {
    std::size_t k = 0;
    std::vector<std::size_t> bins;  // ascending

    friend bool operator==(const FreqSet&, const FreqSet&) = default;
};

// k largest-magnitude bins excluding DC; equal magnitudes prefer the lower bin.
inline FreqSet topk_freqs(const SpectralProfile& p, std::size_t k) {
    if (p.n_freqs() < 2 || k > p.n_freqs() - 1) {
        throw ConfigError("top-k: k=" + std::to_string(k) + " exceeds the " +
                          std::to_string(p.n_freqs() == 0 ? 0 : p.n_freqs() - 1) + " non-DC bins");
    }
    std::vector<std::size_t> bins(p.n_freqs() - 1);
    std::iota(bins.begin(), bins.end(), 1);
    std::stable_sort(bins.begin(), bins.end(),
                     [&](std::size_t a, std::size_t b) { return p.magnitude[a] > p.magnitude[b]; });
    bins.resize(k);
    std::sort(bins.begin(), bins.end());
    return {k, bins};
}

inline double iou(const FreqSet& a, const FreqSet& b) {
    std::vector<std::size_t> inter;
    std::set_intersection(a.bins.begin(), a.bins.end(), b.bins.begin(), b.bins.end(), std::back_inserter(inter));
    const std::size_t uni = a.bins.size() + b.bins.size() - inter.size();
    return uni == 0 ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
}

inline Matrix pairwise_iou(std::span<const FreqSet> sets) {
    for (const auto& s : sets) {
        if (s.k != sets.front().k) {
            throw ConfigError("pairwise_iou: sets have different k");
        }
    }
    Matrix m(sets.size(), sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
        m(i, i) = 1.0;
        for (std::size_t j = i + 1; j < sets.size(); ++j) {
            m(i, j) = m(j, i) = iou(sets[i], sets[j]);
        }
    }
    return m;
}

// Minimum and mean off-diagonal IoU of the top-k sets at every k in 1..k_max.
struct IouSweep {
    std::vector<std::size_t> k;
    std::vector<double> min_iou;
    std::vector<double> mean_iou;
};

inline IouSweep iou_sweep(std::span<const SpectralProfile> profiles, std::size_t k_max) {
    if (profiles.size() < 2) {
        throw ConfigError("IoU sweep needs at least two profiles");
    }
    IouSweep out;
    std::vector<FreqSet> sets(profiles.size());
    for (std::size_t k = 1; k <= k_max; ++k) {
        for (std::size_t i = 0; i < profiles.size(); ++i) {
            sets[i] = topk_freqs(profiles[i], k);
        }
        const auto m = pairwise_iou(sets);
        double mn = 1.0, sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t i = 0; i < sets.size(); ++i) {
            for (std::size_t j = i + 1; j < sets.size(); ++j) {
                mn = std::min(mn, m(i, j));
                sum += m(i, j);
                ++pairs;
            }
        }
        out.k.push_back(k);
        out.min_iou.push_back(mn);
        out.mean_iou.push_back(sum / static_cast<double>(pairs));
    }
    return out;
}

// Largest k <= k_max at which every pair of top-k sets agrees exactly; 0 if none.
inline std::size_t optimal_k(std::span<const SpectralProfile> profiles, std::size_t k_max) {
    const auto sweep = iou_sweep(profiles, k_max);
    for (std::size_t i = sweep.k.size(); i-- > 0;) {
        if (sweep.min_iou[i] == 1.0) {
            return sweep.k[i];
        }
    }
    return 0;
}

// Control condition: the same statistics on `n` keys shared by all tables,
// sampled with a fixed seed and re-keyed 0..n-1 in sampled order.
inline std::vector<EmbeddingTable> random_piece_tables(std::span<const EmbeddingTable> tables, std::size_t n,
                                                       std::uint64_t seed) {
    if (tables.empty()) {
        return {};
    }
    std::set<std::string> shared(tables[0].keys.begin(), tables[0].keys.end());
    for (const auto& t : tables.subspan(1)) {
        std::set<std::string> k(t.keys.begin(), t.keys.end()), keep;
        std::set_intersection(shared.begin(), shared.end(), k.begin(), k.end(), std::inserter(keep, keep.end()));
        shared = std::move(keep);
    }
    std::vector<std::string> pool(shared.begin(), shared.end());
    if (pool.size() < n) {
        throw AlignmentError("only " + std::to_string(pool.size()) + " shared keys, " + std::to_string(n) +
                             " requested");
    }
    Rng rng(seed);
    rng.shuffle(std::span(pool));
    pool.resize(n);
    std::vector<EmbeddingTable> out;
    for (const auto& t : tables) {
        std::map<std::string, std::size_t> where;
        for (std::size_t i = 0; i < t.keys.size(); ++i) {
            where.emplace(t.keys[i], i);
        }
        std::vector<std::size_t> rows;
        for (const auto& key : pool) {
            rows.push_back(where.at(key));
        }
        out.push_back(EmbeddingTable::numeric(t.model_id, t.vectors.select_rows(rows)));
    }
    return out;
}

}  // namespace numprobe
