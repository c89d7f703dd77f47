#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <concepts>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "numprobe/errors.hpp"
#include "numprobe/matrix.hpp"
#include "numprobe/rng.hpp"

namespace numprobe {

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaResult {
    Matrix components;  // k x d, orthonormal rows
    Matrix projected;   // n x k
    std::vector<double> explained_variance;
    std::vector<double> mean;  // column means used for centering
};

// Principal components from the eigendecomposition of the covariance of the
// column-centered data. Each component's sign is fixed so that its
// largest-magnitude coordinate is positive.
inline PcaResult pca_project(const Matrix& x, std::size_t k) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (k < 1 || k > std::min(n, d)) {
        throw DimensionError("pca: k=" + std::to_string(k) + " outside [1, " +
                             std::to_string(std::min(n, d)) + "]");
    }
    const auto xm = x.eigen();
    const Eigen::RowVectorXd mean = xm.colwise().mean();
    const RowMatrix centered = xm.rowwise() - mean;
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / denom;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) {
        throw DegenerateError("pca: eigendecomposition failed");
    }
    // Eigen sorts ascending; walk from the top.
    const Eigen::VectorXd& evals = solver.eigenvalues();
    const Eigen::MatrixXd& evecs = solver.eigenvectors();

    PcaResult out{Matrix(k, d), Matrix(n, k), std::vector<double>(k),
                  std::vector<double>(mean.data(), mean.data() + d)};
    for (std::size_t c = 0; c < k; ++c) {
        const auto src = static_cast<Eigen::Index>(d - 1 - c);
        Eigen::VectorXd v = evecs.col(src);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) {
            v = -v;
        }
        out.components.eigen().row(static_cast<Eigen::Index>(c)) = v.transpose();
        out.explained_variance[c] = std::max(0.0, evals(src));
    }
    out.projected.eigen() = centered * out.components.eigen().transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Real FFT magnitude
// ---------------------------------------------------------------------------

struct SpectralProfile {
    std::vector<double> magnitude;  // floor(N/2)+1 bins, non-negative

    std::size_t n_freqs() const noexcept { return magnitude.size(); }
};

namespace detail {

inline void fft_radix2(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) {
            j ^= bit;
        }
        j ^= bit;
        if (i < j) {
            std::swap(a[i], a[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t half = len / 2;
        for (std::size_t k = 0; k < half; ++k) {
            const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) /
                               static_cast<double>(len);
            const std::complex<double> w(std::cos(ang), std::sin(ang));
            for (std::size_t i = 0; i < n; i += len) {
                const auto u = a[i + k];
                const auto v = a[i + k + half] * w;
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
        }
    }
}

}  // namespace detail

// |sum_n x[n] exp(-2 pi i b n / N)| for b = 0..floor(N/2).
inline SpectralProfile rfft_magnitude(std::span<const double> series) {
    const std::size_t n = series.size();
    if (n < 2) {
        throw DimensionError("rfft: series length " + std::to_string(n) + " < 2");
    }
    const std::size_t bins = n / 2 + 1;
    SpectralProfile out{std::vector<double>(bins)};
    if (n >= 16 && std::has_single_bit(n)) {
        std::vector<std::complex<double>> a(series.begin(), series.end());
        detail::fft_radix2(a);
        for (std::size_t b = 0; b < bins; ++b) {
            out.magnitude[b] = std::abs(a[b]);
        }
        return out;
    }
    // Direct DFT; twiddle index reduced mod N keeps the angles exact-ish.
    std::vector<std::complex<double>> twiddle(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double ang = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
        twiddle[j] = {std::cos(ang), std::sin(ang)};
    }
    for (std::size_t b = 0; b < bins; ++b) {
        std::complex<double> acc{0.0, 0.0};
        std::size_t idx = 0;
        for (std::size_t t = 0; t < n; ++t) {
            acc += series[t] * twiddle[idx];
            idx += b;
            if (idx >= n) {
                idx -= n;
            }
        }
        out.magnitude[b] = std::abs(acc);
    }
    return out;
}

// Signal energy recovered from a one-sided magnitude spectrum (Parseval).
inline double spectral_energy(const SpectralProfile& p, std::size_t n) {
    double e = p.magnitude[0] * p.magnitude[0];
    for (std::size_t b = 1; b < p.magnitude.size(); ++b) {
        const double m2 = p.magnitude[b] * p.magnitude[b];
        e += (n % 2 == 0 && b == n / 2) ? m2 : 2.0 * m2;
    }
    return e / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Rank correlation and cosine similarity
// ---------------------------------------------------------------------------

// Fractional (1-based) ranks; ties receive the average of their positions.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && v[order[j]] == v[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t) {
            ranks[order[t]] = avg;
        }
        i = j;
    }
    return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    double ma = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) {
        throw DegenerateError("correlation of a constant vector is undefined");
    }
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman_rho(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw DimensionError("spearman: need two vectors of equal length >= 2 (got " +
                             std::to_string(a.size()) + " and " + std::to_string(b.size()) + ")");
    }
    const auto ra = fractional_ranks(a);
    const auto rb = fractional_ranks(b);
    return pearson(ra, rb);
}

// Condensed upper triangle of the cosine-similarity matrix, (0,1), (0,2), ...
inline std::vector<double> pairwise_cosine(const Matrix& x) {
    const std::size_t n = x.rows();
    RowMatrix unit = x.eigen();
    for (std::size_t i = 0; i < n; ++i) {
        const double norm = unit.row(static_cast<Eigen::Index>(i)).norm();
        if (!(norm > 0.0)) {
            throw DegenerateError("pairwise_cosine: row " + std::to_string(i) + " has zero norm");
        }
        unit.row(static_cast<Eigen::Index>(i)) /= norm;
    }
    const RowMatrix gram = unit * unit.transpose();
    std::vector<double> out;
    out.reserve(n * (n > 0 ? n - 1 : 0) / 2);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            out.push_back(std::clamp(gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                                     -1.0, 1.0));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Classifier training
// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t max_epochs = 100;
    std::size_t batch_size = 256;
    std::uint64_t seed = 0;
    std::size_t early_stop_patience = 10;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
            throw ConfigError("learning_rate must be > 0");
        }
        if (batch_size < 1) {
            throw ConfigError("batch_size must be >= 1");
        }
    }
};

// Adam with beta=(0.9, 0.999), eps=1e-8 by default.
class Adam {
public:
    Adam(std::size_t n_params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8, double weight_decay = 0.0)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay),
          m_(n_params, 0.0), v_(n_params, 0.0) {}

    void set_learning_rate(double lr) noexcept { lr_ = lr; }

    template <class T, class G>
    void step(std::span<T> params, std::span<const G> grad) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        const double step = lr_ / c1;
        const double inv_c2 = 1.0 / c2;
        const double decay = lr_ * weight_decay_;
        double* m = m_.data();
        double* v = v_.data();
        T* p = params.data();
        const G* g = grad.data();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            const double pi = static_cast<double>(p[i]);
            p[i] = static_cast<T>(pi - step * m[i] / (std::sqrt(v[i] * inv_c2) + eps_) - decay * pi);
        }
    }

private:
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    double weight_decay_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::uint64_t t_ = 0;
};

struct Dataset {
    Matrix x;
    std::vector<int> y;

    std::size_t size() const noexcept { return y.size(); }

    Dataset subset(std::span<const std::size_t> idx) const {
        Dataset out{x.select_rows(idx), {}};
        out.y.reserve(idx.size());
        for (auto i : idx) {
            out.y.push_back(y[i]);
        }
        return out;
    }
};

// A classifier whose parameters live in one flat buffer.
template <class M>
concept DifferentiableClassifier =
    requires(M m, const M cm, const Matrix& x, std::span<const int> y, std::span<double> g) {
        { m.parameters() } -> std::convertible_to<std::span<double>>;
        { cm.num_classes() } -> std::convertible_to<std::size_t>;
        { cm.logits(x) } -> std::same_as<Matrix>;
        // Mean cross-entropy over the batch; writes (not accumulates) the gradient.
        { cm.loss_and_gradient(x, y, g) } -> std::convertible_to<double>;
    };

// In-place softmax of each row of `logits`; returns the mean cross-entropy.
inline double softmax_cross_entropy(RowMatrix& logits, std::span<const int> y) {
    double loss = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        const double mx = row.maxCoeff();
        row.array() -= mx;
        row = row.array().exp().matrix();
        const double z = row.sum();
        row /= z;
        loss -= std::log(std::max(row(y[static_cast<std::size_t>(r)]), 1e-300));
    }
    return logits.rows() > 0 ? loss / static_cast<double>(logits.rows()) : 0.0;
}

inline std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

struct EvalStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

template <DifferentiableClassifier M>
EvalStats evaluate_classifier(const M& model, const Dataset& data, std::size_t chunk = 1024) {
    if (data.size() == 0) {
        return {};
    }
    double loss = 0.0;
    std::size_t hits = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t stop = std::min(data.size(), start + chunk);
        idx.resize(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        const Matrix lg = model.logits(data.x.select_rows(idx));
        const auto pred = argmax_rows(lg);
        RowMatrix probs = lg.eigen();
        const std::span<const int> y(data.y.data() + start, stop - start);
        loss += softmax_cross_entropy(probs, y) * static_cast<double>(stop - start);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            hits += pred[i] == y[i] ? 1 : 0;
        }
    }
    const auto n = static_cast<double>(data.size());
    return {loss / n, static_cast<double>(hits) / n};
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct FitHistory {
    std::vector<EpochRecord> epochs;  // entry 0 is the initialization
    std::size_t best_epoch = 0;
};

// Minibatch Adam on mean cross-entropy. Keeps the parameters of the epoch
// with the lowest validation loss (epoch 0 = initialization) and stops after
// `early_stop_patience` epochs without improvement.
template <DifferentiableClassifier M>
FitHistory fit_classifier(M& model, const Dataset& train, const Dataset& val,
                          const TrainConfig& cfg) {
    cfg.validate();
    if (val.size() == 0) {
        throw SplitError("fit_classifier: validation set is empty");
    }
    if (train.size() == 0) {
        throw SplitError("fit_classifier: training set is empty");
    }
    const auto n_classes = static_cast<int>(model.num_classes());
    for (const auto* set : {&train, &val}) {
        for (int label : set->y) {
            if (label < 0 || label >= n_classes) {
                throw ConfigError("label " + std::to_string(label) + " outside [0, " +
                                  std::to_string(n_classes) + ")");
            }
        }
    }

    auto params = model.parameters();
    std::vector<double> grad(params.size());
    std::vector<double> best(params.begin(), params.end());
    Adam opt(params.size(), cfg.learning_rate);

    FitHistory hist;
    const auto init_train = evaluate_classifier(model, train);
    const auto init_val = evaluate_classifier(model, val);
    hist.epochs.push_back({0, init_train.loss, init_train.accuracy, init_val.loss, init_val.accuracy});
    double best_val = init_val.loss;
    std::size_t since_best = 0;

    const Rng root(cfg.seed);
    std::vector<std::size_t> order(train.size());
    std::vector<std::size_t> batch_idx;
    std::vector<int> batch_y;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = root.split(epoch);
        rng.shuffle(std::span<std::size_t>(order));

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            batch_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(stop));
            batch_y.clear();
            for (auto i : batch_idx) {
                batch_y.push_back(train.y[i]);
            }
            const double loss =
                model.loss_and_gradient(train.x.select_rows(batch_idx), batch_y, grad);
            if (!std::isfinite(loss)) {
                throw DivergenceError(epoch, "batch starting at " + std::to_string(start));
            }
            opt.step(params, std::span<const double>(grad));
        }
        const auto tr = evaluate_classifier(model, train);
        const auto va = evaluate_classifier(model, val);
        if (!std::isfinite(tr.loss) || !std::isfinite(va.loss)) {
            throw DivergenceError(epoch, "evaluation loss");
        }
        hist.epochs.push_back({epoch, tr.loss, tr.accuracy, va.loss, va.accuracy});
        if (va.loss < best_val) {
            best_val = va.loss;
            hist.best_epoch = epoch;
            std::copy(params.begin(), params.end(), best.begin());
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience && cfg.early_stop_patience > 0) {
            break;
        }
    }
    std::copy(best.begin(), best.end(), params.begin());
    return hist;
}

}  // namespace numprobe
