#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "numprobe/actstore.hpp"
#include "numprobe/errors.hpp"
#include "numprobe/matrix.hpp"
#include "numprobe/numcore.hpp"
#include "numprobe/rng.hpp"
#include "numprobe/toylm.hpp"

namespace numprobe {

// ---------------------------------------------------------------------------
// Sinusoidal class basis
// ---------------------------------------------------------------------------

struct SinBasis {
    std::size_t n_classes = 0;
    std::size_t n_features = 0;
    Matrix S;  // n_classes x n_features

    double omega(std::size_t t) const {
        return std::exp(-2.0 * static_cast<double>(t) * std::log(1000.0) / static_cast<double>(n_features));
    }
};

inline SinBasis build_sin_basis(std::size_t n_classes, std::size_t n_features) {
    if (n_features < 2 || n_features % 2 != 0) {
        throw ConfigError("sinusoidal basis needs an even feature count >= 2, got " + std::to_string(n_features));
    }
    if (n_classes < 2) {
        throw ConfigError("sinusoidal basis needs at least 2 classes");
    }
    SinBasis b{n_classes, n_features, Matrix(n_classes, n_features)};
    for (std::size_t t = 0; t < n_features / 2; ++t) {
        const double w = b.omega(t);
        for (std::size_t c = 0; c < n_classes; ++c) {
            const double a = static_cast<double>(c) * w;
            b.S(c, 2 * t) = std::sin(a);
            b.S(c, 2 * t + 1) = std::cos(a);
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// Probe architectures. All keep parameters in one flat buffer so they plug
// into fit_classifier.
// ---------------------------------------------------------------------------

enum class ProbeKind { sin, linear, mlp };

inline std::string_view probe_kind_name(ProbeKind k) {
    switch (k) {
        case ProbeKind::sin: return "sin";
        case ProbeKind::linear: return "linear";
        case ProbeKind::mlp: return "mlp";
    }
    return "?";
}

inline ProbeKind parse_probe_kind(std::string_view s) {
    if (s == "sin") return ProbeKind::sin;
    if (s == "linear") return ProbeKind::linear;
    if (s == "mlp") return ProbeKind::mlp;
    throw ConfigError("unknown probe kind '" + std::string(s) + "'");
}

namespace detail {

using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline void check_width(const Matrix& x, std::size_t d) {
    if (x.cols() != d) {
        throw DimensionError("probe expects width " + std::to_string(d) + ", got " + std::to_string(x.cols()));
    }
}

inline void fill_normal(std::span<double> v, Rng& rng, double sd) {
    for (auto& e : v) {
        e = rng.normal(0.0, sd);
    }
}

inline double gelu(double u) {
    return 0.5 * u * (1.0 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
    const double k = 0.7978845608028654;
    const double t = std::tanh(k * (u + 0.044715 * u * u * u));
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * u * u);
}

// Mean softmax cross-entropy of `logits`; replaces logits with d(loss)/d(logits).
inline double ce_backward(RowMatrix& logits, std::span<const int> y) {
    const double loss = softmax_cross_entropy(logits, y);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        logits(r, y[static_cast<std::size_t>(r)]) -= 1.0;
    }
    if (logits.rows() > 0) {
        logits /= static_cast<double>(logits.rows());
    }
    return loss;
}

}  // namespace detail

// logits = S (W_out^T (W_in x)); W_in is q x d, W_out is q x m. No bias.
class SinProbe {
public:
    SinProbe(SinBasis basis, std::size_t d, std::size_t q, std::uint64_t seed = 0)
        : basis_(std::move(basis)), d_(d), q_(q), params_(q * d + q * basis_.n_features) {
        if (d == 0 || q == 0) {
            throw ConfigError("sin probe needs positive input width and projection width");
        }
        Rng rng(seed);
        detail::fill_normal(std::span(params_).first(q * d), rng, 1.0 / std::sqrt(static_cast<double>(d)));
        detail::fill_normal(std::span(params_).subspan(q * d), rng, 1.0 / std::sqrt(static_cast<double>(q)));
    }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::size_t num_classes() const { return basis_.n_classes; }
    std::size_t input_dim() const { return d_; }
    std::size_t proj_dim() const { return q_; }
    const SinBasis& basis() const { return basis_; }

    detail::ConstMap w_in() const { return {params_.data(), static_cast<Eigen::Index>(q_), static_cast<Eigen::Index>(d_)}; }
    detail::MutMap w_in() { return {params_.data(), static_cast<Eigen::Index>(q_), static_cast<Eigen::Index>(d_)}; }
    detail::ConstMap w_out() const {
        return {params_.data() + q_ * d_, static_cast<Eigen::Index>(q_), static_cast<Eigen::Index>(basis_.n_features)};
    }
    detail::MutMap w_out() {
        return {params_.data() + q_ * d_, static_cast<Eigen::Index>(q_), static_cast<Eigen::Index>(basis_.n_features)};
    }

    Matrix logits(const Matrix& x) const {
        detail::check_width(x, d_);
        const RowMatrix z = x.eigen() * w_in().transpose();
        const RowMatrix f = z * w_out();
        return Matrix::from_eigen(f * basis_.S.eigen().transpose());
    }

    double loss_and_gradient(const Matrix& x, std::span<const int> y, std::span<double> g) const {
        detail::check_width(x, d_);
        const RowMatrix z = x.eigen() * w_in().transpose();
        const RowMatrix f = z * w_out();
        RowMatrix lg = f * basis_.S.eigen().transpose();
        const double loss = detail::ce_backward(lg, y);
        const RowMatrix df = lg * basis_.S.eigen();
        detail::MutMap gin(g.data(), static_cast<Eigen::Index>(q_), static_cast<Eigen::Index>(d_));
        detail::MutMap gout(g.data() + q_ * d_, static_cast<Eigen::Index>(q_),
                            static_cast<Eigen::Index>(basis_.n_features));
        gout.noalias() = z.transpose() * df;
        const RowMatrix dz = df * w_out().transpose();
        gin.noalias() = dz.transpose() * x.eigen();
        return loss;
    }

private:
    SinBasis basis_;
    std::size_t d_;
    std::size_t q_;
    std::vector<double> params_;
};

// logits = W x + b; W is C x d.
class LinearProbe {
public:
    LinearProbe(std::size_t d, std::size_t n_classes, std::uint64_t seed = 0)
        : d_(d), c_(n_classes), params_(n_classes * d + n_classes, 0.0) {
        if (d == 0 || n_classes < 2) {
            throw ConfigError("linear probe needs positive width and >= 2 classes");
        }
        Rng rng(seed);
        detail::fill_normal(std::span(params_).first(c_ * d_), rng, 1.0 / std::sqrt(static_cast<double>(d)));
    }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::size_t num_classes() const { return c_; }
    std::size_t input_dim() const { return d_; }

    detail::ConstMap weight() const { return {params_.data(), static_cast<Eigen::Index>(c_), static_cast<Eigen::Index>(d_)}; }
    detail::MutMap weight() { return {params_.data(), static_cast<Eigen::Index>(c_), static_cast<Eigen::Index>(d_)}; }
    Eigen::Map<const Eigen::RowVectorXd> bias() const { return {params_.data() + c_ * d_, static_cast<Eigen::Index>(c_)}; }
    Eigen::Map<Eigen::RowVectorXd> bias() { return {params_.data() + c_ * d_, static_cast<Eigen::Index>(c_)}; }

    Matrix logits(const Matrix& x) const {
        detail::check_width(x, d_);
        RowMatrix lg = x.eigen() * weight().transpose();
        lg.rowwise() += bias();
        return Matrix::from_eigen(lg);
    }

    double loss_and_gradient(const Matrix& x, std::span<const int> y, std::span<double> g) const {
        detail::check_width(x, d_);
        RowMatrix lg = x.eigen() * weight().transpose();
        lg.rowwise() += bias();
        const double loss = detail::ce_backward(lg, y);
        detail::MutMap(g.data(), static_cast<Eigen::Index>(c_), static_cast<Eigen::Index>(d_)).noalias() =
            lg.transpose() * x.eigen();
        Eigen::Map<Eigen::RowVectorXd>(g.data() + c_ * d_, static_cast<Eigen::Index>(c_)) = lg.colwise().sum();
        return loss;
    }

private:
    std::size_t d_;
    std::size_t c_;
    std::vector<double> params_;
};

// logits = W2 gelu(W1 x + b1) + b2; W1 is h x d, W2 is C x h.
class MlpProbe {
public:
    MlpProbe(std::size_t d, std::size_t hidden, std::size_t n_classes, std::uint64_t seed = 0)
        : d_(d), h_(hidden), c_(n_classes), params_(hidden * d + hidden + n_classes * hidden + n_classes, 0.0) {
        if (d == 0 || hidden == 0 || n_classes < 2) {
            throw ConfigError("mlp probe needs positive widths and >= 2 classes");
        }
        Rng rng(seed);
        detail::fill_normal(std::span(params_).first(h_ * d_), rng, 1.0 / std::sqrt(static_cast<double>(d)));
        detail::fill_normal(std::span(params_).subspan(h_ * d_ + h_, c_ * h_), rng,
                            1.0 / std::sqrt(static_cast<double>(hidden)));
    }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::size_t num_classes() const { return c_; }
    std::size_t input_dim() const { return d_; }
    std::size_t hidden_dim() const { return h_; }

    Matrix logits(const Matrix& x) const {
        detail::check_width(x, d_);
        RowMatrix u, a;
        hidden(x, u, a);
        RowMatrix lg = a * w2().transpose();
        lg.rowwise() += b2();
        return Matrix::from_eigen(lg);
    }

    double loss_and_gradient(const Matrix& x, std::span<const int> y, std::span<double> g) const {
        detail::check_width(x, d_);
        RowMatrix u, a;
        hidden(x, u, a);
        RowMatrix lg = a * w2().transpose();
        lg.rowwise() += b2();
        const double loss = detail::ce_backward(lg, y);
        const auto H = static_cast<Eigen::Index>(h_), D = static_cast<Eigen::Index>(d_), C = static_cast<Eigen::Index>(c_);
        double* p = g.data();
        detail::MutMap gw1(p, H, D);
        Eigen::Map<Eigen::RowVectorXd> gb1(p + h_ * d_, H);
        detail::MutMap gw2(p + h_ * d_ + h_, C, H);
        Eigen::Map<Eigen::RowVectorXd> gb2(p + h_ * d_ + h_ + c_ * h_, C);
        gw2.noalias() = lg.transpose() * a;
        gb2 = lg.colwise().sum();
        RowMatrix du = lg * w2();
        du.array() *= u.unaryExpr([](double v) { return detail::gelu_grad(v); }).array();
        gw1.noalias() = du.transpose() * x.eigen();
        gb1 = du.colwise().sum();
        return loss;
    }

private:
    detail::ConstMap w1() const { return {params_.data(), static_cast<Eigen::Index>(h_), static_cast<Eigen::Index>(d_)}; }
    Eigen::Map<const Eigen::RowVectorXd> b1() const { return {params_.data() + h_ * d_, static_cast<Eigen::Index>(h_)}; }
    detail::ConstMap w2() const {
        return {params_.data() + h_ * d_ + h_, static_cast<Eigen::Index>(c_), static_cast<Eigen::Index>(h_)};
    }
    Eigen::Map<const Eigen::RowVectorXd> b2() const {
        return {params_.data() + h_ * d_ + h_ + c_ * h_, static_cast<Eigen::Index>(c_)};
    }

    void hidden(const Matrix& x, RowMatrix& u, RowMatrix& a) const {
        u = x.eigen() * w1().transpose();
        u.rowwise() += b1();
        a = u.unaryExpr([](double v) { return detail::gelu(v); });
    }

    std::size_t d_;
    std::size_t h_;
    std::size_t c_;
    std::vector<double> params_;
};

static_assert(DifferentiableClassifier<SinProbe>);
static_assert(DifferentiableClassifier<LinearProbe>);
static_assert(DifferentiableClassifier<MlpProbe>);

using Probe = std::variant<SinProbe, LinearProbe, MlpProbe>;

inline ProbeKind probe_kind(const Probe& p) {
    return static_cast<ProbeKind>(p.index());
}

inline Matrix probe_logits(const Probe& p, const Matrix& x) {
    return std::visit([&](const auto& m) { return m.logits(x); }, p);
}

inline std::vector<int> probe_predict(const Probe& p, const Matrix& x) { return argmax_rows(probe_logits(p, x)); }

inline std::span<const double> probe_parameters(const Probe& p) {
    return std::visit([](const auto& m) { return m.parameters(); }, p);
}

// ---------------------------------------------------------------------------
// Fitting on activation dumps
// ---------------------------------------------------------------------------

struct ProbeOptions {
    std::size_t n_classes = 1000;
    std::size_t n_features = 64;  // m, sinusoid features
    std::size_t proj_dim = 64;    // q, sin-probe projection width
    std::size_t mlp_hidden = 256;
};

struct AccuracyReport {
    std::string kind;
    std::string model_id;
    int layer = 0;
    std::string site;
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    double train_accuracy = 0, val_accuracy = 0, test_accuracy = 0;
    double train_loss = 0, val_loss = 0, test_loss = 0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    std::vector<int> test_values;  // held-out label values in the test split

    friend bool operator==(const AccuracyReport&, const AccuracyReport&) = default;
};

inline nlohmann::json to_json(const AccuracyReport& r) {
    return {{"kind", r.kind},
            {"model_id", r.model_id},
            {"layer", r.layer},
            {"site", r.site},
            {"n_train", r.n_train},
            {"n_val", r.n_val},
            {"n_test", r.n_test},
            {"train_accuracy", r.train_accuracy},
            {"val_accuracy", r.val_accuracy},
            {"test_accuracy", r.test_accuracy},
            {"train_loss", r.train_loss},
            {"val_loss", r.val_loss},
            {"test_loss", r.test_loss},
            {"best_epoch", r.best_epoch},
            {"epochs_run", r.epochs_run},
            {"test_values", r.test_values}};
}

inline AccuracyReport report_from_json(const nlohmann::json& j) {
    AccuracyReport r;
    r.kind = j.at("kind").get<std::string>();
    r.model_id = j.value("model_id", "");
    r.layer = j.at("layer").get<int>();
    r.site = j.at("site").get<std::string>();
    r.n_train = j.at("n_train").get<std::size_t>();
    r.n_val = j.at("n_val").get<std::size_t>();
    r.n_test = j.at("n_test").get<std::size_t>();
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.val_accuracy = j.at("val_accuracy").get<double>();
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.val_loss = j.at("val_loss").get<double>();
    r.test_loss = j.at("test_loss").get<double>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.epochs_run = j.at("epochs_run").get<std::size_t>();
    r.test_values = j.value("test_values", std::vector<int>{});
    return r;
}

struct FitResult {
    Probe probe;
    AccuracyReport report;
    FitHistory history;
};

namespace detail {

// Orders rows by (label, vector contents) so fitting does not depend on dump row order.
inline std::vector<std::size_t> canonical_order(const ActivationSet& acts, std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (acts.labels[a] != acts.labels[b]) {
            return acts.labels[a] < acts.labels[b];
        }
        const auto ra = acts.vectors.row(a), rb = acts.vectors.row(b);
        return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    });
    return idx;
}

inline Dataset make_dataset(const ActivationSet& acts, const std::vector<std::size_t>& idx, std::size_t n_classes) {
    Dataset ds{acts.vectors.select_rows(idx), {}};
    for (auto i : idx) {
        const int y = acts.labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
            throw ConfigError("label " + std::to_string(y) + " outside [0, " + std::to_string(n_classes) + ")");
        }
        ds.y.push_back(y);
    }
    return ds;
}

inline void round_to_f32(std::span<double> p) {
    for (auto& v : p) {
        v = static_cast<double>(static_cast<float>(v));
    }
}

}  // namespace detail

inline Probe make_probe(ProbeKind kind, std::size_t d, const ProbeOptions& opt, std::uint64_t seed) {
    switch (kind) {
        case ProbeKind::sin:
            return SinProbe(build_sin_basis(opt.n_classes, opt.n_features), d, opt.proj_dim, seed);
        case ProbeKind::linear:
            return LinearProbe(d, opt.n_classes, seed);
        case ProbeKind::mlp:
            return MlpProbe(d, opt.mlp_hidden, opt.n_classes, seed);
    }
    throw ConfigError("unknown probe kind");
}

// Trains a probe on the train split, early-stops on val, and reports accuracy on
// all three splits with parameters rounded to f32 (the stored precision).
inline FitResult fit_probe(ProbeKind kind, const ActivationSet& acts, const Splits& splits, const TrainConfig& cfg,
                           const ProbeOptions& opt = {}) {
    if (splits.train.empty() || splits.val.empty() || splits.test.empty()) {
        throw SplitError("fit_probe needs non-empty train, val and test splits");
    }
    const auto train = detail::make_dataset(acts, detail::canonical_order(acts, splits.train), opt.n_classes);
    const auto val = detail::make_dataset(acts, detail::canonical_order(acts, splits.val), opt.n_classes);
    const auto test = detail::make_dataset(acts, detail::canonical_order(acts, splits.test), opt.n_classes);
    Probe probe = make_probe(kind, acts.dim(), opt, Rng(cfg.seed).split(0xb0b).next_u64());
    FitHistory hist = std::visit([&](auto& m) { return fit_classifier(m, train, val, cfg); }, probe);
    std::visit([](auto& m) { detail::round_to_f32(m.parameters()); }, probe);

    AccuracyReport r;
    r.kind = std::string(probe_kind_name(kind));
    r.model_id = acts.model_id;
    r.layer = acts.layer;
    r.site = std::string(site_name(acts.site));
    r.n_train = train.size();
    r.n_val = val.size();
    r.n_test = test.size();
    std::visit(
        [&](const auto& m) {
            const auto tr = evaluate_classifier(m, train);
            const auto va = evaluate_classifier(m, val);
            const auto te = evaluate_classifier(m, test);
            r.train_accuracy = tr.accuracy;
            r.train_loss = tr.loss;
            r.val_accuracy = va.accuracy;
            r.val_loss = va.loss;
            r.test_accuracy = te.accuracy;
            r.test_loss = te.loss;
        },
        probe);
    r.best_epoch = hist.best_epoch;
    r.epochs_run = hist.epochs.size() - 1;
    std::set<int> tv(test.y.begin(), test.y.end());
    r.test_values.assign(tv.begin(), tv.end());
    return {std::move(probe), std::move(r), std::move(hist)};
}

// Top-1 accuracy of a trained probe on arbitrary rows.
inline double probe_accuracy(const Probe& p, const Matrix& x, std::span<const int> y) {
    if (y.empty()) {
        return 0.0;
    }
    const auto pred = probe_predict(p, x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        hit += pred[i] == y[i];
    }
    return static_cast<double>(hit) / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------
// Probe files: probe.json + one NPAD per weight tensor
// ---------------------------------------------------------------------------

inline void save_probe(const Probe& p, const AccuracyReport& report, const TrainConfig& cfg,
                       const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j{{"format", "probe"},
                     {"format_version", 1},
                     {"kind", probe_kind_name(probe_kind(p))},
                     {"report", to_json(report)},
                     {"train_config",
                      {{"learning_rate", cfg.learning_rate},
                       {"max_epochs", cfg.max_epochs},
                       {"batch_size", cfg.batch_size},
                       {"seed", cfg.seed},
                       {"early_stop_patience", cfg.early_stop_patience}}}};
    auto put = [&](const std::string& name, std::span<const double> v, std::size_t rows, std::size_t cols) {
        std::vector<float> f(v.begin(), v.end());
        write_npad(dir / (name + ".npad"), rows, cols, f);
    };
    std::visit(
        [&](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            const auto prm = m.parameters();
            if constexpr (std::is_same_v<T, SinProbe>) {
                const std::size_t q = m.proj_dim(), d = m.input_dim(), f = m.basis().n_features;
                j["basis"] = {{"n_classes", m.basis().n_classes}, {"n_features", f},
                              {"omega", "exp(-2t ln(1000)/m)"}};
                j["dims"] = {{"d", d}, {"q", q}};
                put("w_in", prm.first(q * d), q, d);
                put("w_out", prm.subspan(q * d), q, f);
            } else if constexpr (std::is_same_v<T, LinearProbe>) {
                const std::size_t c = m.num_classes(), d = m.input_dim();
                j["dims"] = {{"d", d}, {"n_classes", c}};
                put("weight", prm.first(c * d), c, d);
                put("bias", prm.subspan(c * d), 1, c);
            } else {
                const std::size_t c = m.num_classes(), d = m.input_dim(), h = m.hidden_dim();
                j["dims"] = {{"d", d}, {"hidden", h}, {"n_classes", c}};
                put("w1", prm.first(h * d), h, d);
                put("b1", prm.subspan(h * d, h), 1, h);
                put("w2", prm.subspan(h * d + h, c * h), c, h);
                put("b2", prm.subspan(h * d + h + c * h), 1, c);
            }
        },
        p);
    detail::write_text_atomic(dir / "probe.json", j.dump(2) + "\n");
}

struct LoadedProbe {
    Probe probe;
    AccuracyReport report;
};

inline LoadedProbe load_probe(const std::filesystem::path& dir) {
    std::ifstream in(dir / "probe.json");
    if (!in) {
        throw StoreError("no probe.json in " + dir.string());
    }
    nlohmann::json j;
    try {
        in >> j;
        if (j.value("format", "") != "probe") {
            throw SchemaError(dir.string() + " is not a probe directory");
        }
        const auto kind = parse_probe_kind(j.at("kind").get<std::string>());
        const auto& dims = j.at("dims");
        auto fill = [&](std::span<double> dst, const std::string& name, std::size_t rows, std::size_t cols) {
            const auto t = read_npad(dir / (name + ".npad"));
            if (t.rows != rows || t.cols != cols) {
                throw SchemaError(name + ".npad has unexpected shape");
            }
            std::copy(t.values.begin(), t.values.end(), dst.begin());
        };
        auto report = report_from_json(j.at("report"));
        switch (kind) {
            case ProbeKind::sin: {
                const auto c = j.at("basis").at("n_classes").get<std::size_t>();
                const auto f = j.at("basis").at("n_features").get<std::size_t>();
                const auto d = dims.at("d").get<std::size_t>(), q = dims.at("q").get<std::size_t>();
                SinProbe p(build_sin_basis(c, f), d, q);
                fill(p.parameters().first(q * d), "w_in", q, d);
                fill(p.parameters().subspan(q * d), "w_out", q, f);
                return {std::move(p), std::move(report)};
            }
            case ProbeKind::linear: {
                const auto c = dims.at("n_classes").get<std::size_t>(), d = dims.at("d").get<std::size_t>();
                LinearProbe p(d, c);
                fill(p.parameters().first(c * d), "weight", c, d);
                fill(p.parameters().subspan(c * d), "bias", 1, c);
                return {std::move(p), std::move(report)};
            }
            case ProbeKind::mlp: {
                const auto c = dims.at("n_classes").get<std::size_t>(), d = dims.at("d").get<std::size_t>(),
                           h = dims.at("hidden").get<std::size_t>();
                MlpProbe p(d, h, c);
                fill(p.parameters().first(h * d), "w1", h, d);
                fill(p.parameters().subspan(h * d, h), "b1", 1, h);
                fill(p.parameters().subspan(h * d + h, c * h), "w2", c, h);
                fill(p.parameters().subspan(h * d + h + c * h), "b2", 1, c);
                return {std::move(p), std::move(report)};
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("probe.json: " + std::string(e.what()));
    }
    throw SchemaError("probe.json: unknown kind");
}

// Fraction of entries with |w| > tau.
inline double weight_sparsity(const Matrix& w, double tau = 1e-5) {
    if (tau < 0 || !std::isfinite(tau)) {
        throw ConfigError("sparsity threshold must be a finite non-negative number");
    }
    if (w.empty()) {
        return 0.0;
    }
    std::size_t above = 0;
    for (double v : w.data()) {
        above += std::abs(v) > tau;
    }
    return static_cast<double>(above) / static_cast<double>(w.data().size());
}

// ---------------------------------------------------------------------------
// Tuned lens: per-layer affine translator into the model's own unembedding
// ---------------------------------------------------------------------------

struct LensTranslator {
    int layer = 0;
    Matrix A;               // d x d, applied as A h
    std::vector<double> b;  // d

    static LensTranslator identity(int layer, std::size_t d) {
        return {layer, Matrix::identity(d), std::vector<double>(d, 0.0)};
    }
};

// Residual states at `layer` and at the final block output, one row per token.
struct LensData {
    Matrix h;        // residual_out at the lens layer
    Matrix final_x;  // residual_out at layer L (pre final norm)
};

inline LensData collect_lens_data(const ToyLM& model, std::span<const PromptRecord> prompts, int layer) {
    const int L = model.n_layers();
    if (layer < 0 || layer > L) {
        throw ConfigError("lens layer " + std::to_string(layer) + " outside 0.." + std::to_string(L));
    }
    LensData out{Matrix(0, static_cast<std::size_t>(model.config().d_model)),
                 Matrix(0, static_cast<std::size_t>(model.config().d_model))};
    for (const auto& p : prompts) {
        const auto cap = model.forward_capture(TokenBatch::single(model.tokenizer().encode(p.tokens)),
                                               {{Site::residual_out}, {}});
        const auto& h = cap.acts.at({Site::residual_out, layer});
        const auto& f = cap.acts.at({Site::residual_out, L});
        for (Eigen::Index r = 0; r < h.rows(); ++r) {
            std::vector<double> hr(h.cols()), fr(f.cols());
            for (Eigen::Index c = 0; c < h.cols(); ++c) {
                hr[c] = h(r, c);
                fr[c] = f(r, c);
            }
            out.h.append_row(hr);
            out.final_x.append_row(fr);
        }
    }
    return out;
}

namespace detail {

inline ToyLM::Mat to_float_rows(const RowMatrix& m) { return m.cast<float>(); }

inline RowMatrix lens_logits(const ToyLM& model, const LensTranslator& t, const RowMatrix& h) {
    RowMatrix y = h * t.A.eigen().transpose();
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(t.b.data(), static_cast<Eigen::Index>(t.b.size()));
    return model.unembed_residual(to_float_rows(y)).cast<double>();
}

inline RowMatrix log_softmax_rows(const RowMatrix& lg) {
    RowMatrix out = lg;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double mx = out.row(r).maxCoeff();
        const double lse = mx + std::log((out.row(r).array() - mx).exp().sum());
        out.row(r).array() -= lse;
    }
    return out;
}

}  // namespace detail

struct LensEval {
    double mean_kl = 0;
    double top1_agreement = 0;
};

// Mean KL(final || lens) and top-1 agreement over the rows of `data`.
inline LensEval evaluate_lens(const ToyLM& model, const LensTranslator& t, const LensData& data) {
    if (data.h.rows() == 0) {
        return {};
    }
    const RowMatrix lp_final = detail::log_softmax_rows(
        model.unembed_residual(detail::to_float_rows(data.final_x.eigen())).cast<double>());
    const RowMatrix lp_lens = detail::log_softmax_rows(detail::lens_logits(model, t, data.h.eigen()));
    double kl = 0;
    std::size_t agree = 0;
    for (Eigen::Index r = 0; r < lp_final.rows(); ++r) {
        const auto pf = lp_final.row(r).array().exp();
        kl += (pf * (lp_final.row(r).array() - lp_lens.row(r).array())).sum();
        Eigen::Index a, b;
        lp_final.row(r).maxCoeff(&a);
        lp_lens.row(r).maxCoeff(&b);
        agree += a == b;
    }
    const auto n = static_cast<double>(lp_final.rows());
    return {kl / n, static_cast<double>(agree) / n};
}

struct LensConfig {
    double learning_rate = 1e-3;
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

// Minimizes mean KL(final || lens) over A, b with Adam, starting from identity.
inline LensTranslator fit_tuned_lens(const ToyLM& model, const LensData& data, int layer, const LensConfig& cfg) {
    const std::size_t d = static_cast<std::size_t>(model.config().d_model);
    if (data.h.cols() != d || data.final_x.rows() != data.h.rows()) {
        throw DimensionError("lens data does not match the model width");
    }
    if (data.h.rows() == 0) {
        throw SplitError("lens corpus is empty");
    }
    LensTranslator t = LensTranslator::identity(layer, d);
    const RowMatrix p_final = detail::log_softmax_rows(
        model.unembed_residual(detail::to_float_rows(data.final_x.eigen())).cast<double>()).array().exp();
    // Final norm gain and unembedding in double for the backward pass.
    const auto& lay = model.layout();
    const auto prm = model.parameters();
    const auto D = static_cast<Eigen::Index>(d);
    const auto V = static_cast<Eigen::Index>(model.config().vocab_size);
    Eigen::VectorXd g(D);
    for (Eigen::Index j = 0; j < D; ++j) {
        g(j) = prm[lay.final_norm + static_cast<std::size_t>(j)];
    }
    RowMatrix U(D, V);
    for (Eigen::Index i = 0; i < D * V; ++i) {
        U.data()[i] = prm[lay.unembed + static_cast<std::size_t>(i)];
    }
    const double eps = model.config().norm_eps;

    std::vector<double> params(d * d + d);
    std::vector<double> grad(params.size());
    auto sync_in = [&] {
        std::copy(t.A.data().begin(), t.A.data().end(), params.begin());
        std::copy(t.b.begin(), t.b.end(), params.begin() + static_cast<std::ptrdiff_t>(d * d));
    };
    auto sync_out = [&] {
        std::copy_n(params.begin(), d * d, t.A.data().begin());
        std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(d * d), d, t.b.begin());
    };
    sync_in();
    Adam opt(params.size(), cfg.learning_rate);
    std::vector<std::size_t> order(data.h.rows());
    std::iota(order.begin(), order.end(), 0);
    const Rng root(cfg.seed);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng = root.split(epoch);
        rng.shuffle(std::span(order));
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - s);
            const std::span<const std::size_t> idx(order.data() + s, n);
            const RowMatrix h = data.h.select_rows(idx).eigen();
            RowMatrix pf(static_cast<Eigen::Index>(n), V);
            for (std::size_t i = 0; i < n; ++i) {
                pf.row(static_cast<Eigen::Index>(i)) = p_final.row(static_cast<Eigen::Index>(idx[i]));
            }
            const detail::ConstMap A(params.data(), D, D);
            const Eigen::Map<const Eigen::RowVectorXd> b(params.data() + d * d, D);
            RowMatrix y = h * A.transpose();
            y.rowwise() += b;
            Eigen::VectorXd r(static_cast<Eigen::Index>(n));
            RowMatrix z(static_cast<Eigen::Index>(n), D);
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                r(i) = 1.0 / std::sqrt(y.row(i).squaredNorm() / static_cast<double>(d) + eps);
                z.row(i) = (y.row(i).array() * r(i)) * g.transpose().array();
            }
            RowMatrix lg = z * U;
            // d KL / d logits = softmax(lens) - p_final
            for (Eigen::Index i = 0; i < lg.rows(); ++i) {
                const double mx = lg.row(i).maxCoeff();
                lg.row(i) = (lg.row(i).array() - mx).exp().matrix();
                lg.row(i) /= lg.row(i).sum();
            }
            lg -= pf;
            lg /= static_cast<double>(n);
            const RowMatrix dz = lg * U.transpose();
            RowMatrix dy(dz.rows(), D);
            for (Eigen::Index i = 0; i < dz.rows(); ++i) {
                const Eigen::RowVectorXd dxh = dz.row(i).array() * g.transpose().array();
                const double dot = dxh.dot(y.row(i)) / static_cast<double>(d);
                dy.row(i) = r(i) * (dxh - y.row(i) * (r(i) * r(i) * dot));
            }
            detail::MutMap(grad.data(), D, D).noalias() = dy.transpose() * h;
            Eigen::Map<Eigen::RowVectorXd>(grad.data() + d * d, D) = dy.colwise().sum();
            for (double v : grad) {
                if (!std::isfinite(v)) {
                    throw DivergenceError(epoch, "tuned lens gradient is not finite");
                }
            }
            opt.step(std::span(params), std::span<const double>(grad));
        }
    }
    sync_out();
    return t;
}

}  // namespace numprobe
