#include <chrono>
#include <filesystem>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "numprobe/probes.hpp"

using namespace numprobe;

namespace {

template <class P>
void check_gradient(P probe, std::size_t d, std::size_t n_classes, std::uint64_t seed) {
    Rng rng(seed);
    Matrix x(7, d);
    for (auto& v : x.data()) {
        v = rng.normal();
    }
    std::vector<int> y;
    for (int i = 0; i < 7; ++i) {
        y.push_back(static_cast<int>(rng.below(n_classes)));
    }
    std::vector<double> g(probe.parameters().size()), scratch(g.size());
    probe.loss_and_gradient(x, y, g);
    for (int k = 0; k < 40; ++k) {
        const auto i = rng.below(g.size());
        const double keep = probe.parameters()[i];
        probe.parameters()[i] = keep + 1e-6;
        const double up = probe.loss_and_gradient(x, y, scratch);
        probe.parameters()[i] = keep - 1e-6;
        const double dn = probe.loss_and_gradient(x, y, scratch);
        probe.parameters()[i] = keep;
        EXPECT_NEAR(g[i], (up - dn) / 2e-6, 1e-7) << i;
    }
}

TrainConfig probe_train_config() {
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.max_epochs = 60;
    cfg.batch_size = 128;
    cfg.seed = 3;
    return cfg;
}

}  // namespace

TEST(SinBasis, ZeroRow) {
    const auto b = build_sin_basis(1000, 64);
    for (std::size_t t = 0; t < 32; ++t) {
        EXPECT_EQ(b.S(0, 2 * t), 0.0);
        EXPECT_EQ(b.S(0, 2 * t + 1), 1.0);
    }
}

TEST(SinBasis, RowNormsAreHalfWidth) {
    for (std::size_t m : {2u, 8u, 64u, 128u}) {
        const auto b = build_sin_basis(1000, m);
        for (std::size_t c = 0; c < 1000; ++c) {
            double n2 = 0;
            for (double v : b.S.row(c)) {
                n2 += v * v;
            }
            // sin^2 + cos^2 rounds to 1 within an ulp per pair.
            EXPECT_NEAR(n2, static_cast<double>(m) / 2, 1e-13 * static_cast<double>(m)) << c;
        }
    }
}

TEST(SinBasis, ExhaustiveSelfArgmax) {
    const auto b = build_sin_basis(1000, 64);
    const RowMatrix gram = b.S.eigen() * b.S.eigen().transpose();
    for (Eigen::Index c = 0; c < 1000; ++c) {
        Eigen::Index arg;
        gram.row(c).maxCoeff(&arg);
        ASSERT_EQ(arg, c);
    }
}

TEST(SinBasis, OddWidthRejected) {
    EXPECT_THROW(build_sin_basis(1000, 63), ConfigError);
    EXPECT_THROW(build_sin_basis(1, 64), ConfigError);
}

TEST(Probes, SinProbeWithIdentityMapsDecodesBasisRows) {
    SinProbe p(build_sin_basis(1000, 64), 64, 64);
    p.w_in().setIdentity();
    p.w_out().setIdentity();
    const auto& S = p.basis().S;
    const auto pred = probe_predict(p, S);
    for (int c = 0; c < 1000; ++c) {
        ASSERT_EQ(pred[c], c);
    }
    const auto zero = p.logits(Matrix(1, 64));
    for (double v : zero.data()) {
        EXPECT_EQ(v, 0.0);
    }
    EXPECT_THROW(p.logits(Matrix(1, 63)), DimensionError);
}

TEST(Probes, LinearProbeZeroWeightsGivesBias) {
    LinearProbe p(5, 4);
    p.weight().setZero();
    p.bias() << 1, -2, 3, 0.5;
    const auto lg = p.logits(Matrix(2, 5, 7.0));
    EXPECT_EQ(lg(1, 0), 1.0);
    EXPECT_EQ(lg(1, 1), -2.0);
    EXPECT_EQ(lg(0, 3), 0.5);
}

TEST(Probes, SinArgmaxInvariantUnderMatchedScaling) {
    Rng rng(4);
    SinProbe p(build_sin_basis(200, 16), 10, 12, 5);
    Matrix x(50, 10);
    for (auto& v : x.data()) {
        v = rng.normal();
    }
    const auto base = probe_predict(p, x);
    for (double a : {0.25, 2.0, 8.0}) {
        SinProbe q = p;
        q.w_in() /= a;
        Matrix xs = x;
        for (auto& v : xs.data()) {
            v *= a;
        }
        EXPECT_EQ(probe_predict(q, xs), base) << a;
    }
}

TEST(Probes, GradientsMatchFiniteDifferences) {
    check_gradient(SinProbe(build_sin_basis(30, 8), 6, 5, 1), 6, 30, 11);
    check_gradient(LinearProbe(6, 9, 2), 6, 9, 12);
    check_gradient(MlpProbe(6, 10, 9, 3), 6, 9, 13);
}

TEST(Probes, WeightSparsity) {
    EXPECT_EQ(weight_sparsity(Matrix(4, 4)), 0.0);
    Matrix half(2, 4);
    for (std::size_t j = 0; j < 4; ++j) {
        half(0, j) = 1.0;
    }
    EXPECT_EQ(weight_sparsity(half), 0.5);
    EXPECT_EQ(weight_sparsity(half, 1.0), 0.0);
    EXPECT_THROW(weight_sparsity(half, -1), ConfigError);
}

TEST(FitProbe, SyntheticSinusoidalActivations) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto acts = fixtures::sinusoidal_activations(1000, 64, 4, 0.01, 21);
    const auto splits = split_by_value(acts.labels, 100, 100, 5);
    const auto sin = fit_probe(ProbeKind::sin, acts, splits, probe_train_config());
    const auto lin = fit_probe(ProbeKind::linear, acts, splits, probe_train_config());
    EXPECT_GE(sin.report.test_accuracy, 0.99);
    EXPECT_LE(lin.report.test_accuracy, sin.report.test_accuracy);
    EXPECT_EQ(sin.report.test_values.size(), 100u);
    std::set<int> train_values;
    for (auto i : splits.train) {
        train_values.insert(acts.labels[i]);
    }
    for (int v : sin.report.test_values) {
        EXPECT_EQ(train_values.count(v), 0u);
    }
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 300.0);
}

TEST(FitProbe, RowOrderDoesNotMatter) {
    auto acts = fixtures::sinusoidal_activations(60, 8, 3, 0.05, 2);
    auto cfg = probe_train_config();
    cfg.max_epochs = 5;
    const ProbeOptions opt{60, 8, 8, 16};
    const auto a = fit_probe(ProbeKind::mlp, acts, split_by_value(acts.labels, 10, 10, 1), cfg, opt);
    std::vector<std::size_t> perm(acts.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(9);
    rng.shuffle(std::span(perm));
    const auto shuffled = acts.subset(perm);
    const auto b = fit_probe(ProbeKind::mlp, shuffled, split_by_value(shuffled.labels, 10, 10, 1), cfg, opt);
    EXPECT_EQ(a.report, b.report);
}

TEST(FitProbe, SaveLoadReproducesReport) {
    const auto acts = fixtures::sinusoidal_activations(80, 8, 3, 0.05, 3);
    const auto splits = split_by_value(acts.labels, 10, 10, 2);
    auto cfg = probe_train_config();
    cfg.max_epochs = 8;
    const ProbeOptions opt{80, 8, 8, 16};
    for (auto kind : {ProbeKind::sin, ProbeKind::linear, ProbeKind::mlp}) {
        const auto fit = fit_probe(kind, acts, splits, cfg, opt);
        const auto dir = std::filesystem::temp_directory_path() / ("numprobe_probe_" + std::string(probe_kind_name(kind)));
        std::filesystem::remove_all(dir);
        save_probe(fit.probe, fit.report, cfg, dir);
        const auto back = load_probe(dir);
        EXPECT_EQ(back.report, fit.report);
        std::vector<std::size_t> idx = splits.train;
        std::sort(idx.begin(), idx.end());
        std::vector<int> y;
        for (auto i : idx) {
            y.push_back(acts.labels[i]);
        }
        const auto x = acts.vectors.select_rows(idx);
        EXPECT_EQ(probe_accuracy(back.probe, x, y), fit.report.train_accuracy);
        EXPECT_TRUE(std::equal(probe_parameters(back.probe).begin(), probe_parameters(back.probe).end(),
                               probe_parameters(fit.probe).begin()));
    }
}

TEST(FitProbe, EmptySplit) {
    const auto acts = fixtures::sinusoidal_activations(20, 4, 1, 0.1, 1);
    Splits s = split_by_value(acts.labels, 2, 2, 0);
    s.val.clear();
    EXPECT_THROW(fit_probe(ProbeKind::linear, acts, s, probe_train_config(), {20, 4, 4, 8}), SplitError);
}

TEST(TunedLens, IdentityAtFinalStateIsExact) {
    ToyConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 1007;
    const ToyLM m(c, Tokenizer());
    const auto prompts = gen_math_prompts(MathOp::add, {0, 499}, 40, 1);
    const auto data = collect_lens_data(m, prompts, 2);
    const auto e = evaluate_lens(m, LensTranslator::identity(2, 16), data);
    EXPECT_EQ(e.mean_kl, 0.0);
    EXPECT_EQ(e.top1_agreement, 1.0);
}

TEST(TunedLens, TrainedTranslatorBeatsIdentity) {
    ToyConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 1007;
    c.seed = 4;
    const ToyLM m(c, Tokenizer());
    const auto train = collect_lens_data(m, gen_math_prompts(MathOp::mul, {0, 999}, 150, 1), 1);
    const auto held = collect_lens_data(m, gen_math_prompts(MathOp::mul, {0, 999}, 60, 2), 1);
    LensConfig lc;
    lc.epochs = 20;
    const auto lens = fit_tuned_lens(m, train, 1, lc);
    const auto base = evaluate_lens(m, LensTranslator::identity(1, 16), held);
    const auto tuned = evaluate_lens(m, lens, held);
    EXPECT_LT(tuned.mean_kl, base.mean_kl);
    EXPECT_THROW(collect_lens_data(m, gen_math_prompts(MathOp::add, {0, 9}, 1, 0), 3), ConfigError);
}
