#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "numprobe/actstore.hpp"
#include "numprobe/contexts.hpp"
#include "numprobe/errors.hpp"
#include "numprobe/matrix.hpp"
#include "numprobe/numcore.hpp"
#include "numprobe/rng.hpp"
#include "numprobe/tokenizer.hpp"

namespace numprobe {

struct ToyConfig {
    int n_layers = 2;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int vocab_size = 1225;
    int max_seq_len = 64;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;
    // Number rows of the embedding/unembedding start on sinusoids instead of noise.
    bool sinusoidal_number_init = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_layers < 1 || d_model < 2 || n_heads < 1 || d_ff < 1 || max_seq_len < 1) {
            throw ConfigError("toy model dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if ((d_model / n_heads) % 2 != 0) {
            throw ConfigError("rotary encoding needs an even head dimension");
        }
        if (vocab_size < Tokenizer::n_numbers + static_cast<int>(Tokenizer::specials().size())) {
            throw ConfigError("vocab_size must cover 0..999 and the special tokens");
        }
    }

    std::size_t parameter_count() const {
        const std::size_t d = d_model, f = d_ff, v = vocab_size, l = n_layers;
        return v * d + l * (4 * d * d + 2 * d * f + 2 * d) + d + d * v;
    }

    friend bool operator==(const ToyConfig&, const ToyConfig&) = default;
};

inline nlohmann::json to_json(const ToyConfig& c) {
    return {{"n_layers", c.n_layers},     {"d_model", c.d_model},   {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
            {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps},
            {"sinusoidal_number_init", c.sinusoidal_number_init}, {"seed", c.seed}};
}

inline ToyConfig toy_config_from_json(const nlohmann::json& j) {
    ToyConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.sinusoidal_number_init = j.value("sinusoidal_number_init", c.sinusoidal_number_init);
    c.seed = j.value("seed", c.seed);
    return c;
}

// Offsets of each named tensor inside the flat parameter buffer.
struct ToyLayout {
    struct Tensor {
        std::string name;
        std::size_t offset = 0;
        std::size_t rows = 0;
        std::size_t cols = 0;
        std::size_t size() const { return rows * cols; }
    };
    struct Layer {
        std::size_t attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2;
    };

    std::vector<Tensor> tensors;
    std::size_t tok_emb = 0;
    std::vector<Layer> layers;
    std::size_t final_norm = 0;
    std::size_t unembed = 0;
    std::size_t total = 0;

    explicit ToyLayout(const ToyConfig& c) {
        const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
        auto add = [&](std::string name, std::size_t r, std::size_t cc) {
            tensors.push_back({std::move(name), total, r, cc});
            total += r * cc;
            return tensors.back().offset;
        };
        tok_emb = add("tok_emb", v, d);
        for (int l = 0; l < c.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            Layer ly{};
            ly.attn_norm = add(p + "attn_norm", 1, d);
            ly.wq = add(p + "wq", d, d);
            ly.wk = add(p + "wk", d, d);
            ly.wv = add(p + "wv", d, d);
            ly.wo = add(p + "wo", d, d);
            ly.mlp_norm = add(p + "mlp_norm", 1, d);
            ly.w1 = add(p + "w1", d, f);
            ly.w2 = add(p + "w2", f, d);
            layers.push_back(ly);
        }
        final_norm = add("final_norm", 1, d);
        unembed = add("unembed", d, v);
    }
};

// B sequences of equal length T, row-major.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<int> ids;

    static TokenBatch from(std::span<const std::vector<int>> seqs) {
        TokenBatch b;
        b.batch = seqs.size();
        b.seq = seqs.empty() ? 0 : seqs[0].size();
        for (const auto& s : seqs) {
            if (s.size() != b.seq) {
                throw DimensionError("token batch needs equal-length sequences");
            }
            b.ids.insert(b.ids.end(), s.begin(), s.end());
        }
        return b;
    }
    static TokenBatch single(std::vector<int> ids) {
        const auto n = ids.size();
        return {1, n, std::move(ids)};
    }
};

struct CaptureSpec {
    std::set<Site> sites;
    // Positions within each sequence; negative counts from the end. Empty = all.
    std::vector<int> positions;
};

// Digit-period frequencies (in units of the value) used by the number-row init.
inline const std::vector<double>& number_init_periods() {
    static const std::vector<double> p{2, 2.5, 5, 10, 20, 25, 50, 100, 200, 250, 500, 1000, 2000};
    return p;
}

template <class Scalar>
class BasicToyLM {
public:
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using MapM = Eigen::Map<Mat>;
    using MapCM = Eigen::Map<const Mat>;

    struct LayerState {
        bool skipped = false;
        Mat x_in, a, q, k, v, o, attn_out, x_mid, m, u, gelu_tanh, gu, mlp_out, x_out;
        Vec r1, r2;
        std::vector<Mat> probs;
    };

    struct ForwardState {
        std::size_t batch = 0, seq = 0;
        std::vector<int> ids;
        Mat x0;
        std::vector<LayerState> layers;
        Mat x_final;      // pre-norm residual, all positions
        Mat h;            // normed rows fed to the unembedding
        Vec rf;
        Mat logits;       // rows: last position per sequence, or all positions
        bool all_positions = false;
    };

    struct CaptureResult {
        Mat logits;  // last position of each sequence
        std::map<std::pair<Site, int>, Mat> acts;
        std::vector<std::size_t> positions;  // resolved position per captured row (within its sequence)
    };

    BasicToyLM(const ToyConfig& cfg, Tokenizer tok) : cfg_(cfg), tok_(std::move(tok)), layout_((cfg.validate(), cfg)) {
        if (tok_.vocab_size() > cfg_.vocab_size) {
            throw ConfigError("tokenizer has " + std::to_string(tok_.vocab_size()) +
                              " entries but vocab_size is " + std::to_string(cfg_.vocab_size));
        }
        params_.assign(layout_.total, Scalar(0));
        injections_.resize(cfg_.n_layers);
        init_parameters();
        build_rope();
    }

    const ToyConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tok_; }
    const ToyLayout& layout() const { return layout_; }
    std::size_t parameter_count() const { return params_.size(); }
    std::span<Scalar> parameters() { return params_; }
    std::span<const Scalar> parameters() const { return params_; }
    int n_layers() const { return cfg_.n_layers; }

    template <class Other>
    BasicToyLM<Other> cast() const {
        BasicToyLM<Other> out(cfg_, tok_);
        auto dst = out.parameters();
        for (std::size_t i = 0; i < params_.size(); ++i) {
            dst[i] = static_cast<Other>(params_[i]);
        }
        for (int l = 0; l < cfg_.n_layers; ++l) {
            if (!injections_[l].empty()) {
                std::vector<Other> v(injections_[l].begin(), injections_[l].end());
                out.set_injection(l + 1, v);
            }
        }
        return out;
    }

    // Adds a fixed vector to the last-position residual after layer `layer` (1-based).
    void set_injection(int layer, std::span<const Scalar> v) {
        check_layer(layer);
        if (!v.empty() && v.size() != static_cast<std::size_t>(cfg_.d_model)) {
            throw DimensionError("injection width must equal d_model");
        }
        injections_[layer - 1].assign(v.begin(), v.end());
    }

    // Copy with a new layer at 1-based position `layer` whose output projections are zero,
    // so it is the identity on the residual stream until an injection is set.
    BasicToyLM with_identity_layer(int layer) const {
        if (layer < 1 || layer > cfg_.n_layers + 1) {
            throw ConfigError("insert position " + std::to_string(layer) + " outside 1.." +
                              std::to_string(cfg_.n_layers + 1));
        }
        ToyConfig c = cfg_;
        c.n_layers += 1;
        BasicToyLM out(c, tok_);
        const auto& src = layout_;
        const auto& dst = out.layout_;
        auto copy = [&](std::size_t from, std::size_t to, std::size_t n) {
            std::copy_n(params_.begin() + static_cast<std::ptrdiff_t>(from), n,
                        out.params_.begin() + static_cast<std::ptrdiff_t>(to));
        };
        const std::size_t d = cfg_.d_model;
        copy(src.tok_emb, dst.tok_emb, static_cast<std::size_t>(cfg_.vocab_size) * d);
        copy(src.final_norm, dst.final_norm, d);
        copy(src.unembed, dst.unembed, d * cfg_.vocab_size);
        const std::size_t layer_size = src.layers[0].w2 + d * cfg_.d_ff - src.layers[0].attn_norm;
        for (int l = 0, o = 0; l < c.n_layers; ++l) {
            if (l == layer - 1) {
                const auto& ly = dst.layers[l];
                std::fill_n(out.params_.begin() + static_cast<std::ptrdiff_t>(ly.wo), d * d, Scalar(0));
                std::fill_n(out.params_.begin() + static_cast<std::ptrdiff_t>(ly.w2), d * cfg_.d_ff, Scalar(0));
                continue;
            }
            copy(src.layers[o].attn_norm, dst.layers[l].attn_norm, layer_size);
            if (!injections_[o].empty()) {
                out.injections_[l] = injections_[o];
            }
            ++o;
        }
        return out;
    }

    void zero_output_projections(int layer) {
        check_layer(layer);
        const auto& ly = layout_.layers[layer - 1];
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(ly.wo), cfg_.d_model * cfg_.d_model, Scalar(0));
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(ly.w2), cfg_.d_model * cfg_.d_ff, Scalar(0));
    }

    // ----- forward passes -------------------------------------------------

    Mat forward(const TokenBatch& b) const { return run(b, {}, false).logits; }

    Mat forward_all_positions(const TokenBatch& b) const { return run(b, {}, true).logits; }

    Mat forward_skip(const TokenBatch& b, const std::set<int>& skip) const {
        std::vector<bool> mask(cfg_.n_layers, false);
        for (int l : skip) {
            check_layer(l);
            mask[l - 1] = true;
        }
        return run(b, mask, false).logits;
    }

    Mat forward_tokens(std::span<const std::string> tokens) const {
        return forward(TokenBatch::single(tok_.encode(tokens)));
    }

    CaptureResult forward_capture(const TokenBatch& b, const CaptureSpec& spec,
                                  const std::set<int>& skip = {}) const {
        std::vector<bool> mask(cfg_.n_layers, false);
        for (int l : skip) {
            check_layer(l);
            mask[l - 1] = true;
        }
        auto st = run(b, mask, false);
        std::vector<std::size_t> pos;
        if (spec.positions.empty()) {
            for (std::size_t t = 0; t < b.seq; ++t) {
                pos.push_back(t);
            }
        }
        for (int p : spec.positions) {
            const long r = p < 0 ? static_cast<long>(b.seq) + p : p;
            if (r < 0 || r >= static_cast<long>(b.seq)) {
                throw RangeError("capture position " + std::to_string(p) + " outside sequence of length " +
                                 std::to_string(b.seq));
            }
            pos.push_back(static_cast<std::size_t>(r));
        }
        std::vector<Eigen::Index> rows;
        CaptureResult out;
        for (std::size_t i = 0; i < b.batch; ++i) {
            for (auto p : pos) {
                rows.push_back(static_cast<Eigen::Index>(i * b.seq + p));
                out.positions.push_back(p);
            }
        }
        auto take = [&](const Mat& m) {
            Mat r(static_cast<Eigen::Index>(rows.size()), m.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                r.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
            }
            return r;
        };
        const int L = cfg_.n_layers;
        auto want = [&](Site s) { return spec.sites.count(s) > 0; };
        if (want(Site::embedding)) {
            out.acts[{Site::embedding, 0}] = take(st.x0);
        }
        if (want(Site::residual_out)) {
            out.acts[{Site::residual_out, 0}] = take(st.x0);
        }
        for (int l = 1; l <= L; ++l) {
            const auto& ls = st.layers[l - 1];
            if (want(Site::residual_out)) {
                out.acts[{Site::residual_out, l}] = take(ls.x_out);
            }
            if (ls.skipped) {
                continue;
            }
            if (want(Site::attn_preproj)) {
                out.acts[{Site::attn_preproj, l}] = take(ls.o);
            }
            if (want(Site::attn_out)) {
                out.acts[{Site::attn_out, l}] = take(ls.attn_out);
            }
            if (want(Site::mlp_out)) {
                out.acts[{Site::mlp_out, l}] = take(ls.mlp_out);
            }
        }
        if (want(Site::final_prenorm)) {
            out.acts[{Site::final_prenorm, L + 1}] = take(st.x_final);
        }
        if (want(Site::residual_out)) {
            Mat xf = take(st.x_final);
            Vec r;
            Mat h;
            rms_forward(xf, final_norm_gain(), h, r);
            out.acts[{Site::residual_out, L + 1}] = std::move(h);
        }
        if (want(Site::output_embedding)) {
            throw ConfigError("output_embedding is a weight table, not a capture site");
        }
        out.logits = std::move(st.logits);
        return out;
    }

    // Rows 0..999 of the input embedding (value-indexed).
    Matrix number_embeddings() const {
        Matrix m(Tokenizer::n_numbers, cfg_.d_model);
        for (int v = 0; v < Tokenizer::n_numbers; ++v) {
            for (int j = 0; j < cfg_.d_model; ++j) {
                m(v, j) = static_cast<double>(params_[layout_.tok_emb + static_cast<std::size_t>(v) * cfg_.d_model + j]);
            }
        }
        return m;
    }

    // Unembedding columns for 0..999, one row per value.
    Matrix number_unembeddings() const {
        Matrix m(Tokenizer::n_numbers, cfg_.d_model);
        for (int v = 0; v < Tokenizer::n_numbers; ++v) {
            for (int j = 0; j < cfg_.d_model; ++j) {
                m(v, j) = static_cast<double>(params_[layout_.unembed + static_cast<std::size_t>(j) * cfg_.vocab_size + v]);
            }
        }
        return m;
    }

    // Logits from a residual state through the model's own final norm and unembedding.
    Mat unembed_residual(const Mat& x) const {
        Mat h;
        Vec r;
        rms_forward(x, final_norm_gain(), h, r);
        return h * unembed_map();
    }

    // ----- training -------------------------------------------------------

    // Mean next-token cross-entropy at the last position of each sequence.
    // Writes d(loss)/d(params) into grad (same layout as parameters()).
    double loss_and_gradient(const TokenBatch& b, std::span<const int> targets, std::span<Scalar> grad) const {
        if (targets.size() != b.batch) {
            throw DimensionError("one target per sequence required");
        }
        if (grad.size() != params_.size()) {
            throw DimensionError("gradient buffer size mismatch");
        }
        std::fill(grad.begin(), grad.end(), Scalar(0));
        const auto st = run(b, {}, false);
        const auto B = static_cast<Eigen::Index>(b.batch);
        const auto T = static_cast<Eigen::Index>(b.seq);
        const auto d = static_cast<Eigen::Index>(cfg_.d_model);
        const auto V = static_cast<Eigen::Index>(cfg_.vocab_size);

        Mat dlogits = st.logits;
        double loss = 0;
        for (Eigen::Index i = 0; i < B; ++i) {
            const int y = targets[static_cast<std::size_t>(i)];
            if (y < 0 || y >= cfg_.vocab_size) {
                throw TokenError("target id " + std::to_string(y) + " outside vocabulary");
            }
            auto row = dlogits.row(i);
            const Scalar mx = row.maxCoeff();
            row.array() = (row.array() - mx).exp();
            const Scalar s = row.sum();
            row /= s;
            loss -= std::log(static_cast<double>(row(y)));
            row(y) -= Scalar(1);
        }
        loss /= static_cast<double>(B);
        dlogits /= static_cast<Scalar>(B);

        grad_map(grad, layout_.unembed, d, V).noalias() += st.h.transpose() * dlogits;
        Mat dh = dlogits * unembed_map().transpose();

        Mat xf_last(B, d);
        for (Eigen::Index i = 0; i < B; ++i) {
            xf_last.row(i) = st.x_final.row(i * T + T - 1);
        }
        Mat dxf;
        rms_backward(xf_last, st.rf, final_norm_gain(), dh, dxf, grad_vec(grad, layout_.final_norm));
        Mat dx = Mat::Zero(B * T, d);
        for (Eigen::Index i = 0; i < B; ++i) {
            dx.row(i * T + T - 1) = dxf.row(i);
        }

        const int H = cfg_.n_heads;
        const Eigen::Index hd = d / H;
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
        for (int l = cfg_.n_layers - 1; l >= 0; --l) {
            const auto& ls = st.layers[l];
            if (ls.skipped) {
                continue;
            }
            const auto& ly = layout_.layers[l];
            // MLP branch
            grad_map(grad, ly.w2, cfg_.d_ff, d).noalias() += ls.gu.transpose() * dx;
            Mat du = dx * weight(ly.w2, cfg_.d_ff, d).transpose();
            {
                const auto u = ls.u.array();
                const auto t = ls.gelu_tanh.array();
                du.array() *= Scalar(0.5) * (Scalar(1) + t) +
                              Scalar(0.5) * u * (Scalar(1) - t * t) * gelu_k * (Scalar(1) + Scalar(3) * gelu_c * u * u);
            }
            grad_map(grad, ly.w1, d, cfg_.d_ff).noalias() += ls.m.transpose() * du;
            Mat dm = du * weight(ly.w1, d, cfg_.d_ff).transpose();
            Mat part;
            rms_backward(ls.x_mid, ls.r2, gain(ly.mlp_norm), dm, part, grad_vec(grad, ly.mlp_norm));
            dx += part;

            // attention branch
            grad_map(grad, ly.wo, d, d).noalias() += ls.o.transpose() * dx;
            Mat dout = dx * weight(ly.wo, d, d).transpose();
            Mat dq = Mat::Zero(B * T, d), dk = Mat::Zero(B * T, d), dv = Mat::Zero(B * T, d);
            for (Eigen::Index bi = 0; bi < B; ++bi) {
                for (int h = 0; h < H; ++h) {
                    const auto& P = ls.probs[static_cast<std::size_t>(bi * H + h)];
                    const auto Q = ls.q.block(bi * T, h * hd, T, hd);
                    const auto K = ls.k.block(bi * T, h * hd, T, hd);
                    const auto Vb = ls.v.block(bi * T, h * hd, T, hd);
                    const auto dO = dout.block(bi * T, h * hd, T, hd);
                    dv.block(bi * T, h * hd, T, hd).noalias() = P.transpose() * dO;
                    Mat dP = dO * Vb.transpose();
                    Vec rs = (dP.array() * P.array()).rowwise().sum();
                    Mat dS = P.array() * (dP.colwise() - rs).array();
                    dq.block(bi * T, h * hd, T, hd).noalias() = scale * dS * K;
                    dk.block(bi * T, h * hd, T, hd).noalias() = scale * dS.transpose() * Q;
                }
            }
            apply_rope(dq, b.seq, true);
            apply_rope(dk, b.seq, true);
            grad_map(grad, ly.wq, d, d).noalias() += ls.a.transpose() * dq;
            grad_map(grad, ly.wk, d, d).noalias() += ls.a.transpose() * dk;
            grad_map(grad, ly.wv, d, d).noalias() += ls.a.transpose() * dv;
            Mat da = dq * weight(ly.wq, d, d).transpose();
            da.noalias() += dk * weight(ly.wk, d, d).transpose();
            da.noalias() += dv * weight(ly.wv, d, d).transpose();
            rms_backward(ls.x_in, ls.r1, gain(ly.attn_norm), da, part, grad_vec(grad, ly.attn_norm));
            dx += part;
        }
        for (std::size_t n = 0; n < st.ids.size(); ++n) {
            grad_map(grad, layout_.tok_emb, V, d).row(st.ids[n]) += dx.row(static_cast<Eigen::Index>(n));
        }
        return loss;
    }

    // ----- checkpoints ----------------------------------------------------

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::json tensors = nlohmann::json::array();
        for (const auto& t : layout_.tensors) {
            std::vector<float> v(t.size());
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = static_cast<float>(params_[t.offset + i]);
            }
            const std::string file = t.name + ".npad";
            write_npad(dir / file, t.rows, t.cols, v);
            tensors.push_back({{"name", t.name}, {"file", file}, {"rows", t.rows}, {"cols", t.cols}});
        }
        nlohmann::json inj = nlohmann::json::object();
        for (int l = 0; l < cfg_.n_layers; ++l) {
            if (!injections_[l].empty()) {
                std::vector<double> v(injections_[l].begin(), injections_[l].end());
                inj[std::to_string(l + 1)] = v;
            }
        }
        const nlohmann::json manifest{{"format", "toylm"},          {"format_version", 1},
                                      {"config", to_json(cfg_)},    {"tokenizer_words", tok_.words()},
                                      {"tensors", tensors},         {"injections", inj}};
        detail::write_text_atomic(dir / "model.json", manifest.dump(2) + "\n");
    }

    static BasicToyLM load(const std::filesystem::path& dir) {
        std::ifstream in(dir / "model.json");
        if (!in) {
            throw StoreError("no model.json in " + dir.string());
        }
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("model.json: " + std::string(e.what()));
        }
        if (j.value("format", "") != "toylm") {
            throw SchemaError(dir.string() + " is not a toy model checkpoint");
        }
        const auto cfg = toy_config_from_json(j.at("config"));
        auto words = j.at("tokenizer_words").get<std::vector<std::string>>();
        const auto& sp = Tokenizer::specials();
        if (words.size() < sp.size() || !std::equal(sp.begin(), sp.end(), words.begin())) {
            throw SchemaError("checkpoint tokenizer does not start with the special tokens");
        }
        words.erase(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(sp.size()));
        BasicToyLM m(cfg, Tokenizer(words));
        for (const auto& t : m.layout_.tensors) {
            const auto it = std::find_if(j.at("tensors").begin(), j.at("tensors").end(),
                                         [&](const nlohmann::json& e) { return e.at("name") == t.name; });
            if (it == j.at("tensors").end()) {
                throw SchemaError("checkpoint lacks tensor " + t.name);
            }
            const auto npad = read_npad(dir / it->at("file").template get<std::string>());
            if (npad.rows != t.rows || npad.cols != t.cols) {
                throw SchemaError("tensor " + t.name + " has shape " + std::to_string(npad.rows) + "x" +
                                  std::to_string(npad.cols));
            }
            for (std::size_t i = 0; i < t.size(); ++i) {
                m.params_[t.offset + i] = static_cast<Scalar>(npad.values[i]);
            }
        }
        const auto inj = j.value("injections", nlohmann::json::object());
        for (auto it = inj.begin(); it != inj.end(); ++it) {
            const auto vals = it.value().template get<std::vector<double>>();
            std::vector<Scalar> s(vals.begin(), vals.end());
            m.set_injection(std::stoi(it.key()), s);
        }
        return m;
    }

private:
    template <class>
    friend class BasicToyLM;

    // tanh-approximated GELU constants: sqrt(2/pi) and the cubic coefficient.
    static constexpr Scalar gelu_k = static_cast<Scalar>(0.7978845608028654);
    static constexpr Scalar gelu_c = static_cast<Scalar>(0.044715);

    void check_layer(int layer) const {
        if (layer < 1 || layer > cfg_.n_layers) {
            throw ConfigError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(cfg_.n_layers));
        }
    }

    MapCM weight(std::size_t off, Eigen::Index r, Eigen::Index c) const { return MapCM(params_.data() + off, r, c); }
    MapCM unembed_map() const { return weight(layout_.unembed, cfg_.d_model, cfg_.vocab_size); }
    Eigen::Map<const Vec> gain(std::size_t off) const { return Eigen::Map<const Vec>(params_.data() + off, cfg_.d_model); }
    Eigen::Map<const Vec> final_norm_gain() const { return gain(layout_.final_norm); }

    static MapM grad_map(std::span<Scalar> g, std::size_t off, Eigen::Index r, Eigen::Index c) {
        return MapM(g.data() + off, r, c);
    }
    Eigen::Map<Vec> grad_vec(std::span<Scalar> g, std::size_t off) const {
        return Eigen::Map<Vec>(g.data() + off, cfg_.d_model);
    }

    template <class G>
    void rms_forward(const Mat& x, const G& g, Mat& y, Vec& r) const {
        r.resize(x.rows());
        y.resize(x.rows(), x.cols());
        const Scalar eps = static_cast<Scalar>(cfg_.norm_eps);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const Scalar ms = x.row(i).squaredNorm() / static_cast<Scalar>(x.cols());
            r(i) = Scalar(1) / std::sqrt(ms + eps);
            y.row(i) = (x.row(i).array() * r(i)) * g.transpose().array();
        }
    }

    template <class G, class DG>
    void rms_backward(const Mat& x, const Vec& r, const G& g, const Mat& dy, Mat& dx, DG&& dg) const {
        dx.resize(x.rows(), x.cols());
        const auto n = static_cast<Scalar>(x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            dg.array() += (dy.row(i).array() * x.row(i).array()).transpose() * r(i);
            const auto dxh = (dy.row(i).array() * g.transpose().array()).matrix();
            const Scalar dot = dxh.dot(x.row(i)) / n;
            dx.row(i) = r(i) * (dxh - x.row(i) * (r(i) * r(i) * dot));
        }
    }

    void build_rope() {
        const int hd = cfg_.d_model / cfg_.n_heads;
        rope_cos_.assign(static_cast<std::size_t>(cfg_.max_seq_len) * (hd / 2), Scalar(0));
        rope_sin_ = rope_cos_;
        for (int t = 0; t < cfg_.max_seq_len; ++t) {
            for (int i = 0; i < hd / 2; ++i) {
                const double ang = t * std::pow(cfg_.rope_base, -2.0 * i / hd);
                rope_cos_[static_cast<std::size_t>(t * (hd / 2) + i)] = static_cast<Scalar>(std::cos(ang));
                rope_sin_[static_cast<std::size_t>(t * (hd / 2) + i)] = static_cast<Scalar>(std::sin(ang));
            }
        }
    }

    // Rotates each (2i, 2i+1) pair within every head; inverse rotates back (used for gradients).
    void apply_rope(Mat& x, std::size_t seq, bool inverse) const {
        const int hd = cfg_.d_model / cfg_.n_heads;
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
            const auto t = static_cast<std::size_t>(n) % seq;
            for (int h = 0; h < cfg_.n_heads; ++h) {
                for (int i = 0; i < hd / 2; ++i) {
                    const Scalar c = rope_cos_[t * (hd / 2) + i];
                    const Scalar s = inverse ? -rope_sin_[t * (hd / 2) + i] : rope_sin_[t * (hd / 2) + i];
                    Scalar& a = x(n, h * hd + 2 * i);
                    Scalar& b = x(n, h * hd + 2 * i + 1);
                    const Scalar a2 = a * c - b * s;
                    const Scalar b2 = a * s + b * c;
                    a = a2;
                    b = b2;
                }
            }
        }
    }

    void validate_batch(const TokenBatch& b) const {
        if (b.ids.size() != b.batch * b.seq || b.seq == 0) {
            throw DimensionError("token batch shape does not match its ids");
        }
        if (b.seq > static_cast<std::size_t>(cfg_.max_seq_len)) {
            throw RangeError("sequence length " + std::to_string(b.seq) + " exceeds max_seq_len " +
                             std::to_string(cfg_.max_seq_len));
        }
        for (int id : b.ids) {
            if (id < 0 || id >= cfg_.vocab_size) {
                throw TokenError("token id " + std::to_string(id) + " outside vocabulary");
            }
        }
    }

    ForwardState run(const TokenBatch& b, const std::vector<bool>& skip, bool all_positions) const {
        validate_batch(b);
        ForwardState st;
        st.batch = b.batch;
        st.seq = b.seq;
        st.ids = b.ids;
        st.all_positions = all_positions;
        const auto B = static_cast<Eigen::Index>(b.batch);
        const auto T = static_cast<Eigen::Index>(b.seq);
        const auto N = B * T;
        const auto d = static_cast<Eigen::Index>(cfg_.d_model);
        const auto emb = weight(layout_.tok_emb, cfg_.vocab_size, d);
        st.x0.resize(N, d);
        for (Eigen::Index n = 0; n < N; ++n) {
            st.x0.row(n) = emb.row(b.ids[static_cast<std::size_t>(n)]);
        }
        const int H = cfg_.n_heads;
        const Eigen::Index hd = d / H;
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
        Mat x = st.x0;
        st.layers.resize(static_cast<std::size_t>(cfg_.n_layers));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            auto& ls = st.layers[static_cast<std::size_t>(l)];
            if (!skip.empty() && skip[static_cast<std::size_t>(l)]) {
                ls.skipped = true;
                ls.x_out = x;
                continue;
            }
            const auto& ly = layout_.layers[static_cast<std::size_t>(l)];
            ls.x_in = x;
            rms_forward(ls.x_in, gain(ly.attn_norm), ls.a, ls.r1);
            ls.q.noalias() = ls.a * weight(ly.wq, d, d);
            ls.k.noalias() = ls.a * weight(ly.wk, d, d);
            ls.v.noalias() = ls.a * weight(ly.wv, d, d);
            apply_rope(ls.q, b.seq, false);
            apply_rope(ls.k, b.seq, false);
            ls.o = Mat::Zero(N, d);
            ls.probs.resize(static_cast<std::size_t>(B * H));
            for (Eigen::Index bi = 0; bi < B; ++bi) {
                for (int h = 0; h < H; ++h) {
                    Mat S = scale * (ls.q.block(bi * T, h * hd, T, hd) * ls.k.block(bi * T, h * hd, T, hd).transpose());
                    for (Eigen::Index i = 0; i < T; ++i) {
                        const Scalar mx = S.row(i).head(i + 1).maxCoeff();
                        Scalar sum = 0;
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            S(i, j) = std::exp(S(i, j) - mx);
                            sum += S(i, j);
                        }
                        for (Eigen::Index j = 0; j <= i; ++j) {
                            S(i, j) /= sum;
                        }
                        for (Eigen::Index j = i + 1; j < T; ++j) {
                            S(i, j) = 0;
                        }
                    }
                    ls.o.block(bi * T, h * hd, T, hd).noalias() = S * ls.v.block(bi * T, h * hd, T, hd);
                    ls.probs[static_cast<std::size_t>(bi * H + h)] = std::move(S);
                }
            }
            ls.attn_out.noalias() = ls.o * weight(ly.wo, d, d);
            ls.x_mid = x + ls.attn_out;
            rms_forward(ls.x_mid, gain(ly.mlp_norm), ls.m, ls.r2);
            ls.u.noalias() = ls.m * weight(ly.w1, d, cfg_.d_ff);
            {
                const auto u = ls.u.array();
                ls.gelu_tanh = (gelu_k * (u + gelu_c * u * u * u)).tanh().matrix();
                ls.gu = (Scalar(0.5) * u * (Scalar(1) + ls.gelu_tanh.array())).matrix();
            }
            ls.mlp_out.noalias() = ls.gu * weight(ly.w2, cfg_.d_ff, d);
            x = ls.x_mid + ls.mlp_out;
            const auto& inj = injections_[static_cast<std::size_t>(l)];
            if (!inj.empty()) {
                const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> iv(inj.data(), d);
                for (Eigen::Index bi = 0; bi < B; ++bi) {
                    x.row(bi * T + T - 1) += iv;
                }
            }
            ls.x_out = x;
        }
        st.x_final = x;
        Mat rows_in;
        if (all_positions) {
            rows_in = x;
        } else {
            rows_in.resize(B, d);
            for (Eigen::Index bi = 0; bi < B; ++bi) {
                rows_in.row(bi) = x.row(bi * T + T - 1);
            }
        }
        rms_forward(rows_in, final_norm_gain(), st.h, st.rf);
        st.logits.noalias() = st.h * unembed_map();
        return st;
    }

    void init_parameters() {
        const Rng root(cfg_.seed);
        const auto d = static_cast<std::size_t>(cfg_.d_model);
        const auto V = static_cast<std::size_t>(cfg_.vocab_size);
        std::uint64_t stream = 0;
        auto uniform_fill = [&](std::size_t off, std::size_t n, double bound) {
            Rng rng = root.split(stream++);
            for (std::size_t i = 0; i < n; ++i) {
                params_[off + i] = static_cast<Scalar>(rng.uniform(-bound, bound));
            }
        };
        {
            Rng rng = root.split(stream++);
            for (std::size_t i = 0; i < V * d; ++i) {
                params_[layout_.tok_emb + i] = static_cast<Scalar>(rng.normal());
            }
        }
        uniform_fill(layout_.unembed, d * V, 1.0 / std::sqrt(static_cast<double>(d)));
        for (const auto& ly : layout_.layers) {
            std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(ly.attn_norm), d, Scalar(1));
            std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(ly.mlp_norm), d, Scalar(1));
            const double bd = 1.0 / std::sqrt(static_cast<double>(d));
            uniform_fill(ly.wq, d * d, bd);
            uniform_fill(ly.wk, d * d, bd);
            uniform_fill(ly.wv, d * d, bd);
            uniform_fill(ly.wo, d * d, bd);
            uniform_fill(ly.w1, d * cfg_.d_ff, bd);
            uniform_fill(ly.w2, cfg_.d_ff * d, 1.0 / std::sqrt(static_cast<double>(cfg_.d_ff)));
        }
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(layout_.final_norm), d, Scalar(1));
        if (!cfg_.sinusoidal_number_init) {
            return;
        }
        // Half the pairs on a geometric frequency ladder, half on decimal-digit periods.
        const std::size_t pairs = d / 2;
        const std::size_t geo = pairs - pairs / 2;
        std::vector<double> omega;
        for (std::size_t t = 0; t < geo; ++t) {
            omega.push_back(std::pow(1000.0, -2.0 * static_cast<double>(t) / (2.0 * static_cast<double>(geo))));
        }
        const auto& periods = number_init_periods();
        for (std::size_t t = 0; omega.size() < pairs; ++t) {
            omega.push_back(2.0 * std::numbers::pi / periods[t % periods.size()]);
        }
        Rng rng = root.split(stream++);
        for (std::size_t v = 0; v < static_cast<std::size_t>(Tokenizer::n_numbers); ++v) {
            for (std::size_t t = 0; t < pairs; ++t) {
                const double ang = static_cast<double>(v) * omega[t];
                const double e0 = std::sin(ang) + 0.02 * rng.normal();
                const double e1 = std::cos(ang) + 0.02 * rng.normal();
                params_[layout_.tok_emb + v * d + 2 * t] = static_cast<Scalar>(e0);
                params_[layout_.tok_emb + v * d + 2 * t + 1] = static_cast<Scalar>(e1);
                params_[layout_.unembed + (2 * t) * V + v] = static_cast<Scalar>(0.3 * e0);
                params_[layout_.unembed + (2 * t + 1) * V + v] = static_cast<Scalar>(0.3 * e1);
            }
        }
    }

    ToyConfig cfg_;
    Tokenizer tok_;
    ToyLayout layout_;
    std::vector<Scalar> params_;
    std::vector<std::vector<Scalar>> injections_;
    std::vector<Scalar> rope_cos_, rope_sin_;
};

using ToyLM = BasicToyLM<float>;

// ---------------------------------------------------------------------------
// Arithmetic training
// ---------------------------------------------------------------------------

struct ToyTrainConfig {
    std::size_t steps = 6000;
    std::size_t batch_size = 64;
    double learning_rate = 3e-3;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.98;
    std::size_t warmup = 300;
    std::size_t eval_size = 2000;
    std::uint64_t holdout_mod = 20;  // 1 in holdout_mod operand pairs is reserved for eval
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0 || eval_size == 0 || holdout_mod < 2) {
            throw ConfigError("batch_size/eval_size must be positive and holdout_mod >= 2");
        }
        if (!(learning_rate > 0) || weight_decay < 0) {
            throw ConfigError("learning_rate must be positive, weight_decay non-negative");
        }
    }
};

struct ToyTrainMetrics {
    double train_accuracy = 0;
    double eval_accuracy = 0;
    double final_loss = 0;
    std::size_t steps = 0;
    std::vector<std::pair<std::size_t, double>> loss_curve;  // (step, mean loss over the preceding window)
};

inline bool heldout_pair(std::int64_t a, std::int64_t b, std::uint64_t mod, std::uint64_t seed) {
    Rng r(seed ^ (static_cast<std::uint64_t>(a) * 1000003ULL + static_cast<std::uint64_t>(b)));
    return r.next_u64() % mod == 0;
}

// Draws n prompts from the held-out (or training) side of the operand-pair split.
inline std::vector<PromptRecord> arithmetic_prompts(MathOp op, OperandRange range, std::size_t n, bool heldout,
                                                    const ToyTrainConfig& cfg, std::uint64_t stream) {
    Rng rng = Rng(cfg.seed).split(stream);
    std::vector<PromptRecord> out;
    std::size_t misses = 0;
    while (out.size() < n) {
        const auto xy = draw_operands(op, range, rng);
        if (!xy || heldout_pair(xy->first, xy->second, cfg.holdout_mod, cfg.seed) != heldout) {
            if (++misses > 1000 * (n + 10) * cfg.holdout_mod) {
                throw ConfigError("operand range too small for the held-out split");
            }
            continue;
        }
        out.push_back(make_math_prompt(op, xy->first, xy->second, "arith-" + std::to_string(out.size())));
    }
    return out;
}

template <class Scalar>
std::pair<TokenBatch, std::vector<int>> prompts_to_batch(const BasicToyLM<Scalar>& model,
                                                         std::span<const PromptRecord> prompts) {
    std::vector<std::vector<int>> seqs;
    std::vector<int> targets;
    for (const auto& p : prompts) {
        seqs.push_back(model.tokenizer().encode(p.tokens));
        targets.push_back(p.target ? static_cast<int>(*p.target) : -1);
    }
    return {TokenBatch::from(seqs), targets};
}

// Argmax next-token prediction at the last position of each prompt.
template <class Scalar>
std::vector<int> predict_last(const BasicToyLM<Scalar>& model, std::span<const PromptRecord> prompts,
                              const std::set<int>& skip = {}, std::size_t chunk = 512) {
    std::vector<int> out;
    out.reserve(prompts.size());
    for (std::size_t s = 0; s < prompts.size(); s += chunk) {
        const auto part = prompts.subspan(s, std::min(chunk, prompts.size() - s));
        const auto [batch, _] = prompts_to_batch(model, part);
        const auto logits = model.forward_skip(batch, skip);
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            Eigen::Index arg;
            logits.row(i).maxCoeff(&arg);
            out.push_back(static_cast<int>(arg));
        }
    }
    return out;
}

template <class Scalar>
double answer_accuracy(const BasicToyLM<Scalar>& model, std::span<const PromptRecord> prompts,
                       const std::set<int>& skip = {}) {
    if (prompts.empty()) {
        return 0.0;
    }
    const auto pred = predict_last(model, prompts, skip);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        hit += prompts[i].target && pred[i] == *prompts[i].target;
    }
    return static_cast<double>(hit) / static_cast<double>(prompts.size());
}

// Next-token cross-entropy on "x1 OP x2 =" with the answer as target; AdamW with
// linear warmup and cosine decay. Eval uses operand pairs never seen in training.
inline ToyTrainMetrics train_arithmetic(ToyLM& model, MathOp op, OperandRange range, const ToyTrainConfig& cfg,
                                        const std::function<void(std::size_t, double)>& on_log = {},
                                        std::size_t log_every = 500) {
    cfg.validate();
    const auto eval_set = arithmetic_prompts(op, range, cfg.eval_size, true, cfg, 1);
    const auto train_probe = arithmetic_prompts(op, range, cfg.eval_size, false, cfg, 2);
    Adam opt(model.parameter_count(), cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay);
    std::vector<float> grad(model.parameter_count());
    ToyTrainMetrics m;
    double window = 0;
    std::size_t window_n = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const double warm = std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(std::max<std::size_t>(cfg.warmup, 1)));
        const double decay = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(cfg.steps)));
        opt.set_learning_rate(cfg.learning_rate * warm * decay);
        const auto prompts = arithmetic_prompts(op, range, cfg.batch_size, false, cfg, 1000 + step);
        const auto [batch, targets] = prompts_to_batch(model, std::span<const PromptRecord>(prompts));
        const double loss = model.loss_and_gradient(batch, targets, grad);
        if (!std::isfinite(loss)) {
            throw DivergenceError(static_cast<int>(step + 1), "toy model loss is not finite");
        }
        opt.step(model.parameters(), std::span<const float>(grad));
        window += loss;
        ++window_n;
        m.final_loss = loss;
        if ((step + 1) % log_every == 0 || step + 1 == cfg.steps) {
            m.loss_curve.emplace_back(step + 1, window / static_cast<double>(window_n));
            if (on_log) {
                on_log(step + 1, window / static_cast<double>(window_n));
            }
            window = 0;
            window_n = 0;
        }
    }
    m.steps = cfg.steps;
    m.eval_accuracy = answer_accuracy(model, std::span<const PromptRecord>(eval_set));
    m.train_accuracy = answer_accuracy(model, std::span<const PromptRecord>(train_probe));
    return m;
}

}  // namespace numprobe
