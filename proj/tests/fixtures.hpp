#pragma once

// Synthetic fixtures shared by unit tests and the acceptance runner.

#include <cmath>

#include <Eigen/QR>

#include "numprobe/actstore.hpp"
#include "numprobe/probes.hpp"
#include "numprobe/rng.hpp"
#include "numprobe/spectra.hpp"

namespace fixtures {

using namespace numprobe;

inline RowMatrix random_orthogonal(std::size_t n, Rng& rng) {
    RowMatrix g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        g.data()[i] = rng.normal();
    }
    Eigen::HouseholderQR<RowMatrix> qr(g);
    RowMatrix q = qr.householderQ();
    // Fix column signs so the draw is Haar-distributed.
    const RowMatrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
        if (r(j, j) < 0) {
            q.col(j) *= -1.0;
        }
    }
    return q;
}

// x(c) = R enc(c) + N(0, sigma^2), `per_value` rows for each c < C.
inline ActivationSet sinusoidal_activations(std::size_t n_classes, std::size_t m, std::size_t per_value, double sigma,
                                            std::uint64_t seed) {
    Rng rng(seed);
    const auto basis = build_sin_basis(n_classes, m);
    const RowMatrix R = random_orthogonal(m, rng);
    ActivationSet s;
    s.model_id = "synthetic";
    s.layer = 0;
    s.site = Site::residual_out;
    s.vectors = Matrix(0, m);
    std::vector<double> row(m);
    for (std::size_t c = 0; c < n_classes; ++c) {
        const Eigen::Map<const Eigen::VectorXd> e(basis.S.row(c).data(), static_cast<Eigen::Index>(m));
        const Eigen::VectorXd x = R * e;
        for (std::size_t k = 0; k < per_value; ++k) {
            for (std::size_t j = 0; j < m; ++j) {
                row[j] = x(static_cast<Eigen::Index>(j)) + sigma * rng.normal();
            }
            s.append(row, static_cast<int>(c),
                     {"c" + std::to_string(c) + "_" + std::to_string(k), 0, "synthetic", "p" + std::to_string(c)});
        }
    }
    return s;
}

// Rows v -> R [a_1 sin(2 pi f_1 v / n), a_2 sin(2 pi f_2 v / n), ..., 0, ...].
inline EmbeddingTable planted_table(std::size_t n, std::size_t d, const std::vector<std::pair<int, double>>& freqs,
                                    std::uint64_t seed, double noise = 0.0) {
    Rng rng(seed);
    const RowMatrix R = random_orthogonal(d, rng);
    RowMatrix raw = RowMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t v = 0; v < n; ++v) {
        for (std::size_t j = 0; j < freqs.size(); ++j) {
            raw(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) =
                freqs[j].second * std::sin(2 * M_PI * freqs[j].first * static_cast<double>(v) / static_cast<double>(n));
        }
        for (std::size_t j = 0; j < d; ++j) {
            raw(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) += noise * rng.normal();
        }
    }
    return EmbeddingTable::numeric("planted", Matrix::from_eigen(raw * R.transpose()));
}

}  // namespace fixtures
