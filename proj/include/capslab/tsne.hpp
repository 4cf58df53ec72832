#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <string>

#include "capslab/rng.hpp"
#include "capslab/tensor.hpp"

// Exact (quadratic) t-SNE into R^2: Gaussian input affinities with per-point
// bandwidths solved by bisection to a target perplexity, symmetrized joint P,
// Student-t low-dimensional kernel, gradient descent with early exaggeration
// and two-stage momentum. Fully deterministic for a fixed seed.

namespace capslab {

struct TsneSettings {
    Real perplexity = 10;
    std::size_t iters = 1000;
    std::uint64_t seed = 0;
    Real exaggeration = 4;
    std::size_t exaggeration_iters = 100;
    Real learning_rate = 100;
    Real momentum_early = 0.5, momentum_late = 0.8;
    std::size_t momentum_switch = 250;
};

struct EmbeddingResult {
    Tensor points;  // [N,2]
    std::string tap_name;
    TsneSettings settings;
    Real kl_after_exaggeration = 0;  // against the true (un-exaggerated) P
    Real final_kl = 0;
};

namespace detail {

inline Tensor pairwise_sq_dists(const Tensor& x) {
    const std::size_t n = x.extent(0), f = x.extent(1);
    Tensor d({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            Real s = 0;
            for (std::size_t k = 0; k < f; ++k) {
                const Real diff = x(i, k) - x(j, k);
                s += diff * diff;
            }
            d(i, j) = d(j, i) = s;
        }
    return d;
}

/// Row-stochastic conditional affinities p_{j|i}; each row's bandwidth is
/// bisected until exp(H(P_i)) hits the target perplexity within 1e-5.
inline Tensor conditional_affinities(const Tensor& d, Real perplexity) {
    const std::size_t n = d.extent(0);
    Tensor p({n, n});
    std::vector<Real> e(n);
    for (std::size_t i = 0; i < n; ++i) {
        // Shift distances so exp() stays in range at any beta.
        Real dmin = std::numeric_limits<Real>::max();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dmin = std::min(dmin, d(i, j));

        Real beta = 1, lo = 0, hi = std::numeric_limits<Real>::infinity();
        Real perp = 0;
        for (int iter = 0; iter < 200; ++iter) {
            Real sum = 0;
            for (std::size_t j = 0; j < n; ++j) {
                e[j] = j == i ? Real{0} : std::exp(-beta * (d(i, j) - dmin));
                sum += e[j];
            }
            Real entropy = 0;  // nats
            for (std::size_t j = 0; j < n; ++j) {
                const Real pj = e[j] / sum;
                if (pj > 0) entropy -= pj * std::log(pj);
            }
            perp = std::exp(entropy);
            if (std::abs(perp - perplexity) < 1e-5) break;
            if (perp > perplexity) {  // too flat: narrow the kernel
                lo = beta;
                beta = std::isinf(hi) ? beta * 2 : (lo + hi) / 2;
            } else {
                hi = beta;
                beta = (lo + hi) / 2;
            }
        }
        if (std::abs(perp - perplexity) > 1e-3)
            throw std::runtime_error("t-SNE bandwidth search failed for point " + std::to_string(i) +
                                     " (reached perplexity " + std::to_string(perp) + ")");
        Real sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            e[j] = j == i ? Real{0} : std::exp(-beta * (d(i, j) - dmin));
            sum += e[j];
        }
        for (std::size_t j = 0; j < n; ++j) p(i, j) = e[j] / sum;
    }
    return p;
}

/// Symmetrized joint affinities: (P + P^T) / 2N, floored at 1e-12.
inline Tensor joint_affinities(const Tensor& x, Real perplexity) {
    const Tensor cond = conditional_affinities(pairwise_sq_dists(x), perplexity);
    const std::size_t n = cond.extent(0);
    Tensor p({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            p(i, j) = std::max((cond(i, j) + cond(j, i)) / (2 * static_cast<Real>(n)), Real{1e-12});
    for (std::size_t i = 0; i < n; ++i) p(i, i) = 0;
    return p;
}

inline Real standard_normal(Rng& rng) {
    const Real u1 = (static_cast<Real>(rng() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    const Real u2 = static_cast<Real>(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2 * std::log(u1)) * std::cos(2 * std::numbers::pi_v<Real> * u2);
}

/// KL(P || Q) for the Student-t kernel at the current layout.
inline Real tsne_kl(const Tensor& p, const Tensor& y) {
    const std::size_t n = y.extent(0);
    Real z = 0;
    Tensor w({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const Real dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
            const Real t = 1 / (1 + dx * dx + dy * dy);
            w(i, j) = w(j, i) = t;
            z += 2 * t;
        }
    Real kl = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const Real q = std::max(w(i, j) / z, Real{1e-12});
            kl += p(i, j) * std::log(p(i, j) / q);
        }
    return kl;
}

}  // namespace detail

inline EmbeddingResult tsne_embed(const Tensor& reprs, const TsneSettings& settings = {},
                                  const std::string& tap_name = "") {
    if (reprs.rank() != 2) throw ShapeError("tsne_embed expects [N,F], got " + shape_str(reprs.shape()));
    const std::size_t n = reprs.extent(0);
    if (n < 4) throw std::invalid_argument("tsne_embed needs at least 4 points");
    if (!(settings.perplexity > 0) || settings.perplexity >= static_cast<Real>(n))
        throw std::invalid_argument("perplexity must lie in (0, N)");
    if (!reprs.all_finite()) throw std::invalid_argument("tsne_embed: non-finite input");

    const Tensor d = detail::pairwise_sq_dists(reprs);
    if (max_abs_of(d) == 0)
        throw std::invalid_argument("tsne_embed: all points identical (zero variance)");

    const Tensor cond = detail::conditional_affinities(d, settings.perplexity);
    Tensor p({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            p(i, j) = std::max((cond(i, j) + cond(j, i)) / (2 * static_cast<Real>(n)), Real{1e-12});
    for (std::size_t i = 0; i < n; ++i) p(i, i) = 0;

    Rng rng(derive_seed(settings.seed, 0x74736e65));
    Tensor y({n, 2});
    for (std::size_t k = 0; k < y.numel(); ++k) y[k] = 1e-2 * detail::standard_normal(rng);
    Tensor y_prev = y;

    EmbeddingResult result;
    Tensor w({n, n});
    Tensor grad({n, 2});
    for (std::size_t iter = 0; iter < settings.iters; ++iter) {
        const bool exaggerate = iter < settings.exaggeration_iters;
        const Real pscale = exaggerate ? settings.exaggeration : Real{1};

        Real z = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const Real dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
                const Real t = 1 / (1 + dx * dx + dy * dy);
                w(i, j) = w(j, i) = t;
                z += 2 * t;
            }

        grad.fill(0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const Real q = std::max(w(i, j) / z, Real{1e-12});
                const Real mult = 4 * (pscale * p(i, j) - q) * w(i, j);
                grad(i, 0) += mult * (y(i, 0) - y(j, 0));
                grad(i, 1) += mult * (y(i, 1) - y(j, 1));
            }

        const Real momentum =
            iter < settings.momentum_switch ? settings.momentum_early : settings.momentum_late;
        Real cx = 0, cy = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Real vx = momentum * (y(i, 0) - y_prev(i, 0)) - settings.learning_rate * grad(i, 0);
            const Real vy = momentum * (y(i, 1) - y_prev(i, 1)) - settings.learning_rate * grad(i, 1);
            y_prev(i, 0) = y(i, 0);
            y_prev(i, 1) = y(i, 1);
            y(i, 0) += vx;
            y(i, 1) += vy;
            cx += y(i, 0);
            cy += y(i, 1);
        }
        cx /= static_cast<Real>(n);
        cy /= static_cast<Real>(n);
        for (std::size_t i = 0; i < n; ++i) {
            y(i, 0) -= cx;
            y(i, 1) -= cy;
        }

        if (iter + 1 == settings.exaggeration_iters)
            result.kl_after_exaggeration = detail::tsne_kl(p, y);
    }
    if (!y.all_finite()) throw std::runtime_error("tsne_embed: layout diverged to non-finite values");

    result.points = std::move(y);
    result.tap_name = tap_name;
    result.settings = settings;
    result.final_kl = detail::tsne_kl(p, result.points);
    return result;
}

inline EmbeddingResult tsne_embed(const Tensor& reprs, Real perplexity, std::size_t iters,
                                  std::uint64_t seed, const std::string& tap_name = "") {
    TsneSettings s;
    s.perplexity = perplexity;
    s.iters = iters;
    s.seed = seed;
    return tsne_embed(reprs, s, tap_name);
}

/// CSV rows (grid_dr, grid_dc, x, y) for an embedding of a shift grid whose
/// records are ordered by the grid index (dr+radius)*(2*radius+1)+(dc+radius).
inline void write_embedding_csv(const std::filesystem::path& path, const EmbeddingResult& emb,
                                int radius = 4) {
    const std::size_t side = 2 * static_cast<std::size_t>(radius) + 1;
    if (emb.points.extent(0) != side * side)
        throw ShapeError("embedding has " + std::to_string(emb.points.extent(0)) +
                         " points, grid wants " + std::to_string(side * side));
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << std::setprecision(std::numeric_limits<Real>::max_digits10);
    out << "grid_dr,grid_dc,x,y\n";
    for (std::size_t k = 0; k < side * side; ++k) {
        const int dr = static_cast<int>(k / side) - radius;
        const int dc = static_cast<int>(k % side) - radius;
        out << dr << ',' << dc << ',' << emb.points(k, 0) << ',' << emb.points(k, 1) << '\n';
    }
}

}  // namespace capslab
