#pragma once

#include <algorithm>
#include <limits>

#include "capslab/tensor.hpp"

// Chamfer distance between 2D point sets (symmetric, mean-aggregated,
// squared Euclidean) and least-squares similarity alignment of an embedding
// onto the 9x9 shift lattice before scoring it.

namespace capslab {

/// CD(a,b) = mean_p min_q ||p-q||^2 + mean_q min_p ||q-p||^2.
inline Real chamfer_distance(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != 2 || b.extent(1) != 2)
        throw ShapeError("chamfer_distance expects [N,2] point sets");

    auto one_sided = [](const Tensor& from, const Tensor& to) {
        Real total = 0;
        for (std::size_t i = 0; i < from.extent(0); ++i) {
            Real best = std::numeric_limits<Real>::max();
            for (std::size_t j = 0; j < to.extent(0); ++j) {
                const Real dx = from(i, 0) - to(j, 0), dy = from(i, 1) - to(j, 1);
                best = std::min(best, dx * dx + dy * dy);
            }
            total += best;
        }
        return total / static_cast<Real>(from.extent(0));
    };
    return one_sided(a, b) + one_sided(b, a);
}

/// Ground-truth movement lattice, rows ordered by (dr+radius)*side+(dc+radius)
/// to match the shift-grid record order.
inline Tensor shift_lattice(int radius = 4) {
    const std::size_t side = 2 * static_cast<std::size_t>(radius) + 1;
    Tensor t({side * side, 2});
    for (std::size_t k = 0; k < side * side; ++k) {
        t(k, 0) = static_cast<Real>(static_cast<int>(k / side) - radius);
        t(k, 1) = static_cast<Real>(static_cast<int>(k % side) - radius);
    }
    return t;
}

struct Alignment {
    Tensor points;  // source points mapped into the reference frame
    Real scale = 1;
    Real theta = 0;  // radians, applied after optional reflection
    bool reflected = false;
};

/// Least-squares similarity registration: center both sets, then find the
/// rotation (plus optional reflection) and uniform scale minimizing
/// sum ||s R x - y||^2 in closed form.
inline Alignment similarity_align(const Tensor& src, const Tensor& ref) {
    if (src.rank() != 2 || ref.rank() != 2 || src.extent(1) != 2 || ref.extent(1) != 2)
        throw ShapeError("similarity_align expects [N,2] point sets");
    const std::size_t n = src.extent(0);
    if (n == 0 || ref.extent(0) != n)
        throw std::invalid_argument("similarity_align: point counts differ (" + std::to_string(n) +
                                    " vs " + std::to_string(ref.extent(0)) + ")");

    Real sx = 0, sy = 0, rx = 0, ry = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += src(i, 0);
        sy += src(i, 1);
        rx += ref(i, 0);
        ry += ref(i, 1);
    }
    sx /= static_cast<Real>(n);
    sy /= static_cast<Real>(n);
    rx /= static_cast<Real>(n);
    ry /= static_cast<Real>(n);

    // Correlations for the direct and the reflected (x2 -> -x2) branch; the
    // branch with the larger correlation norm has the smaller residual.
    Real a = 0, b = 0, ar = 0, br = 0, norm = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real x1 = src(i, 0) - sx, x2 = src(i, 1) - sy;
        const Real y1 = ref(i, 0) - rx, y2 = ref(i, 1) - ry;
        a += x1 * y1 + x2 * y2;
        b += x1 * y2 - x2 * y1;
        ar += x1 * y1 - x2 * y2;
        br += x1 * y2 + x2 * y1;
        norm += x1 * x1 + x2 * x2;
    }
    if (norm == 0)
        throw std::invalid_argument("similarity_align: source points identical (zero variance)");

    Alignment out;
    out.reflected = ar * ar + br * br > a * a + b * b;
    const Real ca = out.reflected ? ar : a;
    const Real cb = out.reflected ? br : b;
    out.theta = std::atan2(cb, ca);
    out.scale = std::sqrt(ca * ca + cb * cb) / norm;

    const Real c = std::cos(out.theta), s = std::sin(out.theta);
    out.points = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        const Real x1 = src(i, 0) - sx;
        const Real x2 = (src(i, 1) - sy) * (out.reflected ? Real{-1} : Real{1});
        out.points(i, 0) = out.scale * (c * x1 - s * x2) + rx;
        out.points(i, 1) = out.scale * (s * x1 + c * x2) + ry;
    }
    return out;
}

/// Chamfer distance after similarity alignment onto the reference lattice.
/// With align=false both sets are only centered and RMS-normalized instead
/// (the rotation-sensitive variant).
inline Real aligned_grid_cd(const Tensor& embedding, const Tensor& lattice, bool align = true) {
    if (embedding.rank() != 2 || embedding.extent(1) != 2)
        throw ShapeError("aligned_grid_cd expects [N,2] embeddings");
    if (embedding.extent(0) != lattice.extent(0))
        throw std::invalid_argument("aligned_grid_cd: embedding has " +
                                    std::to_string(embedding.extent(0)) + " points, lattice " +
                                    std::to_string(lattice.extent(0)));
    if (align) return chamfer_distance(similarity_align(embedding, lattice).points, lattice);

    auto z_normalized = [](const Tensor& pts) {
        const std::size_t n = pts.extent(0);
        Real cx = 0, cy = 0;
        for (std::size_t i = 0; i < n; ++i) {
            cx += pts(i, 0);
            cy += pts(i, 1);
        }
        cx /= static_cast<Real>(n);
        cy /= static_cast<Real>(n);
        Real ss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Real x = pts(i, 0) - cx, y = pts(i, 1) - cy;
            ss += x * x + y * y;
        }
        const Real rms = std::sqrt(ss / static_cast<Real>(n));
        if (rms == 0) throw std::invalid_argument("aligned_grid_cd: zero-variance point set");
        Tensor out({n, 2});
        for (std::size_t i = 0; i < n; ++i) {
            out(i, 0) = (pts(i, 0) - cx) / rms;
            out(i, 1) = (pts(i, 1) - cy) / rms;
        }
        return out;
    };
    return chamfer_distance(z_normalized(embedding), z_normalized(lattice));
}

}  // namespace capslab
