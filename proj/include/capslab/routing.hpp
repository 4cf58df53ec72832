#pragma once

#include <stdexcept>
#include <vector>

#include "capslab/ops.hpp"

// Agreement routing between two capsule layers. Coefficients start uniform,
// each iteration combines predictions under the current coefficients, measures
// how well each upper capsule's output aligns with the predictions aimed at it,
// and re-softmaxes the accumulated alignments with a soft update:
//
//   c <- eta * softmax_rows(b) + (1 - eta) * c
//
// The procedure is per sample: b and c are recomputed from zero on every call.

namespace capslab {

enum class RouteGrad { coefficients_constant, full_unroll };

struct RoutingConfig {
    std::size_t n_em = 3;
    Real eta = 1.0;
    RouteGrad grad = RouteGrad::coefficients_constant;

    void validate() const {
        if (!(eta > 0.0 && eta <= 1.0))
            throw std::invalid_argument("routing eta must be in (0, 1], got " + std::to_string(eta));
    }
};

struct RoutingTrace {
    Tensor c;                // [I,J] final association coefficients
    Tensor b;                // [I,J] final accumulated alignments
    Tensor per_row_entropy;  // [I], natural log
    bool all_finite = true;
};

namespace detail {

// Value-land kernels mirroring the taped ops' loop order so both gradient
// modes produce the same forward numbers.

inline void rows_softmax(const Tensor& b, Tensor& out) {
    const std::size_t ni = b.extent(0), nj = b.extent(1);
    for (std::size_t i = 0; i < ni; ++i) {
        Real mx = b(i, std::size_t{0});
        for (std::size_t j = 1; j < nj; ++j) mx = std::max(mx, b(i, j));
        Real z = 0;
        for (std::size_t j = 0; j < nj; ++j) {
            out(i, j) = std::exp(b(i, j) - mx);
            z += out(i, j);
        }
        const Real invz = Real{1} / z;
        for (std::size_t j = 0; j < nj; ++j) out(i, j) *= invz;
    }
}

inline void combine_values(const Tensor& uhat, const Tensor& c, Tensor& s) {
    const std::size_t ni = uhat.extent(0), nj = uhat.extent(1), d = uhat.extent(2);
    s.fill(0);
    for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j) {
            const Real cij = c(i, j);
            for (std::size_t q = 0; q < d; ++q) s(j, q) += cij * uhat(i, j, q);
        }
}

inline void squash_rows(const Tensor& s, Tensor& v) {
    const std::size_t nj = s.extent(0), d = s.extent(1);
    for (std::size_t j = 0; j < nj; ++j) {
        Real n2 = 0;
        for (std::size_t q = 0; q < d; ++q) n2 += s(j, q) * s(j, q);
        Real f, df;
        squash_scale(n2, static_cast<Real>(kSquashEps), f, df);
        for (std::size_t q = 0; q < d; ++q) v(j, q) = f * s(j, q);
    }
}

inline void accumulate_alignment(const Tensor& uhat, const Tensor& v, Tensor& b) {
    const std::size_t ni = uhat.extent(0), nj = uhat.extent(1), d = uhat.extent(2);
    for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j) {
            Real acc = 0;
            for (std::size_t q = 0; q < d; ++q) acc += uhat(i, j, q) * v(j, q);
            b(i, j) += acc;
        }
}

}  // namespace detail

/// Entropy of each row of a coefficient matrix, with 0*ln(0) taken as 0.
inline Tensor row_entropies(const Tensor& c) {
    if (c.rank() != 2) throw ShapeError("row_entropies expects [I,J], got " + shape_str(c.shape()));
    const std::size_t ni = c.extent(0), nj = c.extent(1);
    Tensor h({ni});
    for (std::size_t i = 0; i < ni; ++i) {
        Real acc = 0;
        for (std::size_t j = 0; j < nj; ++j) {
            const Real p = c(i, j);
            if (p > 0) acc -= p * std::log(p);
        }
        h[i] = acc;
    }
    return h;
}

/// Value-only routing pass. Returns final c, b and per-row entropies alongside v.
inline std::pair<Tensor, RoutingTrace> route_values(const Tensor& uhat, const RoutingConfig& cfg) {
    cfg.validate();
    if (uhat.rank() != 3)
        throw ShapeError("route expects predictions [I,J,D], got " + shape_str(uhat.shape()));
    const std::size_t ni = uhat.extent(0), nj = uhat.extent(1), d = uhat.extent(2);

    Tensor b({ni, nj});
    Tensor c = Tensor::full({ni, nj}, Real{1} / static_cast<Real>(nj));
    Tensor chat({ni, nj});
    Tensor s({nj, d}), v({nj, d});

    for (std::size_t r = 0; r < cfg.n_em; ++r) {
        detail::combine_values(uhat, c, s);
        detail::squash_rows(s, v);
        detail::accumulate_alignment(uhat, v, b);
        detail::rows_softmax(b, chat);
        for (std::size_t k = 0; k < c.numel(); ++k)
            c[k] = cfg.eta * chat[k] + (Real{1} - cfg.eta) * c[k];
    }
    detail::combine_values(uhat, c, s);
    detail::squash_rows(s, v);

    RoutingTrace trace{c, b, row_entropies(c), uhat.all_finite() && v.all_finite()};
    return {std::move(v), std::move(trace)};
}

/// Taped routing pass recording onto uhat's tape.
///
/// coefficients_constant: iterations run outside the tape and only the final
/// combine + squash is recorded with c as a constant, so gradients reach uhat
/// through s_j = sum_i c_ij uhat_ij but not through the coefficient updates.
/// This matches the detached unroll exactly: with c stopped at every step, all
/// intermediate combine/alignment results feed only coefficient updates, so
/// their adjoints vanish and the final combine is the whole gradient path.
///
/// full_unroll: every iteration is recorded and gradients additionally flow
/// through the softmax/alignment chain; finite differences see this mode.
inline Var route(Var uhat, const RoutingConfig& cfg, RoutingTrace* trace_out = nullptr) {
    cfg.validate();
    Tape& tape = *uhat.tape;
    // recording ops can reallocate the tape's node storage, so anything needed
    // from the input value is captured here rather than held by reference
    std::size_t ni, nj;
    bool in_finite;
    {
        const Tensor& uv = uhat.value();
        if (uv.rank() != 3)
            throw ShapeError("route expects predictions [I,J,D], got " + shape_str(uv.shape()));
        ni = uv.extent(0);
        nj = uv.extent(1);
        in_finite = uv.all_finite();
    }

    if (cfg.grad == RouteGrad::coefficients_constant) {
        auto [v, trace] = route_values(uhat.value(), cfg);
        (void)v;
        Var c = tape.constant(trace.c);
        Var out = squash(combine_predictions(uhat, c));
        if (trace_out) *trace_out = std::move(trace);
        return out;
    }

    Var b = tape.constant(Tensor({ni, nj}));
    Var c = tape.constant(Tensor::full({ni, nj}, Real{1} / static_cast<Real>(nj)));
    for (std::size_t r = 0; r < cfg.n_em; ++r) {
        Var v = squash(combine_predictions(uhat, c));
        b = add(b, alignment(uhat, v));
        Var chat = softmax(b, 1);
        c = axpby(cfg.eta, chat, Real{1} - cfg.eta, c);
    }
    Var out = squash(combine_predictions(uhat, c));
    if (trace_out) {
        const Tensor cv = c.value();
        *trace_out = RoutingTrace{cv, b.value(), row_entropies(cv),
                                  in_finite && out.value().all_finite()};
    }
    return out;
}

enum class EntropyNorm { per_row, paper_second_line };

/// Mean association entropy over a batch of routing traces: the average of the
/// per-row entropies across all rows of all traces. The alternative norm
/// divides by an extra J, reproducing a variant normalization.
inline Real mean_association_entropy(const std::vector<RoutingTrace>& traces,
                                     EntropyNorm norm = EntropyNorm::per_row) {
    if (traces.empty())
        throw std::invalid_argument("mean_association_entropy: empty batch of traces");
    const std::size_t ni = traces.front().c.extent(0), nj = traces.front().c.extent(1);
    Real acc = 0;
    for (const auto& t : traces) {
        if (t.c.extent(0) != ni || t.c.extent(1) != nj)
            throw ShapeError("mean_association_entropy: traces disagree on I or J");
        acc += sum_of(t.per_row_entropy);
    }
    Real h = acc / static_cast<Real>(traces.size() * ni);
    if (norm == EntropyNorm::paper_second_line) h /= static_cast<Real>(nj);
    return h;
}

}  // namespace capslab
