#pragma once

#include <algorithm>
#include <cmath>

#include "capslab/tape.hpp"

// Differentiable primitives. Every op validates shapes, computes the forward
// value eagerly and records a closure that pulls the output adjoint and pushes
// accumulated contributions into its inputs' gradient buffers.

namespace capslab {

namespace detail {

template <typename S>
void check_same_tape(const BasicVar<S>& a, const BasicVar<S>& b) {
    if (a.tape != b.tape) throw AutodiffError("operands recorded on different tapes");
}

/// squash scale f(n2) = n2 / ((1+n2) * sqrt(n2+eps)) and its derivative wrt n2.
template <typename S>
inline void squash_scale(S n2, S eps, S& f, S& df) {
    const S r = std::sqrt(n2 + eps);
    const S inv1 = S{1} / (S{1} + n2);
    f = n2 * inv1 / r;
    // df = f * (1/n2 - 1/(1+n2) - 1/(2(n2+eps))), with f/n2 expanded to stay finite at 0
    df = inv1 / r - f * inv1 - f / (S{2} * (n2 + eps));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
BasicVar<S> add(BasicVar<S> a, BasicVar<S> b) {
    detail::check_same_tape(a, b);
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (!av.same_shape(bv))
        throw ShapeError("add: shape " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    BasicTensor<S> out = av;
    out += bv;
    return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        t.grad_buf(a) += g;
        t.grad_buf(b) += g;
    });
}

/// out = alpha*a + beta*b (elementwise, same shape)
template <typename S>
BasicVar<S> axpby(S alpha, BasicVar<S> a, S beta, BasicVar<S> b) {
    detail::check_same_tape(a, b);
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (!av.same_shape(bv))
        throw ShapeError("axpby: shape " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    BasicTensor<S> out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = alpha * av[i] + beta * bv[i];
    return t.record(std::move(out), {a.id, b.id},
                    [a = a.id, b = b.id, alpha, beta](BasicTape<S>& t, VarId o) {
                        const auto& g = t.grad(o);
                        auto& ga = t.grad_buf(a);
                        auto& gb = t.grad_buf(b);
                        for (std::size_t i = 0; i < g.numel(); ++i) {
                            ga[i] += alpha * g[i];
                            gb[i] += beta * g[i];
                        }
                    });
}

template <typename S>
BasicVar<S> mul(BasicVar<S> a, BasicVar<S> b) {
    detail::check_same_tape(a, b);
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (!av.same_shape(bv))
        throw ShapeError("mul: shape " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    BasicTensor<S> out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        auto& ga = t.grad_buf(a);
        auto& gb = t.grad_buf(b);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i] * bv[i];
            gb[i] += g[i] * av[i];
        }
    });
}

/// out = k*a + c (scalar affine)
template <typename S>
BasicVar<S> affine(BasicVar<S> a, S k, S c) {
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    BasicTensor<S> out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = k * av[i] + c;
    return t.record(std::move(out), {a.id}, [a = a.id, k](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        auto& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += k * g[i];
    });
}

template <typename S>
BasicVar<S> relu(BasicVar<S> a) {
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    BasicTensor<S> out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] > S{0} ? av[i] : S{0};
    return t.record(std::move(out), {a.id}, [a = a.id](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        const auto& av = t.value(a);
        auto& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (av[i] > S{0}) ga[i] += g[i];
    });
}

template <typename S>
BasicVar<S> sigmoid(BasicVar<S> a) {
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    BasicTensor<S> out(av.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = S{1} / (S{1} + std::exp(-av[i]));
    return t.record(std::move(out), {a.id}, [a = a.id](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        const auto& y = t.value(o);
        auto& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (S{1} - y[i]);
    });
}

template <typename S>
BasicVar<S> reshape(BasicVar<S> a, Shape shape) {
    auto& t = *a.tape;
    BasicTensor<S> out = t.value(a.id).reshaped(std::move(shape));
    return t.record(std::move(out), {a.id}, [a = a.id](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        auto& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
BasicVar<S> sum(BasicVar<S> a) {
    auto& t = *a.tape;
    BasicTensor<S> out(Shape{1});
    out[0] = sum_of(t.value(a.id));
    return t.record(std::move(out), {a.id}, [a = a.id](BasicTape<S>& t, VarId o) {
        const S g = t.grad(o)[0];
        auto& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

/// Euclidean norms of the rows of an [N,D] tensor.
template <typename S>
BasicVar<S> row_norms(BasicVar<S> a) {
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    if (av.rank() != 2) throw ShapeError("row_norms expects rank-2 input, got " + shape_str(av.shape()));
    const std::size_t n = av.extent(0), d = av.extent(1);
    BasicTensor<S> out(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        S s2{0};
        for (std::size_t k = 0; k < d; ++k) s2 += av(i, k) * av(i, k);
        out[i] = std::sqrt(s2);
    }
    return t.record(std::move(out), {a.id}, [a = a.id, n, d](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        const auto& av = t.value(a);
        const auto& y = t.value(o);
        auto& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < n; ++i) {
            const S denom = std::max(y[i], S{1e-30});
            const S gi = g[i] / denom;
            for (std::size_t k = 0; k < d; ++k) ga(i, k) += gi * av(i, k);
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename S>
BasicVar<S> matmul(BasicVar<S> a, BasicVar<S> b) {
    detail::check_same_tape(a, b);
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(0))
        throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const std::size_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
    BasicTensor<S> out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const S aip = av(i, p);
            const S* brow = &bv(p, std::size_t{0});
            S* orow = &out(i, std::size_t{0});
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    return t.record(std::move(out), {a.id, b.id},
                    [a = a.id, b = b.id, m, k, n](BasicTape<S>& t, VarId o) {
                        const auto& g = t.grad(o);
                        const auto& av = t.value(a);
                        const auto& bv = t.value(b);
                        auto& ga = t.grad_buf(a);
                        auto& gb = t.grad_buf(b);
                        // dA = G * B^T
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                                S acc{0};
                                const S* grow = &g(i, std::size_t{0});
                                const S* brow = &bv(p, std::size_t{0});
                                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                ga(i, p) += acc;
                            }
                        // dB = A^T * G
                        for (std::size_t p = 0; p < k; ++p)
                            for (std::size_t i = 0; i < m; ++i) {
                                const S aip = av(i, p);
                                const S* grow = &g(i, std::size_t{0});
                                S* gbrow = &gb(p, std::size_t{0});
                                for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                            }
                    });
}

/// Valid (no padding) 2D cross-correlation of [Ci,H,W] with kernels [Co,Ci,kH,kW].
template <typename S>
BasicVar<S> conv2d(BasicVar<S> input, BasicVar<S> kernels, std::size_t stride) {
    detail::check_same_tape(input, kernels);
    auto& t = *input.tape;
    const auto& in = t.value(input.id);
    const auto& k = t.value(kernels.id);
    if (in.rank() != 3 || k.rank() != 4)
        throw ShapeError("conv2d: input " + shape_str(in.shape()) + ", kernels " + shape_str(k.shape()));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t ci = in.extent(0), h = in.extent(1), w = in.extent(2);
    const std::size_t co = k.extent(0), kh = k.extent(2), kw = k.extent(3);
    if (k.extent(1) != ci)
        throw ShapeError("conv2d: input channels " + std::to_string(ci) + " vs kernel channels " +
                         std::to_string(k.extent(1)));
    if (kh > h || kw > w)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than input " + std::to_string(h) + "x" + std::to_string(w));
    const std::size_t ho = (h - kh) / stride + 1, wo = (w - kw) / stride + 1;

    BasicTensor<S> out(Shape{co, ho, wo});
    for (std::size_t c = 0; c < co; ++c)
        for (std::size_t e = 0; e < ci; ++e)
            for (std::size_t y = 0; y < kh; ++y)
                for (std::size_t x = 0; x < kw; ++x) {
                    const S kv = k(c, e, y, x);
                    for (std::size_t r = 0; r < ho; ++r) {
                        const S* irow = &in(e, r * stride + y, x);
                        S* orow = &out(c, r, std::size_t{0});
                        for (std::size_t q = 0; q < wo; ++q) orow[q] += kv * irow[q * stride];
                    }
                }

    return t.record(
        std::move(out), {input.id, kernels.id},
        [in_id = input.id, k_id = kernels.id, stride, ci, co, kh, kw, ho, wo](BasicTape<S>& t, VarId o) {
            const auto& g = t.grad(o);
            const auto& in = t.value(in_id);
            const auto& k = t.value(k_id);
            auto& gin = t.grad_buf(in_id);
            auto& gk = t.grad_buf(k_id);
            for (std::size_t c = 0; c < co; ++c)
                for (std::size_t e = 0; e < ci; ++e)
                    for (std::size_t y = 0; y < kh; ++y)
                        for (std::size_t x = 0; x < kw; ++x) {
                            const S kv = k(c, e, y, x);
                            S acc{0};
                            for (std::size_t r = 0; r < ho; ++r) {
                                const S* irow = &in(e, r * stride + y, x);
                                S* girow = &gin(e, r * stride + y, x);
                                const S* grow = &g(c, r, std::size_t{0});
                                for (std::size_t q = 0; q < wo; ++q) {
                                    acc += irow[q * stride] * grow[q];
                                    girow[q * stride] += kv * grow[q];
                                }
                            }
                            gk(c, e, y, x) += acc;
                        }
        });
}

/// Per-channel bias add on a [C,H,W] map.
template <typename S>
BasicVar<S> bias_channels(BasicVar<S> x, BasicVar<S> b) {
    detail::check_same_tape(x, b);
    auto& t = *x.tape;
    const auto& xv = t.value(x.id);
    const auto& bv = t.value(b.id);
    if (xv.rank() != 3 || bv.rank() != 1 || bv.extent(0) != xv.extent(0))
        throw ShapeError("bias_channels: " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
    const std::size_t c = xv.extent(0), hw = xv.extent(1) * xv.extent(2);
    BasicTensor<S> out = xv;
    for (std::size_t i = 0; i < c; ++i) {
        S* row = out.data() + i * hw;
        const S biv = bv[i];
        for (std::size_t j = 0; j < hw; ++j) row[j] += biv;
    }
    return t.record(std::move(out), {x.id, b.id}, [x = x.id, b = b.id, c, hw](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        auto& gx = t.grad_buf(x);
        auto& gb = t.grad_buf(b);
        gx += g;
        for (std::size_t i = 0; i < c; ++i) {
            const S* grow = g.data() + i * hw;
            S acc{0};
            for (std::size_t j = 0; j < hw; ++j) acc += grow[j];
            gb[i] += acc;
        }
    });
}

// ---------------------------------------------------------------------------
// nonlinearities over slices

/// Softmax along `axis`; computed with max subtraction.
template <typename S>
BasicVar<S> softmax(BasicVar<S> a, std::size_t axis) {
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    if (axis >= av.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(av.shape()));
    const std::size_t j = av.extent(axis);
    std::size_t inner = 1, outer = 1;
    for (std::size_t d = axis + 1; d < av.rank(); ++d) inner *= av.extent(d);
    for (std::size_t d = 0; d < axis; ++d) outer *= av.extent(d);

    BasicTensor<S> out(av.shape());
    for (std::size_t ou = 0; ou < outer; ++ou)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = ou * j * inner + in;
            S mx = av[base];
            for (std::size_t q = 1; q < j; ++q) mx = std::max(mx, av[base + q * inner]);
            S z{0};
            for (std::size_t q = 0; q < j; ++q) {
                const S e = std::exp(av[base + q * inner] - mx);
                out[base + q * inner] = e;
                z += e;
            }
            const S invz = S{1} / z;
            for (std::size_t q = 0; q < j; ++q) out[base + q * inner] *= invz;
        }
    return t.record(std::move(out), {a.id}, [a = a.id, j, inner, outer](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        const auto& y = t.value(o);
        auto& ga = t.grad_buf(a);
        for (std::size_t ou = 0; ou < outer; ++ou)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = ou * j * inner + in;
                S dot{0};
                for (std::size_t q = 0; q < j; ++q) dot += g[base + q * inner] * y[base + q * inner];
                for (std::size_t q = 0; q < j; ++q) {
                    const std::size_t ix = base + q * inner;
                    ga[ix] += y[ix] * (g[ix] - dot);
                }
            }
    });
}

constexpr double kSquashEps = 1e-9;

/// squash(s) = (|s|^2 / (1+|s|^2)) * s / sqrt(|s|^2 + eps), applied to the last
/// axis of a rank-1 or rank-2 tensor. Maps zero to zero; output norm < 1.
template <typename S>
BasicVar<S> squash(BasicVar<S> a) {
    auto& t = *a.tape;
    const auto& av = t.value(a.id);
    if (av.rank() != 1 && av.rank() != 2)
        throw ShapeError("squash expects rank 1 or 2, got " + shape_str(av.shape()));
    const std::size_t d = av.extent(av.rank() - 1);
    const std::size_t n = av.numel() / d;
    BasicTensor<S> out(av.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const S* row = av.data() + i * d;
        S* orow = out.data() + i * d;
        S n2{0};
        for (std::size_t q = 0; q < d; ++q) n2 += row[q] * row[q];
        S f, df;
        detail::squash_scale(n2, static_cast<S>(kSquashEps), f, df);
        for (std::size_t q = 0; q < d; ++q) orow[q] = f * row[q];
    }
    return t.record(std::move(out), {a.id}, [a = a.id, n, d](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        const auto& av = t.value(a);
        auto& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < n; ++i) {
            const S* row = av.data() + i * d;
            const S* grow = g.data() + i * d;
            S* garow = ga.data() + i * d;
            S n2{0}, sg{0};
            for (std::size_t q = 0; q < d; ++q) {
                n2 += row[q] * row[q];
                sg += row[q] * grow[q];
            }
            S f, df;
            detail::squash_scale(n2, static_cast<S>(kSquashEps), f, df);
            const S c2 = S{2} * df * sg;
            for (std::size_t q = 0; q < d; ++q) garow[q] += f * grow[q] + c2 * row[q];
        }
    });
}

// ---------------------------------------------------------------------------
// capsule-specific primitives

/// Predictions uhat[i,j,:] = u[i,:] * W[i,j,:,:] for every (lower i, upper j) pair.
template <typename S>
BasicVar<S> capsule_predict(BasicVar<S> u, BasicVar<S> w) {
    detail::check_same_tape(u, w);
    auto& t = *u.tape;
    const auto& uv = t.value(u.id);
    const auto& wv = t.value(w.id);
    if (uv.rank() != 2 || wv.rank() != 4 || wv.extent(0) != uv.extent(0) || wv.extent(2) != uv.extent(1))
        throw ShapeError("capsule_predict: u " + shape_str(uv.shape()) + ", W " + shape_str(wv.shape()));
    const std::size_t ni = uv.extent(0), di = uv.extent(1), nj = wv.extent(1), dj = wv.extent(3);
    BasicTensor<S> out(Shape{ni, nj, dj});
    for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j) {
            S* orow = &out(i, j, std::size_t{0});
            for (std::size_t p = 0; p < di; ++p) {
                const S up = uv(i, p);
                const S* wrow = &wv(i, j, p, std::size_t{0});
                for (std::size_t q = 0; q < dj; ++q) orow[q] += up * wrow[q];
            }
        }
    return t.record(std::move(out), {u.id, w.id},
                    [u = u.id, w = w.id, ni, di, nj, dj](BasicTape<S>& t, VarId o) {
                        const auto& g = t.grad(o);
                        const auto& uv = t.value(u);
                        const auto& wv = t.value(w);
                        auto& gu = t.grad_buf(u);
                        auto& gw = t.grad_buf(w);
                        for (std::size_t i = 0; i < ni; ++i)
                            for (std::size_t j = 0; j < nj; ++j) {
                                const S* grow = &g(i, j, std::size_t{0});
                                for (std::size_t p = 0; p < di; ++p) {
                                    const S up = uv(i, p);
                                    const S* wrow = &wv(i, j, p, std::size_t{0});
                                    S* gwrow = &gw(i, j, p, std::size_t{0});
                                    S acc{0};
                                    for (std::size_t q = 0; q < dj; ++q) {
                                        acc += wrow[q] * grow[q];
                                        gwrow[q] += up * grow[q];
                                    }
                                    gu(i, p) += acc;
                                }
                            }
                    });
}

/// s[j,:] = sum_i c[i,j] * uhat[i,j,:]
template <typename S>
BasicVar<S> combine_predictions(BasicVar<S> uhat, BasicVar<S> c) {
    detail::check_same_tape(uhat, c);
    auto& t = *uhat.tape;
    const auto& uv = t.value(uhat.id);
    const auto& cv = t.value(c.id);
    if (uv.rank() != 3 || cv.rank() != 2 || cv.extent(0) != uv.extent(0) || cv.extent(1) != uv.extent(1))
        throw ShapeError("combine_predictions: uhat " + shape_str(uv.shape()) + ", c " +
                         shape_str(cv.shape()));
    const std::size_t ni = uv.extent(0), nj = uv.extent(1), d = uv.extent(2);
    BasicTensor<S> out(Shape{nj, d});
    for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j) {
            const S cij = cv(i, j);
            const S* urow = &uv(i, j, std::size_t{0});
            S* orow = &out(j, std::size_t{0});
            for (std::size_t q = 0; q < d; ++q) orow[q] += cij * urow[q];
        }
    return t.record(std::move(out), {uhat.id, c.id},
                    [u = uhat.id, c = c.id, ni, nj, d](BasicTape<S>& t, VarId o) {
                        const auto& g = t.grad(o);
                        const auto& uv = t.value(u);
                        const auto& cv = t.value(c);
                        auto& gu = t.grad_buf(u);
                        auto& gc = t.grad_buf(c);
                        for (std::size_t i = 0; i < ni; ++i)
                            for (std::size_t j = 0; j < nj; ++j) {
                                const S cij = cv(i, j);
                                const S* grow = &g(j, std::size_t{0});
                                const S* urow = &uv(i, j, std::size_t{0});
                                S* gurow = &gu(i, j, std::size_t{0});
                                S acc{0};
                                for (std::size_t q = 0; q < d; ++q) {
                                    gurow[q] += cij * grow[q];
                                    acc += urow[q] * grow[q];
                                }
                                gc(i, j) += acc;
                            }
                    });
}

/// a[i,j] = <v[j,:], uhat[i,j,:]>
template <typename S>
BasicVar<S> alignment(BasicVar<S> uhat, BasicVar<S> v) {
    detail::check_same_tape(uhat, v);
    auto& t = *uhat.tape;
    const auto& uv = t.value(uhat.id);
    const auto& vv = t.value(v.id);
    if (uv.rank() != 3 || vv.rank() != 2 || vv.extent(0) != uv.extent(1) || vv.extent(1) != uv.extent(2))
        throw ShapeError("alignment: uhat " + shape_str(uv.shape()) + ", v " + shape_str(vv.shape()));
    const std::size_t ni = uv.extent(0), nj = uv.extent(1), d = uv.extent(2);
    BasicTensor<S> out(Shape{ni, nj});
    for (std::size_t i = 0; i < ni; ++i)
        for (std::size_t j = 0; j < nj; ++j) {
            const S* urow = &uv(i, j, std::size_t{0});
            const S* vrow = &vv(j, std::size_t{0});
            S acc{0};
            for (std::size_t q = 0; q < d; ++q) acc += urow[q] * vrow[q];
            out(i, j) = acc;
        }
    return t.record(std::move(out), {uhat.id, v.id},
                    [u = uhat.id, v = v.id, ni, nj, d](BasicTape<S>& t, VarId o) {
                        const auto& g = t.grad(o);
                        const auto& uv = t.value(u);
                        const auto& vv = t.value(v);
                        auto& gu = t.grad_buf(u);
                        auto& gv = t.grad_buf(v);
                        for (std::size_t i = 0; i < ni; ++i)
                            for (std::size_t j = 0; j < nj; ++j) {
                                const S gij = g(i, j);
                                const S* urow = &uv(i, j, std::size_t{0});
                                const S* vrow = &vv(j, std::size_t{0});
                                S* gurow = &gu(i, j, std::size_t{0});
                                S* gvrow = &gv(j, std::size_t{0});
                                for (std::size_t q = 0; q < d; ++q) {
                                    gurow[q] += gij * vrow[q];
                                    gvrow[q] += gij * urow[q];
                                }
                            }
                    });
}

/// Regroup a [C,H,W] feature map (C = groups*dim) into [(groups*H*W), dim] capsules.
template <typename S>
BasicVar<S> primary_capsules(BasicVar<S> x, std::size_t dim) {
    auto& t = *x.tape;
    const auto& xv = t.value(x.id);
    if (xv.rank() != 3 || dim == 0 || xv.extent(0) % dim != 0)
        throw ShapeError("primary_capsules: map " + shape_str(xv.shape()) + " with capsule dim " +
                         std::to_string(dim));
    const std::size_t groups = xv.extent(0) / dim, h = xv.extent(1), w = xv.extent(2);
    const std::size_t n = groups * h * w;
    BasicTensor<S> out(Shape{n, dim});
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t q = 0; q < w; ++q) {
                const std::size_t cap = (g * h + r) * w + q;
                for (std::size_t p = 0; p < dim; ++p) out(cap, p) = xv(g * dim + p, r, q);
            }
    return t.record(std::move(out), {x.id}, [x = x.id, groups, h, w, dim](BasicTape<S>& t, VarId o) {
        const auto& g = t.grad(o);
        auto& gx = t.grad_buf(x);
        for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t q = 0; q < w; ++q) {
                    const std::size_t cap = (gi * h + r) * w + q;
                    for (std::size_t p = 0; p < dim; ++p) gx(gi * dim + p, r, q) += g(cap, p);
                }
    });
}

// ---------------------------------------------------------------------------
// losses

/// Stable multi-label binary cross-entropy from logits against a constant target vector.
template <typename S>
BasicVar<S> bce_with_logits(BasicVar<S> logits, const BasicTensor<S>& targets) {
    auto& t = *logits.tape;
    const auto& z = t.value(logits.id);
    if (!z.same_shape(targets))
        throw ShapeError("bce_with_logits: logits " + shape_str(z.shape()) + ", targets " +
                         shape_str(targets.shape()));
    BasicTensor<S> out(Shape{1});
    S acc{0};
    for (std::size_t i = 0; i < z.numel(); ++i) {
        const S zi = z[i];
        acc += std::max(zi, S{0}) - zi * targets[i] + std::log1p(std::exp(-std::abs(zi)));
    }
    out[0] = acc;
    return t.record(std::move(out), {logits.id},
                    [l = logits.id, targets](BasicTape<S>& t, VarId o) {
                        const S g = t.grad(o)[0];
                        const auto& z = t.value(l);
                        auto& gl = t.grad_buf(l);
                        for (std::size_t i = 0; i < z.numel(); ++i) {
                            const S p = S{1} / (S{1} + std::exp(-z[i]));
                            gl[i] += g * (p - targets[i]);
                        }
                    });
}

}  // namespace capslab
