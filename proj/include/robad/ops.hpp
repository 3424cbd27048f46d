#pragma once

// Differentiable operations on robad::Tensor.
//
// Matrices are rank-2 row-major tensors; vectors may be rank 1. Every op
// computes its forward value eagerly and, when recording, registers a
// closure that adds its vector-Jacobian product into the parents' grads.

#include "random.hpp"
#include "tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace robad {

using Mask = std::vector<std::uint8_t>; // nonzero = keep

namespace detail {

inline void require_same_shape(const char *op, const Tensor &a, const Tensor &b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

inline void require_matrix(const char *op, const Tensor &a) {
    if (a.rank() != 2)
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline std::vector<double> &grad_of(Node *n) { return n->grad_buffer(); }

// Dense kernels. Row-major, accumulate into c.

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k,
                    std::size_t n) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(k), b,
                static_cast<int>(n), 1.0, c, static_cast<int>(n));
}

// c[m x k] += a[m x n] * b[k x n]^T
inline void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t n,
                    std::size_t k) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m),
                static_cast<int>(k), static_cast<int>(n), 1.0, a, static_cast<int>(n), b,
                static_cast<int>(n), 1.0, c, static_cast<int>(k));
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k,
                    std::size_t n) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(k),
                static_cast<int>(n), static_cast<int>(m), 1.0, a, static_cast<int>(k), b,
                static_cast<int>(n), 1.0, c, static_cast<int>(n));
}

/// Softmax over the kept entries of one slice; masked slots get exactly 0.
inline void masked_softmax_slice(const double *x, const std::uint8_t *keep, double *out,
                                 std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
        if (!keep || keep[j])
            mx = std::max(mx, x[j]);
    if (mx == -std::numeric_limits<double>::infinity())
        throw ContractError("masked_softmax: slice has no unmasked entry");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        if (!keep || keep[j]) {
            out[j] = std::exp(x[j] - mx);
            z += out[j];
        } else {
            out[j] = 0.0;
        }
    }
    for (std::size_t j = 0; j < n; ++j)
        out[j] /= z;
}

// dx = y * (dy - <y, dy>) over one slice
inline void softmax_slice_backward(const double *y, const double *dy, double *dx, std::size_t n) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        dot += y[j] * dy[j];
    for (std::size_t j = 0; j < n; ++j)
        dx[j] += y[j] * (dy[j] - dot);
}

} // namespace detail

inline Tensor matmul(const Tensor &a, const Tensor &b) {
    detail::require_matrix("matmul", a);
    detail::require_matrix("matmul", b);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto *an = a.node();
    auto *bn = b.node();
    return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [=](detail::Node &o) {
        if (an->requires_grad)
            detail::gemm_nt(o.grad.data(), bn->data.data(), detail::grad_of(an).data(), m, n, k);
        if (bn->requires_grad)
            detail::gemm_tn(an->data.data(), o.grad.data(), detail::grad_of(bn).data(), m, k, n);
    });
}

inline Tensor transpose(const Tensor &a) {
    detail::require_matrix("transpose", a);
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    auto x = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[j * m + i] = x[i * n + j];
    auto *an = a.node();
    return detail::make_result("transpose", {n, m}, std::move(out), {a}, [=](detail::Node &o) {
        auto &g = detail::grad_of(an);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += o.grad[j * m + i];
    });
}

inline Tensor add(const Tensor &a, const Tensor &b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] + b.data()[i];
    auto *an = a.node();
    auto *bn = b.node();
    return detail::make_result("add", a.shape(), std::move(out), {a, b}, [=](detail::Node &o) {
        for (auto *p : {an, bn}) {
            if (!p->requires_grad)
                continue;
            auto &g = detail::grad_of(p);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += o.grad[i];
        }
    });
}

inline Tensor sub(const Tensor &a, const Tensor &b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] - b.data()[i];
    auto *an = a.node();
    auto *bn = b.node();
    return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [=](detail::Node &o) {
        if (an->requires_grad) {
            auto &g = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            auto &g = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= o.grad[i];
        }
    });
}

/// Elementwise product.
inline Tensor mul(const Tensor &a, const Tensor &b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] * b.data()[i];
    auto *an = a.node();
    auto *bn = b.node();
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [=](detail::Node &o) {
        if (an->requires_grad) {
            auto &g = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += o.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto &g = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += o.grad[i] * an->data[i];
        }
    });
}

/// scale * x + shift, elementwise.
inline Tensor affine(const Tensor &x, double scale, double shift = 0.0) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = scale * x.data()[i] + shift;
    auto *xn = x.node();
    return detail::make_result("affine", x.shape(), std::move(out), {x}, [=](detail::Node &o) {
        auto &g = detail::grad_of(xn);
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += scale * o.grad[i];
    });
}

inline Tensor scale(const Tensor &x, double s) { return affine(x, s, 0.0); }

/// x[n x m] + bias[m] broadcast over rows.
inline Tensor add_row(const Tensor &x, const Tensor &bias) {
    detail::require_matrix("add_row", x);
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (bias.numel() != m)
        throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not fit " +
                             shape_str(x.shape()));
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            out[i * m + j] += bias.data()[j];
    auto *xn = x.node();
    auto *bn = bias.node();
    return detail::make_result("add_row", x.shape(), std::move(out), {x, bias},
                               [=](detail::Node &o) {
                                   if (xn->requires_grad) {
                                       auto &g = detail::grad_of(xn);
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                           g[i] += o.grad[i];
                                   }
                                   if (bn->requires_grad) {
                                       auto &g = detail::grad_of(bn);
                                       for (std::size_t i = 0; i < n; ++i)
                                           for (std::size_t j = 0; j < m; ++j)
                                               g[j] += o.grad[i * m + j];
                                   }
                               });
}

inline Tensor sum(const Tensor &x) {
    double s = 0.0;
    for (double v : x.data())
        s += v;
    auto *xn = x.node();
    return detail::make_result("sum", {1}, {s}, {x}, [=](detail::Node &o) {
        auto &g = detail::grad_of(xn);
        for (auto &v : g)
            v += o.grad[0];
    });
}

inline Tensor mean(const Tensor &x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Arithmetic mean along one axis of a matrix (axis 0 collapses rows) or
/// of a vector (axis 0 only).
inline Tensor mean_axis(const Tensor &x, std::size_t axis) {
    if (x.rank() == 1) {
        if (axis != 0)
            throw DimensionError("mean_axis: axis " + std::to_string(axis) + " on a vector");
        return mean(x);
    }
    detail::require_matrix("mean_axis", x);
    if (axis > 1)
        throw DimensionError("mean_axis: axis " + std::to_string(axis) + " on a matrix");
    const std::size_t n = x.dim(0), m = x.dim(1);
    const auto xs = x.data();
    auto *xn = x.node();
    if (axis == 0) {
        std::vector<double> out(m, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                out[j] += xs[i * m + j];
        for (auto &v : out)
            v /= static_cast<double>(n);
        return detail::make_result("mean_axis0", {m}, std::move(out), {x}, [=](detail::Node &o) {
            auto &g = detail::grad_of(xn);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    g[i * m + j] += o.grad[j] / static_cast<double>(n);
        });
    }
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j)
            out[i] += xs[i * m + j];
        out[i] /= static_cast<double>(m);
    }
    return detail::make_result("mean_axis1", {n}, std::move(out), {x}, [=](detail::Node &o) {
        auto &g = detail::grad_of(xn);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                g[i * m + j] += o.grad[i] / static_cast<double>(m);
    });
}

inline Tensor relu(const Tensor &x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    auto *xn = x.node();
    return detail::make_result("relu", x.shape(), std::move(out), {x}, [=](detail::Node &o) {
        auto &g = detail::grad_of(xn);
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += xn->data[i] > 0.0 ? o.grad[i] : 0.0;
    });
}

/// Natural log; inputs must be positive.
inline Tensor log(const Tensor &x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(x.data()[i] > 0.0))
            throw ContractError("log: non-positive input " + std::to_string(x.data()[i]));
        out[i] = std::log(x.data()[i]);
    }
    auto *xn = x.node();
    return detail::make_result("log", x.shape(), std::move(out), {x}, [=](detail::Node &o) {
        auto &g = detail::grad_of(xn);
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += o.grad[i] / xn->data[i];
    });
}

/// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
inline Tensor clamp(const Tensor &x, double lo, double hi) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::clamp(x.data()[i], lo, hi);
    auto *xn = x.node();
    return detail::make_result("clamp", x.shape(), std::move(out), {x}, [=](detail::Node &o) {
        auto &g = detail::grad_of(xn);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xn->data[i] >= lo && xn->data[i] <= hi)
                g[i] += o.grad[i];
    });
}

/// Softmax over the last dimension with max subtraction.
inline Tensor softmax_lastdim(const Tensor &x) {
    const std::size_t m = x.cols();
    const std::size_t n = x.numel() / m;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < n; ++i)
        detail::masked_softmax_slice(x.data().data() + i * m, nullptr, out.data() + i * m, m);
    auto *xn = x.node();
    return detail::make_result("softmax", x.shape(), std::move(out), {x}, [=](detail::Node &o) {
        auto &g = detail::grad_of(xn);
        for (std::size_t i = 0; i < n; ++i)
            detail::softmax_slice_backward(o.data.data() + i * m, o.grad.data() + i * m,
                                           g.data() + i * m, m);
    });
}

/// Softmax over the last dimension restricted to kept entries. Masked slots
/// receive exactly 0; a slice with nothing kept is a ContractError.
inline Tensor masked_softmax(const Tensor &x, const Mask &keep) {
    if (keep.size() != x.numel())
        throw DimensionError("masked_softmax: mask has " + std::to_string(keep.size()) +
                             " entries for shape " + shape_str(x.shape()));
    const std::size_t m = x.cols();
    const std::size_t n = x.numel() / m;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < n; ++i)
        detail::masked_softmax_slice(x.data().data() + i * m, keep.data() + i * m,
                                     out.data() + i * m, m);
    auto *xn = x.node();
    return detail::make_result("masked_softmax", x.shape(), std::move(out), {x},
                               [=](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < n; ++i)
                                       detail::softmax_slice_backward(o.data.data() + i * m,
                                                                      o.grad.data() + i * m,
                                                                      g.data() + i * m, m);
                               });
}

/// log(sum(exp(x))) over the kept entries of each last-dimension slice.
/// Returns one value per slice.
inline Tensor masked_logsumexp(const Tensor &x, const Mask &keep) {
    if (keep.size() != x.numel())
        throw DimensionError("masked_logsumexp: mask size mismatch for " + shape_str(x.shape()));
    const std::size_t m = x.cols();
    const std::size_t n = x.numel() / m;
    std::vector<double> out(n);
    std::vector<double> probs(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        const double *xi = x.data().data() + i * m;
        detail::masked_softmax_slice(xi, keep.data() + i * m, probs.data() + i * m, m);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j)
            if (keep[i * m + j])
                mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            if (keep[i * m + j])
                z += std::exp(xi[j] - mx);
        out[i] = mx + std::log(z);
    }
    auto *xn = x.node();
    return detail::make_result("masked_logsumexp", {n}, std::move(out), {x},
                               [=, probs = std::move(probs)](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < m; ++j)
                                           g[i * m + j] += o.grad[i] * probs[i * m + j];
                               });
}

/// Per-row normalisation to zero mean and unit variance (eps inside the
/// square root), followed by gain * x + bias.
inline Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias,
                         double eps = 1e-5) {
    const std::size_t m = x.cols();
    if (gain.numel() != m || bias.numel() != m)
        throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                             shape_str(bias.shape()) + " do not fit " + shape_str(x.shape()));
    const std::size_t n = x.numel() / m;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(n);
    const auto xs = x.data();
    const auto gs = gain.data();
    const auto bs = bias.data();
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            mu += xs[i * m + j];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double d = xs[i * m + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(m);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < m; ++j) {
            xhat[i * m + j] = (xs[i * m + j] - mu) * inv_std[i];
            out[i * m + j] = gs[j] * xhat[i * m + j] + bs[j];
        }
    }
    auto *xn = x.node();
    auto *gn = gain.node();
    auto *bn = bias.node();
    return detail::make_result(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node &o) {
            const double md = static_cast<double>(m);
            if (gn->requires_grad) {
                auto &g = detail::grad_of(gn);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                        g[j] += o.grad[i * m + j] * xhat[i * m + j];
            }
            if (bn->requires_grad) {
                auto &g = detail::grad_of(bn);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                        g[j] += o.grad[i * m + j];
            }
            if (xn->requires_grad) {
                auto &g = detail::grad_of(xn);
                for (std::size_t i = 0; i < n; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double dxh = o.grad[i * m + j] * gn->data[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i * m + j];
                    }
                    for (std::size_t j = 0; j < m; ++j) {
                        const double dxh = o.grad[i * m + j] * gn->data[j];
                        g[i * m + j] +=
                            inv_std[i] * (dxh - s1 / md - xhat[i * m + j] * s2 / md);
                    }
                }
            }
        });
}

/// u.v / (|u| |v|) over flattened values; both norms must be nonzero.
inline Tensor cosine_sim(const Tensor &u, const Tensor &v) {
    if (u.numel() != v.numel())
        throw DimensionError("cosine_sim: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.numel(); ++i) {
        dot += u.data()[i] * v.data()[i];
        nu += u.data()[i] * u.data()[i];
        nv += v.data()[i] * v.data()[i];
    }
    if (nu == 0.0 || nv == 0.0)
        throw ContractError("cosine_sim: zero-norm vector");
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    const double c = dot / (nu * nv);
    auto *un = u.node();
    auto *vn = v.node();
    return detail::make_result("cosine_sim", {1}, {c}, {u, v}, [=](detail::Node &o) {
        const double go = o.grad[0];
        // d/du = v/(|u||v|) - c u/|u|^2
        if (un->requires_grad) {
            auto &g = detail::grad_of(un);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go * (vn->data[i] / (nu * nv) - c * un->data[i] / (nu * nu));
        }
        if (vn->requires_grad) {
            auto &g = detail::grad_of(vn);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += go * (un->data[i] / (nu * nv) - c * vn->data[i] / (nv * nv));
        }
    });
}

/// Scales each row of a matrix to unit L2 norm; zero rows are an error.
inline Tensor l2_normalize_rows(const Tensor &x) {
    detail::require_matrix("l2_normalize_rows", x);
    const std::size_t n = x.dim(0), m = x.dim(1);
    std::vector<double> out(x.numel());
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            s += x.data()[i * m + j] * x.data()[i * m + j];
        if (s == 0.0)
            throw ContractError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
        norms[i] = std::sqrt(s);
        for (std::size_t j = 0; j < m; ++j)
            out[i * m + j] = x.data()[i * m + j] / norms[i];
    }
    auto *xn = x.node();
    return detail::make_result("l2_normalize_rows", x.shape(), std::move(out), {x},
                               [=, norms = std::move(norms)](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < n; ++i) {
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < m; ++j)
                                           dot += o.grad[i * m + j] * o.data[i * m + j];
                                       for (std::size_t j = 0; j < m; ++j)
                                           g[i * m + j] +=
                                               (o.grad[i * m + j] - dot * o.data[i * m + j]) /
                                               norms[i];
                                   }
                               });
}

/// Gathers rows of `table` by id; the backward pass scatter-adds.
inline Tensor embedding_rows(const Tensor &table, std::span<const std::size_t> ids) {
    detail::require_matrix("embedding_rows", table);
    if (ids.empty())
        throw ContractError("embedding_rows: empty id list");
    const std::size_t r = table.dim(0), m = table.dim(1);
    std::vector<double> out(ids.size() * m);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= r)
            throw IndexError("embedding_rows: id " + std::to_string(ids[i]) + " >= " +
                             std::to_string(r) + " rows");
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * m), m,
                    out.begin() + static_cast<std::ptrdiff_t>(i * m));
    }
    auto *tn = table.node();
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    return detail::make_result("embedding_rows", {ids.size(), m}, std::move(out), {table},
                               [=, idv = std::move(idv)](detail::Node &o) {
                                   auto &g = detail::grad_of(tn);
                                   for (std::size_t i = 0; i < idv.size(); ++i)
                                       for (std::size_t j = 0; j < m; ++j)
                                           g[idv[i] * m + j] += o.grad[i * m + j];
                               });
}

inline Tensor embedding_rows(const Tensor &table, std::initializer_list<std::size_t> ids) {
    std::vector<std::size_t> v(ids);
    return embedding_rows(table, std::span<const std::size_t>(v));
}

/// Columns [begin, begin + count) of a matrix.
inline Tensor slice_cols(const Tensor &x, std::size_t begin, std::size_t count) {
    detail::require_matrix("slice_cols", x);
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (count == 0 || begin + count > m)
        throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" +
                             std::to_string(count) + ") outside " + shape_str(x.shape()));
    std::vector<double> out(n * count);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j)
            out[i * count + j] = x.data()[i * m + begin + j];
    auto *xn = x.node();
    return detail::make_result("slice_cols", {n, count}, std::move(out), {x},
                               [=](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < count; ++j)
                                           g[i * m + begin + j] += o.grad[i * count + j];
                               });
}

/// Rows [begin, begin + count) of a matrix.
inline Tensor slice_rows(const Tensor &x, std::size_t begin, std::size_t count) {
    detail::require_matrix("slice_rows", x);
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (count == 0 || begin + count > n)
        throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" +
                             std::to_string(count) + ") outside " + shape_str(x.shape()));
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * m),
                            x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * m));
    auto *xn = x.node();
    return detail::make_result("slice_rows", {count, m}, std::move(out), {x},
                               [=](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < count * m; ++i)
                                       g[begin * m + i] += o.grad[i];
                               });
}

/// Stacks two matrices with equal column counts.
inline Tensor concat_rows(const Tensor &a, const Tensor &b) {
    detail::require_matrix("concat_rows", a);
    detail::require_matrix("concat_rows", b);
    if (a.dim(1) != b.dim(1))
        throw DimensionError("concat_rows: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::vector<double> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto *an = a.node();
    auto *bn = b.node();
    const std::size_t na = a.numel();
    return detail::make_result("concat_rows", {a.dim(0) + b.dim(0), a.dim(1)}, std::move(out),
                               {a, b}, [=](detail::Node &o) {
                                   if (an->requires_grad) {
                                       auto &g = detail::grad_of(an);
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                           g[i] += o.grad[i];
                                   }
                                   if (bn->requires_grad) {
                                       auto &g = detail::grad_of(bn);
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                           g[i] += o.grad[na + i];
                                   }
                               });
}

/// Picks x[i, cols[i]] from each row; returns a vector of length rows.
inline Tensor pick(const Tensor &x, std::span<const std::size_t> cols) {
    detail::require_matrix("pick", x);
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (cols.size() != n)
        throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " +
                             shape_str(x.shape()));
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (cols[i] >= m)
            throw IndexError("pick: column " + std::to_string(cols[i]) + " >= " + std::to_string(m));
        out[i] = x.data()[i * m + cols[i]];
    }
    auto *xn = x.node();
    std::vector<std::size_t> cv(cols.begin(), cols.end());
    return detail::make_result("pick", {n}, std::move(out), {x},
                               [=, cv = std::move(cv)](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < n; ++i)
                                       g[i * m + cv[i]] += o.grad[i];
                               });
}

/// Contiguous run of rows treated as one unit (a post's tokens, a user's posts).
struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
};

/// Mean of the rows of each segment; one output row per segment.
inline Tensor segment_mean(const Tensor &x, std::span<const Segment> segments) {
    detail::require_matrix("segment_mean", x);
    const std::size_t m = x.dim(1);
    if (segments.empty())
        throw ContractError("segment_mean: no segments");
    std::vector<double> out(segments.size() * m, 0.0);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto [off, len] = segments[s];
        if (len == 0)
            throw ContractError("segment_mean: empty segment");
        if (off + len > x.dim(0))
            throw DimensionError("segment_mean: segment exceeds " + shape_str(x.shape()));
        for (std::size_t i = off; i < off + len; ++i)
            for (std::size_t j = 0; j < m; ++j)
                out[s * m + j] += x.data()[i * m + j];
        for (std::size_t j = 0; j < m; ++j)
            out[s * m + j] /= static_cast<double>(len);
    }
    auto *xn = x.node();
    std::vector<Segment> segs(segments.begin(), segments.end());
    return detail::make_result("segment_mean", {segments.size(), m}, std::move(out), {x},
                               [=, segs = std::move(segs)](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t s = 0; s < segs.size(); ++s) {
                                       const double inv = 1.0 / static_cast<double>(segs[s].length);
                                       for (std::size_t i = segs[s].offset;
                                            i < segs[s].offset + segs[s].length; ++i)
                                           for (std::size_t j = 0; j < m; ++j)
                                               g[i * m + j] += o.grad[s * m + j] * inv;
                                   }
                               });
}

/// Inverted dropout; identity when p == 0.
inline Tensor dropout(const Tensor &x, double p, Rng &rng) {
    if (p <= 0.0)
        return x;
    if (p >= 1.0)
        throw ContractError("dropout: probability must be < 1");
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> factor(x.numel());
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        factor[i] = uniform01(rng) < p ? 0.0 : keep_scale;
        out[i] = x.data()[i] * factor[i];
    }
    auto *xn = x.node();
    return detail::make_result("dropout", x.shape(), std::move(out), {x},
                               [=, factor = std::move(factor)](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       g[i] += o.grad[i] * factor[i];
                               });
}

/// Attention probabilities captured during a forward pass, one row-major
/// length x length matrix per (segment, head), segment-major.
struct AttentionTrace {
    std::size_t heads = 0;
    std::vector<std::size_t> lengths;
    std::vector<std::vector<double>> probs;

    const std::vector<double> &at(std::size_t segment, std::size_t head) const {
        return probs.at(segment * heads + head);
    }
};

struct AttentionOptions {
    std::size_t heads = 1;
    bool causal = false;
    /// Per-row key validity over all rows of q/k/v; empty = all valid.
    Mask key_mask;
    AttentionTrace *trace = nullptr;
};

/// Multi-head scaled dot-product attention, run independently inside each
/// segment of the stacked rows. Query i attends to key j of its own segment
/// when j is a valid key and, for causal attention, j <= i. Returns the
/// concatenated head outputs [rows x width].
inline Tensor segmented_attention(const Tensor &q, const Tensor &k, const Tensor &v,
                                  std::span<const Segment> segments,
                                  const AttentionOptions &opt) {
    detail::require_matrix("attention", q);
    detail::require_same_shape("attention", q, k);
    detail::require_same_shape("attention", q, v);
    const std::size_t n = q.dim(0), width = q.dim(1), heads = opt.heads;
    if (heads == 0 || width % heads != 0)
        throw DimensionError("attention: width " + std::to_string(width) +
                             " not divisible by heads " + std::to_string(heads));
    if (!opt.key_mask.empty() && opt.key_mask.size() != n)
        throw DimensionError("attention: key mask length " + std::to_string(opt.key_mask.size()) +
                             " for " + std::to_string(n) + " rows");
    const std::size_t dh = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    // probs for (segment s, head h) live at prob_off[s] + h * len * len
    std::vector<std::size_t> prob_off(segments.size());
    std::size_t total = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto [off, len] = segments[s];
        if (len == 0 || off + len > n)
            throw DimensionError("attention: bad segment");
        prob_off[s] = total;
        total += heads * len * len;
    }
    std::vector<double> probs(total);
    std::vector<double> out(n * width, 0.0);
    const double *qs = q.data().data(), *ks = k.data().data(), *vs = v.data().data();

    std::vector<double> qh, kh, vh, sc;
    Mask keep;
    auto gather = [&](const double *src, std::vector<double> &dst, std::size_t off,
                      std::size_t len, std::size_t c0) {
        dst.resize(len * dh);
        for (std::size_t i = 0; i < len; ++i)
            std::copy_n(src + (off + i) * width + c0, dh, dst.data() + i * dh);
    };
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto [off, len] = segments[s];
        keep.resize(len * len);
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j < len; ++j)
                keep[i * len + j] = (!opt.causal || j <= i) &&
                                    (opt.key_mask.empty() || opt.key_mask[off + j]);
        sc.resize(len * len);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            gather(qs, qh, off, len, c0);
            gather(ks, kh, off, len, c0);
            gather(vs, vh, off, len, c0);
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = 0; j < len; ++j) {
                    double d = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        d += qh[i * dh + c] * kh[j * dh + c];
                    sc[i * len + j] = d * inv_sqrt;
                }
            double *p = probs.data() + prob_off[s] + h * len * len;
            for (std::size_t i = 0; i < len; ++i)
                detail::masked_softmax_slice(sc.data() + i * len, keep.data() + i * len,
                                             p + i * len, len);
            for (std::size_t i = 0; i < len; ++i) {
                double *oi = out.data() + (off + i) * width + c0;
                for (std::size_t j = 0; j < len; ++j) {
                    const double w = p[i * len + j];
                    const double *vj = vh.data() + j * dh;
                    for (std::size_t c = 0; c < dh; ++c)
                        oi[c] += w * vj[c];
                }
            }
        }
    }
    if (opt.trace) {
        opt.trace->heads = heads;
        opt.trace->lengths.clear();
        opt.trace->probs.clear();
        for (std::size_t s = 0; s < segments.size(); ++s) {
            const std::size_t len = segments[s].length;
            opt.trace->lengths.push_back(len);
            for (std::size_t h = 0; h < heads; ++h) {
                const double *p = probs.data() + prob_off[s] + h * len * len;
                opt.trace->probs.emplace_back(p, p + len * len);
            }
        }
    }

    auto *qn = q.node();
    auto *kn = k.node();
    auto *vn = v.node();
    std::vector<Segment> segs(segments.begin(), segments.end());
    return detail::make_result(
        "attention", {n, width}, std::move(out), {q, k, v},
        [=, segs = std::move(segs), probs = std::move(probs),
         prob_off = std::move(prob_off)](detail::Node &o) {
            auto *gq = qn->requires_grad ? detail::grad_of(qn).data() : nullptr;
            auto *gk = kn->requires_grad ? detail::grad_of(kn).data() : nullptr;
            auto *gv = vn->requires_grad ? detail::grad_of(vn).data() : nullptr;
            std::vector<double> qh, kh, vh, goh, dp, ds;
            auto gather = [&](const double *src, std::vector<double> &dst, std::size_t off,
                              std::size_t len, std::size_t c0) {
                dst.resize(len * dh);
                for (std::size_t i = 0; i < len; ++i)
                    std::copy_n(src + (off + i) * width + c0, dh, dst.data() + i * dh);
            };
            for (std::size_t s = 0; s < segs.size(); ++s) {
                const auto [off, len] = segs[s];
                dp.resize(len * len);
                ds.resize(len * len);
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * dh;
                    const double *p = probs.data() + prob_off[s] + h * len * len;
                    gather(qn->data.data(), qh, off, len, c0);
                    gather(kn->data.data(), kh, off, len, c0);
                    gather(vn->data.data(), vh, off, len, c0);
                    gather(o.grad.data(), goh, off, len, c0);
                    for (std::size_t i = 0; i < len; ++i)
                        for (std::size_t j = 0; j < len; ++j) {
                            double d = 0.0;
                            for (std::size_t c = 0; c < dh; ++c)
                                d += goh[i * dh + c] * vh[j * dh + c];
                            dp[i * len + j] = d;
                        }
                    if (gv)
                        for (std::size_t i = 0; i < len; ++i)
                            for (std::size_t j = 0; j < len; ++j) {
                                const double w = p[i * len + j];
                                double *gvj = gv + (off + j) * width + c0;
                                for (std::size_t c = 0; c < dh; ++c)
                                    gvj[c] += w * goh[i * dh + c];
                            }
                    std::fill(ds.begin(), ds.end(), 0.0);
                    for (std::size_t i = 0; i < len; ++i)
                        detail::softmax_slice_backward(p + i * len, dp.data() + i * len,
                                                       ds.data() + i * len, len);
                    for (std::size_t i = 0; i < len; ++i)
                        for (std::size_t j = 0; j < len; ++j) {
                            const double g = ds[i * len + j] * inv_sqrt;
                            if (gq) {
                                double *gqi = gq + (off + i) * width + c0;
                                for (std::size_t c = 0; c < dh; ++c)
                                    gqi[c] += g * kh[j * dh + c];
                            }
                            if (gk) {
                                double *gkj = gk + (off + j) * width + c0;
                                for (std::size_t c = 0; c < dh; ++c)
                                    gkj[c] += g * qh[i * dh + c];
                            }
                        }
                }
            }
        });
}

} // namespace robad

namespace robad {

/// Same values under a new shape with the same element count.
inline Tensor reshape(const Tensor &x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    auto *xn = x.node();
    return detail::make_result("reshape", std::move(shape), std::move(out), {x},
                               [=](detail::Node &o) {
                                   auto &g = detail::grad_of(xn);
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       g[i] += o.grad[i];
                               });
}

inline Tensor as_row(const Tensor &x) { return reshape(x, {1, x.numel()}); }
inline Tensor flatten(const Tensor &x) { return reshape(x, {x.numel()}); }

} // namespace robad
