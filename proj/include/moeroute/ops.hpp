#pragma once

// Differentiable op set. Every op computes its forward value eagerly; when a
// Tape recording is active and an input requires grad, the op is appended to
// the tape with a closure that accumulates input gradients.

#include <Eigen/Core>

#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "moeroute/tensor.hpp"

namespace moeroute {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap as_matrix(std::span<const double> d, std::size_t rows, std::size_t cols) {
    return {d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
inline MutMap as_matrix(std::span<double> d, std::size_t rows, std::size_t cols) {
    return {d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Records `out` on the active tape when any input requires grad.
template <typename Backward>
void record(std::vector<Tensor> inputs, Tensor& out, Backward&& backward) {
    Tape* tape = Tape::active();
    if (tape == nullptr) return;
    bool needed = false;
    for (const auto& t : inputs) needed = needed || t.requires_grad();
    if (!needed) return;
    out.set_requires_grad(true);
    tape->push(std::move(inputs), out, std::forward<Backward>(backward));
}

enum class Broadcast { Same, Row, Scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (b.rank() == 0) return Broadcast::Scalar;
    if (b.rows() == 1 && b.numel() == a.cols() && a.rank() == 2) return Broadcast::Row;
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

}  // namespace detail

/// Standard matrix product a[m×k]·b[k×n]. A rank-1 `a` is a single row and
/// yields a rank-1 result.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2 || a.rank() == 0 || a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros(a.rank() == 1 ? Shape{n} : Shape{m, n});
    detail::as_matrix(out.mutable_data(), m, n).noalias() = detail::as_matrix(a.data(), m, k) * detail::as_matrix(b.data(), k, n);
    detail::check_finite(out, "matmul");
    detail::record({a, b}, out, [a, b, out, m, k, n]() mutable {
        const auto g = detail::as_matrix(out.grad(), m, n);
        if (a.requires_grad()) {
            detail::RowMatrix ga = g * detail::as_matrix(b.data(), k, n).transpose();
            a.accumulate_grad({ga.data(), static_cast<std::size_t>(ga.size())});
        }
        if (b.requires_grad()) {
            detail::RowMatrix gb = detail::as_matrix(a.data(), m, k).transpose() * g;
            b.accumulate_grad({gb.data(), static_cast<std::size_t>(gb.size())});
        }
    });
    return out;
}

/// a[m×k]·b[n×k]ᵀ, the layout used for out×in weight matrices.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2 || a.rank() == 0 || a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros(a.rank() == 1 ? Shape{n} : Shape{m, n});
    detail::as_matrix(out.mutable_data(), m, n).noalias() =
        detail::as_matrix(a.data(), m, k) * detail::as_matrix(b.data(), n, k).transpose();
    detail::check_finite(out, "matmul_nt");
    detail::record({a, b}, out, [a, b, out, m, k, n]() mutable {
        const auto g = detail::as_matrix(out.grad(), m, n);
        if (a.requires_grad()) {
            detail::RowMatrix ga = g * detail::as_matrix(b.data(), n, k);
            a.accumulate_grad({ga.data(), static_cast<std::size_t>(ga.size())});
        }
        if (b.requires_grad()) {
            detail::RowMatrix gb = g.transpose() * detail::as_matrix(a.data(), m, k);
            b.accumulate_grad({gb.data(), static_cast<std::size_t>(gb.size())});
        }
    });
    return out;
}

namespace detail {

// Calls f(i, j) for every element i of `a`, where j indexes the matching
// element of the broadcast operand.
template <typename F>
void broadcast_each(Broadcast kind, std::size_t n, std::size_t cols, F&& f) {
    switch (kind) {
        case Broadcast::Same:
            for (std::size_t i = 0; i < n; ++i) f(i, i);
            break;
        case Broadcast::Row:
            for (std::size_t r = 0; r < n / cols; ++r)
                for (std::size_t c = 0; c < cols; ++c) f(r * cols + c, c);
            break;
        case Broadcast::Scalar:
            for (std::size_t i = 0; i < n; ++i) f(i, 0);
            break;
    }
}

}  // namespace detail

/// Elementwise sum. `b` may match `a`, be a single row broadcast over the
/// rows of `a`, or be a rank-0 scalar.
inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "add");
    Tensor out = a.clone();
    auto o = out.mutable_data();
    const auto bd = b.data();
    const std::size_t cols = a.cols();
    detail::broadcast_each(kind, o.size(), cols, [&](std::size_t i, std::size_t j) { o[i] += bd[j]; });
    detail::check_finite(out, "add");
    detail::record({a, b}, out, [a, b, out, kind, cols]() mutable {
        const auto g = out.grad();
        if (a.requires_grad()) a.accumulate_grad(g);
        if (b.requires_grad()) {
            if (kind == detail::Broadcast::Same) {
                b.accumulate_grad(g);
            } else {
                std::vector<double> gb(b.numel(), 0.0);
                detail::broadcast_each(kind, g.size(), cols, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
                b.accumulate_grad(gb);
            }
        }
    });
    return out;
}

/// Elementwise product with the same broadcasting rules as add().
inline Tensor multiply(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "multiply");
    Tensor out = a.clone();
    auto o = out.mutable_data();
    const auto bd = b.data();
    const std::size_t cols = a.cols();
    detail::broadcast_each(kind, o.size(), cols, [&](std::size_t i, std::size_t j) { o[i] *= bd[j]; });
    detail::check_finite(out, "multiply");
    detail::record({a, b}, out, [a, b, out, kind, cols]() mutable {
        const auto g = out.grad();
        if (a.requires_grad()) {
            const auto bdata = b.data();
            std::vector<double> ga(g.size());
            detail::broadcast_each(kind, g.size(), cols, [&](std::size_t i, std::size_t j) { ga[i] = g[i] * bdata[j]; });
            a.accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            const auto ad = a.data();
            std::vector<double> gb(b.numel(), 0.0);
            detail::broadcast_each(kind, g.size(), cols, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * ad[i]; });
            b.accumulate_grad(gb);
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, double c) { return multiply(a, Tensor::scalar(c)); }
inline Tensor add_scalar(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor subtract(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

namespace detail {

template <typename F, typename D>
Tensor unary(const Tensor& x, const char* name, F f, D dfdx) {
    Tensor out = x.clone();
    for (auto& v : out.mutable_data()) v = f(v);
    check_finite(out, name);
    record({x}, out, [x, out, dfdx]() mutable {
        const auto g = out.grad();
        const auto xd = x.data();
        const auto yd = out.data();
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * dfdx(xd[i], yd[i]);
        x.accumulate_grad(gx);
    });
    return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
    return detail::unary(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Elementwise max(x, floor). The gradient passes where x > floor.
inline Tensor maximum(const Tensor& x, double floor) {
    return detail::unary(
        x, "maximum", [floor](double v) { return v > floor ? v : floor; },
        [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    detail::check_finite(out, "sum");
    detail::record({x}, out, [x, out]() mutable {
        x.accumulate_grad(std::vector<double>(x.numel(), out.grad()[0]));
    });
    return out;
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ContractError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.cols() == 0) throw ContractError("softmax_rows needs at least one column");
    if (!x.all_finite()) throw NumericError("softmax_rows: non-finite input");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out = x.clone();
    auto o = out.mutable_data();
    for (std::size_t r = 0; r < m; ++r) {
        double* row = o.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            row[c] = std::exp(row[c] - mx);
            z += row[c];
        }
        const double inv = 1.0 / z;
        for (std::size_t c = 0; c < n; ++c) row[c] *= inv;
    }
    detail::record({x}, out, [x, out, m, n]() mutable {
        const auto g = out.grad();
        const auto y = out.data();
        std::vector<double> gx(g.size());
        for (std::size_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
        }
        x.accumulate_grad(gx);
    });
    return out;
}

/// Floor applied to probabilities before taking logs.
inline constexpr double kProbFloor = 1e-12;

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer normalization with affine gain and bias of length cols.
/// A constant row normalizes to zero, so the output is the bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
    const std::size_t m = x.rows(), n = x.cols();
    if (n < 2) throw ContractError("layer_norm needs at least two features");
    if (gain.numel() != n || bias.numel() != n) {
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " do not match " + shape_str(x.shape()));
    }
    Tensor out = x.clone();
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(m);
    const auto xd = x.data();
    const auto gd = gain.data();
    const auto bd = bias.data();
    auto o = out.mutable_data();
    for (std::size_t r = 0; r < m; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) mu += xd[r * n + c];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            const double d = xd[r * n + c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            xhat[r * n + c] = (xd[r * n + c] - mu) * inv_std[r];
            o[r * n + c] = xhat[r * n + c] * gd[c] + bd[c];
        }
    }
    detail::check_finite(out, "layer_norm");
    detail::record({x, gain, bias}, out, [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n]() mutable {
        const auto g = out.grad();
        const auto gd = gain.data();
        if (gain.requires_grad() || bias.requires_grad()) {
            std::vector<double> gg(n, 0.0), gb(n, 0.0);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) {
                    gg[c] += g[r * n + c] * xhat[r * n + c];
                    gb[c] += g[r * n + c];
                }
            if (gain.requires_grad()) gain.accumulate_grad(gg);
            if (bias.requires_grad()) bias.accumulate_grad(gb);
        }
        if (x.requires_grad()) {
            std::vector<double> gx(x.numel());
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < m; ++r) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    const double dh = g[r * n + c] * gd[c];
                    s1 += dh;
                    s2 += dh * xhat[r * n + c];
                }
                for (std::size_t c = 0; c < n; ++c) {
                    const double dh = g[r * n + c] * gd[c];
                    gx[r * n + c] = inv_std[r] * (dh - s1 * inv_n - xhat[r * n + c] * s2 * inv_n);
                }
            }
            x.accumulate_grad(gx);
        }
    });
    return out;
}

// ---- structural ops (index/copy only) ----

/// Rows `ids` of `table`, e.g. an embedding lookup.
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    const std::size_t n = table.cols(), vocab = table.rows();
    std::vector<double> v(ids.size() * n);
    const auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("gather_rows: index " + std::to_string(ids[i]) + " outside [0, " + std::to_string(vocab) + ")");
        }
        std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * n), n, v.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    Tensor out = Tensor::matrix(ids.size(), n, std::move(v));
    std::vector<int> idv(ids.begin(), ids.end());
    detail::record({table}, out, [table, out, idv = std::move(idv), n]() mutable {
        const auto g = out.grad();
        auto gt = table.mutable_grad();
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t c = 0; c < n; ++c) gt[static_cast<std::size_t>(idv[i]) * n + c] += g[i * n + c];
    });
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    if (begin > end || end > x.rows()) throw IndexError("slice_rows out of range");
    const std::size_t n = x.cols();
    const auto xd = x.data();
    Tensor out = Tensor::matrix(end - begin, n,
                                std::vector<double>(xd.begin() + static_cast<std::ptrdiff_t>(begin * n),
                                                    xd.begin() + static_cast<std::ptrdiff_t>(end * n)));
    detail::record({x}, out, [x, out, begin, n]() mutable {
        const auto g = out.grad();
        auto gx = x.mutable_grad().subspan(begin * n, g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    if (begin > end || end > x.cols()) throw IndexError("slice_cols out of range");
    const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
    std::vector<double> v(m * w);
    const auto xd = x.data();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < w; ++c) v[r * w + c] = xd[r * n + begin + c];
    Tensor out = Tensor::matrix(m, w, std::move(v));
    detail::record({x}, out, [x, out, begin, m, n, w]() mutable {
        const auto g = out.grad();
        auto gx = x.mutable_grad();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < w; ++c) gx[r * n + begin + c] += g[r * w + c];
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows of nothing");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
        m += p.rows();
    }
    std::vector<double> v;
    v.reserve(m * n);
    for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    Tensor out = Tensor::matrix(m, n, std::move(v));
    detail::record(parts, out, [parts, out]() mutable {
        const auto g = out.grad();
        std::size_t offset = 0;
        for (auto& p : parts) {
            if (p.requires_grad()) p.accumulate_grad(g.subspan(offset, p.numel()));
            offset += p.numel();
        }
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of nothing");
    const std::size_t m = parts.front().rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
        n += p.cols();
    }
    std::vector<double> v(m * n);
    std::size_t c0 = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        const auto pd = p.data();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < w; ++c) v[r * n + c0 + c] = pd[r * w + c];
        c0 += w;
    }
    Tensor out = Tensor::matrix(m, n, std::move(v));
    detail::record(parts, out, [parts, out, m, n]() mutable {
        const auto g = out.grad();
        std::size_t c0 = 0;
        for (auto& p : parts) {
            const std::size_t w = p.cols();
            if (p.requires_grad()) {
                std::vector<double> gp(m * w);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < w; ++c) gp[r * w + c] = g[r * n + c0 + c];
                p.accumulate_grad(gp);
            }
            c0 += w;
        }
    });
    return out;
}

/// Repeats every column k times in place: [a b] -> [a a a b b b] for k = 3.
inline Tensor repeat_cols(const Tensor& x, std::size_t k) {
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> v(m * n * k);
    const auto xd = x.data();
    for (std::size_t i = 0; i < m * n; ++i) std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(i * k), k, xd[i]);
    Tensor out = Tensor::matrix(m, n * k, std::move(v));
    detail::record({x}, out, [x, out, k]() mutable {
        const auto g = out.grad();
        std::vector<double> gx(x.numel(), 0.0);
        for (std::size_t i = 0; i < gx.size(); ++i)
            for (std::size_t j = 0; j < k; ++j) gx[i] += g[i * k + j];
        x.accumulate_grad(gx);
    });
    return out;
}

/// Sums adjacent groups of k columns: the adjoint of repeat_cols.
inline Tensor sum_col_groups(const Tensor& x, std::size_t k) {
    if (k == 0 || x.cols() % k != 0) throw DimensionError("sum_col_groups: width not divisible by group size");
    const std::size_t m = x.rows(), n = x.cols() / k;
    std::vector<double> v(m * n, 0.0);
    const auto xd = x.data();
    for (std::size_t i = 0; i < m * n; ++i)
        for (std::size_t j = 0; j < k; ++j) v[i] += xd[i * k + j];
    Tensor out = Tensor::matrix(m, n, std::move(v));
    detail::record({x}, out, [x, out, k]() mutable {
        const auto g = out.grad();
        std::vector<double> gx(x.numel());
        for (std::size_t i = 0; i < g.size(); ++i) std::fill_n(gx.begin() + static_cast<std::ptrdiff_t>(i * k), k, g[i]);
        x.accumulate_grad(gx);
    });
    return out;
}

/// Same values under a new shape; gradients flow straight through.
inline Tensor reshaped(const Tensor& x, Shape shape) {
    Tensor out = x.reshape(std::move(shape));
    detail::record({x}, out, [x, out]() mutable { x.accumulate_grad(out.grad()); });
    return out;
}

/// out[i] = x[i, idx[i]]; shape [m].
inline Tensor pick(const Tensor& x, std::span<const int> idx) {
    const std::size_t m = x.rows(), n = x.cols();
    if (idx.size() != m) throw DimensionError("pick: need one index per row");
    std::vector<double> v(m);
    const auto xd = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) throw IndexError("pick: column index out of range");
        v[i] = xd[i * n + static_cast<std::size_t>(idx[i])];
    }
    Tensor out = Tensor::vector(std::move(v));
    std::vector<int> iv(idx.begin(), idx.end());
    detail::record({x}, out, [x, out, iv = std::move(iv), n]() mutable {
        const auto g = out.grad();
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < iv.size(); ++i) gx[i * n + static_cast<std::size_t>(iv[i])] += g[i];
    });
    return out;
}

}  // namespace moeroute
