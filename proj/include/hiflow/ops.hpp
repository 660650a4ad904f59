#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "hiflow/errors.hpp"
#include "hiflow/tensor.hpp"

namespace hiflow {

// Differentiable ops. Every op takes the tape first, checks shapes, computes
// the forward value, and (while the tape is recording and some input requires
// grad) pushes one backward node that accumulates into the inputs' grads.
// No broadcasting beyond the few explicit broadcast ops the networks use.

template <typename T>
constexpr T default_ln_eps() {
    return std::is_same_v<T, double> ? T(1e-10) : T(1e-6);
}

template <typename T>
inline bool track(const Tape<T>& g, bool any_input_grad) {
    return g.recording() && any_input_grad;
}

template <typename T>
inline void require_matrix(const Tensor<T>& x, const char* who) {
    if (!x.defined() || x.rank() < 1 || x.rank() > 2)
        throw DimensionError(std::string(who) + ": expected rank-1/2 tensor");
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

template <typename T>
inline void assert_finite(const Tensor<T>& x, const std::string& context) {
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (!std::isfinite(static_cast<double>(x[i])))
            throw NumericError("non-finite value in " + context);
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const int64_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < m; ++i) {
        T* orow = po + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T aik = pa[i * k + kk];
            if (aik == T(0)) continue;
            const T* brow = pb + kk * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    if (track(g, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        g.record([ac, bc, oc, m, k, n]() mutable {
            const T* go = oc.grad();
            if (ac.requires_grad()) {
                // dA = dC * B^T  (row dot row)
                T* ga = ac.grad();
                const T* pb2 = bc.data();
                for (int64_t i = 0; i < m; ++i) {
                    const T* grow = go + i * n;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const T* brow = pb2 + kk * n;
                        T acc = T(0);
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + kk] += acc;
                    }
                }
            }
            if (bc.requires_grad()) {
                // dB = A^T * dC  (streaming axpy over rows of dC)
                T* gb = bc.grad();
                const T* pa2 = ac.data();
                for (int64_t i = 0; i < m; ++i) {
                    const T* grow = go + i * n;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const T aik = pa2[i * k + kk];
                        if (aik == T(0)) continue;
                        T* gbrow = gb + kk * n;
                        for (int64_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    if (track(g, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        g.record([ac, bc, oc]() mutable {
            const T* go = oc.grad();
            if (ac.requires_grad())
                for (int64_t i = 0; i < ac.numel(); ++i) ac.grad()[i] += go[i];
            if (bc.requires_grad())
                for (int64_t i = 0; i < bc.numel(); ++i) bc.grad()[i] += go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    if (track(g, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        g.record([ac, bc, oc]() mutable {
            const T* go = oc.grad();
            if (ac.requires_grad())
                for (int64_t i = 0; i < ac.numel(); ++i) ac.grad()[i] += go[i];
            if (bc.requires_grad())
                for (int64_t i = 0; i < bc.numel(); ++i) bc.grad()[i] -= go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    if (track(g, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        g.record([ac, bc, oc]() mutable {
            const T* go = oc.grad();
            if (ac.requires_grad())
                for (int64_t i = 0; i < ac.numel(); ++i) ac.grad()[i] += go[i] * bc[i];
            if (bc.requires_grad())
                for (int64_t i = 0; i < bc.numel(); ++i) bc.grad()[i] += go[i] * ac[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& g, const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    if (track(g, a.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        g.record([ac, oc, c]() mutable {
            const T* go = oc.grad();
            for (int64_t i = 0; i < ac.numel(); ++i) ac.grad()[i] += go[i] * c;
        });
    }
    return out;
}

// bias broadcast over rows: x[m x n] + b[n]
template <typename T>
Tensor<T> add_bias(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& b) {
    require_matrix(x, "add_bias");
    const int64_t m = x.rows(), n = x.cols();
    if (b.numel() != n)
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " vs cols " + std::to_string(n));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
    if (track(g, x.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, bc = b, oc = out;
        g.record([xc, bc, oc, m, n]() mutable {
            const T* go = oc.grad();
            if (xc.requires_grad())
                for (int64_t i = 0; i < m * n; ++i) xc.grad()[i] += go[i];
            if (bc.requires_grad())
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) bc.grad()[j] += go[i * n + j];
        });
    }
    return out;
}

// AdaLN modulation: x * (1 + s) + t, all same shape. Fused because it sits on
// every residual branch of both transformers.
template <typename T>
Tensor<T> modulate(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& t) {
    require_same_shape(x, s, "modulate");
    require_same_shape(x, t, "modulate");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * (T(1) + s[i]) + t[i];
    if (track(g, x.requires_grad() || s.requires_grad() || t.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, sc = s, tc = t, oc = out;
        g.record([xc, sc, tc, oc]() mutable {
            const T* go = oc.grad();
            if (xc.requires_grad())
                for (int64_t i = 0; i < xc.numel(); ++i) xc.grad()[i] += go[i] * (T(1) + sc[i]);
            if (sc.requires_grad())
                for (int64_t i = 0; i < sc.numel(); ++i) sc.grad()[i] += go[i] * xc[i];
            if (tc.requires_grad())
                for (int64_t i = 0; i < tc.numel(); ++i) tc.grad()[i] += go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> silu(Tape<T>& g, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        out[i] = x[i] * s;
    }
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc]() mutable {
            const T* go = oc.grad();
            for (int64_t i = 0; i < xc.numel(); ++i) {
                const T s = T(1) / (T(1) + std::exp(-xc[i]));
                xc.grad()[i] += go[i] * (s * (T(1) + xc[i] * (T(1) - s)));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer normalization (no learned affine; AdaLN supplies shift/scale outside)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layernorm(Tape<T>& g, const Tensor<T>& x, T eps = default_ln_eps<T>()) {
    require_matrix(x, "layernorm");
    const int64_t m = x.rows(), n = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> inv_std(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        const T* xr = x.data() + i * n;
        T mean = T(0);
        for (int64_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<T>(n);
        T var = T(0);
        for (int64_t j = 0; j < n; ++j) {
            const T d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        T* orow = out.data() + i * n;
        for (int64_t j = 0; j < n; ++j) orow[j] = (xr[j] - mean) * is;
    }
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, inv_std = std::move(inv_std), m, n]() mutable {
            // dx = (1/s) * (dy - mean(dy) - y * mean(dy * y))
            for (int64_t i = 0; i < m; ++i) {
                const T* go = oc.grad() + i * n;
                const T* y = oc.data() + i * n;
                T* gx = xc.grad() + i * n;
                T mg = T(0), mgy = T(0);
                for (int64_t j = 0; j < n; ++j) {
                    mg += go[j];
                    mgy += go[j] * y[j];
                }
                mg /= static_cast<T>(n);
                mgy /= static_cast<T>(n);
                const T is = inv_std[static_cast<size_t>(i)];
                for (int64_t j = 0; j < n; ++j) gx[j] += is * (go[j] - mg - y[j] * mgy);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax over rows (numerically stable: subtracts the row max)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(Tape<T>& g, const Tensor<T>& x) {
    require_matrix(x, "softmax");
    const int64_t m = x.rows(), n = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < m; ++i) {
        const T* xr = x.data() + i * n;
        T* orow = out.data() + i * n;
        T mx = xr[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int64_t j = 0; j < n; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            sum += orow[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, m, n]() mutable {
            for (int64_t i = 0; i < m; ++i) {
                const T* go = oc.grad() + i * n;
                const T* p = oc.data() + i * n;
                T* gx = xc.grad() + i * n;
                T dot = T(0);
                for (int64_t j = 0; j < n; ++j) dot += go[j] * p[j];
                for (int64_t j = 0; j < n; ++j) gx[j] += p[j] * (go[j] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions / rearrangement
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mean_all(Tape<T>& g, const Tensor<T>& x) {
    const int64_t n = x.numel();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, n]() mutable {
            const T go = oc.grad()[0] / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) xc.grad()[i] += go;
        });
    }
    return out;
}

// concatenation along the sequence (row) axis
template <typename T>
Tensor<T> concat_rows(Tape<T>& g, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: empty input list");
    const int64_t n = parts[0].cols();
    int64_t total = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        require_matrix(p, "concat_rows");
        if (p.cols() != n)
            throw DimensionError("concat_rows: column mismatch " + std::to_string(p.cols()) + " vs " +
                                 std::to_string(n));
        total += p.rows();
        any_grad = any_grad || p.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({total, n});
    int64_t r = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + r * n);
        r += p.rows();
    }
    if (track(g, any_grad)) {
        out.set_requires_grad(true);
        std::vector<Tensor<T>> pc = parts;
        Tensor<T> oc = out;
        g.record([pc, oc, n]() mutable {
            int64_t r0 = 0;
            for (auto& p : pc) {
                if (p.requires_grad()) {
                    const T* go = oc.grad() + r0 * n;
                    for (int64_t i = 0; i < p.numel(); ++i) p.grad()[i] += go[i];
                }
                r0 += p.rows();
            }
        });
    }
    return out;
}

// out row r = x row idx[r]; backward scatter-adds (duplicate indices allowed)
template <typename T>
Tensor<T> gather_rows(Tape<T>& g, const Tensor<T>& x, const std::vector<int64_t>& idx) {
    require_matrix(x, "gather_rows");
    const int64_t m = x.rows(), n = x.cols();
    for (int64_t i : idx)
        if (i < 0 || i >= m)
            throw ConfigError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                              std::to_string(m) + ")");
    Tensor<T> out = Tensor<T>::zeros({static_cast<int64_t>(idx.size()), n});
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(x.data() + idx[r] * n, x.data() + (idx[r] + 1) * n, out.data() + static_cast<int64_t>(r) * n);
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, idx, n]() mutable {
            for (size_t r = 0; r < idx.size(); ++r) {
                const T* go = oc.grad() + static_cast<int64_t>(r) * n;
                T* gx = xc.grad() + idx[r] * n;
                for (int64_t j = 0; j < n; ++j) gx[j] += go[j];
            }
        });
    }
    return out;
}

// contiguous row slice [r0, r1)
template <typename T>
Tensor<T> slice_rows(Tape<T>& g, const Tensor<T>& x, int64_t r0, int64_t r1) {
    require_matrix(x, "slice_rows");
    const int64_t m = x.rows(), n = x.cols();
    if (r0 < 0 || r1 > m || r0 >= r1)
        throw DimensionError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                             ") of " + std::to_string(m) + " rows");
    Tensor<T> out = Tensor<T>::zeros({r1 - r0, n});
    std::copy(x.data() + r0 * n, x.data() + r1 * n, out.data());
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, r0, n]() mutable {
            const T* go = oc.grad();
            T* gx = xc.grad() + r0 * n;
            for (int64_t i = 0; i < oc.numel(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

// column slice [c0, c1) — used to split fused AdaLN projections
template <typename T>
Tensor<T> slice_cols(Tape<T>& g, const Tensor<T>& x, int64_t c0, int64_t c1) {
    require_matrix(x, "slice_cols");
    const int64_t m = x.rows(), n = x.cols();
    if (c0 < 0 || c1 > n || c0 >= c1)
        throw DimensionError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") of " + std::to_string(n) + " cols");
    const int64_t w = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({m, w});
    for (int64_t i = 0; i < m; ++i)
        std::copy(x.data() + i * n + c0, x.data() + i * n + c1, out.data() + i * w);
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, c0, n, w, m]() mutable {
            for (int64_t i = 0; i < m; ++i) {
                const T* go = oc.grad() + i * w;
                T* gx = xc.grad() + i * n + c0;
                for (int64_t j = 0; j < w; ++j) gx[j] += go[j];
            }
        });
    }
    return out;
}

// x[B x K] -> [B*reps x K]: row b repeated reps times consecutively.
// Broadcasts one per-example vector over that example's tokens.
template <typename T>
Tensor<T> expand_rows(Tape<T>& g, const Tensor<T>& x, int64_t reps) {
    require_matrix(x, "expand_rows");
    if (reps <= 0) throw DimensionError("expand_rows: reps must be positive");
    const int64_t b = x.rows(), n = x.cols();
    Tensor<T> out = Tensor<T>::zeros({b * reps, n});
    for (int64_t i = 0; i < b; ++i)
        for (int64_t r = 0; r < reps; ++r)
            std::copy(x.data() + i * n, x.data() + (i + 1) * n, out.data() + (i * reps + r) * n);
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, b, n, reps]() mutable {
            for (int64_t i = 0; i < b; ++i) {
                T* gx = xc.grad() + i * n;
                for (int64_t r = 0; r < reps; ++r) {
                    const T* go = oc.grad() + (i * reps + r) * n;
                    for (int64_t j = 0; j < n; ++j) gx[j] += go[j];
                }
            }
        });
    }
    return out;
}

// x[L x K] -> [reps*L x K]: whole matrix repeated. Broadcasts shared
// positional tables over a batch.
template <typename T>
Tensor<T> tile_rows(Tape<T>& g, const Tensor<T>& x, int64_t reps) {
    require_matrix(x, "tile_rows");
    if (reps <= 0) throw DimensionError("tile_rows: reps must be positive");
    const int64_t l = x.rows(), n = x.cols();
    Tensor<T> out = Tensor<T>::zeros({reps * l, n});
    for (int64_t r = 0; r < reps; ++r)
        std::copy(x.data(), x.data() + x.numel(), out.data() + r * l * n);
    if (track(g, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        g.record([xc, oc, l, n, reps]() mutable {
            for (int64_t r = 0; r < reps; ++r) {
                const T* go = oc.grad() + r * l * n;
                for (int64_t i = 0; i < l * n; ++i) xc.grad()[i] += go[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// masked multi-head attention
// ---------------------------------------------------------------------------

// Boolean allow-matrix shared by all blocks of a batched sequence.
struct AttnMask {
    int64_t len = 0;
    std::vector<uint8_t> allow;  // len x len, row = query, col = key

    bool at(int64_t q, int64_t k) const { return allow[static_cast<size_t>(q * len + k)] != 0; }

    static AttnMask all_true(int64_t len) {
        AttnMask m;
        m.len = len;
        m.allow.assign(static_cast<size_t>(len * len), 1);
        return m;
    }
};

// q, k, v: [n_blocks*len x width]. Each block attends within itself under the
// shared mask; softmax renormalizes over permitted keys only. A query row with
// no permitted key is a configuration error, checked up front.
template <typename T>
Tensor<T> masked_attention(Tape<T>& g, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const AttnMask& mask, int64_t n_heads = 1, int64_t n_blocks = 1) {
    require_same_shape(q, k, "masked_attention");
    require_same_shape(q, v, "masked_attention");
    const int64_t len = mask.len;
    const int64_t width = q.cols();
    if (q.rows() != n_blocks * len)
        throw DimensionError("masked_attention: rows " + std::to_string(q.rows()) + " != n_blocks*mask_len " +
                             std::to_string(n_blocks * len));
    if (n_heads <= 0 || width % n_heads != 0)
        throw DimensionError("masked_attention: width " + std::to_string(width) + " not divisible by " +
                             std::to_string(n_heads) + " heads");
    for (int64_t i = 0; i < len; ++i) {
        bool any = false;
        for (int64_t j = 0; j < len && !any; ++j) any = mask.at(i, j);
        if (!any)
            throw ConfigError("masked_attention: query row " + std::to_string(i) + " has no permitted keys");
    }
    const int64_t hd = width / n_heads;
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(hd));

    Tensor<T> out = Tensor<T>::zeros(q.shape());
    // per (block, head) softmax probabilities, kept for backward
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n_blocks * n_heads * len * len), T(0));

    for (int64_t b = 0; b < n_blocks; ++b) {
        const int64_t base = b * len;
        for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t coff = h * hd;
            T* p = probs->data() + (b * n_heads + h) * len * len;
            for (int64_t i = 0; i < len; ++i) {
                const T* qi = q.data() + (base + i) * width + coff;
                T* pi = p + i * len;
                T mx = -std::numeric_limits<T>::infinity();
                for (int64_t j = 0; j < len; ++j) {
                    if (!mask.at(i, j)) continue;
                    const T* kj = k.data() + (base + j) * width + coff;
                    T s = T(0);
                    for (int64_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_d;
                    pi[j] = s;
                    mx = std::max(mx, s);
                }
                T sum = T(0);
                for (int64_t j = 0; j < len; ++j) {
                    if (mask.at(i, j)) {
                        pi[j] = std::exp(pi[j] - mx);
                        sum += pi[j];
                    } else {
                        pi[j] = T(0);
                    }
                }
                const T inv = T(1) / sum;
                T* oi = out.data() + (base + i) * width + coff;
                for (int64_t j = 0; j < len; ++j) {
                    pi[j] *= inv;
                    if (pi[j] == T(0)) continue;
                    const T* vj = v.data() + (base + j) * width + coff;
                    for (int64_t c = 0; c < hd; ++c) oi[c] += pi[j] * vj[c];
                }
            }
        }
    }

    if (track(g, q.requires_grad() || k.requires_grad() || v.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> qc = q, kc = k, vc = v, oc = out;
        g.record([qc, kc, vc, oc, probs, n_blocks, n_heads, len, width, hd, inv_sqrt_d]() mutable {
            std::vector<T> dp(static_cast<size_t>(len), T(0));
            for (int64_t b = 0; b < n_blocks; ++b) {
                const int64_t base = b * len;
                for (int64_t h = 0; h < n_heads; ++h) {
                    const int64_t coff = h * hd;
                    const T* p = probs->data() + (b * n_heads + h) * len * len;
                    for (int64_t i = 0; i < len; ++i) {
                        const T* go = oc.grad() + (base + i) * width + coff;
                        const T* pi = p + i * len;
                        // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                        for (int64_t j = 0; j < len; ++j) {
                            dp[static_cast<size_t>(j)] = T(0);
                            if (pi[j] == T(0)) continue;
                            const T* vj = vc.data() + (base + j) * width + coff;
                            T acc = T(0);
                            for (int64_t c = 0; c < hd; ++c) acc += go[c] * vj[c];
                            dp[static_cast<size_t>(j)] = acc;
                            if (vc.requires_grad()) {
                                T* gv = vc.grad() + (base + j) * width + coff;
                                for (int64_t c = 0; c < hd; ++c) gv[c] += pi[j] * go[c];
                            }
                        }
                        // softmax jacobian: dS_ij = P_ij (dP_ij - sum_j' P_ij' dP_ij')
                        T dot = T(0);
                        for (int64_t j = 0; j < len; ++j) dot += pi[j] * dp[static_cast<size_t>(j)];
                        const T* qi = qc.data() + (base + i) * width + coff;
                        for (int64_t j = 0; j < len; ++j) {
                            if (pi[j] == T(0)) continue;
                            const T ds = pi[j] * (dp[static_cast<size_t>(j)] - dot) * inv_sqrt_d;
                            const T* kj = kc.data() + (base + j) * width + coff;
                            if (qc.requires_grad()) {
                                T* gq = qc.grad() + (base + i) * width + coff;
                                for (int64_t c = 0; c < hd; ++c) gq[c] += ds * kj[c];
                            }
                            if (kc.requires_grad()) {
                                T* gk = kc.grad() + (base + j) * width + coff;
                                for (int64_t c = 0; c < hd; ++c) gk[c] += ds * qi[c];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace hiflow
