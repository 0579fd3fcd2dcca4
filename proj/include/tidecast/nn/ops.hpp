// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <omp.h>

#include "tidecast/nn/tape.hpp"

namespace tidecast::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapC = Eigen::Map<const MatRM<T>>;

using IndexVec = std::shared_ptr<std::vector<int64_t>>;

namespace detail {

template <typename T>
NodePtr<T> fresh(std::vector<int64_t> shape, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = Array<T>(std::move(shape));
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
bool taped(Tape<T>* tape, const NodePtr<T>& out) {
    return tape != nullptr && out->requires_grad;
}

}  // namespace detail

// y = x W (+ b). x is read as rows of W.rows() columns; leading dims pass
// through unchanged.
template <typename T>
NodePtr<T> linear(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& W, const NodePtr<T>& b) {
    const int64_t cin = W->value.dim(0), cout = W->value.dim(1);
    const int64_t rows = x->value.rows(cin);
    if (b && b->value.numel() != cout) throw ShapeError("linear bias size mismatch");

    std::vector<int64_t> oshape = x->value.shape;
    oshape.back() = cout;
    auto out = detail::fresh<T>(std::move(oshape),
                                x->requires_grad || W->requires_grad || (b && b->requires_grad));

    MapC<T> X(x->value.data.data(), rows, cin);
    MapC<T> Wm(W->value.data.data(), cin, cout);
    MapM<T> Y(out->value.data.data(), rows, cout);
    Y.noalias() = X * Wm;
    if (b) {
        Eigen::Map<const Eigen::RowVector<T, Eigen::Dynamic>> bv(b->value.data.data(), cout);
        Y.rowwise() += bv;
    }

    if (detail::taped(tape, out)) {
        const size_t retained = x->is_param ? 0 : x->value.data.size();
        NodePtr<T> xn = x, Wn = W, bn = b;
        tape->record(retained, [xn, Wn, bn, out, rows, cin, cout]() {
            MapC<T> dY(out->grad.data.data(), rows, cout);
            if (xn->requires_grad) {
                xn->ensure_grad();
                MapM<T> dX(xn->grad.data.data(), rows, cin);
                MapC<T> Wm2(Wn->value.data.data(), cin, cout);
                dX.noalias() += dY * Wm2.transpose();
            }
            if (Wn->requires_grad) {
                Wn->ensure_grad();
                MapM<T> dW(Wn->grad.data.data(), cin, cout);
                MapC<T> X2(xn->value.data.data(), rows, cin);
                dW.noalias() += X2.transpose() * dY;
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                Eigen::Map<Eigen::RowVector<T, Eigen::Dynamic>> db(bn->grad.data.data(), cout);
                db += dY.colwise().sum();
            }
        });
    }
    return out;
}

// Batched matrix product over the leading dim. A: [B, n, k].
// trans_b == false: B [B, k, m] -> out [B, n, m];  true: B [B, m, k] -> A B^T.
template <typename T>
NodePtr<T> bmm(Tape<T>* tape, const NodePtr<T>& A, const NodePtr<T>& B, bool trans_b) {
    if (A->value.rank() != 3 || B->value.rank() != 3 || A->value.dim(0) != B->value.dim(0))
        throw ShapeError("bmm expects matching 3-d batches");
    const int64_t batch = A->value.dim(0), n = A->value.dim(1), k = A->value.dim(2);
    const int64_t m = trans_b ? B->value.dim(1) : B->value.dim(2);
    if ((trans_b ? B->value.dim(2) : B->value.dim(1)) != k) throw ShapeError("bmm inner dim mismatch");

    auto out = detail::fresh<T>({batch, n, m}, A->requires_grad || B->requires_grad);
    const T* a = A->value.data.data();
    const T* bp = B->value.data.data();
    T* o = out->value.data.data();
    const bool par = batch * n * m * k > 65536;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < batch; ++i) {
        MapC<T> Am(a + i * n * k, n, k);
        MapM<T> Om(o + i * n * m, n, m);
        if (trans_b) {
            MapC<T> Bm(bp + i * m * k, m, k);
            Om.noalias() = Am * Bm.transpose();
        } else {
            MapC<T> Bm(bp + i * k * m, k, m);
            Om.noalias() = Am * Bm;
        }
    }

    if (detail::taped(tape, out)) {
        size_t retained = (A->is_param ? 0 : A->value.data.size()) +
                          (B->is_param ? 0 : B->value.data.size());
        NodePtr<T> An = A, Bn = B;
        tape->record(retained, [An, Bn, out, batch, n, k, m, trans_b]() {
            if (An->requires_grad) An->ensure_grad();
            if (Bn->requires_grad) Bn->ensure_grad();
            const T* a2 = An->value.data.data();
            const T* b2 = Bn->value.data.data();
            const T* g = out->grad.data.data();
            T* da = An->requires_grad ? An->grad.data.data() : nullptr;
            T* db = Bn->requires_grad ? Bn->grad.data.data() : nullptr;
            const bool par = batch * n * m * k > 65536;
#pragma omp parallel for schedule(static) if (par)
            for (int64_t i = 0; i < batch; ++i) {
                MapC<T> dO(g + i * n * m, n, m);
                if (trans_b) {
                    MapC<T> Bm(b2 + i * m * k, m, k);
                    MapC<T> Am(a2 + i * n * k, n, k);
                    if (da) {
                        MapM<T> dA(da + i * n * k, n, k);
                        dA.noalias() += dO * Bm;
                    }
                    if (db) {
                        MapM<T> dB(db + i * m * k, m, k);
                        dB.noalias() += dO.transpose() * Am;
                    }
                } else {
                    MapC<T> Bm(b2 + i * k * m, k, m);
                    MapC<T> Am(a2 + i * n * k, n, k);
                    if (da) {
                        MapM<T> dA(da + i * n * k, n, k);
                        dA.noalias() += dO * Bm.transpose();
                    }
                    if (db) {
                        MapM<T> dB(db + i * k * m, k, m);
                        dB.noalias() += Am.transpose() * dO;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
NodePtr<T> add(Tape<T>* tape, const NodePtr<T>& a, const NodePtr<T>& b) {
    if (a->value.numel() != b->value.numel()) throw ShapeError("add size mismatch");
    auto out = detail::fresh<T>(a->value.shape, a->requires_grad || b->requires_grad);
    const int64_t n = a->value.numel();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (int64_t i = 0; i < n; ++i) out->value.data[i] = a->value.data[i] + b->value.data[i];

    if (detail::taped(tape, out)) {
        NodePtr<T> an = a, bn = b;
        tape->record(0, [an, bn, out, n]() {
            if (an->requires_grad) {
                an->ensure_grad();
#pragma omp parallel for schedule(static) if (n > 32768)
                for (int64_t i = 0; i < n; ++i) an->grad.data[i] += out->grad.data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
#pragma omp parallel for schedule(static) if (n > 32768)
                for (int64_t i = 0; i < n; ++i) bn->grad.data[i] += out->grad.data[i];
            }
        });
    }
    return out;
}

template <typename T>
NodePtr<T> scale(Tape<T>* tape, const NodePtr<T>& x, T s) {
    auto out = detail::fresh<T>(x->value.shape, x->requires_grad);
    const int64_t n = x->value.numel();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (int64_t i = 0; i < n; ++i) out->value.data[i] = x->value.data[i] * s;
    if (detail::taped(tape, out)) {
        NodePtr<T> xn = x;
        tape->record(0, [xn, out, s, n]() {
            xn->ensure_grad();
#pragma omp parallel for schedule(static) if (n > 32768)
            for (int64_t i = 0; i < n; ++i) xn->grad.data[i] += out->grad.data[i] * s;
        });
    }
    return out;
}

// x + c, with c tiled over the leading dim when smaller. No gradient for c.
template <typename T>
NodePtr<T> add_const(Tape<T>* tape, const NodePtr<T>& x, std::shared_ptr<Array<T>> c) {
    const int64_t n = x->value.numel(), cn = c->numel();
    if (cn == 0 || n % cn != 0) throw ShapeError("add_const tile size mismatch");
    auto out = detail::fresh<T>(x->value.shape, x->requires_grad);
#pragma omp parallel for schedule(static) if (n > 32768)
    for (int64_t i = 0; i < n; ++i) out->value.data[i] = x->value.data[i] + c->data[i % cn];
    if (detail::taped(tape, out)) {
        NodePtr<T> xn = x;
        tape->record(0, [xn, out, n]() {
            xn->ensure_grad();
#pragma omp parallel for schedule(static) if (n > 32768)
            for (int64_t i = 0; i < n; ++i) xn->grad.data[i] += out->grad.data[i];
        });
    }
    return out;
}

// Layer normalization over trailing `width` entries with learned affine.
template <typename T>
NodePtr<T> layer_norm(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& gamma,
                      const NodePtr<T>& beta, int64_t width, T eps = T(1e-5)) {
    const int64_t rows = x->value.rows(width);
    if (gamma->value.numel() != width || beta->value.numel() != width)
        throw ShapeError("layer_norm affine size mismatch");
    auto out = detail::fresh<T>(x->value.shape, true);

    auto xhat = std::make_shared<Array<T>>(std::vector<int64_t>{rows, width});
    auto inv_std = std::make_shared<Array<T>>(std::vector<int64_t>{rows});
    const T* xd = x->value.data.data();
    const T* g = gamma->value.data.data();
    const T* b = beta->value.data.data();
    T* od = out->value.data.data();
    T* xh = xhat->data.data();
    const bool par_ln = rows * width > 32768;
#pragma omp parallel for schedule(static) if (par_ln)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xd + r * width;
        double mean = 0;
        for (int64_t c = 0; c < width; ++c) mean += xr[c];
        mean /= width;
        double var = 0;
        for (int64_t c = 0; c < width; ++c) {
            const double d = xr[c] - mean;
            var += d * d;
        }
        var /= width;
        const T is = T(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std->data[r] = is;
        T* xhr = xh + r * width;
        T* orow = od + r * width;
        for (int64_t c = 0; c < width; ++c) {
            xhr[c] = (xr[c] - T(mean)) * is;
            orow[c] = xhr[c] * g[c] + b[c];
        }
    }

    if (tape != nullptr) {
        NodePtr<T> xn = x, gn = gamma, bn = beta;
        tape->record(xhat->data.size() + inv_std->data.size(),
                     [xn, gn, bn, out, xhat, inv_std, rows, width]() {
                         const T* gy = out->grad.data.data();
                         const T* xh2 = xhat->data.data();
                         const T* g2 = gn->value.data.data();
                         if (gn->requires_grad) gn->ensure_grad();
                         if (bn->requires_grad) bn->ensure_grad();
                         if (xn->requires_grad) xn->ensure_grad();
                         // affine grads: deterministic column reduction
                         if (gn->requires_grad || bn->requires_grad) {
                             for (int64_t c = 0; c < width; ++c) {
                                 double dg = 0, db = 0;
                                 for (int64_t r = 0; r < rows; ++r) {
                                     const T gyv = gy[r * width + c];
                                     dg += static_cast<double>(gyv) * xh2[r * width + c];
                                     db += gyv;
                                 }
                                 if (gn->requires_grad) gn->grad.data[c] += T(dg);
                                 if (bn->requires_grad) bn->grad.data[c] += T(db);
                             }
                         }
                         if (xn->requires_grad) {
                             T* gx = xn->grad.data.data();
#pragma omp parallel for schedule(static) if (rows * width > 32768)
                             for (int64_t r = 0; r < rows; ++r) {
                                 const T* gyr = gy + r * width;
                                 const T* xhr = xh2 + r * width;
                                 double m1 = 0, m2 = 0;
                                 for (int64_t c = 0; c < width; ++c) {
                                     const double dxh = static_cast<double>(gyr[c]) * g2[c];
                                     m1 += dxh;
                                     m2 += dxh * xhr[c];
                                 }
                                 m1 /= width;
                                 m2 /= width;
                                 const T is = inv_std->data[r];
                                 for (int64_t c = 0; c < width; ++c) {
                                     const double dxh = static_cast<double>(gyr[c]) * g2[c];
                                     gx[r * width + c] += is * T(dxh - m1 - xhr[c] * m2);
                                 }
                             }
                         }
                     });
    }
    return out;
}

// tanh-form GELU, vectorized through Eigen packet math. All work runs in
// fixed-size aligned scratch blocks so the vectorization path (and thus the
// bits) never depends on allocation addresses.
namespace detail {
constexpr int64_t kBlock = 4096;
}

template <typename T>
NodePtr<T> gelu(Tape<T>* tape, const NodePtr<T>& x) {
    auto out = detail::fresh<T>(x->value.shape, x->requires_grad);
    const int64_t n = x->value.numel();
    constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k1 = T(0.044715);
    using ArrT = Eigen::Array<T, Eigen::Dynamic, 1>;
    const int64_t blocks = (n + detail::kBlock - 1) / detail::kBlock;
#pragma omp parallel if (blocks > 1)
    {
        ArrT buf(detail::kBlock);
#pragma omp for schedule(static)
        for (int64_t b = 0; b < blocks; ++b) {
            const int64_t lo = b * detail::kBlock, len = std::min(detail::kBlock, n - lo);
            auto seg = buf.head(len);
            seg = Eigen::Map<const ArrT>(x->value.data.data() + lo, len);
            seg = T(0.5) * seg * (T(1) + (k0 * (seg + k1 * seg.cube())).tanh());
            std::copy(buf.data(), buf.data() + len, out->value.data.data() + lo);
        }
    }
    if (detail::taped(tape, out)) {
        NodePtr<T> xn = x;
        tape->record(x->is_param ? 0 : x->value.data.size(), [xn, out, n, blocks]() {
            constexpr T k0 = T(0.7978845608028654);
            constexpr T k1 = T(0.044715);
            xn->ensure_grad();
#pragma omp parallel if (blocks > 1)
            {
                ArrT xb(detail::kBlock), th(detail::kBlock);
#pragma omp for schedule(static)
                for (int64_t b = 0; b < blocks; ++b) {
                    const int64_t lo = b * detail::kBlock, len = std::min(detail::kBlock, n - lo);
                    xb.head(len) = Eigen::Map<const ArrT>(xn->value.data.data() + lo, len);
                    th.head(len) = (k0 * (xb.head(len) + k1 * xb.head(len).cube())).tanh();
                    th.head(len) = T(0.5) * (T(1) + th.head(len)) +
                                   T(0.5) * xb.head(len) * (T(1) - th.head(len).square()) * k0 *
                                       (T(1) + T(3) * k1 * xb.head(len).square());
                    const T* gy = out->grad.data.data() + lo;
                    T* gx = xn->grad.data.data() + lo;
                    for (int64_t i = 0; i < len; ++i) gx[i] += gy[i] * th[i];
                }
            }
        });
    }
    return out;
}

// Softmax over trailing `width` entries.
template <typename T>
NodePtr<T> softmax_last(Tape<T>* tape, const NodePtr<T>& x, int64_t width) {
    const int64_t rows = x->value.rows(width);
    auto out = detail::fresh<T>(x->value.shape, x->requires_grad);
    const T* xd = x->value.data.data();
    T* od = out->value.data.data();
    using ArrT = Eigen::Array<T, Eigen::Dynamic, 1>;
#pragma omp parallel if (rows * width > 16384)
    {
        ArrT buf(width);  // aligned scratch keeps the exp path address-independent
#pragma omp for schedule(static)
        for (int64_t r = 0; r < rows; ++r) {
            buf = Eigen::Map<const ArrT>(xd + r * width, width);
            buf = (buf - buf.maxCoeff()).exp();
            buf *= T(1) / buf.sum();
            std::copy(buf.data(), buf.data() + width, od + r * width);
        }
    }
    if (detail::taped(tape, out)) {
        NodePtr<T> xn = x;
        tape->record(out->value.data.size(), [xn, out, rows, width]() {
            xn->ensure_grad();
            const T* y = out->value.data.data();
            const T* gy = out->grad.data.data();
            T* gx = xn->grad.data.data();
#pragma omp parallel for schedule(static) if (rows * width > 16384)
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = y + r * width;
                const T* gyr = gy + r * width;
                double dot = 0;
                for (int64_t c = 0; c < width; ++c) dot += static_cast<double>(gyr[c]) * yr[c];
                for (int64_t c = 0; c < width; ++c)
                    gx[r * width + c] += yr[c] * (gyr[c] - T(dot));
            }
        });
    }
    return out;
}

// Gathers K source rows per output row and concatenates them. Index -1 reads
// zeros. `injective` asserts no source row is referenced twice, enabling a
// parallel scatter in the backward pass.
template <typename T>
NodePtr<T> gather_rows(Tape<T>* tape, const NodePtr<T>& x, IndexVec idx, int64_t K,
                       int64_t src_width, bool injective) {
    const int64_t in_rows = x->value.rows(src_width);
    if (idx->size() % K != 0) throw ShapeError("gather index table is not divisible by K");
    const int64_t out_rows = static_cast<int64_t>(idx->size()) / K;
    auto out = detail::fresh<T>({out_rows, K * src_width}, x->requires_grad);

    const T* xd = x->value.data.data();
    T* od = out->value.data.data();
    const int64_t* ix = idx->data();
    const bool par_g = out_rows * K * src_width > 32768;
#pragma omp parallel for schedule(static) if (par_g)
    for (int64_t r = 0; r < out_rows; ++r) {
        T* orow = od + r * K * src_width;
        for (int64_t k = 0; k < K; ++k) {
            const int64_t src = ix[r * K + k];
            T* dst = orow + k * src_width;
            if (src < 0) {
                std::fill(dst, dst + src_width, T(0));
            } else {
                if (src >= in_rows) throw ShapeError("gather index out of range");
                const T* srow = xd + src * src_width;
                std::copy(srow, srow + src_width, dst);
            }
        }
    }

    if (detail::taped(tape, out)) {
        NodePtr<T> xn = x;
        tape->record(0, [xn, out, idx, K, src_width, out_rows, injective]() {
            xn->ensure_grad();
            const T* gy = out->grad.data.data();
            T* gx = xn->grad.data.data();
            const int64_t* ix2 = idx->data();
            if (injective) {
#pragma omp parallel for schedule(static) if (out_rows * K * src_width > 32768)
                for (int64_t r = 0; r < out_rows; ++r)
                    for (int64_t k = 0; k < K; ++k) {
                        const int64_t src = ix2[r * K + k];
                        if (src < 0) continue;
                        const T* grow = gy + (r * K + k) * src_width;
                        T* gxr = gx + src * src_width;
                        for (int64_t c = 0; c < src_width; ++c) gxr[c] += grow[c];
                    }
            } else {
                for (int64_t r = 0; r < out_rows; ++r)
                    for (int64_t k = 0; k < K; ++k) {
                        const int64_t src = ix2[r * K + k];
                        if (src < 0) continue;
                        const T* grow = gy + (r * K + k) * src_width;
                        T* gxr = gx + src * src_width;
                        for (int64_t c = 0; c < src_width; ++c) gxr[c] += grow[c];
                    }
            }
        });
    }
    return out;
}

// Row concatenation of equal-width matrices.
template <typename T>
NodePtr<T> vstack(Tape<T>* tape, const NodePtr<T>& a, const NodePtr<T>& b, int64_t width) {
    const int64_t ra = a->value.rows(width), rb = b->value.rows(width);
    auto out = detail::fresh<T>({ra + rb, width}, a->requires_grad || b->requires_grad);
    std::copy(a->value.data.begin(), a->value.data.end(), out->value.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(), out->value.data.begin() + ra * width);
    if (detail::taped(tape, out)) {
        NodePtr<T> an = a, bn = b;
        tape->record(0, [an, bn, out, ra, rb, width]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < ra * width; ++i) an->grad.data[i] += out->grad.data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                const T* g = out->grad.data.data() + ra * width;
                for (int64_t i = 0; i < rb * width; ++i) bn->grad.data[i] += g[i];
            }
        });
    }
    return out;
}

// Column concatenation: [N, wa] ++ [N, wb] -> [N, wa+wb].
template <typename T>
NodePtr<T> concat_cols(Tape<T>* tape, const NodePtr<T>& a, const NodePtr<T>& b, int64_t wa,
                       int64_t wb) {
    const int64_t rows = a->value.rows(wa);
    if (b->value.rows(wb) != rows) throw ShapeError("concat_cols row mismatch");
    auto out = detail::fresh<T>({rows, wa + wb}, a->requires_grad || b->requires_grad);
    const T* ad = a->value.data.data();
    const T* bd = b->value.data.data();
    T* od = out->value.data.data();
    const bool par_c = rows * (wa + wb) > 32768;
#pragma omp parallel for schedule(static) if (par_c)
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(ad + r * wa, ad + (r + 1) * wa, od + r * (wa + wb));
        std::copy(bd + r * wb, bd + (r + 1) * wb, od + r * (wa + wb) + wa);
    }
    if (detail::taped(tape, out)) {
        NodePtr<T> an = a, bn = b;
        tape->record(0, [an, bn, out, rows, wa, wb]() {
            const T* g = out->grad.data.data();
            if (an->requires_grad) {
                an->ensure_grad();
#pragma omp parallel for schedule(static) if (rows * wa > 32768)
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < wa; ++c) an->grad.data[r * wa + c] += g[r * (wa + wb) + c];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
#pragma omp parallel for schedule(static) if (rows * wb > 32768)
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < wb; ++c)
                        bn->grad.data[r * wb + c] += g[r * (wa + wb) + wa + c];
            }
        });
    }
    return out;
}

// tokens[n, c] += spatial[sp_idx[n], c] + temporal[t_idx[n], c]
template <typename T>
NodePtr<T> add_positional(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& spatial,
                          const NodePtr<T>& temporal, IndexVec sp_idx, IndexVec t_idx,
                          int64_t width) {
    const int64_t rows = x->value.rows(width);
    if (static_cast<int64_t>(sp_idx->size()) != rows || static_cast<int64_t>(t_idx->size()) != rows)
        throw ShapeError("positional index length mismatch");
    auto out = detail::fresh<T>(x->value.shape, true);
    const T* xd = x->value.data.data();
    const T* sp = spatial->value.data.data();
    const T* tp = temporal->value.data.data();
    T* od = out->value.data.data();
    const int64_t* si = sp_idx->data();
    const int64_t* ti = t_idx->data();
#pragma omp parallel for schedule(static) if (rows * width > 32768)
    for (int64_t r = 0; r < rows; ++r) {
        const T* srow = sp + si[r] * width;
        const T* trow = tp + ti[r] * width;
        const T* xr = xd + r * width;
        T* orow = od + r * width;
        for (int64_t c = 0; c < width; ++c) orow[c] = xr[c] + srow[c] + trow[c];
    }
    if (tape != nullptr) {
        NodePtr<T> xn = x, sn = spatial, tn = temporal;
        tape->record(0, [xn, sn, tn, out, sp_idx, t_idx, rows, width]() {
            const T* g = out->grad.data.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
#pragma omp parallel for schedule(static) if (rows * width > 32768)
                for (int64_t i = 0; i < rows * width; ++i) xn->grad.data[i] += g[i];
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                const int64_t* si2 = sp_idx->data();
                for (int64_t r = 0; r < rows; ++r) {
                    T* row = sn->grad.data.data() + si2[r] * width;
                    for (int64_t c = 0; c < width; ++c) row[c] += g[r * width + c];
                }
            }
            if (tn->requires_grad) {
                tn->ensure_grad();
                const int64_t* ti2 = t_idx->data();
                for (int64_t r = 0; r < rows; ++r) {
                    T* row = tn->grad.data.data() + ti2[r] * width;
                    for (int64_t c = 0; c < width; ++c) row[c] += g[r * width + c];
                }
            }
        });
    }
    return out;
}

// Batch normalization over rows for each of `width` channels. Running
// buffers are plain arrays owned by the model; they update only in training
// mode with update_stats set (checkpoint replays pass false).
template <typename T>
NodePtr<T> batch_norm(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& gamma,
                      const NodePtr<T>& beta, const std::shared_ptr<Array<T>>& running_mean,
                      const std::shared_ptr<Array<T>>& running_var, int64_t width, bool training,
                      bool update_stats, T momentum = T(0.1), T eps = T(1e-5)) {
    const int64_t rows = x->value.rows(width);
    if (gamma->value.numel() != width || beta->value.numel() != width)
        throw ShapeError("batch_norm affine size mismatch");
    auto out = detail::fresh<T>(x->value.shape, true);
    const T* xd = x->value.data.data();
    const T* g = gamma->value.data.data();
    const T* b = beta->value.data.data();
    T* od = out->value.data.data();

    if (!training) {
        std::vector<T> scale(width), shift(width);
        for (int64_t c = 0; c < width; ++c) {
            const T is = T(1.0 / std::sqrt(static_cast<double>(running_var->data[c]) + eps));
            scale[c] = g[c] * is;
            shift[c] = b[c] - running_mean->data[c] * scale[c];
        }
#pragma omp parallel for schedule(static) if (rows * width > 32768)
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < width; ++c)
                od[r * width + c] = xd[r * width + c] * scale[c] + shift[c];
        if (tape != nullptr) {
            NodePtr<T> xn = x, gn = gamma, bn = beta;
            auto sc = std::make_shared<std::vector<T>>(std::move(scale));
            tape->record(0, [xn, gn, bn, out, sc, running_mean, rows, width]() {
                const T* gy = out->grad.data.data();
                if (xn->requires_grad) {
                    xn->ensure_grad();
#pragma omp parallel for schedule(static) if (rows * width > 32768)
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < width; ++c)
                            xn->grad.data[r * width + c] += gy[r * width + c] * (*sc)[c];
                }
                // affine grads are rarely needed in eval mode but cost little
                if (gn->requires_grad || bn->requires_grad) {
                    if (gn->requires_grad) gn->ensure_grad();
                    if (bn->requires_grad) bn->ensure_grad();
                    for (int64_t c = 0; c < width; ++c) {
                        double dg = 0, db = 0;
                        const T is_g = (*sc)[c] / (gn->value.data[c] == T(0) ? T(1) : gn->value.data[c]);
                        for (int64_t r = 0; r < rows; ++r) {
                            const T gyv = gy[r * width + c];
                            dg += static_cast<double>(gyv) *
                                  ((xn->value.data[r * width + c] - running_mean->data[c]) * is_g);
                            db += gyv;
                        }
                        if (gn->requires_grad) gn->grad.data[c] += T(dg);
                        if (bn->requires_grad) bn->grad.data[c] += T(db);
                    }
                }
            });
        }
        return out;
    }

    auto xhat = std::make_shared<Array<T>>(std::vector<int64_t>{rows, width});
    auto inv_std = std::make_shared<Array<T>>(std::vector<int64_t>{width});
    // fixed-chunk partial sums: deterministic for any thread count
    constexpr int kChunks = 16;
    std::vector<double> psum(kChunks * width, 0.0), psq(kChunks * width, 0.0);
#pragma omp parallel for schedule(static) if (rows * width > 32768)
    for (int chunk = 0; chunk < kChunks; ++chunk) {
        const int64_t lo = rows * chunk / kChunks, hi = rows * (chunk + 1) / kChunks;
        double* s = psum.data() + static_cast<size_t>(chunk) * width;
        double* q = psq.data() + static_cast<size_t>(chunk) * width;
        for (int64_t r = lo; r < hi; ++r)
            for (int64_t c = 0; c < width; ++c) {
                const double v = xd[r * width + c];
                s[c] += v;
                q[c] += v * v;
            }
    }
    std::vector<double> mean(width, 0.0), var(width, 0.0);
    for (int chunk = 0; chunk < kChunks; ++chunk)
        for (int64_t c = 0; c < width; ++c) {
            mean[c] += psum[static_cast<size_t>(chunk) * width + c];
            var[c] += psq[static_cast<size_t>(chunk) * width + c];
        }
    for (int64_t c = 0; c < width; ++c) {
        mean[c] /= rows;
        var[c] = var[c] / rows - mean[c] * mean[c];
        if (var[c] < 0) var[c] = 0;
    }

    if (update_stats) {
        for (int64_t c = 0; c < width; ++c) {
            running_mean->data[c] = (T(1) - momentum) * running_mean->data[c] + momentum * T(mean[c]);
            running_var->data[c] = (T(1) - momentum) * running_var->data[c] + momentum * T(var[c]);
        }
    }

    T* xh = xhat->data.data();
    for (int64_t c = 0; c < width; ++c)
        inv_std->data[c] = T(1.0 / std::sqrt(var[c] + static_cast<double>(eps)));
#pragma omp parallel for schedule(static) if (rows * width > 32768)
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < width; ++c) {
            const T v = (xd[r * width + c] - T(mean[c])) * inv_std->data[c];
            xh[r * width + c] = v;
            od[r * width + c] = v * g[c] + b[c];
        }

    if (tape != nullptr) {
        NodePtr<T> xn = x, gn = gamma, bn = beta;
        tape->record(xhat->data.size() + inv_std->data.size(),
                     [xn, gn, bn, out, xhat, inv_std, rows, width]() {
                         const T* gy = out->grad.data.data();
                         const T* xh2 = xhat->data.data();
                         const T* g2 = gn->value.data.data();
                         constexpr int kChunks = 16;
                         std::vector<double> pg(kChunks * width, 0.0), pgx(kChunks * width, 0.0);
#pragma omp parallel for schedule(static) if (rows * width > 32768)
                         for (int chunk = 0; chunk < kChunks; ++chunk) {
                             const int64_t lo = rows * chunk / kChunks, hi = rows * (chunk + 1) / kChunks;
                             double* a = pg.data() + static_cast<size_t>(chunk) * width;
                             double* b = pgx.data() + static_cast<size_t>(chunk) * width;
                             for (int64_t r = lo; r < hi; ++r)
                                 for (int64_t c = 0; c < width; ++c) {
                                     const double v = gy[r * width + c];
                                     a[c] += v;
                                     b[c] += v * xh2[r * width + c];
                                 }
                         }
                         std::vector<double> sum_gy(width, 0.0), sum_gyxh(width, 0.0);
                         for (int chunk = 0; chunk < kChunks; ++chunk)
                             for (int64_t c = 0; c < width; ++c) {
                                 sum_gy[c] += pg[static_cast<size_t>(chunk) * width + c];
                                 sum_gyxh[c] += pgx[static_cast<size_t>(chunk) * width + c];
                             }
                         if (gn->requires_grad) {
                             gn->ensure_grad();
                             for (int64_t c = 0; c < width; ++c) gn->grad.data[c] += T(sum_gyxh[c]);
                         }
                         if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (int64_t c = 0; c < width; ++c) bn->grad.data[c] += T(sum_gy[c]);
                         }
                         if (xn->requires_grad) {
                             xn->ensure_grad();
                             T* gx = xn->grad.data.data();
#pragma omp parallel for schedule(static) if (rows * width > 32768)
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int64_t c = 0; c < width; ++c) {
                                     const double term =
                                         gy[r * width + c] - sum_gy[c] / rows -
                                         xh2[r * width + c] * (sum_gyxh[c] / rows);
                                     gx[r * width + c] += g2[c] * inv_std->data[c] * T(term);
                                 }
                         }
                     });
    }
    return out;
}

// sum of w * (p - t)^2, as a scalar node.
template <typename T>
NodePtr<T> weighted_sse(Tape<T>* tape, const NodePtr<T>& pred, std::shared_ptr<Array<T>> target,
                        std::shared_ptr<Array<T>> weight) {
    const int64_t n = pred->value.numel();
    if (target->numel() != n || weight->numel() != n)
        throw ShapeError("weighted_sse size mismatch");
    auto out = detail::fresh<T>({1}, pred->requires_grad);
    const T* p = pred->value.data.data();
    const T* t = target->data.data();
    const T* w = weight->data.data();
    double acc = 0;
#pragma omp parallel for schedule(static) reduction(+ : acc) if (n > 32768)
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(p[i]) - t[i];
        acc += w[i] * d * d;
    }
    out->value.data[0] = T(acc);

    if (detail::taped(tape, out)) {
        NodePtr<T> pn = pred;
        tape->record(pn->value.data.size(), [pn, out, target, weight, n]() {
            pn->ensure_grad();
            const T g = out->grad.data[0];
            const T* p2 = pn->value.data.data();
            const T* t2 = target->data.data();
            const T* w2 = weight->data.data();
            T* gp = pn->grad.data.data();
#pragma omp parallel for schedule(static) if (n > 32768)
            for (int64_t i = 0; i < n; ++i)
                gp[i] += g * T(2) * w2[i] * (p2[i] - t2[i]);
        });
    }
    return out;
}

}  // namespace tidecast::nn
