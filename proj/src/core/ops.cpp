#include "ba2m/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>

namespace ba2m::ops {

namespace {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape != b.tape) throw InputError(std::string(op) + ": operands recorded on different tapes");
}

void check_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
    if (s.rank() != rank)
        throw DimensionError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) + ", got " +
                             s.to_string());
}

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t pad, std::size_t stride) {
    return (in + 2 * pad - k) / stride + 1;
}

// Row-major C[M,P] += A[M,K] * B[K,P].
template <typename T>
void gemm_acc(std::size_t M, std::size_t K, std::size_t P, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        T* crow = C + i * P;
        const T* arow = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = arow[k];
            const T* brow = B + k * P;
            for (std::size_t j = 0; j < P; ++j) crow[j] += a * brow[j];
        }
    }
}

template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// conv2d

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t groups, std::size_t padding, std::size_t stride) {
    check_same_tape(input, kernel, "conv2d");
    const Shape& xs = input.shape();
    const Shape& ks = kernel.shape();
    check_rank(xs, 4, "conv2d", "input");
    check_rank(ks, 4, "conv2d", "kernel");
    if (groups == 0) throw GroupingError("conv2d: groups must be positive");
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t Cout = ks[0], k = ks[2];
    if (C % groups != 0)
        throw GroupingError("conv2d: " + std::to_string(C) + " input channels not divisible by " +
                            std::to_string(groups) + " groups");
    if (Cout % groups != 0)
        throw GroupingError("conv2d: " + std::to_string(Cout) + " output channels not divisible by " +
                            std::to_string(groups) + " groups");
    if (ks[1] != C / groups || ks[3] != k)
        throw DimensionError("conv2d: kernel " + ks.to_string() + " incompatible with input " + xs.to_string() +
                             " and groups=" + std::to_string(groups));
    if (k != 1 && k != 3) throw DimensionError("conv2d: kernel size must be 1 or 3");
    if (padding != (k - 1) / 2) throw DimensionError("conv2d: padding must be (k-1)/2");
    if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");

    const std::size_t Ho = conv_out_size(H, k, padding, stride);
    const std::size_t Wo = conv_out_size(W, k, padding, stride);
    const std::size_t cin_g = C / groups, cout_g = Cout / groups;
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);

    // Visits every (output pixel, input pixel) pair touched by one kernel tap.
    auto for_each_tap = [=](auto&& body) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t g = 0; g < groups; ++g)
                for (std::size_t oc = g * cout_g; oc < (g + 1) * cout_g; ++oc)
                    for (std::size_t icg = 0; icg < cin_g; ++icg) {
                        const std::size_t ic = g * cin_g + icg;
                        for (std::size_t kh = 0; kh < k; ++kh)
                            for (std::size_t kw = 0; kw < k; ++kw) {
                                const std::size_t widx = ((oc * cin_g + icg) * k + kh) * k + kw;
                                // valid output columns: 0 <= ow*stride + kw - pad < W
                                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kw) - pad;
                                std::size_t ow_lo = 0;
                                while (static_cast<std::ptrdiff_t>(ow_lo * stride) + off < 0) ++ow_lo;
                                std::size_t ow_hi = Wo;
                                while (ow_hi > ow_lo &&
                                       static_cast<std::ptrdiff_t>((ow_hi - 1) * stride) + off >=
                                           static_cast<std::ptrdiff_t>(W))
                                    --ow_hi;
                                for (std::size_t oh = 0; oh < Ho; ++oh) {
                                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - pad;
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                    const std::size_t in_row = ((n * C + ic) * H + static_cast<std::size_t>(ih)) * W;
                                    const std::size_t out_row = ((n * Cout + oc) * Ho + oh) * Wo;
                                    body(widx, in_row, out_row, ow_lo, ow_hi, off);
                                }
                            }
                    }
    };

    const auto x = input.value().data();
    const auto w = kernel.value().data();
    Tensor<T> out(Shape{N, Cout, Ho, Wo});
    auto y = out.data();
    if (stride == 1) {
        for_each_tap([&](std::size_t widx, std::size_t in_row, std::size_t out_row, std::size_t lo, std::size_t hi,
                         std::ptrdiff_t off) {
            const T wv = w[widx];
            const T* src = x.data() + in_row + off;
            T* dst = y.data() + out_row;
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] += wv * src[ow];
        });
    } else {
        for_each_tap([&](std::size_t widx, std::size_t in_row, std::size_t out_row, std::size_t lo, std::size_t hi,
                         std::ptrdiff_t off) {
            const T wv = w[widx];
            for (std::size_t ow = lo; ow < hi; ++ow)
                y[out_row + ow] += wv * x[in_row + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(ow * stride) + off)];
        });
    }

    const std::uint64_t flops = 2ull * N * Cout * Ho * Wo * cin_g * k * k;
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id, kid = kernel.id;
    return tape->record(
        std::move(out), {input, kernel},
        [=](std::span<const T> gy) {
            const auto xv = tape->value(xid).data();
            const auto wv = tape->value(kid).data();
            const bool need_x = tape->requires_grad(xid);
            const bool need_w = tape->requires_grad(kid);
            std::span<T> gx = need_x ? tape->grad_buffer(xid) : std::span<T>{};
            std::span<T> gw = need_w ? tape->grad_buffer(kid) : std::span<T>{};
            for_each_tap([&](std::size_t widx, std::size_t in_row, std::size_t out_row, std::size_t lo, std::size_t hi,
                             std::ptrdiff_t off) {
                T acc = 0;
                for (std::size_t ow = lo; ow < hi; ++ow) {
                    const std::size_t xi =
                        in_row + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(ow * stride) + off);
                    const T g = gy[out_row + ow];
                    if (need_x) gx[xi] += wv[widx] * g;
                    acc += g * xv[xi];
                }
                if (need_w) gw[widx] += acc;
            });
        },
        "conv2d", flops);
}

// ---------------------------------------------------------------------------------------------
// pooling / fully connected

template <typename T>
Var<T> global_avg_pool(Var<T> input) {
    const Shape& xs = input.shape();
    check_rank(xs, 4, "global_avg_pool", "input");
    const std::size_t NC = xs[0] * xs[1], HW = xs[2] * xs[3];
    Tensor<T> out(Shape{xs[0], xs[1], 1, 1});
    const auto x = input.value().data();
    for (std::size_t p = 0; p < NC; ++p) {
        T s = 0;
        for (std::size_t i = 0; i < HW; ++i) s += x[p * HW + i];
        out[p] = s / static_cast<T>(HW);
    }
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id;
    return tape->record(
        std::move(out), {input},
        [=](std::span<const T> gy) {
            auto gx = tape->grad_buffer(xid);
            for (std::size_t p = 0; p < NC; ++p) {
                const T g = gy[p] / static_cast<T>(HW);
                for (std::size_t i = 0; i < HW; ++i) gx[p * HW + i] += g;
            }
        },
        "global_avg_pool", NC * HW);
}

template <typename T>
Var<T> fully_connected(Var<T> input, Var<T> weight, std::optional<Var<T>> bias) {
    check_same_tape(input, weight, "fully_connected");
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    check_rank(xs, 2, "fully_connected", "input");
    check_rank(ws, 2, "fully_connected", "weight");
    const std::size_t N = xs[0], Cin = xs[1], Cout = ws[0];
    if (ws[1] != Cin)
        throw DimensionError("fully_connected: weight " + ws.to_string() + " incompatible with input " + xs.to_string());
    if (bias) {
        check_same_tape(input, *bias, "fully_connected");
        if (bias->shape() != Shape{Cout})
            throw DimensionError("fully_connected: bias must be [" + std::to_string(Cout) + "], got " +
                                 bias->shape().to_string());
    }
    const auto x = input.value().data();
    const auto w = weight.value().data();
    Tensor<T> out(Shape{N, Cout});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Cout; ++o) {
            T s = bias ? bias->value()[o] : T{0};
            for (std::size_t i = 0; i < Cin; ++i) s += w[o * Cin + i] * x[n * Cin + i];
            out[n * Cout + o] = s;
        }
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id, wid = weight.id;
    const std::optional<std::size_t> bid = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
    const std::uint64_t flops = 2ull * N * Cin * Cout + (bias ? N * Cout : 0);
    auto backward = [=](std::span<const T> gy) {
        const auto xv = tape->value(xid).data();
        const auto wv = tape->value(wid).data();
        if (tape->requires_grad(xid)) {
            auto gx = tape->grad_buffer(xid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Cout; ++o) {
                    const T g = gy[n * Cout + o];
                    for (std::size_t i = 0; i < Cin; ++i) gx[n * Cin + i] += g * wv[o * Cin + i];
                }
        }
        if (tape->requires_grad(wid)) {
            auto gw = tape->grad_buffer(wid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Cout; ++o) {
                    const T g = gy[n * Cout + o];
                    for (std::size_t i = 0; i < Cin; ++i) gw[o * Cin + i] += g * xv[n * Cin + i];
                }
        }
        if (bid && tape->requires_grad(*bid)) {
            auto gb = tape->grad_buffer(*bid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Cout; ++o) gb[o] += gy[n * Cout + o];
        }
    };
    if (bias) return tape->record(std::move(out), {input, weight, *bias}, backward, "fully_connected", flops);
    return tape->record(std::move(out), {input, weight}, backward, "fully_connected", flops);
}

// ---------------------------------------------------------------------------------------------
// batch norm

template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, Mode mode) {
    check_same_tape(input, gamma, "batch_norm");
    check_same_tape(input, beta, "batch_norm");
    const Shape& xs = input.shape();
    if (xs.rank() != 2 && xs.rank() != 4)
        throw DimensionError("batch_norm: input must be [N,C] or [N,C,H,W], got " + xs.to_string());
    const std::size_t N = xs[0], C = xs[1], S = xs.span_size(2, xs.rank());
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || stats.running_mean.numel() != C)
        throw DimensionError("batch_norm: gamma/beta/stats must have " + std::to_string(C) + " channels");
    if (!(stats.eps > 0)) throw ConfigError("batch_norm: eps must be positive");

    const std::size_t count = N * S;
    const auto x = input.value().data();
    const auto gm = gamma.value().data();
    const auto bt = beta.value().data();
    std::vector<T> mean(C), inv_std(C);

    if (mode == Mode::train) {
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) s += x[(n * C + c) * S + i];
            const double mu = s / static_cast<double>(count);
            double v = 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) {
                    const double d = x[(n * C + c) * S + i] - mu;
                    v += d * d;
                }
            const double var = v / static_cast<double>(count);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + stats.eps));
            const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
            const double m = stats.momentum;
            stats.running_mean[c] = static_cast<T>((1 - m) * stats.running_mean[c] + m * mu);
            stats.running_var[c] = static_cast<T>((1 - m) * stats.running_var[c] + m * unbiased);
        }
        stats.initialized = true;
    } else {
        if (!stats.initialized && !stats.warned) {
            spdlog::warn("batch_norm: eval before any train step; using default running stats (mean 0, var 1)");
            stats.warned = true;
        }
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = stats.running_mean[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) + stats.eps));
        }
    }

    Tensor<T> out(xs);
    Tensor<T> xhat(xs);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i) {
                const std::size_t idx = (n * C + c) * S + i;
                xhat[idx] = (x[idx] - mean[c]) * inv_std[c];
                out[idx] = gm[c] * xhat[idx] + bt[c];
            }

    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id, gid = gamma.id, bid = beta.id;
    const bool train = mode == Mode::train;
    return tape->record(
        std::move(out), {input, gamma, beta},
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const T> gy) {
            const auto gmv = tape->value(gid).data();
            std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < S; ++i) {
                        const std::size_t idx = (n * C + c) * S + i;
                        sum_g[c] += gy[idx];
                        sum_gx[c] += gy[idx] * xhat[idx];
                    }
            if (tape->requires_grad(gid)) {
                auto gg = tape->grad_buffer(gid);
                for (std::size_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_gx[c]);
            }
            if (tape->requires_grad(bid)) {
                auto gb = tape->grad_buffer(bid);
                for (std::size_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_g[c]);
            }
            if (tape->requires_grad(xid)) {
                auto gx = tape->grad_buffer(xid);
                const double inv_count = 1.0 / static_cast<double>(count);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        const double scale = static_cast<double>(gmv[c]) * inv_std[c];
                        for (std::size_t i = 0; i < S; ++i) {
                            const std::size_t idx = (n * C + c) * S + i;
                            if (train) {
                                gx[idx] += static_cast<T>(scale * (gy[idx] - sum_g[c] * inv_count -
                                                                   xhat[idx] * sum_gx[c] * inv_count));
                            } else {
                                gx[idx] += static_cast<T>(scale * gy[idx]);
                            }
                        }
                    }
            }
        },
        "batch_norm", 2ull * xs.numel());
}

// ---------------------------------------------------------------------------------------------
// matmul

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b) {
    check_same_tape(a, b, "matmul");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.rank() < 2 || as.rank() != bs.rank())
        throw DimensionError("matmul: operands must share a rank >= 2, got " + as.to_string() + " and " +
                             bs.to_string());
    const std::size_t r = as.rank();
    for (std::size_t i = 0; i + 2 < r; ++i)
        if (as[i] != bs[i])
            throw DimensionError("matmul: batch dims differ: " + as.to_string() + " vs " + bs.to_string());
    const std::size_t M = transpose_a ? as[r - 1] : as[r - 2];
    const std::size_t K = transpose_a ? as[r - 2] : as[r - 1];
    const std::size_t Kb = transpose_b ? bs[r - 1] : bs[r - 2];
    const std::size_t P = transpose_b ? bs[r - 2] : bs[r - 1];
    if (K != Kb)
        throw DimensionError("matmul: inner dims differ: " + as.to_string() + " x " + bs.to_string());
    const std::size_t batch = as.span_size(0, r - 2);

    std::vector<std::size_t> out_dims(as.dims().begin(), as.dims().end() - 2);
    out_dims.push_back(M);
    out_dims.push_back(P);
    Tensor<T> out{Shape(out_dims)};

    const auto av = a.value().data();
    const auto bv = b.value().data();
    std::vector<T> ta, tb;
    for (std::size_t s = 0; s < batch; ++s) {
        const T* A = av.data() + s * M * K;
        const T* B = bv.data() + s * K * P;
        if (transpose_a) {
            ta.resize(M * K);
            transpose_into(K, M, A, ta.data());
            A = ta.data();
        }
        if (transpose_b) {
            tb.resize(K * P);
            transpose_into(P, K, B, tb.data());
            B = tb.data();
        }
        gemm_acc(M, K, P, A, B, out.data().data() + s * M * P);
    }

    Tape<T>* tape = a.tape;
    const std::size_t aid = a.id, bid = b.id;
    return tape->record(
        std::move(out), {a, b},
        [=](std::span<const T> gy) {
            const auto av2 = tape->value(aid).data();
            const auto bv2 = tape->value(bid).data();
            const bool need_a = tape->requires_grad(aid);
            const bool need_b = tape->requires_grad(bid);
            std::span<T> ga = need_a ? tape->grad_buffer(aid) : std::span<T>{};
            std::span<T> gb = need_b ? tape->grad_buffer(bid) : std::span<T>{};
            std::vector<T> A(M * K), B(K * P), At(K * M), Bt(P * K), tmp;
            for (std::size_t s = 0; s < batch; ++s) {
                const T* G = gy.data() + s * M * P;
                // Logical (non-transposed) operands.
                if (transpose_a) transpose_into(K, M, av2.data() + s * M * K, A.data());
                else std::copy_n(av2.data() + s * M * K, M * K, A.data());
                if (transpose_b) transpose_into(P, K, bv2.data() + s * K * P, B.data());
                else std::copy_n(bv2.data() + s * K * P, K * P, B.data());
                if (need_a) {
                    // dA = G * B^T  [M,K]
                    transpose_into(K, P, B.data(), Bt.data());
                    tmp.assign(M * K, T{0});
                    gemm_acc(M, P, K, G, Bt.data(), tmp.data());
                    T* dst = ga.data() + s * M * K;
                    if (transpose_a) {
                        for (std::size_t i = 0; i < M; ++i)
                            for (std::size_t k = 0; k < K; ++k) dst[k * M + i] += tmp[i * K + k];
                    } else {
                        for (std::size_t i = 0; i < M * K; ++i) dst[i] += tmp[i];
                    }
                }
                if (need_b) {
                    // dB = A^T * G  [K,P]
                    transpose_into(M, K, A.data(), At.data());
                    tmp.assign(K * P, T{0});
                    gemm_acc(K, M, P, At.data(), G, tmp.data());
                    T* dst = gb.data() + s * K * P;
                    if (transpose_b) {
                        for (std::size_t k = 0; k < K; ++k)
                            for (std::size_t j = 0; j < P; ++j) dst[j * K + k] += tmp[k * P + j];
                    } else {
                        for (std::size_t i = 0; i < K * P; ++i) dst[i] += tmp[i];
                    }
                }
            }
        },
        "matmul", 2ull * batch * M * K * P);
}

// ---------------------------------------------------------------------------------------------
// softmax / max / mean

template <typename T>
Var<T> softmax(Var<T> input, std::size_t axis) {
    const Shape& xs = input.shape();
    if (axis >= xs.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + xs.to_string());
    const std::size_t outer = xs.span_size(0, axis), len = xs[axis], inner = xs.span_size(axis + 1, xs.rank());
    const auto x = input.value().data();
    Tensor<T> out(xs);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x[base + i * inner]);
            T s = 0;
            for (std::size_t i = 0; i < len; ++i) {
                const T e = std::exp(x[base + i * inner] - mx);
                out[base + i * inner] = e;
                s += e;
            }
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= s;
        }
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id;
    Tensor<T> y = out;
    return tape->record(
        std::move(out), {input},
        [=, y = std::move(y)](std::span<const T> gy) {
            auto gx = tape->grad_buffer(xid);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot = 0;
                    for (std::size_t i = 0; i < len; ++i) dot += gy[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < len; ++i) {
                        const std::size_t idx = base + i * inner;
                        gx[idx] += y[idx] * (gy[idx] - dot);
                    }
                }
        },
        "softmax", 3ull * xs.numel());
}

template <typename T>
Var<T> max3(Var<T> a, Var<T> b, Var<T> c) {
    check_same_tape(a, b, "max3");
    check_same_tape(a, c, "max3");
    if (a.shape() != b.shape() || a.shape() != c.shape())
        throw DimensionError("max3: shapes differ: " + a.shape().to_string() + ", " + b.shape().to_string() + ", " +
                             c.shape().to_string());
    const auto av = a.value().data(), bv = b.value().data(), cv = c.value().data();
    const std::size_t n = av.size();
    Tensor<T> out(a.shape());
    // 0, 1, 2 = winning operand; ties resolved toward the earlier operand.
    std::vector<unsigned char> winner(n);
    for (std::size_t i = 0; i < n; ++i) {
        unsigned char w = 0;
        T m = av[i];
        if (bv[i] > m) {
            m = bv[i];
            w = 1;
        }
        if (cv[i] > m) {
            m = cv[i];
            w = 2;
        }
        out[i] = m;
        winner[i] = w;
    }
    Tape<T>* tape = a.tape;
    const std::size_t ids[3] = {a.id, b.id, c.id};
    return tape->record(
        std::move(out), {a, b, c},
        [=, winner = std::move(winner)](std::span<const T> gy) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t id = ids[winner[i]];
                if (tape->requires_grad(id)) tape->grad_buffer(id)[i] += gy[i];
            }
        },
        "max3", 2ull * n);
}

template <typename T>
Var<T> reduce_mean(Var<T> input, std::size_t axis) {
    const Shape& xs = input.shape();
    if (axis >= xs.rank())
        throw DimensionError("reduce_mean: axis " + std::to_string(axis) + " out of range for " + xs.to_string());
    const std::size_t outer = xs.span_size(0, axis), len = xs[axis], inner = xs.span_size(axis + 1, xs.rank());
    std::vector<std::size_t> dims;
    for (std::size_t i = 0; i < xs.rank(); ++i)
        if (i != axis) dims.push_back(xs[i]);
    if (dims.empty()) dims.push_back(1);
    const auto x = input.value().data();
    Tensor<T> out{Shape(dims)};
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            T s = 0;
            for (std::size_t i = 0; i < len; ++i) s += x[(o * len + i) * inner + in];
            out[o * inner + in] = s / static_cast<T>(len);
        }
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id;
    return tape->record(
        std::move(out), {input},
        [=](std::span<const T> gy) {
            auto gx = tape->grad_buffer(xid);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const T g = gy[o * inner + in] / static_cast<T>(len);
                    for (std::size_t i = 0; i < len; ++i) gx[(o * len + i) * inner + in] += g;
                }
        },
        "reduce_mean", xs.numel());
}

// ---------------------------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> relu(Var<T> input) {
    const auto x = input.value().data();
    Tensor<T> out(input.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id;
    return tape->record(
        std::move(out), {input},
        [=](std::span<const T> gy) {
            const auto xv = tape->value(xid).data();
            auto gx = tape->grad_buffer(xid);
            for (std::size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > T{0}) gx[i] += gy[i];
        },
        "relu", x.size());
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    check_same_tape(a, b, "add");
    if (a.shape() != b.shape())
        throw DimensionError("add: shapes differ: " + a.shape().to_string() + " vs " + b.shape().to_string());
    const auto av = a.value().data(), bv = b.value().data();
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    Tape<T>* tape = a.tape;
    const std::size_t aid = a.id, bid = b.id;
    return tape->record(
        std::move(out), {a, b},
        [=](std::span<const T> gy) {
            for (std::size_t id : {aid, bid}) {
                if (!tape->requires_grad(id)) continue;
                auto g = tape->grad_buffer(id);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
        },
        "add", av.size());
}

template <typename T>
Var<T> scale(Var<T> input, T factor) {
    const auto x = input.value().data();
    Tensor<T> out(input.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id;
    return tape->record(
        std::move(out), {input},
        [=](std::span<const T> gy) {
            auto gx = tape->grad_buffer(xid);
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
        },
        "scale", x.size());
}

template <typename T>
Var<T> scale_samples(Var<T> input, Var<T> weights) {
    check_same_tape(input, weights, "scale_samples");
    const Shape& xs = input.shape();
    const std::size_t N = xs[0];
    if (weights.value().numel() != N)
        throw DimensionError("scale_samples: " + std::to_string(weights.value().numel()) + " weights for batch of " +
                             std::to_string(N));
    const std::size_t per = xs.numel() / N;
    const auto x = input.value().data();
    const auto w = weights.value().data();
    Tensor<T> out(xs);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < per; ++i) out[n * per + i] = w[n] * x[n * per + i];
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id, wid = weights.id;
    return tape->record(
        std::move(out), {input, weights},
        [=](std::span<const T> gy) {
            const auto xv = tape->value(xid).data();
            const auto wv = tape->value(wid).data();
            if (tape->requires_grad(xid)) {
                auto gx = tape->grad_buffer(xid);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < per; ++i) gx[n * per + i] += wv[n] * gy[n * per + i];
            }
            if (tape->requires_grad(wid)) {
                auto gw = tape->grad_buffer(wid);
                for (std::size_t n = 0; n < N; ++n) {
                    T s = 0;
                    for (std::size_t i = 0; i < per; ++i) s += xv[n * per + i] * gy[n * per + i];
                    gw[n] += s;
                }
            }
        },
        "scale_samples", xs.numel());
}

template <typename T>
Var<T> reshape(Var<T> input, Shape shape) {
    Tensor<T> out = input.value().reshaped(std::move(shape));
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id;
    return tape->record(
        std::move(out), {input},
        [=](std::span<const T> gy) {
            auto gx = tape->grad_buffer(xid);
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        },
        "reshape", 0);
}

template <typename T>
Var<T> weighted_sum(Var<T> input, const Tensor<T>& coeffs) {
    if (coeffs.shape() != input.shape())
        throw DimensionError("weighted_sum: coefficient shape " + coeffs.shape().to_string() + " vs input " +
                             input.shape().to_string());
    const auto x = input.value().data();
    T s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * coeffs[i];
    Tape<T>* tape = input.tape;
    const std::size_t xid = input.id;
    return tape->record(
        Tensor<T>(Shape{1}, std::vector<T>{s}), {input},
        [=](std::span<const T> gy) {
            auto gx = tape->grad_buffer(xid);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0] * coeffs[i];
        },
        "weighted_sum", 2ull * x.size());
}

// ---------------------------------------------------------------------------------------------
// loss

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels, std::span<const T> sample_weights) {
    const Shape& ls = logits.shape();
    check_rank(ls, 2, "cross_entropy", "logits");
    const std::size_t N = ls[0], K = ls[1];
    if (labels.size() != N)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(N));
    if (!sample_weights.empty() && sample_weights.size() != N)
        throw DimensionError("cross_entropy: sample weight count must equal batch size");
    for (std::size_t i = 0; i < N; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K)
            throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                             std::to_string(K) + ")");
        if (!sample_weights.empty() && !(sample_weights[i] >= T{0}))
            throw InputError("cross_entropy: sample weights must be non-negative");
    }
    const auto f = logits.value().data();
    std::vector<T> prob(N * K);
    std::vector<int> y(labels.begin(), labels.end());
    std::vector<T> w(N, T{1});
    if (!sample_weights.empty()) std::copy(sample_weights.begin(), sample_weights.end(), w.begin());
    double loss = 0;
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = f.data() + n * K;
        const T mx = *std::max_element(row, row + K);
        double s = 0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k] - mx));
        const double lse = static_cast<double>(mx) + std::log(s);
        for (std::size_t k = 0; k < K; ++k) prob[n * K + k] = static_cast<T>(std::exp(row[k] - lse));
        loss += w[n] * (lse - row[y[n]]);
    }
    loss /= static_cast<double>(N);
    Tape<T>* tape = logits.tape;
    const std::size_t lid = logits.id;
    return tape->record(
        Tensor<T>(Shape{1}, std::vector<T>{static_cast<T>(loss)}), {logits},
        [=, prob = std::move(prob), y = std::move(y), w = std::move(w)](std::span<const T> gy) {
            auto gl = tape->grad_buffer(lid);
            for (std::size_t n = 0; n < N; ++n) {
                const T scale = gy[0] * w[n] / static_cast<T>(N);
                for (std::size_t k = 0; k < K; ++k) {
                    const T onehot = static_cast<std::size_t>(y[n]) == k ? T{1} : T{0};
                    gl[n * K + k] += scale * (prob[n * K + k] - onehot);
                }
            }
        },
        "cross_entropy", 4ull * N * K);
}

// ---------------------------------------------------------------------------------------------

#define BA2M_INSTANTIATE_OPS(T)                                                                         \
    template Var<T> conv2d(Var<T>, Var<T>, std::size_t, std::size_t, std::size_t);                     \
    template Var<T> global_avg_pool(Var<T>);                                                            \
    template Var<T> fully_connected(Var<T>, Var<T>, std::optional<Var<T>>);                             \
    template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormStats<T>&, Mode);                       \
    template Var<T> matmul(Var<T>, Var<T>, bool, bool);                                                 \
    template Var<T> softmax(Var<T>, std::size_t);                                                       \
    template Var<T> max3(Var<T>, Var<T>, Var<T>);                                                       \
    template Var<T> reduce_mean(Var<T>, std::size_t);                                                   \
    template Var<T> relu(Var<T>);                                                                       \
    template Var<T> add(Var<T>, Var<T>);                                                                \
    template Var<T> scale(Var<T>, T);                                                                   \
    template Var<T> scale_samples(Var<T>, Var<T>);                                                      \
    template Var<T> reshape(Var<T>, Shape);                                                             \
    template Var<T> weighted_sum(Var<T>, const Tensor<T>&);                                             \
    template Var<T> cross_entropy(Var<T>, std::span<const int>, std::span<const T>);

BA2M_INSTANTIATE_OPS(float)
BA2M_INSTANTIATE_OPS(double)

}  // namespace ba2m::ops
