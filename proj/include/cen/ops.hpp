#pragma once

// Differentiable operators over cen::Tensor.
//
// Each op computes its forward value eagerly and, when a tape is active and
// an input requires a gradient, records a closure that accumulates into the
// inputs' gradient buffers. All loops run in a fixed order so results are
// bitwise reproducible for a given input.

#include <atomic>
#include <initializer_list>
#include <limits>
#include <numeric>

#include "cen/tensor.hpp"

namespace cen {

/// Deliberate corruption switches for negative-control gradient checks.
struct FaultInjection {
    std::atomic<bool> conv2d_backward{false};
};

inline FaultInjection& fault_injection() {
    static FaultInjection faults;
    return faults;
}

namespace detail {

template <typename T>
void record(std::string_view op, Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
            typename Tape<T>::BackwardFn fn) {
    if (auto* tape = Tape<T>::current()) tape->record(op, out, inputs, std::move(fn));
}

inline void require(bool ok, const std::string& message) {
    if (!ok) throw DimensionError(message);
}

// C[M,N] += A[M,K] * B[K,N], all row-major and densely packed. Blocked over
// columns with four output rows per pass; reduction order over K is fixed.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    constexpr std::size_t kColBlock = 256;
    for (std::size_t j0 = 0; j0 < N; j0 += kColBlock) {
        const std::size_t jn = std::min(N, j0 + kColBlock) - j0;
        std::size_t i = 0;
        for (; i + 4 <= M; i += 4) {
            T* c0 = C + (i + 0) * N + j0;
            T* c1 = C + (i + 1) * N + j0;
            T* c2 = C + (i + 2) * N + j0;
            T* c3 = C + (i + 3) * N + j0;
            for (std::size_t k = 0; k < K; ++k) {
                const T a0 = A[(i + 0) * K + k];
                const T a1 = A[(i + 1) * K + k];
                const T a2 = A[(i + 2) * K + k];
                const T a3 = A[(i + 3) * K + k];
                const T* b = B + k * N + j0;
                for (std::size_t j = 0; j < jn; ++j) {
                    const T bv = b[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        }
        for (; i < M; ++i) {
            T* c = C + i * N + j0;
            for (std::size_t k = 0; k < K; ++k) {
                const T a = A[i * K + k];
                const T* b = B + k * N + j0;
                for (std::size_t j = 0; j < jn; ++j) c[j] += a * b[j];
            }
        }
    }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
    std::size_t cin, h, w, k, stride, pad, hout, wout;
    [[nodiscard]] std::size_t patch() const { return cin * k * k; }
    [[nodiscard]] std::size_t positions() const { return hout * wout; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = col + ((ci * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.hout; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    T* dst = row + oy * g.wout;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wout, T(0));
                        continue;
                    }
                    const T* src = in + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wout; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const ConvGeometry& g, const T* col, T* in) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = col + ((ci * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.hout; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* dst = in + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const T* src = row + oy * g.wout;
                    for (std::size_t ox = 0; ox < g.wout; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Reflect index into [0, n) without repeating the edge sample; periodic for
// offsets larger than the extent.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    detail::require(ws.c == is.c, "conv2d: input has " + std::to_string(is.c) + " channels, weight expects " +
                                      std::to_string(ws.c));
    detail::require(ws.h == ws.w && ws.h % 2 == 1, "conv2d: kernel must be square with odd extent, got " + ws.str());
    detail::require(stride >= 1, "conv2d: stride must be positive");
    detail::require(is.h + 2 * padding >= ws.h && is.w + 2 * padding >= ws.w,
                    "conv2d: kernel " + std::to_string(ws.h) + " exceeds padded input " + is.str());
    detail::require(!bias.defined() || bias.numel() == ws.n,
                    "conv2d: bias length " + std::to_string(bias.defined() ? bias.numel() : 0) +
                        " does not match output channels " + std::to_string(ws.n));

    const detail::ConvGeometry g{is.c, is.h, is.w, ws.h, stride, padding, (is.h + 2 * padding - ws.h) / stride + 1,
                                 (is.w + 2 * padding - ws.w) / stride + 1};
    const std::size_t cout = ws.n;
    const std::size_t K = g.patch();
    const std::size_t P = g.positions();

    Tensor<T> out(Shape{is.n, cout, g.hout, g.wout});
    std::vector<T> col(K * P);
    const T* in = input.data().data();
    const T* wt = weight.data().data();
    T* o = out.data().data();
    for (std::size_t n = 0; n < is.n; ++n) {
        detail::im2col(g, in + n * is.c * is.h * is.w, col.data());
        T* on = o + n * cout * P;
        if (bias.defined()) {
            const auto b = bias.data();
            for (std::size_t co = 0; co < cout; ++co) std::fill(on + co * P, on + (co + 1) * P, b[co]);
        }
        detail::gemm_acc(cout, P, K, wt, col.data(), on);
    }

    detail::record<T>("conv2d", out, {&input, &weight, &bias},
                      [input = input, weight = weight, bias = bias, g, cout](std::span<const T> gout) mutable {
                          const std::size_t K = g.patch();
                          const std::size_t P = g.positions();
                          const std::size_t N = input.shape().n;
                          const std::size_t in_stride = g.cin * g.h * g.w;
                          std::vector<T> col(K * P);
                          std::vector<T> scratch;
                          if (bias.defined() && bias.requires_grad()) {
                              auto gb = bias.ensure_grad();
                              for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t co = 0; co < cout; ++co) {
                                      const T* src = gout.data() + (n * cout + co) * P;
                                      T acc = T(0);
                                      for (std::size_t p = 0; p < P; ++p) acc += src[p];
                                      gb[co] += acc;
                                  }
                          }
                          if (weight.requires_grad()) {
                              auto gw = weight.ensure_grad();
                              scratch.resize(P * K);
                              std::vector<T> dw(cout * K, T(0));
                              for (std::size_t n = 0; n < N; ++n) {
                                  detail::im2col(g, input.data().data() + n * in_stride, col.data());
                                  detail::transpose(K, P, col.data(), scratch.data());
                                  detail::gemm_acc(cout, K, P, gout.data() + n * cout * P, scratch.data(), dw.data());
                              }
                              const T corrupt = fault_injection().conv2d_backward.load() ? T(1.01) : T(1);
                              for (std::size_t i = 0; i < dw.size(); ++i) gw[i] += corrupt * dw[i];
                          }
                          if (input.requires_grad()) {
                              auto gi = input.ensure_grad();
                              std::vector<T> wt(K * cout);
                              detail::transpose(cout, K, weight.data().data(), wt.data());
                              for (std::size_t n = 0; n < N; ++n) {
                                  std::fill(col.begin(), col.end(), T(0));
                                  detail::gemm_acc(K, P, cout, wt.data(), gout.data() + n * cout * P, col.data());
                                  detail::col2im_acc(g, col.data(), gi.data() + n * in_stride);
                              }
                          }
                      });
    return out;
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// position in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input) {
    const Shape& s = input.shape();
    detail::require(s.h % 2 == 0 && s.w % 2 == 0, "maxpool2d: spatial extents must be even, got " + s.str());
    Tensor<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
    std::vector<std::uint32_t> argmax(out.numel());
    const T* in = input.data().data();
    T* o = out.data().data();
    const std::size_t oh = s.h / 2;
    const std::size_t ow = s.w / 2;
    for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
        const T* ip = in + plane * s.h * s.w;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                const std::size_t base = (2 * y) * s.w + 2 * x;
                const std::size_t cand[4] = {base, base + 1, base + s.w, base + s.w + 1};
                std::size_t best = cand[0];
                for (int i = 1; i < 4; ++i)
                    if (ip[cand[i]] > ip[best]) best = cand[i];
                const std::size_t oi = (plane * oh + y) * ow + x;
                o[oi] = ip[best];
                argmax[oi] = static_cast<std::uint32_t>(plane * s.h * s.w + best);
            }
        }
    }
    detail::record<T>("maxpool2d", out, {&input}, [input = input, argmax = std::move(argmax)](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gi[argmax[i]] += g[i];
    });
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
    const Shape s = input.shape();
    Tensor<T> out(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
    const T* in = input.data().data();
    T* o = out.data().data();
    const std::size_t W2 = 2 * s.w;
    for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
        for (std::size_t y = 0; y < s.h; ++y) {
            const T* src = in + (plane * s.h + y) * s.w;
            T* r0 = o + (plane * 2 * s.h + 2 * y) * W2;
            T* r1 = r0 + W2;
            for (std::size_t x = 0; x < s.w; ++x) {
                r0[2 * x] = r0[2 * x + 1] = r1[2 * x] = r1[2 * x + 1] = src[x];
            }
        }
    }
    detail::record<T>("upsample_nearest2x", out, {&input}, [input = input, s](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        const std::size_t W2 = 2 * s.w;
        for (std::size_t plane = 0; plane < s.n * s.c; ++plane)
            for (std::size_t y = 0; y < s.h; ++y) {
                const T* r0 = g.data() + (plane * 2 * s.h + 2 * y) * W2;
                const T* r1 = r0 + W2;
                T* dst = gi.data() + (plane * s.h + y) * s.w;
                for (std::size_t x = 0; x < s.w; ++x) dst[x] += (r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]);
            }
    });
    return out;
}

namespace detail {
// Half-pixel-centred 2x bilinear taps along one axis: output i samples
// input coordinate (i + 0.5) / 2 - 0.5, clamped to the border.
struct LinearTap {
    std::size_t i0, i1;
    double w1;
};
inline std::vector<LinearTap> bilinear_taps(std::size_t n) {
    std::vector<LinearTap> taps(2 * n);
    for (std::size_t o = 0; o < 2 * n; ++o) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<std::size_t>(src);
        if (i0 > n - 1) i0 = n - 1;
        const std::size_t i1 = std::min(i0 + 1, n - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}
}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& input) {
    const Shape s = input.shape();
    Tensor<T> out(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
    const auto ty = detail::bilinear_taps(s.h);
    const auto tx = detail::bilinear_taps(s.w);
    const T* in = input.data().data();
    T* o = out.data().data();
    for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
        const T* ip = in + plane * s.h * s.w;
        T* op = o + plane * 4 * s.h * s.w;
        for (std::size_t y = 0; y < 2 * s.h; ++y) {
            const T wy = static_cast<T>(ty[y].w1);
            for (std::size_t x = 0; x < 2 * s.w; ++x) {
                const T wx = static_cast<T>(tx[x].w1);
                const T top = ip[ty[y].i0 * s.w + tx[x].i0] * (1 - wx) + ip[ty[y].i0 * s.w + tx[x].i1] * wx;
                const T bot = ip[ty[y].i1 * s.w + tx[x].i0] * (1 - wx) + ip[ty[y].i1 * s.w + tx[x].i1] * wx;
                op[y * 2 * s.w + x] = top * (1 - wy) + bot * wy;
            }
        }
    }
    detail::record<T>("upsample_bilinear2x", out, {&input}, [input = input, s, ty, tx](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
            T* ip = gi.data() + plane * s.h * s.w;
            const T* gp = g.data() + plane * 4 * s.h * s.w;
            for (std::size_t y = 0; y < 2 * s.h; ++y) {
                const T wy = static_cast<T>(ty[y].w1);
                for (std::size_t x = 0; x < 2 * s.w; ++x) {
                    const T wx = static_cast<T>(tx[x].w1);
                    const T v = gp[y * 2 * s.w + x];
                    ip[ty[y].i0 * s.w + tx[x].i0] += v * (1 - wy) * (1 - wx);
                    ip[ty[y].i0 * s.w + tx[x].i1] += v * (1 - wy) * wx;
                    ip[ty[y].i1 * s.w + tx[x].i0] += v * wy * (1 - wx);
                    ip[ty[y].i1 * s.w + tx[x].i1] += v * wy * wx;
                }
            }
        }
    });
    return out;
}

/// Channel-axis concatenation in argument order.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    detail::require(!parts.empty(), "concat_channels: no inputs");
    const Shape first = parts.front().shape();
    std::size_t channels = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        detail::require(s.n == first.n && s.h == first.h && s.w == first.w,
                        "concat_channels: shape " + s.str() + " incompatible with " + first.str());
        channels += s.c;
    }
    const std::size_t plane = first.h * first.w;
    Tensor<T> out(Shape{first.n, channels, first.h, first.w});
    T* o = out.data().data();
    for (std::size_t n = 0; n < first.n; ++n) {
        std::size_t c0 = 0;
        for (const auto& p : parts) {
            const std::size_t cnt = p.shape().c * plane;
            const T* src = p.data().data() + n * cnt;
            std::copy(src, src + cnt, o + (n * channels + c0) * plane);
            c0 += p.shape().c;
        }
    }
    if (auto* tape = Tape<T>::current()) {
        bool needs = false;
        for (const auto& p : parts) needs = needs || p.requires_grad();
        tape->record("concat_channels", out, needs, [parts = parts, channels, plane](std::span<const T> g) mutable {
            const std::size_t N = parts.front().shape().n;
            std::size_t c0 = 0;
            for (auto& p : parts) {
                const std::size_t cnt = p.shape().c * plane;
                if (p.requires_grad()) {
                    auto gp = p.ensure_grad();
                    for (std::size_t n = 0; n < N; ++n) {
                        const T* src = g.data() + (n * channels + c0) * plane;
                        T* dst = gp.data() + n * cnt;
                        for (std::size_t i = 0; i < cnt; ++i) dst[i] += src[i];
                    }
                }
                c0 += p.shape().c;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
    return concat_channels(std::vector<Tensor<T>>(parts));
}

/// Parametric ReLU with one learnable slope per channel.
template <typename T>
Tensor<T> prelu(const Tensor<T>& input, const Tensor<T>& slope) {
    const Shape s = input.shape();
    detail::require(slope.numel() == s.c, "prelu: slope length " + std::to_string(slope.numel()) +
                                              " does not match channel count " + std::to_string(s.c));
    Tensor<T> out(s);
    const std::size_t plane = s.h * s.w;
    const T* in = input.data().data();
    const auto a = slope.data();
    T* o = out.data().data();
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t base = (n * s.c + c) * plane;
            const T ac = a[c];
            for (std::size_t i = 0; i < plane; ++i) {
                const T x = in[base + i];
                o[base + i] = x >= T(0) ? x : ac * x;
            }
        }
    detail::record<T>("prelu", out, {&input, &slope}, [input = input, slope = slope, s](std::span<const T> g) mutable {
        const std::size_t plane = s.h * s.w;
        const T* in = input.data().data();
        const auto a = slope.data();
        std::span<T> gi = input.requires_grad() ? input.ensure_grad() : std::span<T>{};
        std::span<T> ga = slope.requires_grad() ? slope.ensure_grad() : std::span<T>{};
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c) {
                const std::size_t base = (n * s.c + c) * plane;
                T acc = T(0);
                for (std::size_t i = 0; i < plane; ++i) {
                    const T x = in[base + i];
                    const T up = g[base + i];
                    if (x >= T(0)) {
                        if (!gi.empty()) gi[base + i] += up;
                    } else {
                        if (!gi.empty()) gi[base + i] += a[c] * up;
                        acc += x * up;
                    }
                }
                if (!ga.empty()) ga[c] += acc;
            }
    });
    return out;
}

/// Row softmax over the last axis; every other axis indexes rows.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& input) {
    const Shape s = input.shape();
    detail::require(s.w >= 1, "softmax_rows: rows must have at least one element");
    const std::size_t K = s.w;
    const std::size_t R = s.numel() / K;
    Tensor<T> out(s);
    const T* in = input.data().data();
    T* o = out.data().data();
    for (std::size_t r = 0; r < R; ++r) {
        const T* row = in + r * K;
        T* dst = o + r * K;
        const T mx = *std::max_element(row, row + K);
        T total = T(0);
        for (std::size_t k = 0; k < K; ++k) {
            dst[k] = std::exp(row[k] - mx);
            total += dst[k];
        }
        const T inv = T(1) / total;
        for (std::size_t k = 0; k < K; ++k) dst[k] *= inv;
    }
    detail::record<T>("softmax_rows", out, {&input}, [input = input, out = out, K, R](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        const T* y = out.data().data();
        for (std::size_t r = 0; r < R; ++r) {
            T dot = T(0);
            for (std::size_t k = 0; k < K; ++k) dot += g[r * K + k] * y[r * K + k];
            for (std::size_t k = 0; k < K; ++k) gi[r * K + k] += y[r * K + k] * (g[r * K + k] - dot);
        }
    });
    return out;
}

/// Batched matrix product: (n, c, R, K) x (n, c, K, S) -> (n, c, R, S).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape as = a.shape();
    const Shape bs = b.shape();
    detail::require(as.n == bs.n && as.c == bs.c, "matmul: batch extents differ: " + as.str() + " vs " + bs.str());
    detail::require(as.w == bs.h, "matmul: inner dimensions differ: " + as.str() + " vs " + bs.str());
    const std::size_t batch = as.n * as.c;
    const std::size_t R = as.h, K = as.w, S = bs.w;
    Tensor<T> out(Shape{as.n, as.c, R, S});
    for (std::size_t i = 0; i < batch; ++i)
        detail::gemm_acc(R, S, K, a.data().data() + i * R * K, b.data().data() + i * K * S,
                         out.data().data() + i * R * S);
    detail::record<T>("matmul", out, {&a, &b}, [a = a, b = b, batch, R, K, S](std::span<const T> g) mutable {
        if (a.requires_grad()) {
            auto ga = a.ensure_grad();
            std::vector<T> bt(S * K);
            for (std::size_t i = 0; i < batch; ++i) {
                detail::transpose(K, S, b.data().data() + i * K * S, bt.data());
                detail::gemm_acc(R, K, S, g.data() + i * R * S, bt.data(), ga.data() + i * R * K);
            }
        }
        if (b.requires_grad()) {
            auto gb = b.ensure_grad();
            std::vector<T> at(K * R);
            for (std::size_t i = 0; i < batch; ++i) {
                detail::transpose(R, K, a.data().data() + i * R * K, at.data());
                detail::gemm_acc(K, S, R, at.data(), g.data() + i * R * S, gb.data() + i * K * S);
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "add: shapes differ: " + a.shape().str() + " vs " + b.shape().str());
    Tensor<T> out(a.shape());
    const auto x = a.data();
    const auto y = b.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    detail::record<T>("add", out, {&a, &b}, [a = a, b = b](std::span<const T> g) mutable {
        for (auto* t : {&a, &b}) {
            if (!t->requires_grad()) continue;
            auto gt = t->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
    Tensor<T> out(input.shape());
    const auto x = input.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * x[i];
    detail::record<T>("scale", out, {&input}, [input = input, factor](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += factor * g[i];
    });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
    detail::require(shape.numel() == input.numel(),
                    "reshape: cannot view " + input.shape().str() + " as " + shape.str());
    Tensor<T> out(shape, std::vector<T>(input.data().begin(), input.data().end()));
    detail::record<T>("reshape", out, {&input}, [input = input](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
    return out;
}

/// Axis permutation: output axis i is input axis `axes[i]`.
template <typename T>
Tensor<T> permute(const Tensor<T>& input, std::array<std::size_t, 4> axes) {
    std::array<bool, 4> seen{};
    for (auto ax : axes) {
        detail::require(ax < 4 && !seen[ax], "permute: axes must be a permutation of 0..3");
        seen[ax] = true;
    }
    const auto in_dims = input.shape().dims();
    std::array<std::size_t, 4> in_strides{in_dims[1] * in_dims[2] * in_dims[3], in_dims[2] * in_dims[3], in_dims[3],
                                          1};
    std::array<std::size_t, 4> out_dims{}, strides{};
    for (std::size_t i = 0; i < 4; ++i) {
        out_dims[i] = in_dims[axes[i]];
        strides[i] = in_strides[axes[i]];
    }
    // src[i] is the input offset of output element i.
    std::vector<std::size_t> src(input.numel());
    std::size_t idx = 0;
    for (std::size_t a = 0; a < out_dims[0]; ++a)
        for (std::size_t b = 0; b < out_dims[1]; ++b)
            for (std::size_t c = 0; c < out_dims[2]; ++c)
                for (std::size_t d = 0; d < out_dims[3]; ++d)
                    src[idx++] = a * strides[0] + b * strides[1] + c * strides[2] + d * strides[3];
    Tensor<T> out(Shape::from(out_dims));
    const auto x = input.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[src[i]];
    detail::record<T>("permute", out, {&input}, [input = input, src = std::move(src)](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gi[src[i]] += g[i];
    });
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
    T acc = T(0);
    for (T v : input.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    detail::record<T>("sum", out, {&input}, [input = input](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        for (auto& v : gi) v += g[0];
    });
    return out;
}

/// Σ input·weights with `weights` held constant.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& input, const Tensor<T>& weights) {
    detail::require(input.numel() == weights.numel(), "weighted_sum: size mismatch");
    T acc = T(0);
    const auto x = input.data();
    const auto w = weights.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    detail::record<T>("weighted_sum", out, {&input}, [input = input, weights = weights](std::span<const T> g) mutable {
        auto gi = input.ensure_grad();
        const auto w = weights.data();
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[0] * w[i];
    });
    return out;
}

/// Mean absolute error; the target receives no gradient and the
/// subgradient at zero difference is zero.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require(pred.shape() == target.shape(),
                    "l1_loss: shapes differ: " + pred.shape().str() + " vs " + target.shape().str());
    const auto p = pred.data();
    const auto t = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(static_cast<double>(p[i]) - static_cast<double>(t[i]));
    const T value = static_cast<T>(acc / static_cast<double>(p.size()));
    if (!std::isfinite(value)) throw NumericError("l1_loss: non-finite loss value");
    Tensor<T> out = Tensor<T>::scalar(value);
    detail::record<T>("l1_loss", out, {&pred}, [pred = pred, target = target](std::span<const T> g) mutable {
        auto gp = pred.ensure_grad();
        const auto p = pred.data();
        const auto t = target.data();
        const T step = g[0] / static_cast<T>(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const T d = p[i] - t[i];
            gp[i] += d > T(0) ? step : (d < T(0) ? -step : T(0));
        }
    });
    return out;
}

}  // namespace cen
