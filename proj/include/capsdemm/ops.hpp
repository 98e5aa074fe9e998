#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "capsdemm/tensor.hpp"

namespace capsdemm {

namespace detail {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

// col is (C*kh*kw) x (Ho*Wo), row-major. Out-of-image taps are zero.
template <class T>
inline void im2col(const T* im, int C, int H, int W, int kh, int kw, int stride,
                   int pad, int Ho, int Wo, T* col) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        const T* img = im + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* crow = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    T* dst = crow + static_cast<std::size_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + Wo, T(0));
                        continue;
                    }
                    const T* srow = img + static_cast<std::size_t>(iy) * W;
                    int ox = 0;
                    if (stride == 1) {
                        for (; ox < Wo; ++ox) {
                            const int ix = ox + kx - pad;
                            dst[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
                        }
                    } else {
                        for (; ox < Wo; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            dst[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
                        }
                    }
                }
            }
    }
}

template <class T>
inline void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride,
                       int pad, int Ho, int Wo, T* im) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        T* img = im + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* crow = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    const T* src = crow + static_cast<std::size_t>(oy) * Wo;
                    T* drow = img + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < W) drow[ix] += src[ox];
                    }
                }
            }
    }
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Cross-correlation of NCHW input with FCkk kernels plus per-filter bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
    if (input.rank() != 4 || kernel.rank() != 4)
        throw std::invalid_argument("conv2d expects NCHW input and FCkk kernel");
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
        throw std::invalid_argument("conv2d bias must have one entry per filter");
    if (input.dim(1) != kernel.dim(1))
        throw std::invalid_argument("conv2d input channels do not match kernel channels");
    if (stride < 1 || padding < 0)
        throw std::invalid_argument("conv2d stride must be >= 1 and padding >= 0");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int F = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw std::invalid_argument("conv2d kernel larger than padded input");
    const int Ho = detail::conv_out_extent(H, kh, stride, padding);
    const int Wo = detail::conv_out_extent(W, kw, stride, padding);
    const int K = C * kh * kw;
    const int P = Ho * Wo;

    Tensor<T> out({N, F, Ho, Wo});
    {
        std::vector<T> col(static_cast<std::size_t>(K) * P);
        detail::ECMap<T> kmat(kernel.values().data(), F, K);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(bias.values().data(), F);
        for (int n = 0; n < N; ++n) {
            detail::im2col(input.values().data() + static_cast<std::size_t>(n) * C * H * W,
                           C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
            detail::ECMap<T> cmat(col.data(), K, P);
            detail::EMap<T> omat(out.values().data() + static_cast<std::size_t>(n) * F * P, F, P);
            omat.noalias() = kmat * cmat;
            omat.colwise() += bvec;
        }
    }
    check_finite(out, "conv2d");

    if (detail::track<T>({&input, &kernel, &bias})) {
        out.set_requires_grad(true);
        Tensor<T> x = input, k = kernel, b = bias, y = out;
        Tape<T>::active()->record([x, k, b, y, stride, padding, N, C, H, W, F, kh, kw, Ho, Wo, K, P]() mutable {
            const std::vector<T>& gy = y.grad();
            std::vector<T> col;
            std::vector<T> dcol;
            if (k.requires_grad()) col.resize(static_cast<std::size_t>(K) * P);
            if (x.requires_grad()) dcol.resize(static_cast<std::size_t>(K) * P);
            detail::ECMap<T> kmat(k.values().data(), F, K);
            for (int n = 0; n < N; ++n) {
                detail::ECMap<T> gmat(gy.data() + static_cast<std::size_t>(n) * F * P, F, P);
                if (b.requires_grad()) {
                    std::vector<T>& gb = b.grad();
                    for (int f = 0; f < F; ++f) gb[f] += gmat.row(f).sum();
                }
                if (k.requires_grad()) {
                    detail::im2col(x.values().data() + static_cast<std::size_t>(n) * C * H * W,
                                   C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
                    detail::ECMap<T> cmat(col.data(), K, P);
                    detail::EMap<T> gk(k.grad().data(), F, K);
                    gk.noalias() += gmat * cmat.transpose();
                }
                if (x.requires_grad()) {
                    detail::EMap<T> dmat(dcol.data(), K, P);
                    dmat.noalias() = kmat.transpose() * gmat;
                    detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                                       x.grad().data() + static_cast<std::size_t>(n) * C * H * W);
                }
            }
        });
    }
    return out;
}

template <class T>
struct MaxPoolResult {
    Tensor<T> output;
    std::vector<std::int64_t> argmax;  // flat input index per output cell
};

// Window max over each channel plane; ties resolve to the first (row-major)
// maximum so the backward routing is deterministic.
template <class T>
MaxPoolResult<T> maxpool2d_with_indices(const Tensor<T>& input, int size, int stride) {
    if (input.rank() != 4) throw std::invalid_argument("maxpool2d expects NCHW input");
    if (size < 1 || stride < 1) throw std::invalid_argument("maxpool2d size and stride must be >= 1");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (size > H || size > W) throw std::invalid_argument("maxpool2d window larger than input");
    const int Ho = (H - size) / stride + 1;
    const int Wo = (W - size) / stride + 1;

    MaxPoolResult<T> result{Tensor<T>({N, C, Ho, Wo}), {}};
    result.argmax.resize(result.output.numel());
    const std::vector<T>& xv = input.values();
    std::vector<T>& yv = result.output.values();
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t plane = (static_cast<std::size_t>(n) * C + c) * H * W;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox, ++o) {
                    T best = xv[plane + static_cast<std::size_t>(oy * stride) * W + ox * stride];
                    std::int64_t best_idx =
                        static_cast<std::int64_t>(plane + static_cast<std::size_t>(oy * stride) * W + ox * stride);
                    for (int ky = 0; ky < size; ++ky)
                        for (int kx = 0; kx < size; ++kx) {
                            const std::size_t idx =
                                plane + static_cast<std::size_t>(oy * stride + ky) * W + (ox * stride + kx);
                            if (xv[idx] > best) {
                                best = xv[idx];
                                best_idx = static_cast<std::int64_t>(idx);
                            }
                        }
                    yv[o] = best;
                    result.argmax[o] = best_idx;
                }
        }
    check_finite(result.output, "maxpool2d");

    if (detail::track<T>({&input})) {
        result.output.set_requires_grad(true);
        Tensor<T> x = input, y = result.output;
        std::vector<std::int64_t> arg = result.argmax;
        Tape<T>::active()->record([x, y, arg]() mutable {
            std::vector<T>& gx = x.grad();
            const std::vector<T>& gy = y.grad();
            for (std::size_t i = 0; i < arg.size(); ++i) gx[static_cast<std::size_t>(arg[i])] += gy[i];
        });
    }
    return result;
}

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, int size, int stride) {
    return maxpool2d_with_indices(input, size, stride).output;
}

// Each input value becomes a factor x factor block.
template <class T>
Tensor<T> upsample2d_nearest(const Tensor<T>& input, int factor) {
    if (input.rank() != 4) throw std::invalid_argument("upsample2d_nearest expects NCHW input");
    if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor<T> out({N, C, H * factor, W * factor});
    const std::vector<T>& xv = input.values();
    std::vector<T>& yv = out.values();
    const int Wo = W * factor;
    for (int nc = 0; nc < N * C; ++nc) {
        const std::size_t in_plane = static_cast<std::size_t>(nc) * H * W;
        const std::size_t out_plane = static_cast<std::size_t>(nc) * H * factor * Wo;
        for (int y = 0; y < H * factor; ++y) {
            const T* src = xv.data() + in_plane + static_cast<std::size_t>(y / factor) * W;
            T* dst = yv.data() + out_plane + static_cast<std::size_t>(y) * Wo;
            for (int x = 0; x < Wo; ++x) dst[x] = src[x / factor];
        }
    }

    if (detail::track<T>({&input})) {
        out.set_requires_grad(true);
        Tensor<T> x = input, y = out;
        Tape<T>::active()->record([x, y, factor, N, C, H, W]() mutable {
            std::vector<T>& gx = x.grad();
            const std::vector<T>& gy = y.grad();
            const int Wo = W * factor;
            for (int nc = 0; nc < N * C; ++nc) {
                const std::size_t in_plane = static_cast<std::size_t>(nc) * H * W;
                const std::size_t out_plane = static_cast<std::size_t>(nc) * H * factor * Wo;
                for (int y2 = 0; y2 < H * factor; ++y2) {
                    T* dst = gx.data() + in_plane + static_cast<std::size_t>(y2 / factor) * W;
                    const T* src = gy.data() + out_plane + static_cast<std::size_t>(y2) * Wo;
                    for (int x2 = 0; x2 < Wo; ++x2) dst[x2 / factor] += src[x2];
                }
            }
        });
    }
    return out;
}

// Channels of a followed by channels of b. Spatial sizes must match exactly.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4)
        throw std::invalid_argument("concat_channels expects NCHW inputs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels inputs disagree in batch or spatial size");
    const int N = a.dim(0), C1 = a.dim(1), C2 = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor<T> out({N, C1 + C2, H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<T>& yv = out.values();
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.values().data() + static_cast<std::size_t>(n) * C1 * plane, C1 * plane,
                    yv.data() + static_cast<std::size_t>(n) * (C1 + C2) * plane);
        std::copy_n(b.values().data() + static_cast<std::size_t>(n) * C2 * plane, C2 * plane,
                    yv.data() + (static_cast<std::size_t>(n) * (C1 + C2) + C1) * plane);
    }

    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, y = out;
        Tape<T>::active()->record([ta, tb, y, N, C1, C2, plane]() mutable {
            const std::vector<T>& gy = y.grad();
            for (int n = 0; n < N; ++n) {
                if (ta.requires_grad()) {
                    T* ga = ta.grad().data() + static_cast<std::size_t>(n) * C1 * plane;
                    const T* src = gy.data() + static_cast<std::size_t>(n) * (C1 + C2) * plane;
                    for (std::size_t i = 0; i < C1 * plane; ++i) ga[i] += src[i];
                }
                if (tb.requires_grad()) {
                    T* gb = tb.grad().data() + static_cast<std::size_t>(n) * C2 * plane;
                    const T* src = gy.data() + (static_cast<std::size_t>(n) * (C1 + C2) + C1) * plane;
                    for (std::size_t i = 0; i < C2 * plane; ++i) gb[i] += src[i];
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int first, int count) {
    if (x.rank() != 4) throw std::invalid_argument("slice_channels expects NCHW input");
    if (first < 0 || count < 1 || first + count > x.dim(1))
        throw std::invalid_argument("slice_channels range out of bounds");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<T> out({N, count, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(x.values().data() + (static_cast<std::size_t>(n) * C + first) * plane,
                    static_cast<std::size_t>(count) * plane,
                    out.values().data() + static_cast<std::size_t>(n) * count * plane);

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y, N, C, first, count, plane]() mutable {
            const std::vector<T>& gy = y.grad();
            std::vector<T>& gx = tx.grad();
            for (int n = 0; n < N; ++n) {
                T* dst = gx.data() + (static_cast<std::size_t>(n) * C + first) * plane;
                const T* src = gy.data() + static_cast<std::size_t>(n) * count * plane;
                for (std::size_t i = 0; i < static_cast<std::size_t>(count) * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::vector<T>& xv = x.values();
    std::vector<T>& yv = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y]() mutable {
            std::vector<T>& gx = tx.grad();
            const std::vector<T>& gy = y.grad();
            const std::vector<T>& xv2 = tx.values();
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (xv2[i] > T(0)) gx[i] += gy[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::vector<T>& xv = x.values();
    std::vector<T>& yv = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T v = xv[i];
        if (v >= T(0)) {
            const T e = std::exp(-v);
            yv[i] = T(1) / (T(1) + e);
        } else {
            const T e = std::exp(v);
            yv[i] = e / (T(1) + e);
        }
    }
    check_finite(out, "sigmoid");
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y]() mutable {
            std::vector<T>& gx = tx.grad();
            const std::vector<T>& gy = y.grad();
            const std::vector<T>& yv2 = y.values();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * yv2[i] * (T(1) - yv2[i]);
        });
    }
    return out;
}

// Exp-normalized along `axis` with max subtraction, so adding a constant to
// the logits leaves the output unchanged up to rounding.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax axis out of range");
    const int n = x.dim(axis);
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
    for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.dim(i));

    Tensor<T> out(x.shape());
    const std::vector<T>& xv = x.values();
    std::vector<T>& yv = out.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = xv[base];
            for (int j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            T sum = T(0);
            for (int j = 0; j < n; ++j) {
                const T e = std::exp(xv[base + j * inner] - mx);
                yv[base + j * inner] = e;
                sum += e;
            }
            for (int j = 0; j < n; ++j) yv[base + j * inner] /= sum;
        }
    check_finite(out, "softmax");

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y, outer, inner, n]() mutable {
            std::vector<T>& gx = tx.grad();
            const std::vector<T>& gy = y.grad();
            const std::vector<T>& yv2 = y.values();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    T dot = T(0);
                    for (int j = 0; j < n; ++j) dot += gy[base + j * inner] * yv2[base + j * inner];
                    for (int j = 0; j < n; ++j)
                        gx[base + j * inner] += yv2[base + j * inner] * (gy[base + j * inner] - dot);
                }
        });
    }
    return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add requires identical shapes");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, y = out;
        Tape<T>::active()->record([ta, tb, y]() mutable {
            const std::vector<T>& gy = y.grad();
            if (ta.requires_grad())
                for (std::size_t i = 0; i < gy.size(); ++i) ta.grad()[i] += gy[i];
            if (tb.requires_grad())
                for (std::size_t i = 0; i < gy.size(); ++i) tb.grad()[i] += gy[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mul requires identical shapes");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, y = out;
        Tape<T>::active()->record([ta, tb, y]() mutable {
            const std::vector<T>& gy = y.grad();
            if (ta.requires_grad())
                for (std::size_t i = 0; i < gy.size(); ++i) ta.grad()[i] += gy[i] * tb.values()[i];
            if (tb.requires_grad())
                for (std::size_t i = 0; i < gy.size(); ++i) tb.grad()[i] += gy[i] * ta.values()[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("div requires identical shapes");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] / b.values()[i];
    check_finite(out, "div");
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, y = out;
        Tape<T>::active()->record([ta, tb, y]() mutable {
            const std::vector<T>& gy = y.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                const T bv = tb.values()[i];
                if (ta.requires_grad()) ta.grad()[i] += gy[i] / bv;
                if (tb.requires_grad()) tb.grad()[i] -= gy[i] * ta.values()[i] / (bv * bv);
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = x.values()[i] * c;
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y, c]() mutable {
            const std::vector<T>& gy = y.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) tx.grad()[i] += gy[i] * c;
        });
    }
    return out;
}

template <class T>
Tensor<T> add_const(const Tensor<T>& x, T c) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = x.values()[i] + c;
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y]() mutable {
            const std::vector<T>& gy = y.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) tx.grad()[i] += gy[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.values()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y]() mutable {
            const T g = y.grad()[0];
            for (std::size_t i = 0; i < tx.grad().size(); ++i) tx.grad()[i] += g;
        });
    }
    return out;
}

// Mean of the K largest values. Input is one map [L] or a batch of maps
// [N, L]; the K cells are chosen per row, ties broken toward the lower flat
// index. Gradient flows only into the selected cells.
template <class T>
Tensor<T> topk_average(const Tensor<T>& x, int k) {
    if (x.rank() != 1 && x.rank() != 2)
        throw std::invalid_argument("topk_average expects a map or a batch of maps");
    const int rows = x.rank() == 2 ? x.dim(0) : 1;
    const int cells = x.rank() == 2 ? x.dim(1) : x.dim(0);
    if (k < 1 || k > cells)
        throw std::invalid_argument("topk_average K must lie in [1, cell count]");

    Tensor<T> out(x.rank() == 2 ? std::vector<int>{rows} : std::vector<int>{1});
    std::vector<std::int32_t> picked(static_cast<std::size_t>(rows) * k);
    std::vector<std::int32_t> order(static_cast<std::size_t>(cells));
    const std::vector<T>& xv = x.values();
    for (int r = 0; r < rows; ++r) {
        const T* row = xv.data() + static_cast<std::size_t>(r) * cells;
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [row](std::int32_t a, std::int32_t b) {
                              if (row[a] != row[b]) return row[a] > row[b];
                              return a < b;
                          });
        T s = T(0);
        for (int j = 0; j < k; ++j) {
            s += row[order[static_cast<std::size_t>(j)]];
            picked[static_cast<std::size_t>(r) * k + j] = order[static_cast<std::size_t>(j)];
        }
        out.values()[r] = s / static_cast<T>(k);
    }

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, y = out;
        Tape<T>::active()->record([tx, y, picked, rows, cells, k]() mutable {
            std::vector<T>& gx = tx.grad();
            const std::vector<T>& gy = y.grad();
            for (int r = 0; r < rows; ++r) {
                const T g = gy[r] / static_cast<T>(k);
                for (int j = 0; j < k; ++j)
                    gx[static_cast<std::size_t>(r) * cells + picked[static_cast<std::size_t>(r) * k + j]] += g;
            }
        });
    }
    return out;
}

}  // namespace capsdemm
