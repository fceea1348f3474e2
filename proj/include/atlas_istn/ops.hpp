// Differentiable tensor operations. Image-like tensors are NCHW.

#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "atlas_istn/tensor.hpp"

namespace atlas_istn {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank)
        throw shape_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                          shape_str(s));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "add");
    std::vector<T> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result<T>("add", a.shape(), std::move(out), {&a, &b},
                          [ia = a.impl(), ib = b.impl()](std::span<const T> g) {
                              if (T* ga = grad_target(ia))
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                              if (T* gb = grad_target(ib))
                                  for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                          });
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    return make_result<T>("scalar_mul", a.shape(), std::move(out), {&a},
                          [ia = a.impl(), s](std::span<const T> g) {
                              if (T* ga = grad_target(ia))
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                          });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] < T(0) ? T(0) : x[i];  // NaN passes through
    return make_result<T>("relu", a.shape(), std::move(out), {&a}, [ia = a.impl()](std::span<const T> g) {
        if (T* ga = grad_target(ia)) {
            const auto& x = ia->data;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > T(0)) ga[i] += g[i];
        }
    });
}

// Mean over every element of (a - b)^2.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "mse");
    auto x = a.data(), y = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = double(x[i]) - double(y[i]);
        acc += d * d;
    }
    const double n = double(x.size());
    return make_result<T>("mse", Shape{}, {T(acc / n)}, {&a, &b},
                          [ia = a.impl(), ib = b.impl(), n](std::span<const T> g) {
                              const auto& x = ia->data;
                              const auto& y = ib->data;
                              const T k = T(2.0 * double(g[0]) / n);
                              T* ga = grad_target(ia);
                              T* gb = grad_target(ib);
                              for (std::size_t i = 0; i < x.size(); ++i) {
                                  const T d = k * (x[i] - y[i]);
                                  if (ga) ga[i] += d;
                                  if (gb) gb[i] -= d;
                              }
                          });
}

// Sum of the elementwise product.
template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.numel() != b.numel()) throw shape_error("dot: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto x = a.data(), y = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += double(x[i]) * double(y[i]);
    return make_result<T>("dot", Shape{}, {T(acc)}, {&a, &b}, [ia = a.impl(), ib = b.impl()](std::span<const T> g) {
        const auto& x = ia->data;
        const auto& y = ib->data;
        T* ga = grad_target(ia);
        T* gb = grad_target(ib);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (ga) ga[i] += g[0] * y[i];
            if (gb) gb[i] += g[0] * x[i];
        }
    });
}

// Concatenates NCHW tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw shape_error("concat_channels: no inputs");
    const Shape& s0 = parts[0].shape();
    detail::require_rank(s0, 4, "concat_channels");
    std::size_t channels = 0;
    for (const auto& p : parts) {
        detail::require_rank(p.shape(), 4, "concat_channels");
        if (p.size(0) != s0[0] || p.size(2) != s0[2] || p.size(3) != s0[3])
            throw shape_error("concat_channels: incompatible " + shape_str(p.shape()) + " vs " + shape_str(s0));
        channels += p.size(1);
    }
    const std::size_t n = s0[0], hw = s0[2] * s0[3];
    std::vector<T> out(n * channels * hw);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t c = p.size(1);
        auto src = p.data();
        for (std::size_t b = 0; b < n; ++b)
            std::copy_n(src.begin() + b * c * hw, c * hw, out.begin() + (b * channels + off) * hw);
        off += c;
    }
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_result_n<T>("concat_channels", Shape{n, channels, s0[2], s0[3]}, std::move(out), parts,
                            [impls, offsets, n, channels, hw](std::span<const T> g) {
                                for (std::size_t k = 0; k < impls.size(); ++k) {
                                    T* gp = grad_target(impls[k]);
                                    if (!gp) continue;
                                    const std::size_t c = impls[k]->shape[1];
                                    for (std::size_t b = 0; b < n; ++b) {
                                        const T* src = g.data() + (b * channels + offsets[k]) * hw;
                                        T* dst = gp + b * c * hw;
                                        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
                                    }
                                }
                            });
}

// Channels [begin, end) of an NCHW tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    detail::require_rank(x.shape(), 4, "slice_channels");
    const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
    if (begin >= end || end > c) throw shape_error("slice_channels: bad range for " + shape_str(x.shape()));
    const std::size_t k = end - begin;
    std::vector<T> out(n * k * hw);
    auto src = x.data();
    for (std::size_t b = 0; b < n; ++b)
        std::copy_n(src.begin() + (b * c + begin) * hw, k * hw, out.begin() + b * k * hw);
    return make_result<T>("slice_channels", Shape{n, k, x.size(2), x.size(3)}, std::move(out), {&x},
                          [ix = x.impl(), n, c, k, hw, begin](std::span<const T> g) {
                              if (T* gx = grad_target(ix))
                                  for (std::size_t b = 0; b < n; ++b)
                                      for (std::size_t i = 0; i < k * hw; ++i)
                                          gx[(b * c + begin) * hw + i] += g[b * k * hw + i];
                          });
}

// Repeats a batch-1 tensor n times along the batch axis.
template <class T>
Tensor<T> repeat_batch(const Tensor<T>& x, std::size_t n) {
    if (x.rank() < 1 || x.size(0) != 1) throw shape_error("repeat_batch: expected leading dim 1, got " + shape_str(x.shape()));
    const std::size_t per = x.numel();
    std::vector<T> out(per * n);
    for (std::size_t b = 0; b < n; ++b) std::copy(x.data().begin(), x.data().end(), out.begin() + b * per);
    Shape s = x.shape();
    s[0] = n;
    return make_result<T>("repeat_batch", s, std::move(out), {&x}, [ix = x.impl(), n, per](std::span<const T> g) {
        if (T* gx = grad_target(ix))
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < per; ++i) gx[i] += g[b * per + i];
    });
}

// [N,C,H,W] -> [N,C]
template <class T>
Tensor<T> global_mean_pool(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "global_mean_pool");
    const std::size_t nc = x.size(0) * x.size(1), hw = x.size(2) * x.size(3);
    std::vector<T> out(nc);
    auto src = x.data();
    for (std::size_t i = 0; i < nc; ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p < hw; ++p) acc += src[i * hw + p];
        out[i] = T(acc / double(hw));
    }
    return make_result<T>("global_mean_pool", Shape{x.size(0), x.size(1)}, std::move(out), {&x},
                          [ix = x.impl(), nc, hw](std::span<const T> g) {
                              if (T* gx = grad_target(ix))
                                  for (std::size_t i = 0; i < nc; ++i) {
                                      const T v = g[i] / T(hw);
                                      for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += v;
                                  }
                          });
}

// x [N,in], weight [out,in], bias [out] -> [N,out]
template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_rank(x.shape(), 2, "fully_connected");
    detail::require_rank(weight.shape(), 2, "fully_connected");
    const std::size_t n = x.size(0), in = x.size(1), outc = weight.size(0);
    if (weight.size(1) != in || bias.shape() != Shape{outc})
        throw shape_error("fully_connected: " + shape_str(x.shape()) + " x " + shape_str(weight.shape()) +
                          " + " + shape_str(bias.shape()));
    std::vector<T> out(n * outc);
    auto xv = x.data(), wv = weight.data(), bv = bias.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < outc; ++o) {
            double acc = bv[o];
            for (std::size_t i = 0; i < in; ++i) acc += double(wv[o * in + i]) * double(xv[b * in + i]);
            out[b * outc + o] = T(acc);
        }
    return make_result<T>(
        "fully_connected", Shape{n, outc}, std::move(out), {&x, &weight, &bias},
        [ix = x.impl(), iw = weight.impl(), ib = bias.impl(), n, in, outc](std::span<const T> g) {
            const auto& xv = ix->data;
            const auto& wv = iw->data;
            T* gx = grad_target(ix);
            T* gw = grad_target(iw);
            T* gb = grad_target(ib);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t o = 0; o < outc; ++o) {
                    const T go = g[b * outc + o];
                    if (gb) gb[o] += go;
                    for (std::size_t i = 0; i < in; ++i) {
                        if (gw) gw[o * in + i] += go * xv[b * in + i];
                        if (gx) gx[b * in + i] += go * wv[o * in + i];
                    }
                }
        });
}

namespace detail {

struct ConvGeometry {
    std::size_t cin, h, w, cout, k, stride, pad, ho, wo;
    std::size_t rows() const { return cin * k * k; }
    std::size_t cols() const { return ho * wo; }
};

// Per-thread im2col buffer, grown on demand and reused across calls.
template <class T>
std::vector<T>& conv_scratch(std::size_t size) {
    thread_local std::vector<T> buf;
    if (buf.size() < size) buf.resize(size);
    return buf;
}

// Output columns [lo, hi) whose input column ox*stride + kx - pad is inside
// [0, w).
inline std::pair<std::size_t, std::size_t> valid_range(const ConvGeometry& g, std::size_t kx) {
    const long s = long(g.stride), off = long(kx) - long(g.pad);
    long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long hi = (long(g.w) - 1 - off) < 0 ? 0 : (long(g.w) - 1 - off) / s + 1;
    lo = std::min(lo, long(g.wo));
    hi = std::clamp(hi, lo, long(g.wo));
    return {std::size_t(lo), std::size_t(hi)};
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t p = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = cols + ((c * g.k + ky) * g.k + kx) * p;
                const T* plane = x + c * g.h * g.w;
                const auto [lo, hi] = valid_range(g, kx);
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= long(g.h)) {
                        std::fill_n(dst, g.wo, T(0));
                        continue;
                    }
                    const T* src = plane + std::size_t(iy) * g.w;
                    const long ix0 = long(kx) - long(g.pad);
                    std::fill_n(dst, lo, T(0));
                    if (g.stride == 1)
                        std::copy(src + (long(lo) + ix0), src + (long(hi) + ix0), dst + lo);
                    else
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[long(ox * g.stride) + ix0];
                    std::fill(dst + hi, dst + g.wo, T(0));
                }
            }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* x) {
    const std::size_t p = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = cols + ((c * g.k + ky) * g.k + kx) * p;
                T* plane = x + c * g.h * g.w;
                const auto [lo, hi] = valid_range(g, kx);
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    if (iy < 0 || iy >= long(g.h)) continue;
                    T* dst = plane + std::size_t(iy) * g.w;
                    const long ix0 = long(kx) - long(g.pad);
                    const T* src = row + oy * g.wo;
                    for (std::size_t ox = lo; ox < hi; ++ox) dst[long(ox * g.stride) + ix0] += src[ox];
                }
            }
}

}  // namespace detail

// 2D cross-correlation. input [N,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
    using detail::RowMat;
    detail::require_rank(input.shape(), 4, "conv2d");
    detail::require_rank(weight.shape(), 4, "conv2d");
    const std::size_t n = input.size(0);
    detail::ConvGeometry g{input.size(1), input.size(2), input.size(3), weight.size(0), weight.size(2), stride,
                           padding, 0, 0};
    if (weight.size(1) != g.cin || weight.size(3) != g.k || bias.shape() != Shape{g.cout})
        throw shape_error("conv2d: input " + shape_str(input.shape()) + ", weight " + shape_str(weight.shape()) +
                          ", bias " + shape_str(bias.shape()));
    if (stride == 0 || g.h + 2 * padding < g.k || g.w + 2 * padding < g.k)
        throw shape_error("conv2d: kernel does not fit input " + shape_str(input.shape()));
    g.ho = (g.h + 2 * padding - g.k) / stride + 1;
    g.wo = (g.w + 2 * padding - g.k) / stride + 1;

    const std::size_t kdim = g.rows(), p = g.cols();
    std::vector<T> out(n * g.cout * p);
    Eigen::Map<const RowMat<T>> wm(weight.data().data(), g.cout, kdim);
    const auto bv = bias.data();
    std::vector<T>& cols = detail::conv_scratch<T>(kdim * p);
    for (std::size_t b = 0; b < n; ++b) {
        detail::im2col(input.data().data() + b * g.cin * g.h * g.w, g, cols.data());
        Eigen::Map<const RowMat<T>> cm(cols.data(), kdim, p);
        Eigen::Map<RowMat<T>> om(out.data() + b * g.cout * p, g.cout, p);
        om.noalias() = wm * cm;
        for (std::size_t o = 0; o < g.cout; ++o) om.row(o).array() += bv[o];
    }
    return make_result<T>(
        "conv2d", Shape{n, g.cout, g.ho, g.wo}, std::move(out), {&input, &weight, &bias},
        [ii = input.impl(), iw = weight.impl(), ib = bias.impl(), g, n](std::span<const T> grad) {
            const std::size_t kdim = g.rows(), p = g.cols();
            T* gx = grad_target(ii);
            T* gw = grad_target(iw);
            T* gb = grad_target(ib);
            Eigen::Map<const RowMat<T>> wm(iw->data.data(), g.cout, kdim);
            std::vector<T>& cols = detail::conv_scratch<T>(kdim * p);
            thread_local RowMat<T> dcols;
            for (std::size_t b = 0; b < n; ++b) {
                Eigen::Map<const RowMat<T>> go(grad.data() + b * g.cout * p, g.cout, p);
                if (gw) {
                    detail::im2col(ii->data.data() + b * g.cin * g.h * g.w, g, cols.data());
                    Eigen::Map<const RowMat<T>> cm(cols.data(), kdim, p);
                    Eigen::Map<RowMat<T>> gwm(gw, g.cout, kdim);
                    gwm.noalias() += go * cm.transpose();
                }
                if (gb)
                    for (std::size_t o = 0; o < g.cout; ++o) {
                        double acc = 0.0;
                        for (std::size_t q = 0; q < p; ++q) acc += go(o, q);
                        gb[o] += T(acc);
                    }
                if (gx) {
                    dcols.noalias() = wm.transpose() * go;
                    detail::col2im_add(dcols.data(), g, gx + b * g.cin * g.h * g.w);
                }
            }
        });
}

namespace detail {

// Align-corners source coordinate for output index i when upsampling n -> 2n.
struct UpsampleTap {
    std::size_t i0, i1;
    double w1;
};

inline std::vector<UpsampleTap> upsample_taps(std::size_t n) {
    std::vector<UpsampleTap> taps(2 * n);
    for (std::size_t o = 0; o < 2 * n; ++o) {
        const double s = double(o) * double(n - 1) / double(2 * n - 1);
        std::size_t i0 = std::min<std::size_t>(std::size_t(std::floor(s)), n - 2);
        taps[o] = {i0, i0 + 1, s - double(i0)};
    }
    return taps;
}

}  // namespace detail

// Bilinear 2x upsampling with aligned corners: [N,C,H,W] -> [N,C,2H,2W].
template <class T>
Tensor<T> upsample_bilinear_2x(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "upsample_bilinear_2x");
    const std::size_t nc = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
    if (h < 2 || w < 2) throw shape_error("upsample_bilinear_2x: spatial size must be >= 2");
    const auto ty = detail::upsample_taps(h), tx = detail::upsample_taps(w);
    const std::size_t ho = 2 * h, wo = 2 * w;
    std::vector<T> out(nc * ho * wo);
    auto src = x.data();
    for (std::size_t c = 0; c < nc; ++c) {
        const T* in = src.data() + c * h * w;
        T* o = out.data() + c * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto& a = ty[oy];
            const T wy1 = T(a.w1), wy0 = T(1) - wy1;
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const auto& b = tx[ox];
                const T wx1 = T(b.w1), wx0 = T(1) - wx1;
                o[oy * wo + ox] = wy0 * (wx0 * in[a.i0 * w + b.i0] + wx1 * in[a.i0 * w + b.i1]) +
                                  wy1 * (wx0 * in[a.i1 * w + b.i0] + wx1 * in[a.i1 * w + b.i1]);
            }
        }
    }
    return make_result<T>("upsample_bilinear_2x", Shape{x.size(0), x.size(1), ho, wo}, std::move(out), {&x},
                          [ix = x.impl(), ty, tx, nc, h, w](std::span<const T> g) {
                              T* gx = grad_target(ix);
                              if (!gx) return;
                              const std::size_t ho = 2 * h, wo = 2 * w;
                              for (std::size_t c = 0; c < nc; ++c) {
                                  T* gi = gx + c * h * w;
                                  const T* go = g.data() + c * ho * wo;
                                  for (std::size_t oy = 0; oy < ho; ++oy) {
                                      const auto& a = ty[oy];
                                      const T wy1 = T(a.w1), wy0 = T(1) - wy1;
                                      for (std::size_t ox = 0; ox < wo; ++ox) {
                                          const auto& b = tx[ox];
                                          const T wx1 = T(b.w1), wx0 = T(1) - wx1;
                                          const T v = go[oy * wo + ox];
                                          gi[a.i0 * w + b.i0] += v * wy0 * wx0;
                                          gi[a.i0 * w + b.i1] += v * wy0 * wx1;
                                          gi[a.i1 * w + b.i0] += v * wy1 * wx0;
                                          gi[a.i1 * w + b.i1] += v * wy1 * wx1;
                                      }
                                  }
                              }
                          });
}

// Converts between scalar types (used to run float models at double precision
// for gradient checks). No history is carried over.
template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
    std::vector<To> v(x.data().begin(), x.data().end());
    return Tensor<To>(x.shape(), std::move(v));
}

}  // namespace atlas_istn
