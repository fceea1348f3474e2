// Diffeomorphic transformation engine.
//
// Displacement fields are [N,2,H,W] tensors in pixel units; channel 0 is the
// column (x) component and channel 1 the row (y) component. A field u
// represents the map p -> p + u(p). Warping an image by a field samples the
// image at p + u(p), i.e. computes image o map. All sampling is bilinear with
// border clamping.
//
// Affine maps act about the image center c = ((W-1)/2, (H-1)/2):
//   T(x) = A (x - c) + c + t,  A = R(theta) * diag(exp(log_sx), exp(log_sy)).

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "atlas_istn/ops.hpp"
#include "atlas_istn/tensor.hpp"

namespace atlas_istn {

// Converts displacement units into sampling-grid units. A field stored on a
// half-resolution grid while holding full-resolution pixel displacements uses
// (h-1)/(H-1) per axis.
struct GridScale {
    double x = 1.0;
    double y = 1.0;
};

namespace detail {

template <class T>
struct SampleTap {
    std::int32_t x0, y0;
    T wx, wy;
    bool in_x, in_y;
};

template <class T>
SampleTap<T> make_tap(double sx, double sy, std::size_t h, std::size_t w) {
    SampleTap<T> tap{};
    tap.in_x = sx >= 0.0 && sx <= double(w - 1);
    tap.in_y = sy >= 0.0 && sy <= double(h - 1);
    sx = std::clamp(sx, 0.0, double(w - 1));
    sy = std::clamp(sy, 0.0, double(h - 1));
    tap.x0 = std::int32_t(std::min<double>(std::floor(sx), double(w - 2)));
    tap.y0 = std::int32_t(std::min<double>(std::floor(sy), double(h - 2)));
    tap.wx = T(sx - tap.x0);
    tap.wy = T(sy - tap.y0);
    return tap;
}

}  // namespace detail

// out[n,c](p) = img[n or 0, c](p + scale * field[n](p)).
// img may have batch 1, in which case it is shared by every field.
template <class T>
Tensor<T> sample_at(const Tensor<T>& img, const Tensor<T>& field, GridScale scale = {}) {
    detail::require_rank(img.shape(), 4, "sample_at");
    detail::require_rank(field.shape(), 4, "sample_at");
    const std::size_t n = field.size(0), c = img.size(1), h = img.size(2), w = img.size(3);
    if (field.size(1) != 2 || field.size(2) != h || field.size(3) != w)
        throw shape_error("sample_at: field " + shape_str(field.shape()) + " incompatible with image " +
                          shape_str(img.shape()));
    if (img.size(0) != n && img.size(0) != 1)
        throw shape_error("sample_at: image batch " + std::to_string(img.size(0)) + " vs field batch " +
                          std::to_string(n));
    if (h < 2 || w < 2) throw shape_error("sample_at: spatial size must be >= 2");
    const bool shared = img.size(0) == 1;
    const std::size_t hw = h * w;

    auto taps = std::make_shared<std::vector<detail::SampleTap<T>>>(n * hw);
    std::vector<T> out(n * c * hw);
    auto u = field.data();
    auto src = img.data();
    for (std::size_t b = 0; b < n; ++b) {
        const T* ux = u.data() + b * 2 * hw;
        const T* uy = ux + hw;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t p = y * w + x;
                (*taps)[b * hw + p] = detail::make_tap<T>(double(x) + scale.x * double(ux[p]),
                                                          double(y) + scale.y * double(uy[p]), h, w);
            }
        const T* base = src.data() + (shared ? 0 : b * c * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* plane = base + ch * hw;
            T* o = out.data() + (b * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                const auto& t = (*taps)[b * hw + p];
                const T* r0 = plane + std::size_t(t.y0) * w + std::size_t(t.x0);
                const T* r1 = r0 + w;
                o[p] = (T(1) - t.wy) * ((T(1) - t.wx) * r0[0] + t.wx * r0[1]) +
                       t.wy * ((T(1) - t.wx) * r1[0] + t.wx * r1[1]);
            }
        }
    }
    return make_result<T>(
        "sample_at", Shape{n, c, h, w}, std::move(out), {&img, &field},
        [ii = img.impl(), iu = field.impl(), taps, n, c, h, w, shared, scale](std::span<const T> g) {
            const std::size_t hw = h * w;
            T* gi = grad_target(ii);
            T* gu = grad_target(iu);
            const auto& src = ii->data;
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t ib = shared ? 0 : b;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T* plane = src.data() + (ib * c + ch) * hw;
                    const T* go = g.data() + (b * c + ch) * hw;
                    T* gplane = gi ? gi + (ib * c + ch) * hw : nullptr;
                    T* gux = gu ? gu + b * 2 * hw : nullptr;
                    for (std::size_t p = 0; p < hw; ++p) {
                        const T gv = go[p];
                        if (gv == T(0)) continue;
                        const auto& t = (*taps)[b * hw + p];
                        const std::size_t i00 = std::size_t(t.y0) * w + std::size_t(t.x0);
                        if (gplane) {
                            gplane[i00] += gv * (T(1) - t.wy) * (T(1) - t.wx);
                            gplane[i00 + 1] += gv * (T(1) - t.wy) * t.wx;
                            gplane[i00 + w] += gv * t.wy * (T(1) - t.wx);
                            gplane[i00 + w + 1] += gv * t.wy * t.wx;
                        }
                        if (gux) {
                            const T v00 = plane[i00], v01 = plane[i00 + 1], v10 = plane[i00 + w],
                                    v11 = plane[i00 + w + 1];
                            if (t.in_x)
                                gux[p] += gv * T(scale.x) * ((T(1) - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                            if (t.in_y)
                                gux[hw + p] += gv * T(scale.y) * ((T(1) - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                        }
                    }
                }
            }
        });
}

// channels o field, per channel independently.
template <class T>
Tensor<T> warp(const Tensor<T>& channels, const Tensor<T>& field) {
    return sample_at(channels, field, GridScale{});
}

// (a o b)(p) = a(b(p)): displacement u_b(p) + u_a(p + u_b(p)).
template <class T>
Tensor<T> compose_fields(const Tensor<T>& a, const Tensor<T>& b, GridScale scale = {}) {
    return add(b, sample_at(a, b, scale));
}

template <class T>
double max_abs(const Tensor<T>& t) {
    double m = 0.0;
    for (T v : t.data()) m = std::max(m, double(std::abs(v)));
    return m;
}

// Scaling and squaring: u0 = v / 2^n followed by n self-compositions.
// Returns (exp(v), exp(-v)) on v's grid.
template <class T>
std::pair<Tensor<T>, Tensor<T>> exp_svf(const Tensor<T>& v, std::size_t n_squarings, GridScale scale = {}) {
    if (n_squarings < 1) throw std::invalid_argument("exp_svf: n_squarings must be >= 1");
    detail::require_rank(v.shape(), 4, "exp_svf");
    const T step = T(1.0 / std::ldexp(1.0, int(n_squarings)));
    auto integrate = [&](T sign) {
        Tensor<T> u = scalar_mul(v, sign * step);
        for (std::size_t i = 0; i < n_squarings; ++i) u = compose_fields(u, u, scale);
        return u;
    };
    Tensor<T> phi = integrate(T(1));
    Tensor<T> phi_inv = integrate(T(-1));
    const double limit = double(std::max(v.size(2), v.size(3)));
    const double extent = std::max(max_abs(phi) * std::max(scale.x, scale.y), max_abs(phi_inv) * std::max(scale.x, scale.y));
    if (extent > limit)
        throw numeric_error("exp_svf: displacement of " + std::to_string(extent) + " grid units exceeds grid size");
    return {std::move(phi), std::move(phi_inv)};
}

// Row-major [a00 a01 t0; a10 a11 t1].
struct Affine2 {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};

    static Affine2 identity() { return {}; }
    double det() const { return m[0] * m[4] - m[1] * m[3]; }

    // T(x) = A (x - c) + c + t
    std::array<double, 2> apply(double x, double y, double cx, double cy) const {
        const double dx = x - cx, dy = y - cy;
        return {m[0] * dx + m[1] * dy + cx + m[2], m[3] * dx + m[4] * dy + cy + m[5]};
    }
};

// Both maps act about the same center, so the composite keeps that form.
inline Affine2 compose(const Affine2& a, const Affine2& b) {
    Affine2 r;
    r.m[0] = a.m[0] * b.m[0] + a.m[1] * b.m[3];
    r.m[1] = a.m[0] * b.m[1] + a.m[1] * b.m[4];
    r.m[3] = a.m[3] * b.m[0] + a.m[4] * b.m[3];
    r.m[4] = a.m[3] * b.m[1] + a.m[4] * b.m[4];
    r.m[2] = a.m[0] * b.m[2] + a.m[1] * b.m[5] + a.m[2];
    r.m[5] = a.m[3] * b.m[2] + a.m[4] * b.m[5] + a.m[5];
    return r;
}

// T = M_t R_theta D_s
inline Affine2 build_affine(double tx, double ty, double theta, double log_sx, double log_sy) {
    const double c = std::cos(theta), s = std::sin(theta);
    const double sx = std::exp(log_sx), sy = std::exp(log_sy);
    return Affine2{{c * sx, -s * sy, tx, s * sx, c * sy, ty}};
}

inline Affine2 invert_affine(const Affine2& t) {
    const double d = t.det();
    if (std::abs(d) <= 1e-8) throw numeric_error("invert_affine: linear part is singular");
    Affine2 r;
    r.m[0] = t.m[4] / d;
    r.m[1] = -t.m[1] / d;
    r.m[3] = -t.m[3] / d;
    r.m[4] = t.m[0] / d;
    r.m[2] = -(r.m[0] * t.m[2] + r.m[1] * t.m[5]);
    r.m[5] = -(r.m[3] * t.m[2] + r.m[4] * t.m[5]);
    return r;
}

// params [N,5] = (tx, ty, theta, log_sx, log_sy) -> matrices [N,2,3] of T,
// or of T^-1 when `inverse` is set. Closed-form in both directions.
template <class T>
Tensor<T> affine_matrix(const Tensor<T>& params, bool inverse) {
    detail::require_rank(params.shape(), 2, "affine_matrix");
    if (params.size(1) != 5) throw shape_error("affine_matrix: expected [N,5], got " + shape_str(params.shape()));
    const std::size_t n = params.size(0);
    std::vector<T> out(n * 6);
    auto pv = params.data();
    for (std::size_t b = 0; b < n; ++b) {
        const double tx = pv[b * 5], ty = pv[b * 5 + 1], th = pv[b * 5 + 2], lx = pv[b * 5 + 3], ly = pv[b * 5 + 4];
        Affine2 a = build_affine(tx, ty, th, lx, ly);
        if (inverse) {
            const double c = std::cos(th), s = std::sin(th), sx = std::exp(lx), sy = std::exp(ly);
            a.m = {c / sx, s / sx, 0.0, -s / sy, c / sy, 0.0};
            a.m[2] = -(a.m[0] * tx + a.m[1] * ty);
            a.m[5] = -(a.m[3] * tx + a.m[4] * ty);
        }
        for (int k = 0; k < 6; ++k) out[b * 6 + k] = T(a.m[k]);
    }
    return make_result<T>(
        "affine_matrix", Shape{n, 2, 3}, std::move(out), {&params},
        [ip = params.impl(), n, inverse](std::span<const T> g) {
            T* gp = grad_target(ip);
            if (!gp) return;
            const auto& pv = ip->data;
            for (std::size_t b = 0; b < n; ++b) {
                const double tx = pv[b * 5], ty = pv[b * 5 + 1], th = pv[b * 5 + 2];
                const double c = std::cos(th), s = std::sin(th), sx = std::exp(pv[b * 5 + 3]),
                             sy = std::exp(pv[b * 5 + 4]);
                const T* gm = g.data() + b * 6;
                // d(out)/d(param) for each of the six entries.
                std::array<std::array<double, 6>, 5> d{};
                if (!inverse) {
                    d[0] = {0, 0, 1, 0, 0, 0};
                    d[1] = {0, 0, 0, 0, 0, 1};
                    d[2] = {-s * sx, -c * sy, 0, c * sx, -s * sy, 0};
                    d[3] = {c * sx, 0, 0, s * sx, 0, 0};
                    d[4] = {0, -s * sy, 0, 0, c * sy, 0};
                } else {
                    const std::array<double, 4> a{c / sx, s / sx, -s / sy, c / sy};
                    const std::array<std::array<double, 4>, 3> da{{
                        {-s / sx, c / sx, -c / sy, -s / sy},  // theta
                        {-c / sx, -s / sx, 0, 0},             // log_sx
                        {0, 0, s / sy, -c / sy},              // log_sy
                    }};
                    d[0] = {0, 0, -a[0], 0, 0, -a[2]};
                    d[1] = {0, 0, -a[1], 0, 0, -a[3]};
                    for (int q = 0; q < 3; ++q) {
                        const auto& e = da[q];
                        d[2 + q] = {e[0], e[1], -(e[0] * tx + e[1] * ty), e[2], e[3], -(e[2] * tx + e[3] * ty)};
                    }
                }
                for (int q = 0; q < 5; ++q) {
                    double acc = 0.0;
                    for (int k = 0; k < 6; ++k) acc += d[q][k] * double(gm[k]);
                    gp[b * 5 + q] += T(acc);
                }
            }
        });
}

// Displacement of T o phi for matrices [N,2,3] and fields [N,2,H,W]:
//   d(p) = A (p + u(p) - c) + c + t - p.
// An undefined `u` means phi is the identity; H and W then give the grid.
template <class T>
Tensor<T> affine_displacement(const Tensor<T>& mat, const Tensor<T>& u, std::size_t H = 0, std::size_t W = 0) {
    detail::require_rank(mat.shape(), 3, "affine_displacement");
    const std::size_t n = mat.size(0);
    if (u.defined()) {
        detail::require_rank(u.shape(), 4, "affine_displacement");
        if (u.size(0) != n || u.size(1) != 2) throw shape_error("affine_displacement: field " + shape_str(u.shape()));
        H = u.size(2);
        W = u.size(3);
    }
    const std::size_t hw = H * W;
    const double cx = (double(W) - 1.0) / 2.0, cy = (double(H) - 1.0) / 2.0;
    std::vector<T> out(n * 2 * hw);
    auto mv = mat.data();
    for (std::size_t b = 0; b < n; ++b) {
        const T* m = mv.data() + b * 6;
        const T* ux = u.defined() ? u.data().data() + b * 2 * hw : nullptr;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t p = y * W + x;
                const double qx = double(x) + (ux ? double(ux[p]) : 0.0) - cx;
                const double qy = double(y) + (ux ? double(ux[hw + p]) : 0.0) - cy;
                out[b * 2 * hw + p] = T(m[0] * qx + m[1] * qy + cx + m[2] - double(x));
                out[b * 2 * hw + hw + p] = T(m[3] * qx + m[4] * qy + cy + m[5] - double(y));
            }
    }
    auto backward = [im = mat.impl(), iu = u.defined() ? u.impl() : nullptr, n, H, W, cx,
                     cy](std::span<const T> g) {
            const std::size_t hw = H * W;
            T* gm = grad_target(im);
            T* gu = iu ? grad_target(iu) : nullptr;
            for (std::size_t b = 0; b < n; ++b) {
                const T* m = im->data.data() + b * 6;
                const T* ux = iu ? iu->data.data() + b * 2 * hw : nullptr;
                const T* gx = g.data() + b * 2 * hw;
                const T* gy = gx + hw;
                std::array<double, 6> acc{};
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x) {
                        const std::size_t p = y * W + x;
                        const double qx = double(x) + (ux ? double(ux[p]) : 0.0) - cx;
                        const double qy = double(y) + (ux ? double(ux[hw + p]) : 0.0) - cy;
                        const double a = gx[p], c = gy[p];
                        acc[0] += a * qx;
                        acc[1] += a * qy;
                        acc[2] += a;
                        acc[3] += c * qx;
                        acc[4] += c * qy;
                        acc[5] += c;
                        if (gu) {
                            gu[b * 2 * hw + p] += T(a * m[0] + c * m[3]);
                            gu[b * 2 * hw + hw + p] += T(a * m[1] + c * m[4]);
                        }
                    }
                if (gm)
                    for (int k = 0; k < 6; ++k) gm[b * 6 + k] += T(acc[k]);
            }
    };
    if (u.defined())
        return make_result<T>("affine_displacement", Shape{n, 2, H, W}, std::move(out), {&mat, &u}, backward);
    return make_result<T>("affine_displacement", Shape{n, 2, H, W}, std::move(out), {&mat}, backward);
}

template <class T>
struct Transformation {
    Tensor<T> phi_half;      // exp(v) on the SVF grid
    Tensor<T> phi_inv_half;  // exp(-v) on the SVF grid
    Tensor<T> Phi;           // T o phi, full resolution
    Tensor<T> Phi_inv;       // phi^-1 o T^-1, full resolution
};

// Integrates the half-resolution SVF, upsamples both directions and composes
// them with the affine part. Displacements are full-resolution pixels
// throughout, so upsampling needs no rescaling. An undefined
// `affine_params` means T is the identity.
template <class T>
Transformation<T> transformation_computation(const Tensor<T>& v, const Tensor<T>& affine_params,
                                             std::size_t n_squarings = 6) {
    detail::require_rank(v.shape(), 4, "transformation_computation");
    const std::size_t h = v.size(2), w = v.size(3), H = 2 * h, W = 2 * w;
    const GridScale scale{double(w - 1) / double(W - 1), double(h - 1) / double(H - 1)};
    Transformation<T> r;
    std::tie(r.phi_half, r.phi_inv_half) = exp_svf(v, n_squarings, scale);
    Tensor<T> up = upsample_bilinear_2x(r.phi_half);
    Tensor<T> up_inv = upsample_bilinear_2x(r.phi_inv_half);
    if (!affine_params.defined()) {
        r.Phi = up;
        r.Phi_inv = up_inv;
        return r;
    }
    r.Phi = affine_displacement(affine_matrix(affine_params, false), up);
    Tensor<T> t_inv = affine_displacement(affine_matrix(affine_params, true), Tensor<T>{}, H, W);
    r.Phi_inv = compose_fields(up_inv, t_inv);
    return r;
}

// Displacement field of an Affine2 on an H x W grid, batch 1.
template <class T>
Tensor<T> affine_field(const Affine2& a, std::size_t H, std::size_t W) {
    Tensor<T> m(Shape{1, 2, 3});
    for (int k = 0; k < 6; ++k) m.mutable_data()[k] = T(a.m[k]);
    NoGradGuard no_grad;
    return affine_displacement(m, Tensor<T>{}, H, W);
}

// Determinant of the Jacobian of p + u(p) for a [1,2,H,W] or [2,H,W] field;
// central differences inside, one-sided at the border. Returns [H,W].
template <class T>
Tensor<double> jacobian_determinant(const Tensor<T>& field) {
    const Shape& s = field.shape();
    if (!((s.size() == 4 && s[0] == 1 && s[1] == 2) || (s.size() == 3 && s[0] == 2)))
        throw shape_error("jacobian_determinant: expected a single 2-channel field, got " + shape_str(s));
    const std::size_t H = s[s.size() - 2], W = s[s.size() - 1], hw = H * W;
    auto u = field.data();
    auto d = [&](std::size_t comp, std::size_t y, std::size_t x, bool along_x) {
        const T* f = u.data() + comp * hw;
        if (along_x) {
            const std::size_t x0 = x == 0 ? 0 : x - 1, x1 = x + 1 >= W ? W - 1 : x + 1;
            return (double(f[y * W + x1]) - double(f[y * W + x0])) / double(x1 - x0);
        }
        const std::size_t y0 = y == 0 ? 0 : y - 1, y1 = y + 1 >= H ? H - 1 : y + 1;
        return (double(f[y1 * W + x]) - double(f[y0 * W + x])) / double(y1 - y0);
    };
    Tensor<double> det(Shape{H, W});
    auto out = det.mutable_data();
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double a = 1.0 + d(0, y, x, true), b = d(0, y, x, false);
            const double c = d(1, y, x, true), e = 1.0 + d(1, y, x, false);
            out[y * W + x] = a * e - b * c;
        }
    return det;
}

}  // namespace atlas_istn
