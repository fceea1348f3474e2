// Training and refinement objectives.
//
// All MSE terms average over every element. a2s/s2a compare foreground
// channels only (channel 0 is background). The atlas is always data: callers
// pass tensors that do not require grad.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "atlas_istn/ops.hpp"
#include "atlas_istn/warp.hpp"

namespace atlas_istn {

struct OmegaSchedule {
    enum class Kind { constant, sigmoid_fade };
    Kind kind = Kind::constant;
    double value = 1.0;     // constant
    double center = 200.0;  // sigmoid_fade
    double width = 25.0;

    double at(double epoch) const {
        if (kind == Kind::constant) return value;
        return 1.0 / (1.0 + std::exp(-(epoch - center) / width));
    }
};

struct LossWeights {
    OmegaSchedule omega;
    double lambda = 1.0;
    double beta_star = 1.0;
    double gamma_star = 0.0;
    double lambda_star = 1.0;

    void validate() const {
        if (lambda < 0 || beta_star < 0 || gamma_star < 0 || lambda_star < 0 || omega.value < 0)
            throw std::invalid_argument("LossWeights: weights must be non-negative");
    }
};

namespace detail {

template <class T>
Tensor<T> foreground(const Tensor<T>& x) {
    return slice_channels(x, 1, x.size(1));
}

template <class T>
Tensor<T> batched(const Tensor<T>& x, std::size_t n) {
    return x.size(0) == n ? x : repeat_batch(x, n);
}

}  // namespace detail

template <class T>
Tensor<T> seg_loss(const Tensor<T>& y, const Tensor<T>& y_hat) {
    return mse(y_hat, y);
}

// MSE(y_fg, atlas_fg o Phi_inv). atlas may have batch 1.
template <class T>
Tensor<T> a2s_loss(const Tensor<T>& y, const Tensor<T>& atlas, const Tensor<T>& phi_inv) {
    return mse(warp(detail::foreground(atlas), phi_inv), detail::foreground(y));
}

// MSE(y_fg o Phi, atlas_fg).
template <class T>
Tensor<T> s2a_loss(const Tensor<T>& y, const Tensor<T>& atlas, const Tensor<T>& phi) {
    return mse(warp(detail::foreground(y), phi), detail::batched(detail::foreground(atlas), phi.size(0)));
}

// Sum of squared forward differences of the displacement, both components
// and both directions, divided by N*h*w.
template <class T>
Tensor<T> reg_loss(const Tensor<T>& u) {
    detail::require_rank(u.shape(), 4, "reg_loss");
    const std::size_t n = u.size(0), c = u.size(1), h = u.size(2), w = u.size(3);
    const double norm = double(n * h * w);
    auto d = u.data();
    double acc = 0.0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const T* p = d.data() + plane * h * w;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                if (x + 1 < w) {
                    const double g = double(p[y * w + x + 1]) - double(p[y * w + x]);
                    acc += g * g;
                }
                if (y + 1 < h) {
                    const double g = double(p[(y + 1) * w + x]) - double(p[y * w + x]);
                    acc += g * g;
                }
            }
    }
    return make_result<T>("reg_loss", Shape{}, std::vector<T>{T(acc / norm)}, {&u},
                          [iu = u.impl(), n, c, h, w, norm](std::span<const T> g) {
                              T* gu = grad_target(iu);
                              if (!gu) return;
                              const double s = 2.0 * double(g[0]) / norm;
                              for (std::size_t plane = 0; plane < n * c; ++plane) {
                                  const T* p = iu->data.data() + plane * h * w;
                                  T* gp = gu + plane * h * w;
                                  for (std::size_t y = 0; y < h; ++y)
                                      for (std::size_t x = 0; x < w; ++x) {
                                          const std::size_t i = y * w + x;
                                          if (x + 1 < w) {
                                              const double d = s * (double(p[i + 1]) - double(p[i]));
                                              gp[i + 1] += T(d);
                                              gp[i] -= T(d);
                                          }
                                          if (y + 1 < h) {
                                              const double d = s * (double(p[i + w]) - double(p[i]));
                                              gp[i + w] += T(d);
                                              gp[i] -= T(d);
                                          }
                                      }
                              }
                          });
}

template <class T>
struct LossTerms {
    Tensor<T> total;
    double seg = 0, a2s = 0, s2a = 0, reg = 0, omega = 0;
};

// L_s + omega (L_a2s + L_s2a + lambda L_reg). Pass use_seg=false to drop L_s.
template <class T>
LossTerms<T> total_loss(const Tensor<T>& y, const Tensor<T>& y_hat, const Tensor<T>& atlas,
                        const Transformation<T>& tf, const LossWeights& wts, double epoch, bool use_seg = true) {
    LossTerms<T> r;
    r.omega = wts.omega.at(epoch);
    auto la2s = a2s_loss(y, atlas, tf.Phi_inv);
    auto ls2a = s2a_loss(y, atlas, tf.Phi);
    auto lreg = reg_loss(tf.phi_half);
    r.a2s = la2s.item();
    r.s2a = ls2a.item();
    r.reg = lreg.item();
    Tensor<T> deform = add(add(la2s, ls2a), scalar_mul(lreg, T(wts.lambda)));
    r.total = scalar_mul(deform, T(r.omega));
    if (use_seg) {
        auto ls = seg_loss(y, y_hat);
        r.seg = ls.item();
        r.total = add(ls, r.total);
    }
    return r;
}

// beta* a2s(y_hat) + gamma* s2a(y_hat) + lambda* reg. The s2a term is skipped
// entirely when gamma* is zero.
template <class T>
Tensor<T> refine_loss(const Tensor<T>& y_hat, const Tensor<T>& atlas, const Transformation<T>& tf,
                      const LossWeights& wts) {
    Tensor<T> l = scalar_mul(a2s_loss(y_hat, atlas, tf.Phi_inv), T(wts.beta_star));
    if (wts.gamma_star != 0.0) l = add(l, scalar_mul(s2a_loss(y_hat, atlas, tf.Phi), T(wts.gamma_star)));
    return add(l, scalar_mul(reg_loss(tf.phi_half), T(wts.lambda_star)));
}

}  // namespace atlas_istn
