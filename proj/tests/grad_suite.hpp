// Finite-difference checks for every differentiable op, each over seeded
// random inputs. Shared by the unit tests and the acceptance run.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "atlas_istn/losses.hpp"
#include "atlas_istn/nets.hpp"
#include "atlas_istn/warp.hpp"
#include "test_util.hpp"

namespace atlas_istn::testing {

struct GradCase {
    std::string name;
    Op op;
    std::function<std::vector<Tensor<double>>(std::uint64_t seed)> inputs;
};

// Fractional, off-knot displacements keep bilinear sampling differentiable.
inline Tensor<double> off_knot_field(const Shape& s, std::uint64_t seed, double range) {
    auto f = random_tensor(s, seed, -range, range);
    for (double& v : f.mutable_data()) v = std::floor(v) + 0.25 + 0.5 * (v - std::floor(v));
    return f;
}

// Values bounded away from the ReLU kink.
inline Tensor<double> away_from_zero(const Shape& s, std::uint64_t seed) {
    auto t = random_tensor(s, seed);
    for (double& v : t.mutable_data()) v = v < 0 ? v - 0.05 : v + 0.05;
    return t;
}

inline Tensor<double> smooth_small_svf(std::size_t h, std::size_t w, double amp, std::uint64_t seed) {
    auto c = random_tensor({6}, seed);
    Tensor<double> v(Shape{1, 2, h, w});
    auto d = v.mutable_data();
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double a = double(x) / double(w), b = double(y) / double(h);
            d[y * w + x] = amp * (c.at(0) * std::sin(3 * a + c.at(1)) + c.at(2) * b);
            d[h * w + y * w + x] = amp * (c.at(3) * std::cos(3 * b + c.at(4)) + c.at(5) * a);
        }
    return v;
}

inline std::vector<GradCase> grad_cases() {
    using V = std::vector<Tensor<double>>;
    const ItnConfig itn_cfg{1, 2, 2, 2};
    const StnConfig stn_cfg{2, 2, 2, 4, true, true};
    std::vector<GradCase> c;
    auto add_case = [&](std::string name, Op op, std::function<V(std::uint64_t)> in) {
        c.push_back({std::move(name), std::move(op), std::move(in)});
    };
    add_case("add", [](const V& v) { return add(v[0], v[1]); },
             [](auto s) { return V{random_tensor({2, 3}, s), random_tensor({2, 3}, s + 1)}; });
    add_case("scalar_mul", [](const V& v) { return scalar_mul(v[0], -1.7); }, [](auto s) { return V{random_tensor({4, 2}, s)}; });
    add_case("relu", [](const V& v) { return relu(v[0]); }, [](auto s) { return V{away_from_zero({3, 4}, s)}; });
    add_case("mse", [](const V& v) { return mse(v[0], v[1]); },
             [](auto s) { return V{random_tensor({2, 5}, s), random_tensor({2, 5}, s + 1)}; });
    add_case("dot", [](const V& v) { return dot(v[0], v[1]); },
             [](auto s) { return V{random_tensor({6}, s), random_tensor({6}, s + 1)}; });
    add_case("concat_channels", [](const V& v) { return concat_channels<double>({v[0], v[1]}); },
             [](auto s) { return V{random_tensor({2, 1, 3, 3}, s), random_tensor({2, 2, 3, 3}, s + 1)}; });
    add_case("slice_channels", [](const V& v) { return slice_channels(v[0], 1, 3); },
             [](auto s) { return V{random_tensor({2, 3, 2, 2}, s)}; });
    add_case("repeat_batch", [](const V& v) { return repeat_batch(v[0], 3); },
             [](auto s) { return V{random_tensor({1, 2, 2, 2}, s)}; });
    add_case("global_mean_pool", [](const V& v) { return global_mean_pool(v[0]); },
             [](auto s) { return V{random_tensor({2, 3, 4, 4}, s)}; });
    add_case("fully_connected", [](const V& v) { return fully_connected(v[0], v[1], v[2]); },
             [](auto s) { return V{random_tensor({3, 5}, s), random_tensor({4, 5}, s + 1), random_tensor({4}, s + 2)}; });
    for (std::size_t stride : {1, 2})
        add_case("conv2d_stride" + std::to_string(stride),
                 [stride](const V& v) { return conv2d(v[0], v[1], v[2], stride, 1); },
                 [](auto s) {
                     return V{random_tensor({1, 2, 8, 8}, s), random_tensor({3, 2, 3, 3}, s + 1), random_tensor({3}, s + 2)};
                 });
    add_case("upsample_bilinear_2x", [](const V& v) { return upsample_bilinear_2x(v[0]); },
             [](auto s) { return V{random_tensor({2, 2, 3, 4}, s)}; });
    add_case("warp", [](const V& v) { return warp(v[0], v[1]); },
             [](auto s) { return V{random_tensor({2, 3, 5, 5}, s), off_knot_field({2, 2, 5, 5}, s + 1, 1.8)}; });
    add_case("sample_at_scaled", [](const V& v) { return sample_at(v[0], v[1], GridScale{0.4, 0.6}); },
             [](auto s) { return V{random_tensor({1, 1, 6, 6}, s), random_tensor({1, 2, 6, 6}, s + 1, 0.3, 0.9)}; });
    add_case("compose_fields", [](const V& v) { return compose_fields(v[0], v[1]); },
             [](auto s) { return V{random_tensor({1, 2, 5, 5}, s), off_knot_field({1, 2, 5, 5}, s + 1, 1.5)}; });
    add_case("exp_svf", [](const V& v) {
                 auto [phi, inv] = exp_svf(v[0], 3, GridScale{0.5, 0.5});
                 return concat_channels<double>({phi, inv});
             },
             [](auto s) { return V{smooth_small_svf(6, 6, 0.4, s)}; });
    for (bool inverse : {false, true})
        add_case(inverse ? "affine_matrix_inverse" : "affine_matrix",
                 [inverse](const V& v) { return affine_matrix(v[0], inverse); },
                 [](auto s) { return V{random_tensor({2, 5}, s, -0.4, 0.4)}; });
    add_case("affine_displacement", [](const V& v) { return affine_displacement(v[0], v[1]); },
             [](auto s) { return V{random_tensor({2, 2, 3}, s), random_tensor({2, 2, 4, 5}, s + 1)}; });
    add_case("affine_displacement_grid", [](const V& v) { return affine_displacement(v[0], Tensor<double>{}, 4, 5); },
             [](auto s) { return V{random_tensor({2, 2, 3}, s)}; });
    add_case("transformation_computation", [](const V& v) {
                 auto t = transformation_computation(v[0], v[1], 3);
                 return concat_channels<double>({t.Phi, t.Phi_inv});
             },
             [](auto s) { return V{smooth_small_svf(4, 4, 0.4, s), random_tensor({1, 5}, s + 1, -0.2, 0.2)}; });
    add_case("seg_loss", [](const V& v) { return seg_loss(v[0], v[1]); },
             [](auto s) { return V{random_tensor({2, 2, 4, 4}, s), random_tensor({2, 2, 4, 4}, s + 1)}; });
    add_case("a2s_loss", [](const V& v) { return a2s_loss(v[0], v[1], v[2]); },
             [](auto s) {
                 return V{random_tensor({2, 2, 5, 5}, s), random_tensor({1, 2, 5, 5}, s + 1), off_knot_field({2, 2, 5, 5}, s + 2, 1.5)};
             });
    add_case("s2a_loss", [](const V& v) { return s2a_loss(v[0], v[1], v[2]); },
             [](auto s) {
                 return V{random_tensor({2, 2, 5, 5}, s), random_tensor({1, 2, 5, 5}, s + 1), off_knot_field({2, 2, 5, 5}, s + 2, 1.5)};
             });
    add_case("reg_loss", [](const V& v) { return reg_loss(v[0]); }, [](auto s) { return V{random_tensor({1, 2, 5, 4}, s)}; });
    add_case("itn_forward",
             [itn_cfg](const V& v) {
                 static const auto ps = init_itn<double>(itn_cfg, 11);
                 return itn_forward(v[0], ps, itn_cfg);
             },
             [](auto s) { return V{random_tensor({1, 1, 8, 8}, s)}; });
    for (bool affine_head : {false, true})
        add_case(affine_head ? "stn_forward_affine" : "stn_forward_svf",
                 [stn_cfg, affine_head](const V& v) {
                     static const auto ps = [&] {
                         auto p = init_stn<double>(stn_cfg, 12);
                         for (const char* head : {"stn.svf.w", "stn.aff2.w"})
                             for (double& w : p.at(head).mutable_data()) w = 0.05;
                         return p;
                     }();
                     auto out = stn_forward(v[0], v[1], ps, stn_cfg);
                     return affine_head ? out.affine : out.svf;
                 },
                 [](auto s) { return V{random_tensor({1, 1, 8, 8}, s), random_tensor({1, 1, 8, 8}, s + 1)}; });
    return c;
}

struct GradCaseResult {
    std::string name;
    std::size_t seeds = 0;
    double worst = 0;
};

inline std::vector<GradCaseResult> run_grad_suite(std::size_t seeds) {
    std::vector<GradCaseResult> out;
    for (const auto& gc : grad_cases()) {
        GradCaseResult r{gc.name, seeds, 0};
        for (std::size_t s = 0; s < seeds; ++s)
            r.worst = std::max(r.worst, projected_grad_error(gc.op, gc.inputs(1000 * s + 17), 7 * s + 3));
        out.push_back(r);
    }
    return out;
}

}  // namespace atlas_istn::testing
