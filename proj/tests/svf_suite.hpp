// Random smooth velocity fields and the invertibility statistics measured
// on them. Shared by the property tests and the acceptance run.

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "atlas_istn/warp.hpp"

namespace atlas_istn::testing {

// Gaussian-smoothed white noise (border clamped), rescaled so that the
// largest component magnitude equals `max_abs_px`. Returns [1,2,n,n].
inline Tensor<double> smooth_svf(std::mt19937_64& rng, std::size_t n, double sigma, double max_abs_px) {
    std::normal_distribution<double> noise(0, 1);
    const int r = int(std::ceil(3 * sigma));
    std::vector<double> kernel(std::size_t(2 * r + 1));
    double total = 0;
    for (int i = -r; i <= r; ++i) total += kernel[std::size_t(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& k : kernel) k /= total;
    auto clamp = [&](long i) { return std::size_t(std::clamp<long>(i, 0, long(n) - 1)); };
    Tensor<double> v(Shape{1, 2, n, n});
    auto out = v.mutable_data();
    std::vector<double> raw(n * n), rows(n * n);
    for (std::size_t c = 0; c < 2; ++c) {
        for (double& x : raw) x = noise(rng);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                double s = 0;
                for (int i = -r; i <= r; ++i) s += kernel[std::size_t(i + r)] * raw[y * n + clamp(long(x) + i)];
                rows[y * n + x] = s;
            }
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                double s = 0;
                for (int i = -r; i <= r; ++i) s += kernel[std::size_t(i + r)] * rows[clamp(long(y) + i) * n + x];
                out[c * n * n + y * n + x] = s;
            }
    }
    const double peak = max_abs(v);
    for (double& x : out) x *= max_abs_px / peak;
    return v;
}

struct InvertibilityStats {
    double mean_error = 0;  // mean |exp(v) o exp(-v)| over the interior
    double max_error = 0;
    double min_jacobian = 0;  // of exp(v), whole grid
};

inline InvertibilityStats invertibility(const Tensor<double>& v, std::size_t n_squarings, std::size_t margin = 4) {
    const auto [phi, inv] = exp_svf(v, n_squarings);
    const auto residual = compose_fields(phi, inv);
    const std::size_t h = v.size(2), w = v.size(3);
    InvertibilityStats s;
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t y = margin; y + margin < h; ++y)
        for (std::size_t x = margin; x + margin < w; ++x) {
            const double e = std::hypot(residual.at(y * w + x), residual.at(h * w + y * w + x));
            sum += e;
            s.max_error = std::max(s.max_error, e);
            ++count;
        }
    s.mean_error = sum / double(count);
    const auto det = jacobian_determinant(phi);
    s.min_jacobian = *std::min_element(det.data().begin(), det.data().end());
    return s;
}

// Suite parameters: 64 x 64 grid, smoothing sigma 6 px, peak |v| drawn from
// [1, 8] px with the first ten fields at the full 8 px.
struct SvfSuite {
    std::size_t count = 100, size = 64;
    double sigma = 6.0, max_abs_px = 8.0;
    std::uint64_t seed = 1;

    std::vector<Tensor<double>> fields() const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> peak(1.0, max_abs_px);
        std::vector<Tensor<double>> out;
        for (std::size_t i = 0; i < count; ++i) out.push_back(smooth_svf(rng, size, sigma, i < 10 ? max_abs_px : peak(rng)));
        return out;
    }
};

}  // namespace atlas_istn::testing
