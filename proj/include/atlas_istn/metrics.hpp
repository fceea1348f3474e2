// Overlap, surface-distance, topology and inverse-consistency metrics on
// binary masks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "atlas_istn/atlas.hpp"
#include "atlas_istn/warp.hpp"

namespace atlas_istn {

struct Mask {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;  // 0 or 1, row-major

    Mask() = default;
    Mask(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}
    Mask(std::size_t h, std::size_t w, std::vector<std::uint8_t> px) : height(h), width(w), pixels(std::move(px)) {
        if (pixels.size() != h * w) throw shape_error("Mask: pixel count does not match " + std::to_string(h) + "x" + std::to_string(w));
        for (auto& p : pixels) p = p ? 1 : 0;
    }

    std::uint8_t operator()(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    std::uint8_t& operator()(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    std::size_t area() const { return std::size_t(std::count(pixels.begin(), pixels.end(), 1)); }
    bool empty() const { return area() == 0; }
    bool operator==(const Mask&) const = default;
};

// Pixels whose label equals `label`.
inline Mask label_mask(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w, std::uint8_t label) {
    Mask m(h, w);
    for (std::size_t i = 0; i < h * w; ++i) m.pixels[i] = labels[i] == label;
    return m;
}

namespace detail {

inline void require_same_grid(const Mask& a, const Mask& b, const char* who) {
    if (a.height != b.height || a.width != b.width)
        throw shape_error(std::string(who) + ": mask sizes differ");
}

}  // namespace detail

// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dsc(const Mask& a, const Mask& b) {
    detail::require_same_grid(a, b, "dsc");
    std::size_t inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        sa += a.pixels[i];
        sb += b.pixels[i];
        inter += a.pixels[i] & b.pixels[i];
    }
    if (sa + sb == 0) return 1.0;
    return 2.0 * double(inter) / double(sa + sb);
}

// Mask minus its 4-connected erosion; outside the grid counts as background.
inline Mask boundary(const Mask& m) {
    Mask out(m.height, m.width);
    const std::size_t h = m.height, w = m.width;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!m(y, x)) continue;
            const bool interior = y > 0 && x > 0 && y + 1 < h && x + 1 < w && m(y - 1, x) && m(y + 1, x) &&
                                  m(y, x - 1) && m(y, x + 1);
            out(y, x) = !interior;
        }
    return out;
}

namespace detail {

// 1D squared distance transform (Felzenszwalb & Huttenlocher): lower
// envelope of the parabolas rooted at the finite entries of f.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
    const std::size_t n = f.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::size_t k = 0;
    bool any = false;
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        if (!any) {
            any = true;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        auto cross = [&](std::size_t p) {
            return ((f[q] + double(q * q)) - (f[p] + double(p * p))) / (2.0 * (double(q) - double(p)));
        };
        double s = cross(v[k]);
        while (s <= z[k]) s = cross(v[--k]);  // z[0] = -inf stops the walk
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    if (!any) {
        std::fill(d.begin(), d.begin() + std::ptrdiff_t(n), inf);
        return;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < double(q)) ++k;
        const double diff = double(q) - double(v[k]);
        d[q] = diff * diff + f[v[k]];
    }
}

}  // namespace detail

// Exact squared Euclidean distance from every pixel to the nearest set pixel
// of `m` (infinity when m is empty).
inline std::vector<double> squared_distance_transform(const Mask& m) {
    const std::size_t h = m.height, w = m.width, n = std::max(h, w);
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> grid(h * w), f(n), d(n), z(n + 1);
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < h * w; ++i) grid[i] = m.pixels[i] ? 0.0 : inf;
    f.resize(h);
    d.resize(h);
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
        detail::edt_1d(f, d, v, z);
        for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
    }
    f.resize(w);
    d.resize(w);
    for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(grid.begin() + std::ptrdiff_t(y * w), w, f.begin());
        detail::edt_1d(f, d, v, z);
        std::copy_n(d.begin(), w, grid.begin() + std::ptrdiff_t(y * w));
    }
    return grid;
}

namespace detail {

// Distances from each boundary pixel of `from` to the boundary of `to`.
inline std::vector<double> boundary_distances(const Mask& from, const Mask& to) {
    const auto dt = squared_distance_transform(boundary(to));
    const Mask bf = boundary(from);
    std::vector<double> out;
    for (std::size_t i = 0; i < bf.pixels.size(); ++i)
        if (bf.pixels[i]) out.push_back(std::sqrt(dt[i]));
    return out;
}

inline void require_nonempty(const Mask& a, const Mask& b, const char* who) {
    detail::require_same_grid(a, b, who);
    if (a.empty() || b.empty()) throw std::invalid_argument(std::string(who) + ": undefined for an empty mask");
}

}  // namespace detail

// Symmetric average surface distance: mean over the union of both boundary
// point sets of the distance to the other boundary.
inline double asd(const Mask& a, const Mask& b) {
    detail::require_nonempty(a, b, "asd");
    const auto ab = detail::boundary_distances(a, b), ba = detail::boundary_distances(b, a);
    const double sum = std::accumulate(ab.begin(), ab.end(), 0.0) + std::accumulate(ba.begin(), ba.end(), 0.0);
    return sum / double(ab.size() + ba.size());
}

// Maximum of the two directed boundary Hausdorff distances.
inline double hausdorff(const Mask& a, const Mask& b) {
    detail::require_nonempty(a, b, "hausdorff");
    const auto ab = detail::boundary_distances(a, b), ba = detail::boundary_distances(b, a);
    return std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
}

struct Labeling {
    std::size_t count = 0;
    std::vector<std::int32_t> labels;  // 0 = not in set, 1..count otherwise, in raster order of first pixel
};

// Two-pass union-find labeling of pixels equal to `value`.
inline Labeling components(const Mask& m, int connectivity = 8, std::uint8_t value = 1) {
    if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("components: connectivity must be 4 or 8");
    const std::size_t h = m.height, w = m.width;
    std::vector<std::size_t> parent(h * w);
    std::iota(parent.begin(), parent.end(), std::size_t(0));
    auto find = [&](std::size_t i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    };
    auto unite = [&](std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };
    auto in = [&](long y, long x) {
        return y >= 0 && x >= 0 && y < long(h) && x < long(w) && m.pixels[std::size_t(y) * w + std::size_t(x)] == value;
    };
    for (long y = 0; y < long(h); ++y)
        for (long x = 0; x < long(w); ++x) {
            if (!in(y, x)) continue;
            const std::size_t i = std::size_t(y) * w + std::size_t(x);
            if (in(y, x - 1)) unite(i, i - 1);
            if (in(y - 1, x)) unite(i, i - w);
            if (connectivity == 8) {
                if (in(y - 1, x - 1)) unite(i, i - w - 1);
                if (in(y - 1, x + 1)) unite(i, i - w + 1);
            }
        }
    Labeling out;
    out.labels.assign(h * w, 0);
    std::vector<std::int32_t> root_label(h * w, 0);
    for (std::size_t i = 0; i < h * w; ++i) {
        if (m.pixels[i] != value) continue;
        const std::size_t r = find(i);
        if (!root_label[r]) root_label[r] = std::int32_t(++out.count);
        out.labels[i] = root_label[r];
    }
    return out;
}

// Background components (4-connected) minus the outer one, with the grid
// padded by one background pixel so every border region joins the outside.
inline std::size_t holes(const Mask& m) {
    Mask padded(m.height + 2, m.width + 2);
    for (std::size_t y = 0; y < m.height; ++y)
        for (std::size_t x = 0; x < m.width; ++x) padded(y + 1, x + 1) = m(y, x);
    return components(padded, 4, 0).count - 1;
}

struct Topology {
    std::size_t components = 0, holes = 0;
    bool operator==(const Topology&) const = default;
};

inline Topology topology(const Mask& m) { return {components(m, 8).count, holes(m)}; }

// Keeps the largest 8-connected component; ties go to the lowest label.
inline Mask largest_component(const Mask& m) {
    const auto lab = components(m, 8);
    if (lab.count <= 1) return m;
    std::vector<std::size_t> area(lab.count + 1, 0);
    for (auto l : lab.labels) ++area[std::size_t(l)];
    std::size_t best = 1;
    for (std::size_t k = 2; k <= lab.count; ++k)
        if (area[k] > area[best]) best = k;
    Mask out(m.height, m.width);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = std::size_t(lab.labels[i]) == best;
    return out;
}

namespace detail {

inline const Tensor<float>& single_field(const Tensor<float>& f, const char* who) {
    if (f.rank() != 4 || f.size(0) != 1 || f.size(1) != 2)
        throw shape_error(std::string(who) + ": expected a [1,2,H,W] field, got " + shape_str(f.shape()));
    return f;
}

}  // namespace detail

// Mean |(G o Phi_inv) o Phi - G| over atlas foreground (argmax >= 1).
inline double mice(const Tensor<float>& atlas_labelmap, const Tensor<float>& phi, const Tensor<float>& phi_inv) {
    NoGradGuard ng;
    detail::single_field(phi, "mice");
    detail::single_field(phi_inv, "mice");
    const auto seg = argmax_channels(atlas_labelmap).front();
    const auto round_trip = compose_fields(phi_inv, phi);
    const std::size_t hw = phi.size(2) * phi.size(3);
    auto d = round_trip.data();
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < hw; ++p) {
        if (seg[p] == 0) continue;
        sum += std::hypot(double(d[p]), double(d[hw + p]));
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mice: atlas has no foreground");
    return sum / double(n);
}

// DSC between argmax(atlas) and argmax((atlas o Phi_inv) o Phi), averaged
// over foreground labels.
inline double ic_dsc(const Tensor<float>& atlas_labelmap, const Tensor<float>& phi, const Tensor<float>& phi_inv) {
    NoGradGuard ng;
    detail::single_field(phi, "ic_dsc");
    detail::single_field(phi_inv, "ic_dsc");
    const std::size_t c = atlas_labelmap.size(1), h = atlas_labelmap.size(2), w = atlas_labelmap.size(3);
    const auto a = argmax_channels(atlas_labelmap).front();
    const auto b = argmax_channels(warp(warp(atlas_labelmap, phi_inv), phi)).front();
    double sum = 0.0;
    for (std::size_t k = 1; k < c; ++k)
        sum += dsc(label_mask(a, h, w, std::uint8_t(k)), label_mask(b, h, w, std::uint8_t(k)));
    return sum / double(c - 1);
}

}  // namespace atlas_istn
