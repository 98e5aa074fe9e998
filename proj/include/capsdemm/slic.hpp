#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "capsdemm/image.hpp"

namespace capsdemm {

struct LabColor {
    float L = 0, a = 0, b = 0;
};

namespace detail {

inline double srgb_to_linear(std::uint8_t v) {
    const double c = v / 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double lab_f(double t) {
    constexpr double d = 6.0 / 29.0;
    return t > d * d * d ? std::cbrt(t) : t / (3.0 * d * d) + 4.0 / 29.0;
}

}  // namespace detail

// sRGB through linear RGB and D65 XYZ to CIELAB.
inline LabColor rgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const double rl = detail::srgb_to_linear(r);
    const double gl = detail::srgb_to_linear(g);
    const double bl = detail::srgb_to_linear(b);
    const double x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    const double y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    const double z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    const double fx = detail::lab_f(x / 0.95047);
    const double fy = detail::lab_f(y / 1.0);
    const double fz = detail::lab_f(z / 1.08883);
    LabColor lab;
    lab.L = static_cast<float>(116.0 * fy - 16.0);
    lab.a = static_cast<float>(500.0 * (fx - fy));
    lab.b = static_cast<float>(200.0 * (fy - fz));
    return lab;
}

struct SlicResult {
    std::vector<std::int32_t> labels;  // 0-based, row-major
    int count = 0;
    int width = 0;
    int height = 0;
};

namespace detail {

// Relabels 4-connected regions in scan order; a region smaller than min_size
// is absorbed into the most recent neighboring label, which always exists for
// every region after the first.
inline void enforce_connectivity(std::vector<std::int32_t>& labels, int w, int h, int min_size,
                                 int& count) {
    std::vector<std::int32_t> relabeled(labels.size(), -1);
    std::vector<std::int32_t> segment;
    std::int32_t next = 0;
    static const int dx[] = {-1, 0, 1, 0};
    static const int dy[] = {0, -1, 0, 1};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::int32_t p = y * w + x;
            if (relabeled[p] >= 0) continue;
            std::int32_t adjacent = 0;
            if (x > 0 && relabeled[p - 1] >= 0) adjacent = relabeled[p - 1];
            else if (y > 0 && relabeled[p - w] >= 0) adjacent = relabeled[p - w];
            relabeled[p] = next;
            segment.assign(1, p);
            for (std::size_t head = 0; head < segment.size(); ++head) {
                const std::int32_t q = segment[head];
                const int qx = q % w, qy = q / w;
                for (int k = 0; k < 4; ++k) {
                    const int nx = qx + dx[k], ny = qy + dy[k];
                    if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                    const std::int32_t n = ny * w + nx;
                    if (relabeled[n] < 0 && labels[n] == labels[p]) {
                        relabeled[n] = next;
                        segment.push_back(n);
                    }
                }
            }
            if (static_cast<int>(segment.size()) < min_size && next > 0) {
                for (std::int32_t q : segment) relabeled[q] = adjacent;
            } else {
                ++next;
            }
        }
    labels.swap(relabeled);
    count = static_cast<int>(next);
}

}  // namespace detail

// Local k-means in the joint Lab-xy space. Seeds sit on a regular grid, each
// seed only competes for pixels within a 2S x 2S window, and the distance is
//   D^2 = dlab^2 + (dxy / S)^2 * m^2
// with grid interval S = sqrt(W*H / k). The returned label count can differ
// from k because of the grid rounding and the connectivity cleanup.
inline SlicResult slic_segment(const Image& img, int k, double compactness = 10.0,
                               int iterations = 10) {
    if (k < 1) throw std::invalid_argument("superpixel count must be >= 1");
    if (compactness <= 0.0) throw std::invalid_argument("compactness must be positive");
    if (iterations < 1) throw std::invalid_argument("iteration count must be >= 1");
    const int w = img.width, h = img.height;
    const std::size_t n = static_cast<std::size_t>(w) * h;
    if (k > static_cast<int>(n)) throw std::invalid_argument("more superpixels than pixels");

    std::vector<LabColor> lab(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* p = img.pixels.data() + i * 3;
        lab[i] = rgb_to_lab(p[0], p[1], p[2]);
    }

    const double S = std::sqrt(static_cast<double>(n) / k);
    const int nx = std::max(1, static_cast<int>(std::lround(w / S)));
    const int ny = std::max(1, static_cast<int>(std::lround(h / S)));
    struct Seed {
        double L, a, b, x, y;
    };
    std::vector<Seed> seeds;
    seeds.reserve(static_cast<std::size_t>(nx) * ny);
    for (int gy = 0; gy < ny; ++gy)
        for (int gx = 0; gx < nx; ++gx) {
            const int px = std::min(w - 1, static_cast<int>((gx + 0.5) * w / nx));
            const int py = std::min(h - 1, static_cast<int>((gy + 0.5) * h / ny));
            const LabColor& c = lab[static_cast<std::size_t>(py) * w + px];
            seeds.push_back({c.L, c.a, c.b, static_cast<double>(px), static_cast<double>(py)});
        }

    const double spatial_w = compactness * compactness / (S * S);
    std::vector<std::int32_t> assign(n, -1);
    std::vector<double> best(n);
    const int reach = static_cast<int>(std::ceil(S));
    for (int it = 0; it < iterations; ++it) {
        std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
        std::fill(assign.begin(), assign.end(), -1);
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const Seed& sd = seeds[s];
            const int x0 = std::max(0, static_cast<int>(sd.x) - reach);
            const int x1 = std::min(w - 1, static_cast<int>(sd.x) + reach);
            const int y0 = std::max(0, static_cast<int>(sd.y) - reach);
            const int y1 = std::min(h - 1, static_cast<int>(sd.y) + reach);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const std::size_t p = static_cast<std::size_t>(y) * w + x;
                    const LabColor& c = lab[p];
                    const double dl = c.L - sd.L, da = c.a - sd.a, db = c.b - sd.b;
                    const double dx = x - sd.x, dy = y - sd.y;
                    const double d = dl * dl + da * da + db * db + (dx * dx + dy * dy) * spatial_w;
                    if (d < best[p]) {
                        best[p] = d;
                        assign[p] = static_cast<std::int32_t>(s);
                    }
                }
        }
        // Pixels outside every window inherit the nearest seed spatially.
        for (std::size_t p = 0; p < n; ++p) {
            if (assign[p] >= 0) continue;
            const double px = static_cast<double>(p % w), py = static_cast<double>(p / w);
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s < seeds.size(); ++s) {
                const double dx = px - seeds[s].x, dy = py - seeds[s].y;
                const double d = dx * dx + dy * dy;
                if (d < bd) {
                    bd = d;
                    assign[p] = static_cast<std::int32_t>(s);
                }
            }
        }
        std::vector<double> acc(seeds.size() * 5, 0.0);
        std::vector<std::int64_t> cnt(seeds.size(), 0);
        for (std::size_t p = 0; p < n; ++p) {
            const std::size_t s = static_cast<std::size_t>(assign[p]);
            acc[s * 5 + 0] += lab[p].L;
            acc[s * 5 + 1] += lab[p].a;
            acc[s * 5 + 2] += lab[p].b;
            acc[s * 5 + 3] += static_cast<double>(p % w);
            acc[s * 5 + 4] += static_cast<double>(p / w);
            ++cnt[s];
        }
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            if (!cnt[s]) continue;
            const double inv = 1.0 / static_cast<double>(cnt[s]);
            seeds[s] = {acc[s * 5 + 0] * inv, acc[s * 5 + 1] * inv, acc[s * 5 + 2] * inv,
                        acc[s * 5 + 3] * inv, acc[s * 5 + 4] * inv};
        }
    }

    SlicResult result;
    result.labels = std::move(assign);
    result.width = w;
    result.height = h;
    const int min_size = std::max(1, static_cast<int>(n / static_cast<std::size_t>(k)) / 4);
    detail::enforce_connectivity(result.labels, w, h, min_size, result.count);
    return result;
}

struct SuperpixelCentroid {
    double x = 0, y = 0;
    std::int64_t area = 0;
};

inline std::vector<SuperpixelCentroid> superpixel_centroids(const SlicResult& sp) {
    std::vector<SuperpixelCentroid> centroids(static_cast<std::size_t>(sp.count));
    for (int y = 0; y < sp.height; ++y)
        for (int x = 0; x < sp.width; ++x) {
            SuperpixelCentroid& c =
                centroids[static_cast<std::size_t>(sp.labels[static_cast<std::size_t>(y) * sp.width + x])];
            c.x += x;
            c.y += y;
            ++c.area;
        }
    for (SuperpixelCentroid& c : centroids)
        if (c.area) {
            c.x /= static_cast<double>(c.area);
            c.y /= static_cast<double>(c.area);
        }
    return centroids;
}

struct PatchSpec {
    int cx = 0, cy = 0;               // rounded superpixel centroid
    int left = 0, top = 0;            // window origin after clamping
    int width = 0, height = 0;
    int label = 0;                    // source superpixel
};

// One spec per superpixel whose rounded centroid pixel is foreground in the
// mask. Windows are centered on the centroid and translated to stay inside
// the image, so every window is full size. Specs come back ordered by label.
inline std::vector<PatchSpec> select_patches(const SlicResult& sp, const Mask& sc_mask,
                                             int patch_size = 224) {
    if (sc_mask.width != sp.width || sc_mask.height != sp.height)
        throw std::invalid_argument("mask size does not match superpixel map");
    if (patch_size < 1 || patch_size > sp.width || patch_size > sp.height)
        throw std::invalid_argument("patch size must fit inside the image");

    const std::vector<SuperpixelCentroid> centroids = superpixel_centroids(sp);
    std::vector<PatchSpec> specs;
    for (int label = 0; label < sp.count; ++label) {
        const SuperpixelCentroid& c = centroids[static_cast<std::size_t>(label)];
        if (!c.area) continue;
        const int cx = std::clamp(static_cast<int>(std::lround(c.x)), 0, sp.width - 1);
        const int cy = std::clamp(static_cast<int>(std::lround(c.y)), 0, sp.height - 1);
        if (!sc_mask.at(cx, cy)) continue;
        PatchSpec spec;
        spec.cx = cx;
        spec.cy = cy;
        spec.width = spec.height = patch_size;
        spec.left = std::clamp(cx - patch_size / 2, 0, sp.width - patch_size);
        spec.top = std::clamp(cy - patch_size / 2, 0, sp.height - patch_size);
        spec.label = label;
        specs.push_back(spec);
    }
    return specs;
}

inline Image crop(const Image& img, const PatchSpec& spec) {
    if (spec.left < 0 || spec.top < 0 || spec.width < 1 || spec.height < 1 ||
        spec.left + spec.width > img.width || spec.top + spec.height > img.height)
        throw std::invalid_argument("crop window out of bounds");
    Image out(spec.width, spec.height);
    for (int y = 0; y < spec.height; ++y)
        std::copy_n(img.at(spec.left, spec.top + y), static_cast<std::size_t>(spec.width) * 3,
                    out.at(0, y));
    return out;
}

}  // namespace capsdemm
