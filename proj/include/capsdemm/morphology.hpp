#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "capsdemm/image.hpp"

namespace capsdemm {

struct Labeling {
    std::vector<std::int32_t> labels;  // 0 is background; components are 1..count
    std::vector<std::int64_t> areas;   // areas[i] is the area of component i+1
    int count = 0;
};

// Labels foreground components in row-major first-encounter order.
inline Labeling label_components(const Mask& mask, int connectivity = 8) {
    if (connectivity != 4 && connectivity != 8)
        throw std::invalid_argument("connectivity must be 4 or 8");
    const int w = mask.width, h = mask.height;
    Labeling out;
    out.labels.assign(static_cast<std::size_t>(w) * h, 0);
    std::vector<std::int32_t> stack;
    static const int dx8[] = {-1, 0, 1, -1, 1, -1, 0, 1};
    static const int dy8[] = {-1, -1, -1, 0, 0, 1, 1, 1};
    static const int dx4[] = {0, -1, 1, 0};
    static const int dy4[] = {-1, 0, 0, 1};
    const int* dx = connectivity == 8 ? dx8 : dx4;
    const int* dy = connectivity == 8 ? dy8 : dy4;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::int32_t p = y * w + x;
            if (!mask.pixels[p] || out.labels[p]) continue;
            const std::int32_t label = ++out.count;
            out.labels[p] = label;
            out.areas.push_back(1);
            stack.assign(1, p);
            while (!stack.empty()) {
                const std::int32_t q = stack.back();
                stack.pop_back();
                const int qx = q % w, qy = q / w;
                for (int k = 0; k < connectivity; ++k) {
                    const int nx = qx + dx[k], ny = qy + dy[k];
                    if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                    const std::int32_t n = ny * w + nx;
                    if (mask.pixels[n] && !out.labels[n]) {
                        out.labels[n] = label;
                        ++out.areas.back();
                        stack.push_back(n);
                    }
                }
            }
        }
    return out;
}

// Background is flooded 4-connected from the border; background pixels the
// flood cannot reach are enclosed by foreground and become foreground.
inline Mask fill_holes(const Mask& mask) {
    const int w = mask.width, h = mask.height;
    std::vector<std::uint8_t> outside(static_cast<std::size_t>(w) * h, 0);
    std::vector<std::int32_t> stack;
    auto push = [&](int x, int y) {
        const std::int32_t p = y * w + x;
        if (!mask.pixels[p] && !outside[p]) {
            outside[p] = 1;
            stack.push_back(p);
        }
    };
    for (int x = 0; x < w; ++x) {
        push(x, 0);
        push(x, h - 1);
    }
    for (int y = 0; y < h; ++y) {
        push(0, y);
        push(w - 1, y);
    }
    while (!stack.empty()) {
        const std::int32_t p = stack.back();
        stack.pop_back();
        const int x = p % w, y = p / w;
        if (x > 0) push(x - 1, y);
        if (x < w - 1) push(x + 1, y);
        if (y > 0) push(x, y - 1);
        if (y < h - 1) push(x, y + 1);
    }
    Mask filled(w, h);
    for (std::size_t i = 0; i < filled.pixels.size(); ++i)
        filled.pixels[i] = (mask.pixels[i] || !outside[i]) ? 1 : 0;
    return filled;
}

// Drops 8-connected components whose area is below the given fraction of the
// image area.
inline Mask remove_small_components(const Mask& mask, double min_area_fraction) {
    if (min_area_fraction < 0.0 || min_area_fraction > 1.0)
        throw std::invalid_argument("min_area_fraction must lie in [0, 1]");
    const Labeling lab = label_components(mask, 8);
    const double cutoff = min_area_fraction * static_cast<double>(mask.width) * mask.height;
    Mask out(mask.width, mask.height);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        const std::int32_t l = lab.labels[i];
        out.pixels[i] =
            (l && static_cast<double>(lab.areas[static_cast<std::size_t>(l) - 1]) >= cutoff) ? 1 : 0;
    }
    return out;
}

// Hole filling before the size filter: a filled component is judged by its
// full area. Applying the result a second time changes nothing.
inline Mask postprocess_mask(const Mask& mask, double min_area_fraction = 0.001) {
    return remove_small_components(fill_holes(mask), min_area_fraction);
}

}  // namespace capsdemm
