#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "capsdemm/image.hpp"
#include "capsdemm/metrics.hpp"
#include "capsdemm/slic.hpp"

namespace capsdemm {

struct Color {
    std::uint8_t r, g, b;
};

inline void put_pixel(Image& img, int x, int y, Color c) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    std::uint8_t* px = img.at(x, y);
    px[0] = c.r;
    px[1] = c.g;
    px[2] = c.b;
}

inline void draw_line(Image& img, int x0, int y0, int x1, int y1, Color c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        put_pixel(img, x0, y0, c);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) { err += dy; x0 += sx; }
        if (e2 <= dx) { err += dx; y0 += sy; }
    }
}

inline void draw_rect(Image& img, int left, int top, int width, int height, Color c,
                      int thickness = 1) {
    for (int t = 0; t < thickness; ++t) {
        const int l = left + t, r = left + width - 1 - t;
        const int u = top + t, d = top + height - 1 - t;
        if (l > r || u > d) break;
        for (int x = l; x <= r; ++x) {
            put_pixel(img, x, u, c);
            put_pixel(img, x, d, c);
        }
        for (int y = u; y <= d; ++y) {
            put_pixel(img, l, y, c);
            put_pixel(img, r, y, c);
        }
    }
}

inline void fill_rect(Image& img, int left, int top, int width, int height, Color c) {
    for (int y = top; y < top + height; ++y)
        for (int x = left; x < left + width; ++x) put_pixel(img, x, y, c);
}

namespace detail {

// 5x7 glyphs, one byte per row, bit 4 is the leftmost column.
inline const std::uint8_t* glyph(char ch) {
    static const std::uint8_t digits[10][7] = {
        {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
        {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
        {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
        {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
        {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};
    static const std::uint8_t letters[26][7] = {
        {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}, {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},
        {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}, {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C},
        {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},
        {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}, {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},
        {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}, {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},
        {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}, {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},
        {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}, {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11},
        {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},
        {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}, {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},
        {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}, {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},
        {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},
        {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11}, {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},
        {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}};
    static const std::uint8_t dot[7] = {0, 0, 0, 0, 0, 0x0C, 0x0C};
    static const std::uint8_t dash[7] = {0, 0, 0, 0x1F, 0, 0, 0};
    static const std::uint8_t equals[7] = {0, 0, 0x1F, 0, 0x1F, 0, 0};
    static const std::uint8_t colon[7] = {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0};
    static const std::uint8_t slash[7] = {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10};
    static const std::uint8_t blank[7] = {0, 0, 0, 0, 0, 0, 0};
    if (ch >= '0' && ch <= '9') return digits[ch - '0'];
    if (ch >= 'A' && ch <= 'Z') return letters[ch - 'A'];
    if (ch >= 'a' && ch <= 'z') return letters[ch - 'a'];
    switch (ch) {
        case '.': return dot;
        case '-': return dash;
        case '=': return equals;
        case ':': return colon;
        case '/': return slash;
        default: return blank;
    }
}

}  // namespace detail

inline void draw_text(Image& img, int x, int y, const std::string& text, Color c, int scale = 1) {
    for (char ch : text) {
        const std::uint8_t* rows = detail::glyph(ch);
        for (int ry = 0; ry < 7; ++ry)
            for (int rx = 0; rx < 5; ++rx)
                if (rows[ry] & (0x10 >> rx))
                    fill_rect(img, x + rx * scale, y + ry * scale, scale, scale, c);
        x += 6 * scale;
    }
}

inline int text_width(const std::string& text, int scale = 1) {
    return static_cast<int>(text.size()) * 6 * scale - (text.empty() ? 0 : scale);
}

struct PlotCurve {
    std::string name;
    std::vector<RocPoint> points;
};

inline Color curve_color(std::size_t index) {
    static const Color palette[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                    {214, 39, 40},  {148, 103, 189}, {140, 86, 75}};
    return palette[index % (sizeof palette / sizeof palette[0])];
}

// Square ROC chart: unit box with quarter gridlines, chance diagonal, one
// polyline per curve and a legend in the lower right.
inline Image plot_roc(const std::vector<PlotCurve>& curves, int size = 560) {
    const int ml = 52, mr = 16, mt = 16, mb = 44;
    const int plot = size - ml - mr;
    Image img(size, size);
    fill_rect(img, 0, 0, img.width, img.height, {255, 255, 255});
    const Color axis{40, 40, 40}, grid{225, 225, 225}, diag{170, 170, 170};
    const auto px = [&](double fpr) { return ml + static_cast<int>(std::lround(fpr * plot)); };
    const auto py = [&](double tpr) {
        return mt + plot - static_cast<int>(std::lround(tpr * plot));
    };
    for (int q = 1; q < 4; ++q) {
        draw_line(img, px(q / 4.0), py(0), px(q / 4.0), py(1), grid);
        draw_line(img, px(0), py(q / 4.0), px(1), py(q / 4.0), grid);
    }
    for (int i = 0; i <= plot; i += 4) {
        put_pixel(img, ml + i, py(0) - i, diag);
        put_pixel(img, ml + i + 1, py(0) - i, diag);
    }
    draw_rect(img, ml, mt, plot + 1, plot + 1, axis);
    for (int q = 0; q <= 4; ++q) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "%.2f", q / 4.0);
        draw_text(img, px(q / 4.0) - text_width(buf) / 2, py(0) + 8, buf, axis);
        draw_text(img, ml - text_width(buf) - 6, py(q / 4.0) - 3, buf, axis);
    }
    draw_text(img, ml + plot / 2 - text_width("FPR") / 2, size - 14, "FPR", axis);
    for (int i = 0; i < 3; ++i)
        draw_text(img, 6, mt + plot / 2 - 12 + i * 9, std::string(1, "TPR"[i]), axis);

    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
        const Color c = curve_color(ci);
        const auto& pts = curves[ci].points;
        int lx = px(0), ly = py(0);
        for (const RocPoint& p : pts) {
            if (std::isinf(p.threshold)) continue;
            const int x = px(p.fpr), y = py(p.tpr);
            draw_line(img, lx, ly, x, y, c);
            draw_line(img, lx, ly + 1, x, y + 1, c);
            lx = x;
            ly = y;
        }
        draw_line(img, lx, ly, px(1), py(1), c);
        draw_line(img, lx, ly + 1, px(1), py(1) + 1, c);
    }

    int lw = 0;
    for (const PlotCurve& c : curves) lw = std::max(lw, text_width(c.name));
    const int lh = static_cast<int>(curves.size()) * 12 + 8;
    const int llx = px(1) - lw - 30, lly = py(0) - lh - 10;
    fill_rect(img, llx, lly, lw + 26, lh, {252, 252, 252});
    draw_rect(img, llx, lly, lw + 26, lh, {120, 120, 120});
    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
        const int ty = lly + 5 + static_cast<int>(ci) * 12;
        fill_rect(img, llx + 4, ty + 2, 12, 3, curve_color(ci));
        draw_text(img, llx + 20, ty, curves[ci].name, axis);
    }
    return img;
}

// Copy of the input image with the segmented band outlined and every
// positive-scoring patch boxed.
inline Image diagnosis_overlay(const Image& wsi, const Mask& sc_mask,
                               const std::vector<PatchSpec>& patches,
                               const std::vector<int>& positive) {
    if (sc_mask.width != wsi.width || sc_mask.height != wsi.height)
        throw std::invalid_argument("overlay mask size does not match image");
    if (positive.size() != patches.size())
        throw std::invalid_argument("overlay flag count does not match patch count");
    Image out = wsi;
    const Color boundary{0, 190, 90}, box{235, 50, 40};
    for (int y = 0; y < sc_mask.height; ++y)
        for (int x = 0; x < sc_mask.width; ++x) {
            if (!sc_mask.at(x, y)) continue;
            const bool edge = x == 0 || y == 0 || x == sc_mask.width - 1 ||
                              y == sc_mask.height - 1 || !sc_mask.at(x - 1, y) ||
                              !sc_mask.at(x + 1, y) || !sc_mask.at(x, y - 1) ||
                              !sc_mask.at(x, y + 1);
            if (edge) put_pixel(out, x, y, boundary);
        }
    for (std::size_t i = 0; i < patches.size(); ++i)
        if (positive[i])
            draw_rect(out, patches[i].left, patches[i].top, patches[i].width, patches[i].height,
                      box, 2);
    return out;
}

}  // namespace capsdemm
