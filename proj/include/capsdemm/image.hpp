#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsdemm/tensor.hpp"

namespace capsdemm {

// Interleaved 8-bit RGB, row-major from the top-left corner.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {
        if (w < 1 || h < 1) throw std::invalid_argument("image size must be positive");
    }

    std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }
};

// Binary mask, one byte per pixel holding 0 or 1.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0) {
        if (w < 1 || h < 1) throw std::invalid_argument("mask size must be positive");
    }

    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

struct PngReadGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngReadGuard() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngWriteGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngWriteGuard() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

// Decodes any PNG color layout to packed 8-bit RGB.
inline Image load_png_rgb(const std::filesystem::path& path) {
    PngReadGuard g;
    g.fp = std::fopen(path.string().c_str(), "rb");
    if (!g.fp) throw std::runtime_error("cannot open: " + path.string());
    png_byte header[8];
    if (std::fread(header, 1, 8, g.fp) != 8 || png_sig_cmp(header, 0, 8))
        throw std::runtime_error("not a PNG file: " + path.string());
    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!g.png) throw std::runtime_error("png_create_read_struct failed");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw std::runtime_error("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(g.png))) throw std::runtime_error("PNG decode failed: " + path.string());
    png_init_io(g.png, g.fp);
    png_set_sig_bytes(g.png, 8);
    png_read_info(g.png, g.info);

    const png_byte color_type = png_get_color_type(g.png, g.info);
    const png_byte bit_depth = png_get_bit_depth(g.png, g.info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(g.png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
    if (png_get_valid(g.png, g.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(g.png);
    if (bit_depth == 16) png_set_strip_16(g.png);
    png_set_strip_alpha(g.png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(g.png);
    png_read_update_info(g.png, g.info);

    const int w = static_cast<int>(png_get_image_width(g.png, g.info));
    const int h = static_cast<int>(png_get_image_height(g.png, g.info));
    if (png_get_rowbytes(g.png, g.info) != static_cast<std::size_t>(w) * 3)
        throw std::runtime_error("unexpected PNG row layout: " + path.string());

    Image img(w, h);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[y] = img.pixels.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(g.png, rows.data());
    png_read_end(g.png, nullptr);
    return img;
}

inline void save_png_impl(const std::filesystem::path& path, int w, int h, int color_type,
                          const std::uint8_t* data, std::size_t row_bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        PngWriteGuard g;
        g.fp = std::fopen(tmp.string().c_str(), "wb");
        if (!g.fp) throw std::runtime_error("cannot open for writing: " + tmp.string());
        g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (!g.png) throw std::runtime_error("png_create_write_struct failed");
        g.info = png_create_info_struct(g.png);
        if (!g.info) throw std::runtime_error("png_create_info_struct failed");
        if (setjmp(png_jmpbuf(g.png))) throw std::runtime_error("PNG encode failed: " + tmp.string());
        png_init_io(g.png, g.fp);
        png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                     color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        png_write_info(g.png, g.info);
        std::vector<png_bytep> rows(static_cast<std::size_t>(h));
        for (int y = 0; y < h; ++y)
            rows[y] = const_cast<png_bytep>(data + static_cast<std::size_t>(y) * row_bytes);
        png_write_image(g.png, rows.data());
        png_write_end(g.png, nullptr);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline Image load_png(const std::filesystem::path& path) { return detail::load_png_rgb(path); }

inline void save_png(const std::filesystem::path& path, const Image& img) {
    detail::save_png_impl(path, img.width, img.height, PNG_COLOR_TYPE_RGB, img.pixels.data(),
                          static_cast<std::size_t>(img.width) * 3);
}

// Mask PNGs hold 0 or 255; any nonzero pixel reads back as 1.
inline Mask load_mask_png(const std::filesystem::path& path) {
    Image img = detail::load_png_rgb(path);
    Mask mask(img.width, img.height);
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
        const std::uint8_t* p = img.pixels.data() + i * 3;
        mask.pixels[i] = (p[0] || p[1] || p[2]) ? 1 : 0;
    }
    return mask;
}

inline void save_mask_png(const std::filesystem::path& path, const Mask& mask) {
    std::vector<std::uint8_t> gray(mask.pixels.size());
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.pixels[i] ? 255 : 0;
    detail::save_png_impl(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, gray.data(),
                          static_cast<std::size_t>(mask.width));
}

// Pixel-center sampling: src = (dst + 0.5) * in/out - 0.5, edges clamped.
inline Image resize_bilinear(const Image& src, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) throw std::invalid_argument("resize target must be positive");
    Image dst(out_w, out_h);
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        fy -= y0;
        if (y0 < 0) { y0 = 0; fy = 0.0; }
        if (y0 > src.height - 1) { y0 = src.height - 1; fy = 0.0; }
        const int y1 = std::min(y0 + 1, src.height - 1);
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            fx -= x0;
            if (x0 < 0) { x0 = 0; fx = 0.0; }
            if (x0 > src.width - 1) { x0 = src.width - 1; fx = 0.0; }
            const int x1 = std::min(x0 + 1, src.width - 1);
            const std::uint8_t* p00 = src.at(x0, y0);
            const std::uint8_t* p01 = src.at(x1, y0);
            const std::uint8_t* p10 = src.at(x0, y1);
            const std::uint8_t* p11 = src.at(x1, y1);
            std::uint8_t* out = dst.at(x, y);
            for (int c = 0; c < 3; ++c) {
                const double top = p00[c] * (1.0 - fx) + p01[c] * fx;
                const double bot = p10[c] * (1.0 - fx) + p11[c] * fx;
                const double v = top * (1.0 - fy) + bot * fy;
                out[c] = static_cast<std::uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
            }
        }
    }
    return dst;
}

// Nearest pixel under the same center mapping, so labels never blend.
inline Mask resize_nearest(const Mask& src, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) throw std::invalid_argument("resize target must be positive");
    Mask dst(out_w, out_h);
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        int iy = static_cast<int>((y + 0.5) * sy);
        iy = std::min(std::max(iy, 0), src.height - 1);
        for (int x = 0; x < out_w; ++x) {
            int ix = static_cast<int>((x + 0.5) * sx);
            ix = std::min(std::max(ix, 0), src.width - 1);
            dst.at(x, y) = src.at(ix, iy);
        }
    }
    return dst;
}

// [1,3,H,W] float tensor with channel values in [0,1].
inline Tensor<float> image_to_tensor(const Image& img) {
    Tensor<float> t({1, 3, img.height, img.width});
    const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            t.values()[c * plane + i] = static_cast<float>(img.pixels[i * 3 + c]) / 255.0f;
    return t;
}

inline Tensor<float> mask_to_tensor(const Mask& mask) {
    Tensor<float> t({1, 1, mask.height, mask.width});
    for (std::size_t i = 0; i < mask.pixels.size(); ++i)
        t.values()[i] = mask.pixels[i] ? 1.0f : 0.0f;
    return t;
}

// Probabilities above the threshold become foreground.
inline Mask tensor_to_mask(const Tensor<float>& t, float threshold = 0.5f) {
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1)
        throw std::invalid_argument("tensor_to_mask expects a [1,1,H,W] tensor");
    Mask mask(t.dim(3), t.dim(2));
    for (std::size_t i = 0; i < mask.pixels.size(); ++i)
        mask.pixels[i] = t.values()[i] > threshold ? 1 : 0;
    return mask;
}

}  // namespace capsdemm
