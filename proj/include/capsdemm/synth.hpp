#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capsdemm/image.hpp"
#include "capsdemm/rng.hpp"
#include "capsdemm/serialize.hpp"
#include "capsdemm/slic.hpp"

namespace capsdemm {

struct SynthConfig {
    int width = 646;   // quarter scale of a 1936x2584 capture
    int height = 484;
    double band_min = 0.09;   // corneum band thickness, fraction of height
    double band_max = 0.16;
    int neutrophils_min = 3;  // positive images only
    int neutrophils_max = 12;
    int nuclei_min = 60;
    int nuclei_max = 140;
    double noise = 6.0;       // gaussian sigma in 8-bit units
    std::uint64_t seed = 1;

    void validate() const {
        if (width < 32 || height < 32) throw std::invalid_argument("synthetic image too small");
        if (band_min <= 0 || band_max < band_min || band_max > 0.5)
            throw std::invalid_argument("band thickness range must satisfy 0 < min <= max <= 0.5");
        if (neutrophils_min < 1 || neutrophils_max < neutrophils_min)
            throw std::invalid_argument("neutrophil count range invalid");
        if (nuclei_min < 0 || nuclei_max < nuclei_min)
            throw std::invalid_argument("nucleus count range invalid");
        if (noise < 0) throw std::invalid_argument("noise sigma must be >= 0");
        if (band_max * height < 16)
            throw std::invalid_argument("band too thin for the configured image height");
    }
};

struct SynthRecord {
    Image image;
    Mask sc_mask;
    std::vector<std::pair<int, int>> centers;  // neutrophil centers (x, y)
    int label = 0;
};

namespace detail {

struct Canvas {
    int w, h;
    std::vector<float> rgb;  // interleaved
    Canvas(int w_, int h_) : w(w_), h(h_), rgb(static_cast<std::size_t>(w_) * h_ * 3, 0.0f) {}
    float* at(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
};

inline void blend(float* px, const float color[3], float alpha) {
    for (int c = 0; c < 3; ++c) px[c] = px[c] * (1.0f - alpha) + color[c] * alpha;
}

inline void fill_circle(Canvas& cv, double cx, double cy, double r, const float color[3]) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
    const int x1 = std::min(cv.w - 1, static_cast<int>(std::ceil(cx + r + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
    const int y1 = std::min(cv.h - 1, static_cast<int>(std::ceil(cy + r + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d = std::hypot(x - cx, y - cy);
            const float alpha = static_cast<float>(std::clamp(r + 0.5 - d, 0.0, 1.0));
            if (alpha > 0) blend(cv.at(x, y), color, alpha);
        }
}

inline void fill_ellipse(Canvas& cv, double cx, double cy, double a, double b, double theta,
                         const float color[3]) {
    const double reach = std::max(a, b) + 1;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
    const int x1 = std::min(cv.w - 1, static_cast<int>(std::ceil(cx + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
    const int y1 = std::min(cv.h - 1, static_cast<int>(std::ceil(cy + reach)));
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double u = (dx * ct + dy * st) / a;
            const double v = (-dx * st + dy * ct) / b;
            const double d = std::sqrt(u * u + v * v);
            // (1 - d) * min(a, b) approximates the boundary distance in pixels
            const float alpha =
                static_cast<float>(std::clamp((1.0 - d) * std::min(a, b) + 0.5, 0.0, 1.0));
            if (alpha > 0) blend(cv.at(x, y), color, alpha);
        }
}

}  // namespace detail

// Renders one biopsy-like image: white slide above a wavy pale corneum band,
// a darker cellular layer and blotchy pink tissue below, light-blue oval
// nuclei scattered through band and cell layer, and, on positive images,
// dark-blue circular neutrophils inside the band. All randomness comes from
// the per-index stream of the config seed, so a record is a pure function of
// (config, index, positive).
inline SynthRecord generate_wsi(const SynthConfig& cfg, int index, bool positive) {
    cfg.validate();
    Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(index));
    const int W = cfg.width, H = cfg.height;

    const double thickness = rng.uniform(cfg.band_min, cfg.band_max) * H;
    const double base = rng.uniform(0.18, 0.30) * H;
    const double amp = rng.uniform(0.02, 0.05) * H;
    const double cycles = rng.uniform(1.0, 2.5);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double tcycles = rng.uniform(1.0, 2.0);
    const double tphase = rng.uniform(0.0, 6.283185307179586);
    const double cell_layer = thickness * rng.uniform(0.8, 1.4);

    std::vector<double> top(static_cast<std::size_t>(W)), bottom(static_cast<std::size_t>(W));
    for (int x = 0; x < W; ++x) {
        const double t = base + amp * std::sin(6.283185307179586 * cycles * x / W + phase);
        const double th =
            thickness * (1.0 + 0.12 * std::sin(6.283185307179586 * tcycles * x / W + tphase));
        top[static_cast<std::size_t>(x)] = t;
        bottom[static_cast<std::size_t>(x)] = t + th;
    }

    static const float slide[3] = {244, 242, 246};
    static const float corneum[3] = {231, 203, 214};
    static const float cells[3] = {196, 152, 186};
    static const float dermis[3] = {224, 177, 192};
    static const float nucleus[3] = {158, 171, 216};
    static const float neutrophil[3] = {58, 54, 132};

    // blotch field parameters for the tissue texture
    double bk[3][4];
    for (auto& row : bk) {
        row[0] = rng.uniform(2.0, 6.0);
        row[1] = rng.uniform(2.0, 6.0);
        row[2] = rng.uniform(0.0, 6.283185307179586);
        row[3] = rng.uniform(2.5, 4.5);
    }

    detail::Canvas cv(W, H);
    Mask mask(W, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double yc = y + 0.5;
            const double t = top[static_cast<std::size_t>(x)];
            const double b = bottom[static_cast<std::size_t>(x)];
            const float* color;
            if (yc < t) color = slide;
            else if (yc < b) color = corneum;
            else if (yc < b + cell_layer) color = cells;
            else color = dermis;
            float* px = cv.at(x, y);
            float blotch = 0;
            if (yc >= t) {
                for (const auto& row : bk)
                    blotch += static_cast<float>(
                        row[3] * std::sin(6.283185307179586 * (row[0] * x / W + row[1] * y / H) +
                                          row[2]));
            }
            for (int c = 0; c < 3; ++c) px[c] = color[c] + blotch;
            if (yc >= t && yc < b) mask.at(x, y) = 1;
        }

    const int nuclei = rng.uniform_int(cfg.nuclei_min, cfg.nuclei_max);
    for (int i = 0; i < nuclei; ++i) {
        const int x = rng.uniform_int(0, W - 1);
        const double t = top[static_cast<std::size_t>(x)];
        const double b = bottom[static_cast<std::size_t>(x)];
        const bool in_band = rng.uniform() < 0.45;
        const double y = in_band ? rng.uniform(t + 3.0, b - 3.0)
                                 : rng.uniform(b + 3.0, std::min<double>(H - 4, b + cell_layer));
        const double a = rng.uniform(2.2, 3.8);
        const double bb = rng.uniform(3.6, 6.0);
        const double theta = rng.uniform(0.0, 3.141592653589793);
        detail::fill_ellipse(cv, x, y, a, bb, theta, nucleus);
    }

    SynthRecord record;
    record.label = positive ? 1 : 0;
    if (positive) {
        const int count = rng.uniform_int(cfg.neutrophils_min, cfg.neutrophils_max);
        for (int i = 0; i < count; ++i) {
            for (int attempt = 0; attempt < 64; ++attempt) {
                const double r = rng.uniform(3.0, 6.0);
                const int x = rng.uniform_int(static_cast<int>(r) + 1,
                                              W - 2 - static_cast<int>(r));
                const double t = top[static_cast<std::size_t>(x)];
                const double b = bottom[static_cast<std::size_t>(x)];
                const double y = rng.uniform(t + r + 1.0, b - r - 1.0);
                const int cy = static_cast<int>(y);
                if (!mask.at(x, cy)) continue;
                detail::fill_circle(cv, x, y, r, neutrophil);
                record.centers.emplace_back(x, cy);
                break;
            }
        }
    }

    record.image = Image(W, H);
    for (std::size_t i = 0; i < cv.rgb.size(); ++i) {
        const float v = cv.rgb[i] + static_cast<float>(rng.gaussian() * cfg.noise);
        record.image.pixels[i] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 255.0f)));
    }
    record.sc_mask = std::move(mask);
    return record;
}

namespace detail {

// Exact class counts round(n * fraction), order shuffled on a dedicated
// stream so image streams stay index-stable.
inline std::vector<int> dataset_labels(const SynthConfig& cfg, int n, double positive_fraction) {
    if (positive_fraction <= 0.0 || positive_fraction >= 1.0)
        throw std::invalid_argument("positive fraction must lie strictly between 0 and 1");
    const int positives = static_cast<int>(std::lround(n * positive_fraction));
    if (positives < 1 || positives >= n)
        throw std::invalid_argument("dataset too small to hold both classes");
    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    std::fill(labels.begin(), labels.begin() + positives, 1);
    Rng rng = Rng::stream(cfg.seed, (1ull << 32));
    rng.shuffle(labels.begin(), labels.end());
    return labels;
}

// Stratified three-fold assignment: each class is shuffled, then dealt
// round-robin, so per-fold class counts differ by at most one.
inline std::vector<int> dataset_folds(const SynthConfig& cfg, const std::vector<int>& labels) {
    std::vector<int> folds(labels.size(), 0);
    Rng rng = Rng::stream(cfg.seed, (1ull << 32) + 1);
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<int> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) members.push_back(static_cast<int>(i));
        rng.shuffle(members.begin(), members.end());
        for (std::size_t j = 0; j < members.size(); ++j)
            folds[static_cast<std::size_t>(members[j])] = static_cast<int>(j % 3);
    }
    return folds;
}

}  // namespace detail

inline std::vector<SynthRecord> generate_dataset(const SynthConfig& cfg, int n,
                                                 double positive_fraction) {
    const std::vector<int> labels = detail::dataset_labels(cfg, n, positive_fraction);
    std::vector<SynthRecord> records;
    records.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) records.push_back(generate_wsi(cfg, i, labels[static_cast<std::size_t>(i)] != 0));
    return records;
}

// A patch is positive when at least one neutrophil center falls inside its
// window, bounds inclusive.
inline std::vector<int> derive_patch_labels(const std::vector<std::pair<int, int>>& centers,
                                            const std::vector<PatchSpec>& specs) {
    std::vector<int> labels;
    labels.reserve(specs.size());
    for (const PatchSpec& s : specs) {
        int label = 0;
        for (const auto& [x, y] : centers)
            if (x >= s.left && x <= s.left + s.width - 1 && y >= s.top && y <= s.top + s.height - 1) {
                label = 1;
                break;
            }
        labels.push_back(label);
    }
    return labels;
}

struct ManifestEntry {
    std::string id;
    std::string image_path;  // relative to the dataset directory
    std::string mask_path;
    int label = 0;
    int fold = 0;
    std::vector<std::pair<int, int>> centers;
};

struct Manifest {
    std::uint64_t seed = 0;
    int width = 0, height = 0;
    std::vector<ManifestEntry> entries;
};

inline std::string format_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", index);
    return buf;
}

// Writes images/NNNN.png, masks/NNNN.png and manifest.json, one record at a
// time so memory stays flat.
inline void write_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, int n,
                          double positive_fraction) {
    cfg.validate();
    const std::vector<int> labels = detail::dataset_labels(cfg, n, positive_fraction);
    const std::vector<int> folds = detail::dataset_folds(cfg, labels);
    nlohmann::json manifest;
    manifest["seed"] = cfg.seed;
    manifest["width"] = cfg.width;
    manifest["height"] = cfg.height;
    manifest["images"] = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
        const SynthRecord record = generate_wsi(cfg, i, labels[static_cast<std::size_t>(i)] != 0);
        const std::string id = format_id(i);
        const std::string image_rel = "images/" + id + ".png";
        const std::string mask_rel = "masks/" + id + ".png";
        save_png(dir / image_rel, record.image);
        save_mask_png(dir / mask_rel, record.sc_mask);
        nlohmann::json entry;
        entry["id"] = id;
        entry["image"] = image_rel;
        entry["mask"] = mask_rel;
        entry["label"] = record.label;
        entry["fold"] = folds[static_cast<std::size_t>(i)];
        nlohmann::json centers = nlohmann::json::array();
        for (const auto& [x, y] : record.centers) centers.push_back({x, y});
        entry["centers"] = centers;
        manifest["images"].push_back(entry);
    }
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
    const std::string text = read_file(dir / "manifest.json");
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest in " + dir.string() + ": " + e.what());
    }
    Manifest manifest;
    try {
        manifest.seed = parsed.at("seed").get<std::uint64_t>();
        manifest.width = parsed.at("width").get<int>();
        manifest.height = parsed.at("height").get<int>();
        for (const nlohmann::json& entry : parsed.at("images")) {
            ManifestEntry e;
            e.id = entry.at("id").get<std::string>();
            e.image_path = entry.at("image").get<std::string>();
            e.mask_path = entry.at("mask").get<std::string>();
            e.label = entry.at("label").get<int>();
            e.fold = entry.at("fold").get<int>();
            for (const nlohmann::json& c : entry.at("centers"))
                e.centers.emplace_back(c.at(0).get<int>(), c.at(1).get<int>());
            manifest.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest in " + dir.string() + ": " + e.what());
    }
    return manifest;
}

}  // namespace capsdemm
