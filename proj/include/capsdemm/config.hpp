#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "capsdemm/capsule.hpp"
#include "capsdemm/metrics.hpp"
#include "capsdemm/serialize.hpp"
#include "capsdemm/synth.hpp"
#include "capsdemm/unet.hpp"

namespace capsdemm {

struct RunConfig {
    std::uint64_t seed = 1;
    SynthConfig synth;
    UNetConfig seg;
    SegTrainOptions seg_train;
    CapsConfig caps;
    CapsTrainOptions caps_train;
    int superpixels = 500;
    double compactness = 10.0;
    int patch_size = 224;
    ThresholdStrategy strategy = ThresholdStrategy::accuracy;
    std::vector<int> superpixel_sweep{300, 500, 700};
    std::vector<int> k_sweep{1, 3, 5, 7, 9};
    int train_patches = 480;

    void validate() const {
        synth.validate();
        seg.validate();
        caps.validate();
        if (superpixels < 1) throw std::invalid_argument("pipeline.superpixels must be >= 1");
        if (compactness <= 0) throw std::invalid_argument("pipeline.compactness must be > 0");
        if (patch_size < 8) throw std::invalid_argument("pipeline.patch_size must be >= 8");
        if (superpixel_sweep.empty() || k_sweep.empty())
            throw std::invalid_argument("crossval sweeps must be nonempty");
        for (int v : superpixel_sweep)
            if (v < 1) throw std::invalid_argument("crossval.superpixel_sweep entries must be >= 1");
        for (int v : k_sweep)
            if (v < 1) throw std::invalid_argument("crossval.k_sweep entries must be >= 1");
        if (train_patches < 8) throw std::invalid_argument("crossval.train_patches must be >= 8");
        if (seg_train.epochs < 1 || caps_train.epochs < 1)
            throw std::invalid_argument("epoch counts must be >= 1");
        if (seg_train.batch < 1 || caps_train.batch < 1)
            throw std::invalid_argument("batch sizes must be >= 1");
        if (!(seg_train.lr > 0) || !(caps_train.lr > 0))
            throw std::invalid_argument("learning rates must be > 0");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline long long config_int(const std::string& key, const std::string& value) {
    long long out = 0;
    const char* first = value.data();
    const char* last = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last)
        throw std::runtime_error("config key " + key + " needs an integer, got '" + value + "'");
    return out;
}

inline double config_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double out = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw std::runtime_error("config key " + key + " needs a number, got '" + value + "'");
    }
}

inline bool config_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::runtime_error("config key " + key + " needs true or false, got '" + value + "'");
}

inline std::vector<int> config_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty())
            throw std::runtime_error("config key " + key + " has an empty list entry");
        out.push_back(static_cast<int>(config_int(key, item)));
    }
    if (out.empty()) throw std::runtime_error("config key " + key + " needs a nonempty list");
    return out;
}

inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto as_int = [&] { return static_cast<int>(config_int(key, value)); };
    if (key == "seed") {
        const long long v = config_int(key, value);
        if (v < 0) throw std::runtime_error("config key seed must be >= 0");
        cfg.seed = static_cast<std::uint64_t>(v);
    } else if (key == "synth.width") cfg.synth.width = as_int();
    else if (key == "synth.height") cfg.synth.height = as_int();
    else if (key == "synth.band_min") cfg.synth.band_min = config_double(key, value);
    else if (key == "synth.band_max") cfg.synth.band_max = config_double(key, value);
    else if (key == "synth.neutrophils_min") cfg.synth.neutrophils_min = as_int();
    else if (key == "synth.neutrophils_max") cfg.synth.neutrophils_max = as_int();
    else if (key == "synth.nuclei_min") cfg.synth.nuclei_min = as_int();
    else if (key == "synth.nuclei_max") cfg.synth.nuclei_max = as_int();
    else if (key == "synth.noise") cfg.synth.noise = config_double(key, value);
    else if (key == "seg.depth") cfg.seg.depth = as_int();
    else if (key == "seg.base_filters") cfg.seg.base_filters = as_int();
    else if (key == "seg.kernel") cfg.seg.kernel = as_int();
    else if (key == "seg.train_height") cfg.seg.train_h = as_int();
    else if (key == "seg.train_width") cfg.seg.train_w = as_int();
    else if (key == "seg.epochs") cfg.seg_train.epochs = as_int();
    else if (key == "seg.batch") cfg.seg_train.batch = as_int();
    else if (key == "seg.lr") cfg.seg_train.lr = static_cast<float>(config_double(key, value));
    else if (key == "seg.flip") cfg.seg_train.flip = config_bool(key, value);
    else if (key == "caps.primary_types") cfg.caps.primary_types = as_int();
    else if (key == "caps.capsule_dim") cfg.caps.capsule_dim = as_int();
    else if (key == "caps.primary_kernel") cfg.caps.primary_kernel = as_int();
    else if (key == "caps.primary_stride") cfg.caps.primary_stride = as_int();
    else if (key == "caps.secondary_dim") cfg.caps.secondary_dim = as_int();
    else if (key == "caps.routing_iterations") cfg.caps.routing_iterations = as_int();
    else if (key == "caps.topk") cfg.caps.topk = as_int();
    else if (key == "caps.epochs") cfg.caps_train.epochs = as_int();
    else if (key == "caps.batch") cfg.caps_train.batch = as_int();
    else if (key == "caps.lr") cfg.caps_train.lr = static_cast<float>(config_double(key, value));
    else if (key == "pipeline.superpixels") cfg.superpixels = as_int();
    else if (key == "pipeline.compactness") cfg.compactness = config_double(key, value);
    else if (key == "pipeline.patch_size") cfg.patch_size = as_int();
    else if (key == "pipeline.strategy") {
        if (value == "accuracy") cfg.strategy = ThresholdStrategy::accuracy;
        else if (value == "tnr") cfg.strategy = ThresholdStrategy::tnr;
        else throw std::runtime_error("config key pipeline.strategy must be accuracy or tnr");
    } else if (key == "crossval.superpixel_sweep")
        cfg.superpixel_sweep = config_int_list(key, value);
    else if (key == "crossval.k_sweep") cfg.k_sweep = config_int_list(key, value);
    else if (key == "crossval.train_patches") cfg.train_patches = as_int();
    else throw std::runtime_error("unknown config key: " + key);
}

inline void parse_config_lines(RunConfig& cfg, const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     " is not of the form key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error("config line " + std::to_string(lineno) + " has an empty key");
        apply_config_key(cfg, key, value);
    }
}

inline void parse_config_json(RunConfig& cfg, const std::string& text) {
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("malformed config JSON: ") + e.what());
    }
    if (!parsed.is_object()) throw std::runtime_error("config JSON must be a flat object");
    for (const auto& [key, value] : parsed.items()) {
        std::string text_value;
        if (value.is_string()) text_value = value.get<std::string>();
        else if (value.is_array()) {
            for (const nlohmann::json& item : value) {
                if (!text_value.empty()) text_value += ',';
                text_value += item.dump();
            }
        } else if (value.is_object())
            throw std::runtime_error("config JSON must be flat; nested object at key " + key);
        else text_value = value.dump();
        apply_config_key(cfg, key, text_value);
    }
}

}  // namespace detail

// Flat `key = value` text with '#' comments, or the same keys as a flat JSON
// object when the file starts with '{'. Unknown keys are errors.
inline RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    const std::string body = detail::trim(text);
    if (!body.empty() && body.front() == '{') detail::parse_config_json(cfg, body);
    else detail::parse_config_lines(cfg, text);
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_file(path));
}

}  // namespace capsdemm
