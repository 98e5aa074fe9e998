#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsdemm/tensor.hpp"

namespace capsdemm {

// Writes via a sibling temp file plus rename, so readers never observe a
// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;
};

inline constexpr std::uint32_t model_format_version = 1;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string origin)
        : bytes_(bytes), origin_(std::move(origin)) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

    std::uint16_t u16() {
        const unsigned char* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }

    std::uint32_t u32() {
        const unsigned char* p = take(4);
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }

    float f32() { return std::bit_cast<float>(u32()); }

    std::string str(std::size_t n) {
        const unsigned char* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

    bool exhausted() const { return pos_ == bytes_.size(); }

private:
    const unsigned char* take(std::size_t n) {
        if (bytes_.size() - pos_ < n)
            throw std::runtime_error("truncated model file: " + origin_);
        const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
        pos_ += n;
        return p;
    }

    const std::string& bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_model(const std::vector<NamedTensor>& tensors) {
    std::string out;
    out += "CDMM";
    detail::put_u32(out, model_format_version);
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const NamedTensor& nt : tensors) {
        if (nt.name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + nt.name);
        detail::put_u16(out, static_cast<std::uint16_t>(nt.name.size()));
        out += nt.name;
        out.push_back(static_cast<char>(nt.tensor.rank()));
        for (int d = 0; d < nt.tensor.rank(); ++d)
            detail::put_u32(out, static_cast<std::uint32_t>(nt.tensor.dim(d)));
        for (float v : nt.tensor.values()) detail::put_f32(out, v);
    }
    return out;
}

inline void save_model(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    write_file_atomic(path, encode_model(tensors));
}

inline std::vector<NamedTensor> decode_model(const std::string& bytes, const std::string& origin) {
    detail::ByteReader r(bytes, origin);
    if (r.str(4) != "CDMM") throw std::runtime_error("not a model file: " + origin);
    const std::uint32_t version = r.u32();
    if (version != model_format_version)
        throw std::runtime_error("unsupported model format version " + std::to_string(version) +
                                 ": " + origin);
    const std::uint32_t count = r.u32();
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        std::string name = r.str(name_len);
        const int rank = r.u8();
        if (rank < 1 || rank > 8)
            throw std::runtime_error("implausible tensor rank in model file: " + origin);
        std::vector<int> shape(rank);
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32();
            if (dim == 0 || dim > 0x7fffffffu)
                throw std::runtime_error("implausible tensor dimension in model file: " + origin);
            shape[d] = static_cast<int>(dim);
            numel *= dim;
        }
        Tensor<float> t(shape);
        for (std::size_t j = 0; j < numel; ++j) t.values()[j] = r.f32();
        tensors.push_back({std::move(name), std::move(t)});
    }
    if (!r.exhausted()) throw std::runtime_error("trailing bytes in model file: " + origin);
    return tensors;
}

inline std::vector<NamedTensor> load_model(const std::filesystem::path& path) {
    return decode_model(read_file(path), path.string());
}

inline const Tensor<float>& model_tensor(const std::vector<NamedTensor>& tensors,
                                         const std::string& name) {
    for (const NamedTensor& nt : tensors)
        if (nt.name == name) return nt.tensor;
    throw std::runtime_error("model file is missing tensor: " + name);
}

}  // namespace capsdemm
