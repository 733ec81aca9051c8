#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>

#include "tensor.hpp"

namespace entran {

// Little-endian container: magic "ENTC", version u32, two length-prefixed
// JSON strings (config snapshot, history), then length-prefixed named f64
// arrays. f64 payloads are written raw, so round-trips are bit-exact.
struct Checkpoint {
    std::uint32_t version = 1;
    std::string config_json;
    std::string history_json;
    std::vector<std::pair<std::string, std::vector<double>>> arrays;

    const std::vector<double>& get(const std::string& name) const {
        for (const auto& [n, a] : arrays)
            if (n == name) return a;
        throw std::out_of_range("checkpoint has no array named " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& [n, a] : arrays)
            if (n == name) return true;
        return false;
    }
};

namespace detail {

inline void ckpt_write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8 & 0xff), (unsigned char)(v >> 16 & 0xff),
                          (unsigned char)(v >> 24 & 0xff)};
    out.write(reinterpret_cast<char*>(b), 4);
}

inline void ckpt_write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i) & 0xff);
    out.write(reinterpret_cast<char*>(b), 8);
}

inline std::uint32_t ckpt_read_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline std::uint64_t ckpt_read_u64(std::istream& in, const char* what) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline void ckpt_write_string(std::ostream& out, const std::string& s) {
    ckpt_write_u64(out, s.size());
    out.write(s.data(), std::streamsize(s.size()));
}

inline std::string ckpt_read_string(std::istream& in, const char* what) {
    auto n = ckpt_read_u64(in, what);
    std::string s(n, '\0');
    in.read(s.data(), std::streamsize(n));
    if (!in) throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
    return s;
}

}  // namespace detail

// Writes through a temp file and renames, so interrupted runs never leave a
// corrupt checkpoint behind.
inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp);
        out.write("ENTC", 4);
        detail::ckpt_write_u32(out, ckpt.version);
        detail::ckpt_write_string(out, ckpt.config_json);
        detail::ckpt_write_string(out, ckpt.history_json);
        detail::ckpt_write_u32(out, std::uint32_t(ckpt.arrays.size()));
        for (const auto& [name, data] : ckpt.arrays) {
            detail::ckpt_write_string(out, name);
            detail::ckpt_write_u64(out, data.size());
            out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * sizeof(double)));
        }
        if (!out) throw std::runtime_error("write failed for checkpoint: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "ENTC", 4) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path + " (expected ENTC)");
    Checkpoint ckpt;
    ckpt.version = detail::ckpt_read_u32(in, "version");
    if (ckpt.version != 1)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(ckpt.version));
    ckpt.config_json = detail::ckpt_read_string(in, "config");
    ckpt.history_json = detail::ckpt_read_string(in, "history");
    auto count = detail::ckpt_read_u32(in, "array count");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = detail::ckpt_read_string(in, "array name");
        auto n = detail::ckpt_read_u64(in, "array length");
        std::vector<double> data(n);
        in.read(reinterpret_cast<char*>(data.data()), std::streamsize(n * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint truncated while reading array " + name);
        ckpt.arrays.emplace_back(std::move(name), std::move(data));
    }
    return ckpt;
}

// Atomic text write with the same temp-then-rename discipline.
inline void write_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write file: " + tmp);
        out.write(content.data(), std::streamsize(content.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

}  // namespace entran
