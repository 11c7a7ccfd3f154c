#pragma once

// SFG1 checkpoint container.
//
// Layout (all integers little-endian u64 unless noted):
//
//   "SFG1"                      4 magic bytes
//   count                       number of sections
//   count x { name_len, name bytes, offset, length }
//   payloads                    at the absolute byte offsets in the table
//
// Payloads are raw bytes; real-valued tensors are stored as little-endian
// IEEE-754 doubles and counts as little-endian u64.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sfgen/errors.hpp"

namespace sfgen {

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(std::string_view in, std::size_t pos) {
    if (pos + 8 > in.size()) throw InputError("truncated SFG1 data");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

}  // namespace detail

class Checkpoint {
public:
    static constexpr std::string_view kMagic = "SFG1";

    void put_bytes(const std::string& name, std::string bytes) { sections_[name] = std::move(bytes); }

    void put_u64s(const std::string& name, std::span<const std::uint64_t> values) {
        std::string bytes;
        bytes.reserve(values.size() * 8);
        for (auto v : values) detail::put_u64(bytes, v);
        put_bytes(name, std::move(bytes));
    }

    void put_f64s(const std::string& name, std::span<const double> values) {
        std::string bytes;
        bytes.reserve(values.size() * 8);
        for (auto v : values) detail::put_u64(bytes, std::bit_cast<std::uint64_t>(v));
        put_bytes(name, std::move(bytes));
    }

    /// Column-major matrix payload, preceded by nothing; shapes live in the
    /// owning module's metadata section.
    void put_matrix(const std::string& name, const Eigen::MatrixXd& m) {
        put_f64s(name, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
    }

    bool has(const std::string& name) const { return sections_.count(name) != 0; }

    const std::string& bytes(const std::string& name) const {
        auto it = sections_.find(name);
        if (it == sections_.end()) throw InputError("checkpoint has no section '" + name + "'");
        return it->second;
    }

    std::vector<std::uint64_t> u64s(const std::string& name) const {
        const auto& b = bytes(name);
        if (b.size() % 8 != 0) throw InputError("section '" + name + "' is not a u64 array");
        std::vector<std::uint64_t> out(b.size() / 8);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::get_u64(b, 8 * i);
        return out;
    }

    std::vector<double> f64s(const std::string& name) const {
        auto raw = u64s(name);
        std::vector<double> out(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) out[i] = std::bit_cast<double>(raw[i]);
        return out;
    }

    Eigen::MatrixXd matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
        auto v = f64s(name);
        if (v.size() != static_cast<std::size_t>(rows * cols)) {
            throw InputError("section '" + name + "' has the wrong size for its declared shape");
        }
        return Eigen::Map<Eigen::MatrixXd>(v.data(), rows, cols);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, _] : sections_) out.push_back(k);
        return out;
    }

    /// Sections are written in name order, so equal contents serialize to
    /// equal bytes.
    std::string serialize() const {
        std::string header(kMagic);
        detail::put_u64(header, sections_.size());
        std::size_t table = 0;
        for (const auto& [name, _] : sections_) table += 8 + name.size() + 16;
        std::uint64_t offset = header.size() + table;
        std::string body;
        for (const auto& [name, payload] : sections_) {
            detail::put_u64(header, name.size());
            header += name;
            detail::put_u64(header, offset);
            detail::put_u64(header, payload.size());
            offset += payload.size();
            body += payload;
        }
        return header + body;
    }

    static Checkpoint parse(std::string_view data) {
        if (data.substr(0, 4) != kMagic) throw InputError("not an SFG1 container (bad magic)");
        Checkpoint ck;
        std::size_t pos = 4;
        const auto count = detail::get_u64(data, pos);
        pos += 8;
        for (std::uint64_t i = 0; i < count; ++i) {
            const auto name_len = detail::get_u64(data, pos);
            pos += 8;
            if (pos + name_len > data.size()) throw InputError("truncated SFG1 section table");
            std::string name(data.substr(pos, name_len));
            pos += name_len;
            const auto offset = detail::get_u64(data, pos);
            const auto length = detail::get_u64(data, pos + 8);
            pos += 16;
            if (offset + length > data.size()) throw InputError("SFG1 section '" + name + "' out of bounds");
            ck.sections_[name] = std::string(data.substr(offset, length));
        }
        return ck;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot write '" + path + "'");
        const auto data = serialize();
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    /// Adds every section of `other`, replacing duplicates.
    void merge(const Checkpoint& other) {
        for (const auto& [k, v] : other.sections_) sections_[k] = v;
    }

private:
    std::map<std::string, std::string> sections_;
};

}  // namespace sfgen
