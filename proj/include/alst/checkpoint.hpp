#pragma once

// Versioned binary checkpoint: magic "ALST", u32 format version, then one
// record per parameter (u32 name length, name bytes, u8 dtype tag, u32 rank,
// u32 dims, raw little-endian values), closed by a CRC32 over everything
// after the 8-byte header.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "alst/error.hpp"
#include "alst/layers.hpp"

namespace alst {

inline std::uint32_t crc32_update(std::uint32_t crc, const void* data, std::size_t n) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(data);
    crc ^= 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

namespace detail {

constexpr char kCkptMagic[4] = {'A', 'L', 'S', 'T'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

inline void put_u32(std::string& buf, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    buf.append(b, 4);
}

}  // namespace detail

inline void write_checkpoint(const std::vector<CheckpointEntry>& entries,
                             const std::string& path) {
    std::string payload;
    for (const auto& e : entries) {
        detail::put_u32(payload, static_cast<std::uint32_t>(e.name.size()));
        payload.append(e.name);
        payload.push_back(static_cast<char>(detail::kDtypeF32));
        detail::put_u32(payload, static_cast<std::uint32_t>(e.shape.size()));
        std::int64_t n = 1;
        for (int d : e.shape) {
            detail::put_u32(payload, static_cast<std::uint32_t>(d));
            n *= d;
        }
        if (n != static_cast<std::int64_t>(e.values.size()))
            throw config_error("checkpoint write: " + e.name + " shape/value mismatch");
        payload.append(reinterpret_cast<const char*>(e.values.data()),
                       e.values.size() * sizeof(float));
    }
    const std::uint32_t crc = crc32_update(0, payload.data(), payload.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("checkpoint write: cannot open " + path);
    out.write(detail::kCkptMagic, 4);
    const std::uint32_t version = detail::kCkptVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&crc), 4);
    if (!out) throw data_error("checkpoint write: write failed for " + path);
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("checkpoint read: cannot open " + path);
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() < 12) throw data_error("checkpoint read: " + path + " truncated");
    if (std::memcmp(raw.data(), detail::kCkptMagic, 4) != 0)
        throw data_error("checkpoint read: bad magic in " + path);
    std::uint32_t version = 0;
    std::memcpy(&version, raw.data() + 4, 4);
    if (version != detail::kCkptVersion)
        throw data_error("checkpoint read: unsupported version " + std::to_string(version));

    const std::size_t payload_end = raw.size() - 4;
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, raw.data() + payload_end, 4);
    const std::uint32_t crc = crc32_update(0, raw.data() + 8, payload_end - 8);
    if (crc != stored_crc) throw data_error("checkpoint read: CRC mismatch in " + path);

    std::vector<CheckpointEntry> entries;
    std::size_t pos = 8;
    auto need = [&](std::size_t n) {
        if (pos + n > payload_end) throw data_error("checkpoint read: " + path + " truncated record");
    };
    auto get_u32 = [&] {
        need(4);
        std::uint32_t v = 0;
        std::memcpy(&v, raw.data() + pos, 4);
        pos += 4;
        return v;
    };
    while (pos < payload_end) {
        CheckpointEntry e;
        const std::uint32_t name_len = get_u32();
        need(name_len);
        e.name.assign(raw.data() + pos, name_len);
        pos += name_len;
        need(1);
        const auto dtype = static_cast<std::uint8_t>(raw[pos++]);
        if (dtype != detail::kDtypeF32)
            throw data_error("checkpoint read: unsupported dtype tag " + std::to_string(dtype));
        const std::uint32_t rank = get_u32();
        std::int64_t n = 1;
        e.shape.resize(rank);
        for (std::uint32_t i = 0; i < rank; ++i) {
            e.shape[i] = static_cast<int>(get_u32());
            n *= e.shape[i];
        }
        need(static_cast<std::size_t>(n) * sizeof(float));
        e.values.resize(static_cast<std::size_t>(n));
        std::memcpy(e.values.data(), raw.data() + pos, static_cast<std::size_t>(n) * sizeof(float));
        pos += static_cast<std::size_t>(n) * sizeof(float);
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void save_checkpoint(const ParameterSet<float>& params, const std::string& path) {
    std::vector<CheckpointEntry> entries;
    entries.reserve(params.size());
    for (const auto& p : params) entries.push_back({p.name, p.shape, *p.data});
    write_checkpoint(entries, path);
}

// Loads values into an existing parameter set in place; names and shapes
// must match exactly.
inline void load_entries(const ParameterSet<float>& params,
                         const std::vector<CheckpointEntry>& entries, const std::string& origin) {
    if (entries.size() != params.size())
        throw data_error("checkpoint load: " + origin + " has " + std::to_string(entries.size()) +
                         " parameters, model has " + std::to_string(params.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const auto& p = params[i];
        if (e.name != p.name)
            throw data_error("checkpoint load: parameter " + std::to_string(i) + " is '" + e.name +
                             "', model expects '" + p.name + "'");
        if (e.shape != p.shape)
            throw data_error("checkpoint load: shape mismatch for " + e.name);
        *p.data = e.values;
    }
}

inline void load_checkpoint(const ParameterSet<float>& params, const std::string& path) {
    load_entries(params, read_checkpoint(path), path);
}

}  // namespace alst
