#pragma once

// Bit-exact single-file checkpoint format:
//
//   bytes 0..3   magic "SPCL"
//   bytes 4..7   format version, unsigned 32-bit little-endian
//   bytes 8..15  metadata length in bytes, unsigned 64-bit little-endian
//   metadata     JSON map  name -> {dtype:"f32", shape:[..], offset, nbytes}
//   payload      raw little-endian 32-bit floats, each tensor 64-byte aligned
//
// Offsets are absolute file positions.  Bytes are encoded explicitly, so the
// format does not depend on host endianness.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "spcl/tensor.hpp"

namespace spcl::checkpoint {

constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kAlign = 64;
constexpr std::size_t kHeaderBytes = 16;

enum class ErrorKind {
    io,
    bad_magic,
    bad_version,
    bad_metadata,
    overlapping_offsets,
    truncated_payload
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::io: return "io";
        case ErrorKind::bad_magic: return "bad_magic";
        case ErrorKind::bad_version: return "bad_version";
        case ErrorKind::bad_metadata: return "bad_metadata";
        case ErrorKind::overlapping_offsets: return "overlapping_offsets";
        case ErrorKind::truncated_payload: return "truncated_payload";
    }
    return "unknown";
}

class CheckpointError : public std::runtime_error {
  public:
    CheckpointError(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what),
          kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

namespace detail {

inline void put_u32_le(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
}
inline void put_u64_le(std::vector<std::uint8_t>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
}
inline std::uint32_t get_u32_le(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
}

inline std::size_t align_up(std::size_t x) {
    return (x + kAlign - 1) / kAlign * kAlign;
}

// metadata JSON for a given metadata length (offsets depend on it)
inline std::string render_metadata(const ParamSet& params,
                                   std::size_t meta_len) {
    nlohmann::json meta = nlohmann::json::object();
    std::size_t cursor = kHeaderBytes + meta_len;
    for (const auto& [name, t] : params) {
        cursor = align_up(cursor);
        nlohmann::json entry;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape;
        entry["offset"] = cursor;
        entry["nbytes"] = t.numel() * 4;
        meta[name] = entry;
        cursor += t.numel() * 4;
    }
    return meta.dump();
}

} // namespace detail

inline void save(const ParamSet& params, const std::string& path) {
    // offsets appear inside the metadata, whose own length shifts them;
    // iterate to the fixed point (stable within a few rounds since digit
    // counts grow monotonically)
    std::string meta = detail::render_metadata(params, 0);
    for (int round = 0; round < 8; ++round) {
        std::string next = detail::render_metadata(params, meta.size());
        if (next.size() == meta.size()) {
            meta = next;
            break;
        }
        meta = next;
    }

    std::vector<std::uint8_t> buf;
    buf.reserve(detail::align_up(kHeaderBytes + meta.size()) + 1024);
    buf.push_back('S');
    buf.push_back('P');
    buf.push_back('C');
    buf.push_back('L');
    detail::put_u32_le(buf, kVersion);
    detail::put_u64_le(buf, meta.size());
    for (char c : meta) buf.push_back(std::uint8_t(c));

    for (const auto& [name, t] : params) {
        while (buf.size() % kAlign != 0) buf.push_back(0);
        for (float v : t.data)
            detail::put_u32_le(buf, std::bit_cast<std::uint32_t>(v));
    }

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw CheckpointError(ErrorKind::io, "cannot open '" + path +
                                                 "' for writing");
    os.write(reinterpret_cast<const char*>(buf.data()),
             std::streamsize(buf.size()));
    if (!os)
        throw CheckpointError(ErrorKind::io, "short write to '" + path + "'");
}

inline ParamSet load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw CheckpointError(ErrorKind::io, "cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());

    if (buf.size() < 4 || buf[0] != 'S' || buf[1] != 'P' || buf[2] != 'C' ||
        buf[3] != 'L')
        throw CheckpointError(ErrorKind::bad_magic,
                              "'" + path + "' is not a checkpoint file");
    if (buf.size() < kHeaderBytes)
        throw CheckpointError(ErrorKind::bad_metadata, "header cut short");
    std::uint32_t version = detail::get_u32_le(buf.data() + 4);
    if (version != kVersion)
        throw CheckpointError(ErrorKind::bad_version,
                              "unsupported format version " +
                                  std::to_string(version));
    std::uint64_t meta_len = detail::get_u64_le(buf.data() + 8);
    if (kHeaderBytes + meta_len > buf.size())
        throw CheckpointError(ErrorKind::bad_metadata,
                              "metadata extends past end of file");

    nlohmann::json meta = nlohmann::json::parse(
        buf.begin() + kHeaderBytes, buf.begin() + kHeaderBytes + meta_len,
        nullptr, false);
    if (meta.is_discarded() || !meta.is_object())
        throw CheckpointError(ErrorKind::bad_metadata,
                              "metadata is not a JSON object");

    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t offset = 0;
        std::size_t nbytes = 0;
    };
    std::vector<Entry> entries;
    for (const auto& [name, j] : meta.items()) {
        if (!j.is_object() || !j.contains("dtype") || !j.contains("shape") ||
            !j.contains("offset") || !j.contains("nbytes"))
            throw CheckpointError(ErrorKind::bad_metadata,
                                  "tensor '" + name + "' entry malformed");
        if (j["dtype"] != "f32")
            throw CheckpointError(ErrorKind::bad_metadata,
                                  "tensor '" + name + "' has unsupported dtype");
        Entry e;
        e.name = name;
        e.shape = j["shape"].get<std::vector<std::size_t>>();
        e.offset = j["offset"].get<std::size_t>();
        e.nbytes = j["nbytes"].get<std::size_t>();
        if (e.nbytes != Tensor<float>::numel_of(e.shape) * 4)
            throw CheckpointError(ErrorKind::bad_metadata,
                                  "tensor '" + name +
                                      "' nbytes disagrees with shape");
        if (e.offset % kAlign != 0)
            throw CheckpointError(ErrorKind::bad_metadata,
                                  "tensor '" + name + "' is not 64-byte aligned");
        if (e.offset < kHeaderBytes + meta_len)
            throw CheckpointError(ErrorKind::overlapping_offsets,
                                  "tensor '" + name +
                                      "' payload overlaps the header");
        if (e.offset + e.nbytes > buf.size())
            throw CheckpointError(ErrorKind::truncated_payload,
                                  "tensor '" + name +
                                      "' extends past end of file");
        entries.push_back(std::move(e));
    }

    // non-overlap across tensors (entries are name-sorted; sort by offset)
    std::vector<const Entry*> by_offset;
    for (const auto& e : entries) by_offset.push_back(&e);
    std::sort(by_offset.begin(), by_offset.end(),
              [](const Entry* a, const Entry* b) { return a->offset < b->offset; });
    for (std::size_t i = 1; i < by_offset.size(); ++i)
        if (by_offset[i - 1]->offset + by_offset[i - 1]->nbytes >
            by_offset[i]->offset)
            throw CheckpointError(ErrorKind::overlapping_offsets,
                                  "tensors '" + by_offset[i - 1]->name +
                                      "' and '" + by_offset[i]->name +
                                      "' overlap");

    ParamSet params;
    for (const auto& e : entries) {
        std::vector<float> data(Tensor<float>::numel_of(e.shape));
        for (std::size_t i = 0; i < data.size(); ++i)
            data[i] = std::bit_cast<float>(
                detail::get_u32_le(buf.data() + e.offset + 4 * i));
        params.put(e.name, Tensor<float>(e.shape, std::move(data)));
    }
    return params;
}

struct TensorDiff {
    std::string name;
    double max_abs = 0.0;
    double frobenius = 0.0;
};

// Per-tensor stats of (a - b): max absolute entry and Frobenius norm.
inline std::vector<TensorDiff> diff(const ParamSet& a, const ParamSet& b) {
    require_compatible(a, b, "checkpoint diff");
    std::vector<TensorDiff> out;
    auto ib = b.begin();
    for (const auto& [name, t] : a) {
        TensorDiff d;
        d.name = name;
        double sq = 0.0;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            double delta = double(t.data[i]) - double(ib->second.data[i]);
            d.max_abs = std::max(d.max_abs, std::abs(delta));
            sq += delta * delta;
        }
        d.frobenius = std::sqrt(sq);
        out.push_back(std::move(d));
        ++ib;
    }
    return out;
}

} // namespace spcl::checkpoint
