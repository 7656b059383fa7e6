#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "impactx/errors.hpp"

namespace impactx::binio {

// Little-endian primitives for the binary container formats. Values are
// assembled byte-wise so files are identical on any host.

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("truncated while reading ") + what);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    write_u32(out, v);
}

inline void write_f32_array(std::ostream& out, const float* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) write_f32(out, data[i]);
}

inline void read_f32_array(std::istream& in, float* data, std::size_t count, const char* what) {
    std::vector<unsigned char> buf(count * 4);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw FormatError(std::string("truncated while reading ") + what);
    }
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t v = static_cast<std::uint32_t>(buf[4 * i]) |
                          (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                          (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                          (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
        std::memcpy(&data[i], &v, 4);
    }
}

inline void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const char* what) {
    std::uint32_t len = read_u32(in, what);
    if (len > (1u << 20)) throw FormatError(std::string("implausible string length in ") + what);
    std::string s(len, '\0');
    if (len && !in.read(s.data(), len)) throw FormatError(std::string("truncated while reading ") + what);
    return s;
}

// Write to `path.tmp` then rename, so partial writes never clobber a
// complete file.
class AtomicFileWriter {
public:
    explicit AtomicFileWriter(const std::string& path) : path_(path), tmp_(path + ".tmp") {
        out_.open(tmp_, std::ios::binary | std::ios::trunc);
        if (!out_) throw DataError("cannot open " + tmp_ + " for writing");
    }
    std::ofstream& stream() { return out_; }
    void commit() {
        out_.flush();
        if (!out_) throw DataError("write failed for " + tmp_);
        out_.close();
        std::remove(path_.c_str());
        if (std::rename(tmp_.c_str(), path_.c_str()) != 0) {
            throw DataError("cannot rename " + tmp_ + " to " + path_);
        }
    }

private:
    std::string path_, tmp_;
    std::ofstream out_;
};

}  // namespace impactx::binio
