#include "p3d/io_util.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "p3d/error.hpp"

namespace p3d {

namespace {

struct Crc32Table {
    std::uint32_t t[256];
    Crc32Table() {
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
    }
};

}  // namespace

std::uint32_t crc32(const unsigned char* data, std::size_t len) {
    static const Crc32Table table;
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table.t[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

std::uint32_t crc32(const std::string& bytes) {
    return crc32(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
}

std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write file: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void append_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void append_u16le(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void append_f32le(std::string& out, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    append_u32le(out, u);
}

std::uint32_t read_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16le(const unsigned char* p) {
    return static_cast<std::uint16_t>(static_cast<std::uint16_t>(p[0]) |
                                      (static_cast<std::uint16_t>(p[1]) << 8));
}

float read_f32le(const unsigned char* p) {
    const std::uint32_t u = read_u32le(p);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

std::string floats_to_le_bytes(const std::vector<float>& v) {
    std::string out;
    out.reserve(v.size() * 4);
    for (float f : v) append_f32le(out, f);
    return out;
}

std::vector<float> le_bytes_to_floats(const std::string& bytes) {
    if (bytes.size() % 4 != 0)
        throw FormatError("float blob length " + std::to_string(bytes.size()) +
                          " is not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = read_f32le(p + i * 4);
    return out;
}

std::string hex_u32(std::uint32_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(8, '0');
    for (int i = 7; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

std::uint32_t parse_hex_u32(const std::string& s) {
    if (s.empty() || s.size() > 8) throw FormatError("bad hex value '" + s + "'");
    std::uint32_t v = 0;
    for (char c : s) {
        v <<= 4;
        if (c >= '0' && c <= '9')
            v |= static_cast<std::uint32_t>(c - '0');
        else if (c >= 'a' && c <= 'f')
            v |= static_cast<std::uint32_t>(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F')
            v |= static_cast<std::uint32_t>(c - 'A' + 10);
        else
            throw FormatError("bad hex value '" + s + "'");
    }
    return v;
}

}  // namespace p3d
