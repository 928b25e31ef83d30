#include "emocirc/binio.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace emc {

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        t[i] = c;
    }
    return t;
}

} // namespace

std::uint32_t crc32(const void* bytes, size_t n, std::uint32_t seed) {
    static const std::array<std::uint32_t, 256> table = make_crc_table();
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint32_t c = seed ^ 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

void ByteWriter::raw(const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), b, b + n);
}

void ByteWriter::u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
    raw(b, 4);
}

void ByteWriter::u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
    raw(b, 8);
}

void ByteWriter::f64(double v) {
    static_assert(sizeof(double) == 8);
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
}

void ByteWriter::str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
}

void ByteWriter::matrix(const Tensor2& m) {
    raw("EMM1", 4);
    u32(static_cast<std::uint32_t>(m.rows));
    u32(static_cast<std::uint32_t>(m.cols));
    for (double x : m.data) f64(x);
}

void ByteWriter::finish_crc() { u32(crc32(buf_.data(), buf_.size())); }

void ByteWriter::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw FormatError("write failed: " + path);
}

ByteReader::ByteReader(std::vector<unsigned char> bytes)
    : buf_(std::move(bytes)), limit_(buf_.size()) {}

ByteReader ByteReader::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes));
}

void ByteReader::need(size_t n, const char* what) {
    if (pos_ + n > limit_) throw FormatError(std::string("truncated file while reading ") + what);
}

void ByteReader::expect_magic(const char tag[4]) {
    need(4, "magic");
    if (std::memcmp(buf_.data() + pos_, tag, 4) != 0)
        throw FormatError(std::string("bad magic, expected ") + std::string(tag, 4));
    pos_ += 4;
}

std::uint32_t ByteReader::u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

std::uint64_t ByteReader::u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

double ByteReader::f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string ByteReader::str() {
    std::uint32_t n = u32();
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
}

Tensor2 ByteReader::matrix() {
    expect_magic("EMM1");
    const std::uint32_t rows = u32();
    const std::uint32_t cols = u32();
    if (rows > (1u << 24) || cols > (1u << 24)) throw FormatError("matrix dimensions implausible");
    Tensor2 m(static_cast<int>(rows), static_cast<int>(cols));
    for (double& x : m.data) x = f64();
    return m;
}

void ByteReader::check_crc(const std::string& what) {
    if (limit_ < 4) throw FormatError(what + ": too short for checksum");
    const size_t body = limit_ - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(buf_[body + i]) << (8 * i);
    if (crc32(buf_.data(), body) != stored) throw FormatError(what + ": checksum mismatch");
    limit_ = body;
}

Json& Json::operator[](const std::string& key) {
    if (std::holds_alternative<std::nullptr_t>(v_)) v_ = Object{};
    return std::get<Object>(v_)[key];
}

void Json::push_back(Json v) {
    if (std::holds_alternative<std::nullptr_t>(v_)) v_ = Array{};
    std::get<Array>(v_).push_back(std::move(v));
}

std::string Json::format_double(double d) {
    if (std::isnan(d)) return "null";
    if (std::isinf(d)) return d > 0 ? "1e999" : "-1e999";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", d);
    std::string s(buf);
    // A bare integer rendering would re-parse as an int; keep it a float.
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
}

static void dump_string(const std::string& s, std::string& out) {
    out += '"';
    for (char ch : s) {
        switch (ch) {
        case '"': out += "\\\""; break;
        case '\\': out += "\\\\"; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        default:
            if (static_cast<unsigned char>(ch) < 0x20) {
                char buf[8];
                std::snprintf(buf, sizeof(buf), "\\u%04x", ch);
                out += buf;
            } else {
                out += ch;
            }
        }
    }
    out += '"';
}

void Json::dump_to(std::string& out) const {
    if (std::holds_alternative<std::nullptr_t>(v_)) {
        out += "null";
    } else if (std::holds_alternative<bool>(v_)) {
        out += std::get<bool>(v_) ? "true" : "false";
    } else if (std::holds_alternative<std::int64_t>(v_)) {
        out += std::to_string(std::get<std::int64_t>(v_));
    } else if (std::holds_alternative<double>(v_)) {
        out += format_double(std::get<double>(v_));
    } else if (std::holds_alternative<std::string>(v_)) {
        dump_string(std::get<std::string>(v_), out);
    } else if (std::holds_alternative<Array>(v_)) {
        out += '[';
        const Array& a = std::get<Array>(v_);
        for (size_t i = 0; i < a.size(); ++i) {
            if (i) out += ',';
            a[i].dump_to(out);
        }
        out += ']';
    } else {
        out += '{';
        const Object& o = std::get<Object>(v_);
        bool first = true;
        for (const auto& [k, v] : o) {
            if (!first) out += ',';
            first = false;
            dump_string(k, out);
            out += ':';
            v.dump_to(out);
        }
        out += '}';
    }
}

std::string Json::dump() const {
    std::string out;
    dump_to(out);
    return out;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw FormatError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

} // namespace emc
