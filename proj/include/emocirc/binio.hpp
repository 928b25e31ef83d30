#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "emocirc/tensor.hpp"

namespace emc {

// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
std::uint32_t crc32(const void* bytes, size_t n, std::uint32_t seed = 0);

// Byte-buffer writer/reader for the little-endian container files. Every
// container is: 4-byte magic, payload, trailing CRC-32 of all preceding
// bytes. Matrices are stored as "EMM1", u32 rows, u32 cols, f64 data.
class ByteWriter {
public:
    void raw(const void* p, size_t n);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void str(const std::string& s);                 // u32 length + bytes
    void matrix(const Tensor2& m);
    void finish_crc();                              // appends CRC of buffer so far
    const std::vector<unsigned char>& bytes() const { return buf_; }
    void save(const std::string& path) const;

private:
    std::vector<unsigned char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<unsigned char> bytes);
    static ByteReader load(const std::string& path);

    void expect_magic(const char tag[4]);
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::string str();
    Tensor2 matrix();
    // Validates the trailing CRC against everything before it. Call first.
    void check_crc(const std::string& what);
    bool at_end() const { return pos_ == limit_; }

private:
    std::vector<unsigned char> buf_;
    size_t pos_ = 0;
    size_t limit_ = 0;
    void need(size_t n, const char* what);
};

// Canonical JSON value: objects keep keys sorted, floats render with 10
// significant digits, no whitespace variability. Reports written through
// this are byte-stable across reruns.
class Json {
public:
    using Array = std::vector<Json>;
    using Object = std::map<std::string, Json>;

    Json() : v_(nullptr) {}
    Json(std::nullptr_t) : v_(nullptr) {}
    Json(bool b) : v_(b) {}
    Json(int i) : v_(static_cast<std::int64_t>(i)) {}
    Json(std::int64_t i) : v_(i) {}
    Json(std::uint64_t u) : v_(static_cast<std::int64_t>(u)) {}
    Json(size_t u) : v_(static_cast<std::int64_t>(u)) {}
    Json(double d) : v_(d) {}
    Json(const char* s) : v_(std::string(s)) {}
    Json(std::string s) : v_(std::move(s)) {}
    Json(Array a) : v_(std::move(a)) {}
    Json(Object o) : v_(std::move(o)) {}

    static Json array() { return Json(Array{}); }
    static Json object() { return Json(Object{}); }

    Json& operator[](const std::string& key);
    void push_back(Json v);

    bool is_object() const { return std::holds_alternative<Object>(v_); }
    bool is_array() const { return std::holds_alternative<Array>(v_); }

    std::string dump() const;
    static std::string format_double(double d);

private:
    std::variant<std::nullptr_t, bool, std::int64_t, double, std::string, Array, Object> v_;
    void dump_to(std::string& out) const;
};

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

} // namespace emc
