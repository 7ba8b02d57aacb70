#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "elit/image_io.hpp"

namespace elit {

// Raised when an archive fails its checksum or structural checks.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::uint32_t crc32_of(const void* data, size_t size);

// Little-endian byte buffer used by the dataset and checkpoint archives.
// Values are stored in host order, which the build asserts is little-endian.
class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, size_t size) {
        const auto* p = static_cast<const unsigned char*>(data);
        bytes_.insert(bytes_.end(), p, p + size);
    }
    void put_string(const std::string& s) {
        put<std::uint64_t>(s.size());
        put_bytes(s.data(), s.size());
    }
    // Appends the crc32 of everything written so far.
    void seal() { put<std::uint32_t>(crc32_of(bytes_.data(), bytes_.size())); }

    const std::vector<unsigned char>& bytes() const { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    // Verifies and strips the crc32 trailer.
    explicit ByteReader(std::vector<unsigned char> bytes, const std::string& what) : what_(what) {
        if (bytes.size() < 4) throw IntegrityError(what_ + ": truncated archive");
        std::uint32_t stored;
        std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
        bytes.resize(bytes.size() - 4);
        if (crc32_of(bytes.data(), bytes.size()) != stored) throw IntegrityError(what_ + ": checksum mismatch");
        bytes_ = std::move(bytes);
    }

    template <typename T>
    T get() {
        T v;
        get_bytes(&v, sizeof(T));
        return v;
    }
    void get_bytes(void* out, size_t size) {
        if (size > bytes_.size() - pos_) throw IntegrityError(what_ + ": truncated archive");
        std::memcpy(out, bytes_.data() + pos_, size);
        pos_ += size;
    }
    std::string get_string() {
        const auto n = get<std::uint64_t>();
        if (n > bytes_.size() - pos_) throw IntegrityError(what_ + ": truncated archive");
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::vector<unsigned char> bytes_;
    size_t pos_ = 0;
    std::string what_;
};

std::vector<unsigned char> read_file(const std::string& path);
// Writes to a temporary sibling and renames it into place.
void write_file(const std::string& path, const std::vector<unsigned char>& bytes);

} // namespace elit
