#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eastnet/tensor.hpp"

namespace eastnet {

class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

// Binary writer/reader for the little-endian on-disk formats. The reader
// tracks its byte offset so truncation errors can name the position.
class BinWriter {
public:
    explicit BinWriter(const std::string& path) : path_(path), os_(path, std::ios::binary) {
        if (!os_) throw IoError("cannot open " + path + " for writing");
    }

    void magic(const char tag[5]) { os_.write(tag, 4); }
    void u32(uint32_t v) { os_.write(reinterpret_cast<const char*>(&v), 4); }
    void u64(uint64_t v) { os_.write(reinterpret_cast<const char*>(&v), 8); }
    void f64(double v) { os_.write(reinterpret_cast<const char*>(&v), 8); }

    void tensor(const Tensor& t) {
        os_.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size()) * 8);
    }

    void close() {
        os_.flush();
        if (!os_) throw IoError("write failed for " + path_);
        os_.close();
    }

private:
    std::string path_;
    std::ofstream os_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path) : path_(path), is_(path, std::ios::binary) {
        if (!is_) throw IoError("cannot open " + path + " for reading");
    }

    void expect_magic(const char tag[5]) {
        char buf[4];
        read(buf, 4);
        if (std::string(buf, 4) != std::string(tag, 4))
            throw FormatError(path_ + ": bad magic at byte 0, expected \"" + std::string(tag, 4) +
                              "\"");
    }

    uint32_t u32() {
        uint32_t v;
        read(reinterpret_cast<char*>(&v), 4);
        return v;
    }

    uint64_t u64() {
        uint64_t v;
        read(reinterpret_cast<char*>(&v), 8);
        return v;
    }

    double f64() {
        double v;
        read(reinterpret_cast<char*>(&v), 8);
        return v;
    }

    void tensor_into(Tensor& t) {
        read(reinterpret_cast<char*>(t.data()), t.size() * 8);
    }

    void expect_eof() {
        char c;
        is_.read(&c, 1);
        if (!is_.eof())
            throw FormatError(path_ + ": trailing data at byte " + std::to_string(offset_));
    }

    int64_t offset() const { return offset_; }

private:
    void read(char* dst, int64_t n) {
        is_.read(dst, n);
        if (is_.gcount() != n)
            throw FormatError(path_ + ": truncated at byte " +
                              std::to_string(offset_ + is_.gcount()) + " (wanted " +
                              std::to_string(n) + " more bytes)");
        offset_ += n;
    }

    std::string path_;
    std::ifstream is_;
    int64_t offset_ = 0;
};

}  // namespace eastnet
