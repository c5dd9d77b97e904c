#pragma once

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>

#include "tetfit/common.hpp"

namespace tetfit::ioutil {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

inline File open_file(const std::string& path, const char* mode) {
    File f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open " + path);
    return f;
}

inline void write_exact(std::FILE* f, const void* p, std::size_t n, const std::string& path) {
    if (n && std::fwrite(p, 1, n, f) != n) throw IoError("short write: " + path);
}

inline void read_exact(std::FILE* f, void* p, std::size_t n, const std::string& path) {
    if (n && std::fread(p, 1, n, f) != n) throw IoError("short read: " + path);
}

template <typename T>
void write_pod(std::FILE* f, const T& v, const std::string& path) {
    write_exact(f, &v, sizeof(T), path);
}

template <typename T>
T read_pod(std::FILE* f, const std::string& path) {
    T v;
    read_exact(f, &v, sizeof(T), path);
    return v;
}

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// %.17g, the shortest round-trip-safe fixed format used for every float we
// print (CSV, OBJ, config). Centralized so all emitters agree byte-for-byte.
std::string format_double(double v);

}  // namespace tetfit::ioutil
