#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mted {

uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull);
inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }
std::string hex64(uint64_t v);

// Writes to "<path>.tmp.<pid>" and renames over path, so a reader never sees
// a partially written file. Throws IoError.
void write_file_atomic(const std::string& path, const void* data, size_t n);
inline void write_file_atomic(const std::string& path, std::string_view s) {
  write_file_atomic(path, s.data(), s.size());
}
std::string read_file(const std::string& path);
void make_dirs(const std::string& path);

void write_f32(const std::string& path, const std::vector<float>& values);

}  // namespace mted
