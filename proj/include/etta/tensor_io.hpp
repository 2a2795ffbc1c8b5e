#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace etta::io {

// Tensor file: magic "ETT1", dtype u8 (0 = f32, 1 = u8), rank u32,
// dims u32 each, then the raw payload. All integers and floats
// little-endian regardless of host. Round-trips are bitwise exact.

void save_f32(const std::string& path, const std::vector<int64_t>& shape,
              const std::vector<float>& data);
void save_u8(const std::string& path, const std::vector<int64_t>& shape,
             const std::vector<uint8_t>& data);

struct LoadedTensor {
    uint8_t dtype = 0;
    std::vector<int64_t> shape;
    std::vector<float> f32;
    std::vector<uint8_t> u8;
};

LoadedTensor load(const std::string& path);

// dtype-checked conveniences
std::vector<float> load_f32(const std::string& path, std::vector<int64_t>* shape = nullptr);
std::vector<uint8_t> load_u8(const std::string& path, std::vector<int64_t>* shape = nullptr);

// 8-bit binary PGM (P5), row-major grayscale.
void save_pgm(const std::string& path, const std::vector<uint8_t>& gray, int64_t h,
              int64_t w);

}  // namespace etta::io
