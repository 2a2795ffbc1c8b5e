#include "etta/tensor_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace etta::io {

namespace {

constexpr char kMagic[4] = {'E', 'T', 'T', '1'};

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const std::string& what, long offset) {
    throw std::runtime_error(path + ": " + what + " at byte " + std::to_string(offset));
}

void put_u32(std::string& buf, uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>((v >> 16) & 0xff));
    buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void write_file(const std::string& path, const std::string& buf) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    if (std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw std::runtime_error(path + ": short write");
}

std::string header(uint8_t dtype, const std::vector<int64_t>& shape, size_t count) {
    size_t expect = 1;
    for (int64_t d : shape) {
        if (d < 0) throw std::invalid_argument("save tensor: negative extent");
        expect *= static_cast<size_t>(d);
    }
    if (expect != count)
        throw std::invalid_argument("save tensor: shape is inconsistent with payload size");
    std::string buf(kMagic, 4);
    buf.push_back(static_cast<char>(dtype));
    put_u32(buf, static_cast<uint32_t>(shape.size()));
    for (int64_t d : shape) put_u32(buf, static_cast<uint32_t>(d));
    return buf;
}

}  // namespace

void save_f32(const std::string& path, const std::vector<int64_t>& shape,
              const std::vector<float>& data) {
    std::string buf = header(0, shape, data.size());
    for (float v : data) put_u32(buf, std::bit_cast<uint32_t>(v));
    write_file(path, buf);
}

void save_u8(const std::string& path, const std::vector<int64_t>& shape,
             const std::vector<uint8_t>& data) {
    std::string buf = header(1, shape, data.size());
    buf.append(reinterpret_cast<const char*>(data.data()), data.size());
    write_file(path, buf);
}

LoadedTensor load(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error(path + ": cannot open for reading");
    long offset = 0;
    auto read_exact = [&](void* dst, size_t n, const char* what) {
        if (std::fread(dst, 1, n, f.get()) != n) fail(path, std::string("truncated ") + what, offset);
        offset += static_cast<long>(n);
    };
    auto read_u32 = [&](const char* what) {
        uint8_t b[4];
        read_exact(b, 4, what);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    };

    char magic[4];
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kMagic, 4) != 0)
        fail(path, "bad magic", 0);
    offset = 4;

    LoadedTensor t;
    read_exact(&t.dtype, 1, "dtype");
    if (t.dtype > 1) fail(path, "unknown dtype code " + std::to_string(t.dtype), offset - 1);
    uint32_t rank = read_u32("rank");
    if (rank > 8) fail(path, "implausible rank " + std::to_string(rank), offset - 4);
    size_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t d = read_u32("dims");
        t.shape.push_back(static_cast<int64_t>(d));
        count *= d;
    }
    if (t.dtype == 0) {
        t.f32.resize(count);
        for (size_t i = 0; i < count; ++i) t.f32[i] = std::bit_cast<float>(read_u32("payload"));
    } else {
        t.u8.resize(count);
        read_exact(t.u8.data(), count, "payload");
    }
    uint8_t extra;
    if (std::fread(&extra, 1, 1, f.get()) == 1) fail(path, "trailing bytes", offset);
    return t;
}

std::vector<float> load_f32(const std::string& path, std::vector<int64_t>* shape) {
    LoadedTensor t = load(path);
    if (t.dtype != 0) throw std::runtime_error(path + ": expected f32 tensor, found u8");
    if (shape) *shape = t.shape;
    return std::move(t.f32);
}

std::vector<uint8_t> load_u8(const std::string& path, std::vector<int64_t>* shape) {
    LoadedTensor t = load(path);
    if (t.dtype != 1) throw std::runtime_error(path + ": expected u8 tensor, found f32");
    if (shape) *shape = t.shape;
    return std::move(t.u8);
}

void save_pgm(const std::string& path, const std::vector<uint8_t>& gray, int64_t h,
              int64_t w) {
    if (static_cast<int64_t>(gray.size()) != h * w)
        throw std::invalid_argument(path + ": pixel count does not match " +
                                    std::to_string(h) + "x" + std::to_string(w));
    std::string buf = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    buf.append(reinterpret_cast<const char*>(gray.data()), gray.size());
    write_file(path, buf);
}

}  // namespace etta::io
