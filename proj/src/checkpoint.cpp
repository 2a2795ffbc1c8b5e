#include "etta/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <map>
#include <memory>
#include <stdexcept>

namespace etta::ckpt {

namespace {

constexpr char kMagic[4] = {'E', 'T', 'T', 'M'};
constexpr uint16_t kVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, uint32_t v) {
    put_u16(buf, static_cast<uint16_t>(v & 0xffff));
    put_u16(buf, static_cast<uint16_t>(v >> 16));
}

}  // namespace

void save(const std::string& path, const std::vector<StateEntry>& entries) {
    std::string buf(kMagic, 4);
    put_u16(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.size() > 0xffff)
            throw std::invalid_argument("checkpoint: entry name too long: " + e.name);
        put_u16(buf, static_cast<uint16_t>(e.name.size()));
        buf.append(e.name);
        put_u32(buf, static_cast<uint32_t>(e.shape.size()));
        for (int64_t d : e.shape) put_u32(buf, static_cast<uint32_t>(d));
        for (float v : *e.data) put_u32(buf, std::bit_cast<uint32_t>(v));
    }
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    if (std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw std::runtime_error(path + ": short write");
}

void load(const std::string& path, const std::vector<StateEntry>& entries) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error(path + ": cannot open for reading");
    auto read_exact = [&](void* dst, size_t n, const char* what) {
        if (std::fread(dst, 1, n, f.get()) != n)
            throw std::runtime_error(path + ": truncated checkpoint (" + what + ")");
    };
    auto read_u16 = [&](const char* what) {
        uint8_t b[2];
        read_exact(b, 2, what);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    };
    auto read_u32 = [&](const char* what) {
        uint8_t b[4];
        read_exact(b, 4, what);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    };

    char magic[4];
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error(path + ": bad checkpoint magic");
    uint16_t version = read_u16("version");
    if (version != kVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    uint32_t count = read_u32("count");

    struct FileEntry {
        std::vector<int64_t> shape;
        std::vector<float> data;
    };
    std::map<std::string, FileEntry> file;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nm = read_u16("name length");
        std::string name(nm, '\0');
        read_exact(name.data(), nm, "name");
        FileEntry fe;
        uint32_t rank = read_u32("rank");
        if (rank > 8) throw std::runtime_error(path + ": implausible rank in entry " + name);
        size_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            uint32_t d = read_u32("dims");
            fe.shape.push_back(static_cast<int64_t>(d));
            numel *= d;
        }
        fe.data.resize(numel);
        for (size_t k = 0; k < numel; ++k)
            fe.data[k] = std::bit_cast<float>(read_u32("payload"));
        if (!file.emplace(std::move(name), std::move(fe)).second)
            throw std::runtime_error(path + ": duplicate checkpoint entry");
    }

    for (const auto& e : entries) {
        auto it = file.find(e.name);
        if (it == file.end())
            throw std::runtime_error(path + ": checkpoint is missing entry '" + e.name + "'");
        if (it->second.shape != e.shape)
            throw std::runtime_error(path + ": shape mismatch for '" + e.name + "': file " +
                                     shape_str(it->second.shape) + " vs model " +
                                     shape_str(e.shape));
        *e.data = it->second.data;
        file.erase(it);
    }
    if (!file.empty())
        throw std::runtime_error(path + ": checkpoint has unexpected entry '" +
                                 file.begin()->first + "'");
}

}  // namespace etta::ckpt
