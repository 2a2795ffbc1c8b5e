#include "etta/dataset.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "etta/tensor_io.hpp"

namespace fs = std::filesystem;

namespace etta {

int env_thread_count() {
    const char* v = std::getenv("ETTA_THREADS");
    if (!v) return 1;
    int n = std::atoi(v);
    return n >= 1 ? n : 1;
}

namespace {

std::string index_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d.t", i);
    return buf;
}

void write_lines(const fs::path& path, int begin, int end) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    for (int i = begin; i < end; ++i) out << i << "\n";
}

}  // namespace

void build_dataset(const std::string& out_dir, int n, const DomainSpec& domain,
                   uint64_t seed0, int64_t h, int64_t w, bool force) {
    if (n < 1) throw std::invalid_argument("build_dataset: n must be >= 1");
    fs::path root(out_dir);
    if (fs::exists(root) && !fs::is_empty(root) && !force)
        throw std::runtime_error(out_dir + ": directory exists and is not empty (use --force)");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    auto emit = [&](int i) {
        Sample s = generate_sample(derive_seed(seed0, static_cast<uint64_t>(i)), h, w, domain);
        io::save_f32((root / "images" / index_name(i)).string(), {h, w}, s.image);
        io::save_u8((root / "masks" / index_name(i)).string(), {h, w}, s.mask);
    };
    const int workers = std::min(env_thread_count(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) emit(i);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&, t] {
                for (int i = t; i < n; i += workers) emit(i);
            });
        for (auto& th : pool) th.join();
    }

    std::ofstream manifest(root / "manifest.txt");
    if (!manifest) throw std::runtime_error(out_dir + "/manifest.txt: cannot open for writing");
    for (int i = 0; i < n; ++i)
        manifest << i << " " << derive_seed(seed0, static_cast<uint64_t>(i)) << " "
                 << domain.name << "\n";
    manifest.close();

    const int ntrain = n * 60 / 100;
    const int nval = n * 20 / 100;
    write_lines(root / "train.txt", 0, ntrain);
    write_lines(root / "val.txt", ntrain, ntrain + nval);
    write_lines(root / "test.txt", ntrain + nval, n);
}

Dataset Dataset::open(const std::string& dir, const std::string& split) {
    fs::path root(dir);
    std::ifstream manifest(root / "manifest.txt");
    if (!manifest)
        throw std::runtime_error(dir + "/manifest.txt: cannot open (not a dataset directory?)");

    struct Row {
        int index;
        uint64_t seed;
        std::string domain;
    };
    std::vector<Row> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(manifest, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        Row r;
        if (!(is >> r.index >> r.seed >> r.domain))
            throw std::runtime_error(dir + "/manifest.txt: malformed line " +
                                     std::to_string(lineno));
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw std::runtime_error(dir + ": empty dataset manifest");

    std::vector<int> keep;
    if (split == "all") {
        for (const auto& r : rows) keep.push_back(r.index);
    } else {
        if (split != "train" && split != "val" && split != "test")
            throw std::invalid_argument("unknown split '" + split + "' (train|val|test|all)");
        std::ifstream sf(root / (split + ".txt"));
        if (!sf) throw std::runtime_error(dir + "/" + split + ".txt: cannot open");
        int idx;
        while (sf >> idx) keep.push_back(idx);
        if (keep.empty()) throw std::runtime_error(dir + ": split '" + split + "' is empty");
    }

    Dataset d;
    for (int idx : keep) {
        if (idx < 0 || idx >= static_cast<int>(rows.size()))
            throw std::runtime_error(dir + ": split index " + std::to_string(idx) +
                                     " outside manifest");
        const Row& r = rows[static_cast<size_t>(idx)];
        Sample s;
        std::vector<int64_t> ishape, mshape;
        s.image = io::load_f32((root / "images" / index_name(idx)).string(), &ishape);
        s.mask = io::load_u8((root / "masks" / index_name(idx)).string(), &mshape);
        if (ishape.size() != 2 || ishape != mshape)
            throw std::runtime_error(dir + ": sample " + std::to_string(idx) +
                                     " has inconsistent image/mask shapes");
        s.h = ishape[0];
        s.w = ishape[1];
        s.seed = r.seed;
        s.domain = r.domain;
        if (d.h_ == 0) {
            d.h_ = s.h;
            d.w_ = s.w;
            d.domain_ = s.domain;
        } else if (s.h != d.h_ || s.w != d.w_) {
            throw std::runtime_error(dir + ": mixed sample sizes in one dataset");
        }
        d.samples_.push_back(std::move(s));
    }
    return d;
}

TensorF Dataset::images(const std::vector<size_t>& idx) const {
    if (idx.empty()) throw std::invalid_argument("Dataset::images: empty index list");
    const int64_t B = static_cast<int64_t>(idx.size());
    TensorF out({B, 1, h_, w_});
    for (int64_t b = 0; b < B; ++b) {
        const Sample& s = samples_.at(idx[static_cast<size_t>(b)]);
        std::copy(s.image.begin(), s.image.end(), out.data().begin() + b * h_ * w_);
    }
    return out;
}

std::vector<uint8_t> Dataset::masks(const std::vector<size_t>& idx) const {
    std::vector<uint8_t> out;
    out.reserve(idx.size() * static_cast<size_t>(h_ * w_));
    for (size_t i : idx) {
        const Sample& s = samples_.at(i);
        out.insert(out.end(), s.mask.begin(), s.mask.end());
    }
    return out;
}

}  // namespace etta
