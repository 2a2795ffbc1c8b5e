#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etta/synth.hpp"
#include "etta/tensor.hpp"

namespace etta {

// Writes images/NNNN.t, masks/NNNN.t, manifest.txt ("index seed domain" per
// line) and train/val/test split files at a 60/20/20 contiguous split.
// Refuses to write into an existing non-empty directory unless force.
// Sample generation is parallelized over ETTA_THREADS workers (default 1).
void build_dataset(const std::string& out_dir, int n, const DomainSpec& domain,
                   uint64_t seed0, int64_t h, int64_t w, bool force = false);

// In-memory view of one split of a dataset directory.
class Dataset {
public:
    static Dataset open(const std::string& dir, const std::string& split);  // train|val|test|all

    size_t size() const { return samples_.size(); }
    int64_t height() const { return h_; }
    int64_t width() const { return w_; }
    const Sample& sample(size_t i) const { return samples_.at(i); }
    const std::string& domain() const { return domain_; }

    // Stacks the given samples into [B,1,H,W] image and [B*H*W] mask buffers.
    TensorF images(const std::vector<size_t>& idx) const;
    std::vector<uint8_t> masks(const std::vector<size_t>& idx) const;

private:
    std::vector<Sample> samples_;
    int64_t h_ = 0, w_ = 0;
    std::string domain_;
};

// Worker-count override, >=1; reads ETTA_THREADS, defaults to 1.
int env_thread_count();

}  // namespace etta
