#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "etta/rng.hpp"
#include "etta/tensor.hpp"

namespace etta {

// One named float buffer of a model: either a trainable parameter or a
// BatchNorm running statistic. `data` is borrowed from the owning model.
struct StateEntry {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float>* data = nullptr;
    bool is_param = false;
    bool is_bn = false;  // gamma/beta or running stats of a BatchNorm layer
};

uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull);
// Order-sensitive hash over names and payload bytes of the given entries.
uint64_t hash_entries(const std::vector<StateEntry>& entries);

namespace detail_net {

struct Conv {
    TensorF w, b;
    int stride = 1, padding = 0;
    TensorF apply(const TensorF& x) const;
};

struct Norm {
    TensorF gamma, beta;
    BnStats<float> stats;
    TensorF apply(const TensorF& x, BnMode mode);
};

// Collects the registry while models enumerate their layers.
struct Binder {
    std::vector<std::pair<std::string, TensorF>> params;
    std::vector<StateEntry> entries;
    void conv(const std::string& prefix, Conv& c);
    void norm(const std::string& prefix, Norm& n);
};

Conv make_conv(Rng& rng, int64_t cin, int64_t cout, int64_t k, int stride, int padding);
Norm make_norm(int64_t channels);

}  // namespace detail_net

// UNet: 3 downsampling levels, double 3x3 conv blocks with BatchNorm+ReLU,
// nearest-neighbor upsampling with skip concatenation, 1x1 logits head.
class SegModel {
public:
    SegModel(int out_channels = 3, int base_channels = 16, uint64_t seed = 0);

    // x: [N,1,H,W] with H,W divisible by 8; returns logits [N,C,H,W].
    TensorF forward(const TensorF& x, BnMode mode);

    int out_channels() const { return C_; }
    std::vector<std::pair<std::string, TensorF>> named_params();
    std::vector<TensorF> parameters();
    std::vector<TensorF> bn_parameters();
    std::vector<std::string> bn_param_names();
    std::vector<StateEntry> state();
    int64_t param_count();

private:
    struct Block {
        detail_net::Conv c1, c2;
        detail_net::Norm n1, n2;
        TensorF forward(const TensorF& x, BnMode mode);
    };
    static Block make_block(Rng& rng, int64_t cin, int64_t cout);
    void bind(detail_net::Binder& b);

    int C_;
    Block enc1_, enc2_, enc3_, bottom_, dec3_, dec2_, dec1_;
    detail_net::Conv head_;
};

// Patch energy discriminator: four 5x5 stride-2 convs (LeakyReLU 0.2 then
// BatchNorm, widths 32/64/128/256) and a 1x1 head to one raw logit per
// 16x16 input patch. Higher logit = more out-of-distribution.
class EnergyModel {
public:
    explicit EnergyModel(int in_channels = 3, uint64_t seed = 0);

    // x: [N,C,H,W] with H,W divisible by 16; returns [N,1,H/16,W/16].
    TensorF forward(const TensorF& x, BnMode mode);

    int in_channels() const { return C_; }
    std::vector<std::pair<std::string, TensorF>> named_params();
    std::vector<TensorF> parameters();
    std::vector<StateEntry> state();
    int64_t param_count();

private:
    void bind(detail_net::Binder& b);

    int C_;
    detail_net::Conv c1_, c2_, c3_, c4_, head_;
    detail_net::Norm n1_, n2_, n3_, n4_;
};

struct Prediction {
    TensorF logits;               // [N,C,H,W]
    TensorF probs;                // softmax over channels
    std::vector<uint8_t> argmax;  // [N,H,W], ties broken toward lower class
};

Prediction seg_predict(SegModel& model, const TensorF& image, BnMode mode = BnMode::kEval);

// Per-pixel argmax over channels of [N,C,H,W]; ties toward lower index.
std::vector<uint8_t> argmax_channels(const TensorF& t);

// Class-index mask [N,H,W] expanded to C binary channels.
TensorF onehot_mask(const std::vector<uint8_t>& mask, int64_t n, int64_t c, int64_t h,
                    int64_t w);

// Raw patch energy logits of a probability/one-hot map, evaluation BN stats.
TensorF energy_map(EnergyModel& model, const TensorF& probs_or_onehot);

// Hash filters used by the episodic invariants.
uint64_t full_state_hash(std::vector<StateEntry> entries);
uint64_t param_hash(std::vector<StateEntry> entries);     // trainable only
uint64_t non_bn_param_hash(std::vector<StateEntry> entries);

}  // namespace etta
