#include "etta/nets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace etta {

uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t hash_entries(const std::vector<StateEntry>& entries) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : entries) {
        h = fnv1a64(e.name.data(), e.name.size(), h);
        h = fnv1a64(e.data->data(), e.data->size() * sizeof(float), h);
    }
    return h;
}

namespace detail_net {

TensorF Conv::apply(const TensorF& x) const { return conv2d(x, w, b, stride, padding); }

TensorF Norm::apply(const TensorF& x, BnMode mode) {
    return batch_norm(x, gamma, beta, stats, mode);
}

void Binder::conv(const std::string& prefix, Conv& c) {
    params.emplace_back(prefix + ".w", c.w);
    params.emplace_back(prefix + ".b", c.b);
    entries.push_back({prefix + ".w", c.w.shape(), &c.w.data(), true, false});
    entries.push_back({prefix + ".b", c.b.shape(), &c.b.data(), true, false});
}

void Binder::norm(const std::string& prefix, Norm& n) {
    const int64_t C = n.gamma.numel();
    params.emplace_back(prefix + ".gamma", n.gamma);
    params.emplace_back(prefix + ".beta", n.beta);
    entries.push_back({prefix + ".gamma", {C}, &n.gamma.data(), true, true});
    entries.push_back({prefix + ".beta", {C}, &n.beta.data(), true, true});
    entries.push_back({prefix + ".running_mean", {C}, &n.stats.mean, false, true});
    entries.push_back({prefix + ".running_var", {C}, &n.stats.var, false, true});
}

Conv make_conv(Rng& rng, int64_t cin, int64_t cout, int64_t k, int stride, int padding) {
    Conv c;
    const float bound = std::sqrt(6.0f / static_cast<float>(cin * k * k));
    std::vector<float> w(static_cast<size_t>(cout * cin * k * k));
    for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
    c.w = TensorF({cout, cin, k, k}, std::move(w), true);
    c.b = TensorF({cout}, std::vector<float>(static_cast<size_t>(cout), 0.0f), true);
    c.stride = stride;
    c.padding = padding;
    return c;
}

Norm make_norm(int64_t channels) {
    Norm n;
    n.gamma = TensorF({channels}, std::vector<float>(static_cast<size_t>(channels), 1.0f), true);
    n.beta = TensorF({channels}, std::vector<float>(static_cast<size_t>(channels), 0.0f), true);
    n.stats = BnStats<float>(channels);
    return n;
}

}  // namespace detail_net

using detail_net::Binder;

// ---- SegModel ----

TensorF SegModel::Block::forward(const TensorF& x, BnMode mode) {
    return relu(n2.apply(c2.apply(relu(n1.apply(c1.apply(x), mode))), mode));
}

SegModel::Block SegModel::make_block(Rng& rng, int64_t cin, int64_t cout) {
    Block b;
    b.c1 = detail_net::make_conv(rng, cin, cout, 3, 1, 1);
    b.n1 = detail_net::make_norm(cout);
    b.c2 = detail_net::make_conv(rng, cout, cout, 3, 1, 1);
    b.n2 = detail_net::make_norm(cout);
    return b;
}

SegModel::SegModel(int out_channels, int base_channels, uint64_t seed) : C_(out_channels) {
    if (out_channels < 2) throw std::invalid_argument("SegModel: out_channels must be >= 2");
    const int64_t b = base_channels;
    Rng rng(derive_seed(seed, 0x5345474dull));
    enc1_ = make_block(rng, 1, b);
    enc2_ = make_block(rng, b, 2 * b);
    enc3_ = make_block(rng, 2 * b, 4 * b);
    bottom_ = make_block(rng, 4 * b, 8 * b);
    dec3_ = make_block(rng, 8 * b + 4 * b, 4 * b);
    dec2_ = make_block(rng, 4 * b + 2 * b, 2 * b);
    dec1_ = make_block(rng, 2 * b + b, b);
    head_ = detail_net::make_conv(rng, b, out_channels, 1, 1, 0);
}

TensorF SegModel::forward(const TensorF& x, BnMode mode) {
    if (x.rank() != 4 || x.dim(1) != 1)
        throw std::invalid_argument("SegModel: expected [N,1,H,W], got " + shape_str(x.shape()));
    if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
        throw std::invalid_argument("SegModel: spatial dims must be divisible by 8, got " +
                                    shape_str(x.shape()));
    TensorF e1 = enc1_.forward(x, mode);
    TensorF e2 = enc2_.forward(maxpool2x2(e1), mode);
    TensorF e3 = enc3_.forward(maxpool2x2(e2), mode);
    TensorF bm = bottom_.forward(maxpool2x2(e3), mode);
    TensorF d3 = dec3_.forward(concat_channels(upsample_nearest2x(bm), e3), mode);
    TensorF d2 = dec2_.forward(concat_channels(upsample_nearest2x(d3), e2), mode);
    TensorF d1 = dec1_.forward(concat_channels(upsample_nearest2x(d2), e1), mode);
    return head_.apply(d1);
}

void SegModel::bind(Binder& b) {
    const std::pair<const char*, Block*> blocks[] = {
        {"enc1", &enc1_}, {"enc2", &enc2_}, {"enc3", &enc3_},   {"bottom", &bottom_},
        {"dec3", &dec3_}, {"dec2", &dec2_}, {"dec1", &dec1_}};
    for (auto [name, blk] : blocks) {
        std::string p(name);
        b.conv(p + ".c1", blk->c1);
        b.norm(p + ".n1", blk->n1);
        b.conv(p + ".c2", blk->c2);
        b.norm(p + ".n2", blk->n2);
    }
    b.conv("head", head_);
}

std::vector<std::pair<std::string, TensorF>> SegModel::named_params() {
    Binder b;
    bind(b);
    return std::move(b.params);
}

std::vector<TensorF> SegModel::parameters() {
    std::vector<TensorF> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

std::vector<TensorF> SegModel::bn_parameters() {
    Binder b;
    bind(b);
    std::vector<TensorF> out;
    for (size_t i = 0; i < b.entries.size(); ++i) {
        const auto& e = b.entries[i];
        if (!(e.is_param && e.is_bn)) continue;
        for (auto& [name, t] : b.params)
            if (name == e.name) out.push_back(t);
    }
    return out;
}

std::vector<std::string> SegModel::bn_param_names() {
    Binder b;
    bind(b);
    std::vector<std::string> out;
    for (const auto& e : b.entries)
        if (e.is_param && e.is_bn) out.push_back(e.name);
    return out;
}

std::vector<StateEntry> SegModel::state() {
    Binder b;
    bind(b);
    return std::move(b.entries);
}

int64_t SegModel::param_count() {
    int64_t n = 0;
    for (auto& [name, t] : named_params()) n += t.numel();
    return n;
}

// ---- EnergyModel ----

EnergyModel::EnergyModel(int in_channels, uint64_t seed) : C_(in_channels) {
    if (in_channels < 1) throw std::invalid_argument("EnergyModel: in_channels must be >= 1");
    Rng rng(derive_seed(seed, 0x454e4559ull));
    c1_ = detail_net::make_conv(rng, in_channels, 32, 5, 2, 2);
    n1_ = detail_net::make_norm(32);
    c2_ = detail_net::make_conv(rng, 32, 64, 5, 2, 2);
    n2_ = detail_net::make_norm(64);
    c3_ = detail_net::make_conv(rng, 64, 128, 5, 2, 2);
    n3_ = detail_net::make_norm(128);
    c4_ = detail_net::make_conv(rng, 128, 256, 5, 2, 2);
    n4_ = detail_net::make_norm(256);
    head_ = detail_net::make_conv(rng, 256, 1, 1, 1, 0);
}

TensorF EnergyModel::forward(const TensorF& x, BnMode mode) {
    if (x.rank() != 4 || x.dim(1) != C_)
        throw std::invalid_argument("EnergyModel: expected [N," + std::to_string(C_) +
                                    ",H,W], got " + shape_str(x.shape()));
    if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0)
        throw std::invalid_argument("EnergyModel: spatial dims must be divisible by 16, got " +
                                    shape_str(x.shape()));
    // activation before normalization, in layer order
    TensorF h = n1_.apply(leaky_relu(c1_.apply(x), 0.2f), mode);
    h = n2_.apply(leaky_relu(c2_.apply(h), 0.2f), mode);
    h = n3_.apply(leaky_relu(c3_.apply(h), 0.2f), mode);
    h = n4_.apply(leaky_relu(c4_.apply(h), 0.2f), mode);
    return head_.apply(h);
}

void EnergyModel::bind(Binder& b) {
    b.conv("l1.conv", c1_);
    b.norm("l1.bn", n1_);
    b.conv("l2.conv", c2_);
    b.norm("l2.bn", n2_);
    b.conv("l3.conv", c3_);
    b.norm("l3.bn", n3_);
    b.conv("l4.conv", c4_);
    b.norm("l4.bn", n4_);
    b.conv("head", head_);
}

std::vector<std::pair<std::string, TensorF>> EnergyModel::named_params() {
    Binder b;
    bind(b);
    return std::move(b.params);
}

std::vector<TensorF> EnergyModel::parameters() {
    std::vector<TensorF> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

std::vector<StateEntry> EnergyModel::state() {
    Binder b;
    bind(b);
    return std::move(b.entries);
}

int64_t EnergyModel::param_count() {
    int64_t n = 0;
    for (auto& [name, t] : named_params()) n += t.numel();
    return n;
}

// ---- prediction helpers ----

std::vector<uint8_t> argmax_channels(const TensorF& t) {
    if (t.rank() != 4)
        throw std::invalid_argument("argmax_channels: expected [N,C,H,W], got " +
                                    shape_str(t.shape()));
    const int64_t N = t.dim(0), C = t.dim(1), hw = t.dim(2) * t.dim(3);
    std::vector<uint8_t> out(static_cast<size_t>(N * hw));
    const float* d = t.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < hw; ++i) {
            int best = 0;
            float bv = d[n * C * hw + i];
            for (int64_t c = 1; c < C; ++c) {
                float v = d[(n * C + c) * hw + i];
                if (v > bv) {
                    bv = v;
                    best = static_cast<int>(c);
                }
            }
            out[n * hw + i] = static_cast<uint8_t>(best);
        }
    return out;
}

Prediction seg_predict(SegModel& model, const TensorF& image, BnMode mode) {
    Prediction p;
    p.logits = model.forward(image, mode);
    p.probs = softmax_channels(p.logits);
    p.argmax = argmax_channels(p.probs);
    return p;
}

TensorF onehot_mask(const std::vector<uint8_t>& mask, int64_t n, int64_t c, int64_t h,
                    int64_t w) {
    if (static_cast<int64_t>(mask.size()) != n * h * w)
        throw std::invalid_argument("onehot_mask: mask size does not match [N,H,W]");
    TensorF out({n, c, h, w});
    const int64_t hw = h * w;
    for (int64_t i = 0; i < n * hw; ++i) {
        uint8_t cls = mask[i];
        if (cls >= c)
            throw std::invalid_argument("onehot_mask: class " + std::to_string(cls) +
                                        " out of range, C=" + std::to_string(c));
        int64_t s = i / hw, pix = i % hw;
        out.data()[(s * c + cls) * hw + pix] = 1.0f;
    }
    return out;
}

TensorF energy_map(EnergyModel& model, const TensorF& probs_or_onehot) {
    return model.forward(probs_or_onehot, BnMode::kEval);
}

uint64_t full_state_hash(std::vector<StateEntry> entries) { return hash_entries(entries); }

uint64_t param_hash(std::vector<StateEntry> entries) {
    std::vector<StateEntry> sel;
    for (auto& e : entries)
        if (e.is_param) sel.push_back(e);
    return hash_entries(sel);
}

uint64_t non_bn_param_hash(std::vector<StateEntry> entries) {
    std::vector<StateEntry> sel;
    for (auto& e : entries)
        if (e.is_param && !e.is_bn) sel.push_back(e);
    return hash_entries(sel);
}

}  // namespace etta
