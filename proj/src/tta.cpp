#include "etta/tta.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>

#include "etta/adam.hpp"
#include "etta/losses.hpp"
#include "etta/metrics.hpp"
#include "etta/tensor_io.hpp"

namespace etta {

AdaptMethod adapt_method_from_string(const std::string& name) {
    if (name == "energy") return AdaptMethod::kEnergy;
    if (name == "tent") return AdaptMethod::kTent;
    if (name == "none") return AdaptMethod::kNone;
    throw std::invalid_argument("unknown adaptation method '" + name +
                                "' (energy|tent|none)");
}

std::string to_string(AdaptMethod m) {
    switch (m) {
        case AdaptMethod::kEnergy: return "energy";
        case AdaptMethod::kTent: return "tent";
        case AdaptMethod::kNone: return "none";
    }
    throw std::logic_error("invalid AdaptMethod");
}

Snapshot::Snapshot(std::vector<StateEntry> entries) : entries_(std::move(entries)) {
    saved_.reserve(entries_.size());
    for (const StateEntry& e : entries_) saved_.push_back(*e.data);
}

void Snapshot::restore() const {
    for (size_t i = 0; i < entries_.size(); ++i) *entries_[i].data = saved_[i];
}

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Flip requires_grad off for the given tensors for the current scope.
class GradOff {
public:
    explicit GradOff(std::vector<TensorF> params) : params_(std::move(params)) {
        for (auto& p : params_) {
            prior_.push_back(p.requires_grad());
            p.set_requires_grad(false);
        }
    }
    ~GradOff() {
        for (size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(prior_[i]);
    }

private:
    std::vector<TensorF> params_;
    std::vector<bool> prior_;
};

std::vector<TensorF> non_bn_params(SegModel& f) {
    std::set<std::string> bn;
    for (const std::string& n : f.bn_param_names()) bn.insert(n);
    std::vector<TensorF> out;
    for (auto& [name, p] : f.named_params())
        if (!bn.count(name)) out.push_back(p);
    return out;
}

bool grad_is_clear(const TensorF& p) {
    if (!p.has_grad()) return true;
    for (float v : p.grad())
        if (v != 0.0f) return false;
    return true;
}

BatchAdaptResult adapt_core(SegModel& f, EnergyModel* g, const TensorF& images,
                            const AdaptConfig& cfg, bool tent_objective) {
    if (cfg.iters < 1) throw std::invalid_argument("adapt: iters must be >= 1");
    if (!tent_objective && !g)
        throw std::invalid_argument("adapt: the energy objective needs an energy model");
    if (images.rank() != 4) throw std::invalid_argument("adapt: images must be [N,1,H,W]");

    std::vector<TensorF> frozen = non_bn_params(f);
    GradOff freeze_f(frozen);
    std::optional<GradOff> freeze_g;
    uint64_t g_hash = 0;
    if (g) {
        freeze_g.emplace(g->parameters());
        g_hash = param_hash(g->state());
    }
    // clear stale gradient residue so the leak check below is meaningful
    for (auto& [name, p] : f.named_params())
        if (p.has_grad()) p.zero_grad();

    Snapshot snap(f.state());
    const uint64_t non_bn0 = non_bn_param_hash(f.state());
    AdamF opt(f.bn_parameters(), {cfg.lr});

    BatchAdaptResult out;
    for (int it = 0; it <= cfg.iters; ++it) {
        TensorF logits = f.forward(images, BnMode::kAdapt);
        TensorF probs = softmax_channels(logits);
        TensorF energy;
        if (g) {
            energy = g->forward(tent_objective ? probs.detached() : probs, BnMode::kEval);
            const std::vector<float>& ev = energy.data();
            std::vector<float> sig(ev.size());
            double mean = 0.0;
            for (size_t i = 0; i < ev.size(); ++i) {
                sig[i] = static_cast<float>(stable_sigmoid(ev[i]));
                mean += sig[i];
            }
            out.ood_trace.push_back(mean / static_cast<double>(ev.size()));
            out.sigma_maps.push_back(std::move(sig));
            out.map_n = energy.shape()[0];
            out.map_kh = energy.shape()[2];
            out.map_kw = energy.shape()[3];
        } else {
            out.ood_trace.push_back(std::numeric_limits<double>::quiet_NaN());
        }
        if (it == cfg.iters) {
            out.probs = probs.detached();
            break;
        }

        TensorF loss;
        if (tent_objective) {
            loss = softmax_entropy_mean(logits);
        } else {
            std::vector<float> target(static_cast<size_t>(energy.numel()), 0.0f);
            loss = bce_with_logits(energy, target);
        }
        opt.zero_grad();
        loss.backward();
        for (const TensorF& p : frozen)
            if (!grad_is_clear(p))
                throw std::runtime_error("adapt: gradient reached a non-BatchNorm parameter");
        opt.step();
        if (non_bn_param_hash(f.state()) != non_bn0)
            throw std::runtime_error("adapt: non-BatchNorm parameters changed");
    }

    if (g && param_hash(g->state()) != g_hash)
        throw std::runtime_error("adapt: energy model changed during adaptation");
    if (cfg.restore) snap.restore();
    return out;
}

}  // namespace

BatchAdaptResult energy_adapt_batch(SegModel& f, EnergyModel& g, const TensorF& images,
                                    const AdaptConfig& cfg) {
    return adapt_core(f, &g, images, cfg, /*tent_objective=*/false);
}

BatchAdaptResult tent_adapt_batch(SegModel& f, EnergyModel* g, const TensorF& images,
                                  const AdaptConfig& cfg) {
    return adapt_core(f, g, images, cfg, /*tent_objective=*/true);
}

namespace {

struct ClassMetrics {
    double dice_c1 = 0, dice_c2 = 0, asd = 0;       // batch means
    double dice_terms_sum = 0, asd_terms_sum = 0;   // per sample-class sums
    int64_t terms = 0;
};

ClassMetrics score_batch(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                         int64_t n, int64_t h, int64_t w, int classes) {
    ClassMetrics m;
    const size_t plane = static_cast<size_t>(h * w);
    std::vector<double> dice_c(static_cast<size_t>(classes), 0.0);
    for (int64_t b = 0; b < n; ++b) {
        std::vector<uint8_t> pm(pred.begin() + static_cast<int64_t>(b * plane),
                                pred.begin() + static_cast<int64_t>((b + 1) * plane));
        std::vector<uint8_t> gm(gt.begin() + static_cast<int64_t>(b * plane),
                                gt.begin() + static_cast<int64_t>((b + 1) * plane));
        for (int c = 1; c < classes; ++c) {
            const double d = dice_score(pm, gm, static_cast<uint8_t>(c));
            const double a = average_surface_distance(pm, gm, h, w, static_cast<uint8_t>(c));
            dice_c[static_cast<size_t>(c)] += d;
            m.dice_terms_sum += d;
            m.asd_terms_sum += a;
            m.asd += a;
            ++m.terms;
        }
    }
    m.dice_c1 = dice_c.size() > 1 ? dice_c[1] / static_cast<double>(n) : 0.0;
    m.dice_c2 = dice_c.size() > 2 ? dice_c[2] / static_cast<double>(n) : 0.0;
    m.asd /= static_cast<double>(m.terms);
    return m;
}

}  // namespace

StreamSummary run_stream(SegModel& f, EnergyModel* g, const Dataset& ds,
                         const AdaptConfig& cfg, const std::string& csv_path,
                         const std::string& maps_dir) {
    if (cfg.batch < 1) throw std::invalid_argument("run_stream: batch must be >= 1");
    if (cfg.method == AdaptMethod::kEnergy && !g)
        throw std::invalid_argument("run_stream: method=energy requires an energy model");
    const int classes = f.out_channels();
    const int64_t h = ds.height(), w = ds.width();

    const uint64_t full0 = full_state_hash(f.state());
    const uint64_t non_bn0 = non_bn_param_hash(f.state());
    const uint64_t g0 = g ? param_hash(g->state()) : 0;

    std::FILE* csv = nullptr;
    if (!csv_path.empty()) {
        csv = std::fopen(csv_path.c_str(), "wb");
        if (!csv) throw std::runtime_error(csv_path + ": cannot open for writing");
        std::fprintf(csv,
                     "batch_idx,method,pre_dice_c1,pre_dice_c2,post_dice_c1,post_dice_c2,"
                     "pre_asd,post_asd,energy_0,energy_final,ms\n");
    }
    if (!maps_dir.empty()) std::filesystem::create_directories(maps_dir);

    StreamSummary summary;
    double pre_dice_sum = 0, post_dice_sum = 0, pre_asd_sum = 0, post_asd_sum = 0;
    int64_t terms = 0, traced_batches = 0, decreased = 0;

    int batch_idx = 0;
    for (size_t begin = 0; begin < ds.size(); begin += static_cast<size_t>(cfg.batch),
                ++batch_idx) {
        const size_t end = std::min(ds.size(), begin + static_cast<size_t>(cfg.batch));
        std::vector<size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        TensorF images = ds.images(idx);
        std::vector<uint8_t> masks = ds.masks(idx);
        const int64_t B = static_cast<int64_t>(idx.size());

        Prediction pre = seg_predict(f, images, BnMode::kEval);

        const auto t0 = std::chrono::steady_clock::now();
        BatchAdaptResult ar;
        switch (cfg.method) {
            case AdaptMethod::kEnergy:
                ar = energy_adapt_batch(f, *g, images, cfg);
                break;
            case AdaptMethod::kTent:
                ar = tent_adapt_batch(f, g, images, cfg);
                break;
            case AdaptMethod::kNone:
                ar.probs = pre.probs;
                ar.ood_trace.assign(static_cast<size_t>(cfg.iters) + 1,
                                    std::numeric_limits<double>::quiet_NaN());
                break;
        }
        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();

        std::vector<uint8_t> post_argmax = argmax_channels(ar.probs);
        ClassMetrics mpre = score_batch(pre.argmax, masks, B, h, w, classes);
        ClassMetrics mpost = score_batch(post_argmax, masks, B, h, w, classes);

        if (cfg.restore && full_state_hash(f.state()) != full0)
            throw std::runtime_error("run_stream: weight restore failed after batch " +
                                     std::to_string(batch_idx));
        if (non_bn_param_hash(f.state()) != non_bn0)
            throw std::runtime_error("run_stream: non-BatchNorm parameters drifted");
        if (g && param_hash(g->state()) != g0)
            throw std::runtime_error("run_stream: energy model drifted");

        if (!maps_dir.empty() && !ar.sigma_maps.empty()) {
            const int64_t ph = h / ar.map_kh, pw = w / ar.map_kw;
            for (size_t it = 0; it < ar.sigma_maps.size(); ++it) {
                for (int64_t b = 0; b < ar.map_n; ++b) {
                    std::vector<uint8_t> img(static_cast<size_t>(h * w));
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t x = 0; x < w; ++x) {
                            const float s =
                                ar.sigma_maps[it][static_cast<size_t>(
                                    (b * ar.map_kh + y / ph) * ar.map_kw + x / pw)];
                            img[static_cast<size_t>(y * w + x)] = static_cast<uint8_t>(
                                std::lround(std::clamp(s, 0.0f, 1.0f) * 255.0f));
                        }
                    char name[64];
                    std::snprintf(name, sizeof(name), "b%04d_s%02lld_i%02zu.pgm", batch_idx,
                                  static_cast<long long>(b), it);
                    io::save_pgm((std::filesystem::path(maps_dir) / name).string(), img, h, w);
                }
            }
        }

        BatchReport r;
        r.batch_idx = batch_idx;
        r.method = to_string(cfg.method);
        r.pre_dice_c1 = mpre.dice_c1;
        r.pre_dice_c2 = mpre.dice_c2;
        r.post_dice_c1 = mpost.dice_c1;
        r.post_dice_c2 = mpost.dice_c2;
        r.pre_asd = mpre.asd;
        r.post_asd = mpost.asd;
        r.energy_0 = ar.ood_trace.front();
        r.energy_final = ar.ood_trace.back();
        r.ms = ms;
        if (csv)
            std::fprintf(csv, "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n",
                         r.batch_idx, r.method.c_str(), r.pre_dice_c1, r.pre_dice_c2,
                         r.post_dice_c1, r.post_dice_c2, r.pre_asd, r.post_asd, r.energy_0,
                         r.energy_final, r.ms);
        summary.batches.push_back(std::move(r));

        pre_dice_sum += mpre.dice_terms_sum;
        post_dice_sum += mpost.dice_terms_sum;
        pre_asd_sum += mpre.asd_terms_sum;
        post_asd_sum += mpost.asd_terms_sum;
        terms += mpre.terms;
        if (!std::isnan(ar.ood_trace.front())) {
            ++traced_batches;
            decreased += ar.ood_trace.back() < ar.ood_trace.front();
        }
    }
    if (csv) std::fclose(csv);

    summary.pre_dice = pre_dice_sum / static_cast<double>(terms);
    summary.post_dice = post_dice_sum / static_cast<double>(terms);
    summary.pre_asd = pre_asd_sum / static_cast<double>(terms);
    summary.post_asd = post_asd_sum / static_cast<double>(terms);
    summary.frac_energy_decreased =
        traced_batches ? static_cast<double>(decreased) / static_cast<double>(traced_batches)
                       : 0.0;
    return summary;
}

}  // namespace etta
