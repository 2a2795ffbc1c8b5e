#include "etta/energy_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "etta/adam.hpp"
#include "etta/losses.hpp"

namespace etta {

namespace {

// Scoped "no parameter gradients": the frozen model's forwards then build no
// graph beyond what the input itself requires.
class ParamGradOff {
public:
    explicit ParamGradOff(std::vector<TensorF> params) : params_(std::move(params)) {
        for (auto& p : params_) {
            prior_.push_back(p.requires_grad());
            p.set_requires_grad(false);
        }
    }
    ~ParamGradOff() {
        for (size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(prior_[i]);
    }

private:
    std::vector<TensorF> params_;
    std::vector<bool> prior_;
};

}  // namespace

FgsmResult fgsm_perturb(SegModel& model, const TensorF& image,
                        const std::vector<uint8_t>& mask, float delta) {
    if (delta < 0.0f) throw std::invalid_argument("fgsm_perturb: delta must be >= 0");
    if (image.rank() != 4 || image.shape()[1] != 1)
        throw std::invalid_argument("fgsm_perturb: image must be [N,1,H,W]");
    const int64_t N = image.shape()[0], H = image.shape()[2], W = image.shape()[3];
    const int C = model.out_channels();
    if (static_cast<int64_t>(mask.size()) != N * H * W)
        throw std::invalid_argument("fgsm_perturb: mask size mismatch");

    ParamGradOff freeze(model.parameters());

    TensorF x(image.shape(), image.data());
    x.set_requires_grad(true);
    TensorF probs = softmax_channels(model.forward(x, BnMode::kEval));
    TensorF onehot = onehot_mask(mask, N, C, H, W);
    TensorF loss = dice_loss(probs, onehot);
    loss.backward();
    const std::vector<float>& gx = x.grad();

    FgsmResult out;
    out.image = TensorF(image.shape());
    for (int64_t i = 0; i < image.numel(); ++i) {
        float sign = gx[static_cast<size_t>(i)] > 0.0f   ? 1.0f
                     : gx[static_cast<size_t>(i)] < 0.0f ? -1.0f
                                                         : 0.0f;
        out.image.data()[static_cast<size_t>(i)] =
            std::clamp(image.data()[static_cast<size_t>(i)] + delta * sign, 0.0f, 1.0f);
    }
    out.probs = softmax_channels(model.forward(out.image, BnMode::kEval)).detached();
    return out;
}

TensorF spatial_perturb(const TensorF& probs, const PerturbConfig& cfg, Rng& rng) {
    if (probs.rank() != 4) throw std::invalid_argument("spatial_perturb: expect [N,C,H,W]");
    const int64_t N = probs.shape()[0], C = probs.shape()[1];
    const int64_t H = probs.shape()[2], W = probs.shape()[3];
    constexpr int64_t kPatch = 16;

    TensorF out(probs.shape(), probs.data());
    const int64_t plane = H * W, volume = C * plane;
    std::vector<float> warped(static_cast<size_t>(volume));

    for (int64_t n = 0; n < N; ++n) {
        float* v = out.data().data() + n * volume;
        bool modified = false;

        if (rng.bernoulli(cfg.spatial_p)) {
            const double tx = rng.uniform(-cfg.translate_px, cfg.translate_px);
            const double ty = rng.uniform(-cfg.translate_px, cfg.translate_px);
            const double rad = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg) *
                               std::numbers::pi / 180.0;
            const double sc = rng.uniform(cfg.scale_lo, cfg.scale_hi);
            const double ct = std::cos(rad), st = std::sin(rad);
            const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    // invert dest = R*s*(src-c) + c + t
                    const double dx = (x - cx - tx) / sc, dy = (y - cy - ty) / sc;
                    const double sx = cx + ct * dx + st * dy;
                    const double sy = cy - st * dx + ct * dy;
                    const bool in = sx >= 0.0 && sy >= 0.0 && sx <= W - 1.0 && sy <= H - 1.0;
                    for (int64_t c = 0; c < C; ++c) {
                        float& dst = warped[static_cast<size_t>(c * plane + y * W + x)];
                        if (!in) {
                            dst = c == 0 ? 1.0f : 0.0f;  // background one-hot
                            continue;
                        }
                        const int64_t x0 = static_cast<int64_t>(std::floor(sx));
                        const int64_t y0 = static_cast<int64_t>(std::floor(sy));
                        const double ax = sx - x0, ay = sy - y0;
                        auto at = [&](int64_t yy, int64_t xx) -> double {
                            yy = std::clamp<int64_t>(yy, 0, H - 1);
                            xx = std::clamp<int64_t>(xx, 0, W - 1);
                            return v[c * plane + yy * W + xx];
                        };
                        dst = static_cast<float>(
                            (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
                            ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1)));
                    }
                }
            std::copy(warped.begin(), warped.end(), v);
            modified = true;
        }

        if (cfg.pixel_noise_sigma > 0.0) {
            for (int64_t i = 0; i < volume; ++i)
                v[i] = std::clamp(
                    v[i] + static_cast<float>(cfg.pixel_noise_sigma * rng.normal()), 0.0f,
                    1.0f);
            modified = true;
        }

        if (cfg.patch_dropout_rate > 0.0) {
            for (int64_t py = 0; py < H; py += kPatch)
                for (int64_t px = 0; px < W; px += kPatch) {
                    if (!rng.bernoulli(cfg.patch_dropout_rate)) continue;
                    for (int64_t y = py; y < std::min(py + kPatch, H); ++y)
                        for (int64_t x = px; x < std::min(px + kPatch, W); ++x)
                            for (int64_t c = 0; c < C; ++c)
                                v[c * plane + y * W + x] = c == 0 ? 1.0f : 0.0f;
                    modified = true;
                }
        }

        if (modified) {
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    double sum = 0.0;
                    for (int64_t c = 0; c < C; ++c) sum += v[c * plane + y * W + x];
                    if (sum < 1e-8) {
                        for (int64_t c = 0; c < C; ++c)
                            v[c * plane + y * W + x] = c == 0 ? 1.0f : 0.0f;
                    } else {
                        for (int64_t c = 0; c < C; ++c)
                            v[c * plane + y * W + x] =
                                static_cast<float>(v[c * plane + y * W + x] / sum);
                    }
                }
        }
    }
    return out;
}

double PatchLabelGrid::pos_fraction() const {
    if (y.empty()) return 0.0;
    return static_cast<double>(std::count(y.begin(), y.end(), uint8_t{1})) /
           static_cast<double>(y.size());
}

std::vector<float> PatchLabelGrid::targets() const {
    std::vector<float> t(y.size());
    for (size_t i = 0; i < y.size(); ++i) t[i] = static_cast<float>(y[i]);
    return t;
}

PatchLabelGrid curate_labels(const TensorF& probs, const std::vector<uint8_t>& mask,
                             int tau, int patch) {
    if (probs.rank() != 4) throw std::invalid_argument("curate_labels: expect [N,C,H,W]");
    const int64_t N = probs.shape()[0], H = probs.shape()[2], W = probs.shape()[3];
    if (H % patch != 0 || W % patch != 0)
        throw std::invalid_argument("curate_labels: H and W must be divisible by the patch size");
    if (static_cast<int64_t>(mask.size()) != N * H * W)
        throw std::invalid_argument("curate_labels: mask size mismatch");

    std::vector<uint8_t> pred = argmax_channels(probs);
    PatchLabelGrid grid;
    grid.n = N;
    grid.kh = H / patch;
    grid.kw = W / patch;
    grid.tau = tau;
    grid.patch = patch;
    grid.y.resize(static_cast<size_t>(N * grid.kh * grid.kw));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t py = 0; py < grid.kh; ++py)
            for (int64_t px = 0; px < grid.kw; ++px) {
                int d = 0;
                for (int64_t y = py * patch; y < (py + 1) * patch; ++y)
                    for (int64_t x = px * patch; x < (px + 1) * patch; ++x)
                        d += pred[static_cast<size_t>((n * H + y) * W + x)] !=
                             mask[static_cast<size_t>((n * H + y) * W + x)];
                grid.y[static_cast<size_t>((n * grid.kh + py) * grid.kw + px)] =
                    d < tau ? 0 : 1;
            }
    return grid;
}

TensorF energy_bce_loss(const TensorF& energy_logits, const PatchLabelGrid& labels) {
    if (energy_logits.rank() != 4 || energy_logits.shape()[1] != 1)
        throw std::invalid_argument("energy_bce_loss: expect [N,1,K,K] logits");
    if (energy_logits.shape()[0] != labels.n || energy_logits.shape()[2] != labels.kh ||
        energy_logits.shape()[3] != labels.kw)
        throw std::invalid_argument("energy_bce_loss: logit/label grid shape mismatch");
    return bce_with_logits(energy_logits, labels.targets());
}

double lr_schedule(double base, int64_t step, int64_t warmup, int64_t total) {
    if (step < 1) throw std::invalid_argument("lr_schedule: step is 1-based");
    if (warmup > 0 && step <= warmup)
        return base * static_cast<double>(step) / static_cast<double>(warmup);
    if (total <= warmup) return base;
    const double u = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(u, 1.0)));
}

namespace {

struct CuratedBatch {
    TensorF inputs;  // [2B,C,H,W]: perturbed predictions then GT one-hots
    PatchLabelGrid labels;
};

// Shared by training and held-out evaluation so accuracy is measured on the
// same input distribution the discriminator was fitted to.
CuratedBatch make_energy_batch(SegModel& f, const Dataset& ds,
                               const std::vector<size_t>& idx, size_t begin, size_t end,
                               const EnergyTrainConfig& cfg, Rng& rng) {
    const int64_t B = static_cast<int64_t>(end - begin);
    const int64_t h = ds.height(), w = ds.width();
    const int C = f.out_channels();

    TensorF images({B, 1, h, w});
    std::vector<uint8_t> masks;
    masks.reserve(static_cast<size_t>(B * h * w));
    for (int64_t b = 0; b < B; ++b) {
        const Sample& s = ds.sample(idx[begin + static_cast<size_t>(b)]);
        std::copy(s.image.begin(), s.image.end(), images.data().begin() + b * h * w);
        masks.insert(masks.end(), s.mask.begin(), s.mask.end());
    }

    TensorF preds = seg_predict(f, images, BnMode::kEval).probs.detached();

    // attack a random half of the batch
    std::vector<int64_t> order(static_cast<size_t>(B));
    std::iota(order.begin(), order.end(), int64_t{0});
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    const int64_t nadv = B / 2;
    if (nadv > 0 && cfg.perturb.delta > 0.0f) {
        TensorF sub({nadv, 1, h, w});
        std::vector<uint8_t> sub_masks(static_cast<size_t>(nadv * h * w));
        for (int64_t j = 0; j < nadv; ++j) {
            const int64_t b = order[static_cast<size_t>(j)];
            std::copy(images.data().begin() + b * h * w, images.data().begin() + (b + 1) * h * w,
                      sub.data().begin() + j * h * w);
            std::copy(masks.begin() + b * h * w, masks.begin() + (b + 1) * h * w,
                      sub_masks.begin() + j * h * w);
        }
        FgsmResult adv = fgsm_perturb(f, sub, sub_masks, cfg.perturb.delta);
        const int64_t cvol = static_cast<int64_t>(C) * h * w;
        for (int64_t j = 0; j < nadv; ++j) {
            const int64_t b = order[static_cast<size_t>(j)];
            std::copy(adv.probs.data().begin() + j * cvol, adv.probs.data().begin() + (j + 1) * cvol,
                      preds.data().begin() + b * cvol);
        }
    }

    TensorF corrupted = spatial_perturb(preds, cfg.perturb, rng);

    CuratedBatch out;
    out.inputs = TensorF({2 * B, C, h, w});
    const int64_t cvol = static_cast<int64_t>(C) * h * w;
    std::copy(corrupted.data().begin(), corrupted.data().end(), out.inputs.data().begin());
    TensorF onehot = onehot_mask(masks, B, C, h, w);
    std::copy(onehot.data().begin(), onehot.data().end(),
              out.inputs.data().begin() + B * cvol);

    std::vector<uint8_t> both_masks = masks;
    both_masks.insert(both_masks.end(), masks.begin(), masks.end());
    out.labels = curate_labels(out.inputs, both_masks, cfg.tau, cfg.patch);
    return out;
}

double patch_accuracy(const TensorF& logits, const PatchLabelGrid& labels) {
    int64_t hits = 0;
    for (size_t i = 0; i < labels.y.size(); ++i)
        hits += (logits.data()[i] > 0.0f) == (labels.y[i] == 1);
    return static_cast<double>(hits) / static_cast<double>(labels.y.size());
}

}  // namespace

EnergyTrainResult train_energy(EnergyModel& g, SegModel& f, const Dataset& train,
                               const EnergyTrainConfig& cfg, const std::string& csv_path) {
    if (train.size() == 0) throw std::invalid_argument("train_energy: empty training set");
    if (cfg.epochs < 1 || cfg.batch < 1)
        throw std::invalid_argument("train_energy: epochs and batch must be positive");
    if (g.in_channels() != f.out_channels())
        throw std::invalid_argument("train_energy: discriminator channels do not match f");

    ParamGradOff freeze(f.parameters());
    const uint64_t f_hash = param_hash(f.state());

    Rng rng(derive_seed(cfg.seed, 0x656e6572ull));
    AdamF opt(g.parameters(), {cfg.lr});

    std::FILE* csv = nullptr;
    if (!csv_path.empty()) {
        csv = std::fopen(csv_path.c_str(), "wb");
        if (!csv) throw std::runtime_error(csv_path + ": cannot open for writing");
        std::fprintf(csv, "step,loss,patch_accuracy,pos_fraction\n");
    }

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(train.size()) + cfg.batch - 1) / cfg.batch;
    const int64_t total_steps = steps_per_epoch * cfg.epochs;

    EnergyTrainResult result;
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
        double pos_sum = 0.0;
        int64_t epoch_steps = 0;
        for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch));
            CuratedBatch batch = make_energy_batch(f, train, order, begin, end, cfg, rng);

            ++step;
            opt.set_lr(static_cast<float>(
                lr_schedule(static_cast<double>(cfg.lr), step, cfg.warmup_steps, total_steps)));
            TensorF logits = g.forward(batch.inputs, BnMode::kTrain);
            TensorF loss = energy_bce_loss(logits, batch.labels);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw std::runtime_error("train_energy: loss diverged");
            opt.zero_grad();
            loss.backward();
            opt.step();

            result.final_loss = lv;
            result.final_patch_accuracy = patch_accuracy(logits.detached(), batch.labels);
            const double pf = batch.labels.pos_fraction();
            pos_sum += pf;
            ++epoch_steps;
            if (csv)
                std::fprintf(csv, "%lld,%.9g,%.9g,%.9g\n", static_cast<long long>(step), lv,
                             result.final_patch_accuracy, pf);
        }
        result.last_epoch_pos_fraction = pos_sum / static_cast<double>(epoch_steps);
        if (result.last_epoch_pos_fraction < 0.01 || result.last_epoch_pos_fraction > 0.99) {
            if (csv) std::fclose(csv);
            std::fprintf(stderr,
                         "train_energy: degenerate label balance (%.4f positive) in epoch %d\n",
                         result.last_epoch_pos_fraction, epoch);
            throw std::runtime_error("train_energy: curated labels are degenerate");
        }
        if (param_hash(f.state()) != f_hash)
            throw std::runtime_error("train_energy: frozen segmentation model changed");
    }
    result.steps = step;
    if (csv) std::fclose(csv);
    if (param_hash(f.state()) != f_hash)
        throw std::runtime_error("train_energy: frozen segmentation model changed");
    return result;
}

EnergyAccuracy eval_energy_accuracy(EnergyModel& g, SegModel& f, const Dataset& ds,
                                    const EnergyTrainConfig& cfg) {
    if (ds.size() == 0) throw std::invalid_argument("eval_energy_accuracy: empty dataset");
    ParamGradOff freeze_f(f.parameters());
    ParamGradOff freeze_g(g.parameters());

    Rng rng(derive_seed(cfg.seed, 0x6576616cull));
    std::vector<size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), size_t{0});

    std::vector<float> logits;
    std::vector<uint8_t> labels;
    for (size_t begin = 0; begin < idx.size(); begin += static_cast<size_t>(cfg.batch)) {
        size_t end = std::min(idx.size(), begin + static_cast<size_t>(cfg.batch));
        CuratedBatch batch = make_energy_batch(f, ds, idx, begin, end, cfg, rng);
        TensorF e = g.forward(batch.inputs, BnMode::kEval);
        logits.insert(logits.end(), e.data().begin(), e.data().end());
        labels.insert(labels.end(), batch.labels.y.begin(), batch.labels.y.end());
    }
    return energy_accuracy(logits, labels);
}

}  // namespace etta
