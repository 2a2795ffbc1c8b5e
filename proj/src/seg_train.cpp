#include "etta/seg_train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "etta/adam.hpp"
#include "etta/checkpoint.hpp"
#include "etta/losses.hpp"
#include "etta/metrics.hpp"

namespace etta {

namespace {

void fisher_yates(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
}

struct Batch {
    TensorF images;               // [B,1,H,W]
    std::vector<uint8_t> masks;   // B*H*W
};

Batch assemble(const Dataset& ds, const std::vector<size_t>& idx, size_t begin, size_t end,
               double augment_p, Rng* rng) {
    const int64_t B = static_cast<int64_t>(end - begin);
    const int64_t h = ds.height(), w = ds.width();
    Batch out;
    out.images = TensorF({B, 1, h, w});
    out.masks.reserve(static_cast<size_t>(B * h * w));
    for (int64_t b = 0; b < B; ++b) {
        const Sample& base = ds.sample(idx[begin + static_cast<size_t>(b)]);
        Sample s = rng ? augment(base, augment_p, *rng) : base;
        std::copy(s.image.begin(), s.image.end(), out.images.data().begin() + b * h * w);
        out.masks.insert(out.masks.end(), s.mask.begin(), s.mask.end());
    }
    return out;
}

}  // namespace

double mean_foreground_dice(SegModel& model, const Dataset& ds, int batch) {
    if (ds.size() == 0) throw std::invalid_argument("mean_foreground_dice: empty dataset");
    const int64_t h = ds.height(), w = ds.width();
    const int C = model.out_channels();
    double acc = 0.0;
    int64_t terms = 0;
    std::vector<size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t begin = 0; begin < idx.size(); begin += static_cast<size_t>(batch)) {
        size_t end = std::min(idx.size(), begin + static_cast<size_t>(batch));
        Batch bt = assemble(ds, idx, begin, end, 0.0, nullptr);
        Prediction pred = seg_predict(model, bt.images, BnMode::kEval);
        const size_t plane = static_cast<size_t>(h * w);
        for (size_t b = 0; b < end - begin; ++b) {
            std::vector<uint8_t> pm(pred.argmax.begin() + static_cast<int64_t>(b * plane),
                                    pred.argmax.begin() + static_cast<int64_t>((b + 1) * plane));
            std::vector<uint8_t> gm(bt.masks.begin() + static_cast<int64_t>(b * plane),
                                    bt.masks.begin() + static_cast<int64_t>((b + 1) * plane));
            for (int c = 1; c < C; ++c) {
                acc += dice_score(pm, gm, static_cast<uint8_t>(c));
                ++terms;
            }
        }
    }
    return acc / static_cast<double>(terms);
}

TrainResult train_source(SegModel& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg, const std::string& ckpt_path,
                         const std::string& csv_path) {
    if (train.size() == 0) throw std::invalid_argument("train_source: empty training set");
    if (val.size() == 0) throw std::invalid_argument("train_source: empty validation set");
    if (cfg.epochs < 1 || cfg.batch < 1)
        throw std::invalid_argument("train_source: epochs and batch must be positive");

    const int64_t h = train.height(), w = train.width();
    const int C = model.out_channels();
    Rng rng(derive_seed(cfg.seed, 0x74726169ull));
    AdamF opt(model.parameters(), {cfg.lr});

    std::FILE* csv = nullptr;
    if (!csv_path.empty()) {
        csv = std::fopen(csv_path.c_str(), "wb");
        if (!csv) throw std::runtime_error(csv_path + ": cannot open for writing");
        std::fprintf(csv, "epoch,train_loss,val_dice\n");
    }

    TrainResult result;
    result.best_val_dice = -1.0;
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        fisher_yates(order, rng);
        double loss_sum = 0.0;
        int64_t steps = 0;
        for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch));
            Batch bt = assemble(train, order, begin, end, cfg.augment_p, &rng);
            const int64_t B = static_cast<int64_t>(end - begin);

            TensorF logits = model.forward(bt.images, BnMode::kTrain);
            TensorF probs = softmax_channels(logits);
            TensorF onehot = onehot_mask(bt.masks, B, C, h, w);
            TensorF loss = add(dice_loss(probs, onehot), cross_entropy_loss(logits, bt.masks));
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv) || lv < 0.0)
                throw std::runtime_error("train_source: loss left the finite non-negative range");
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += lv;
            ++steps;
        }

        EpochLog row;
        row.epoch = epoch;
        row.train_loss = loss_sum / static_cast<double>(steps);
        row.val_dice = mean_foreground_dice(model, val, cfg.batch);
        result.log.push_back(row);
        if (csv) std::fprintf(csv, "%d,%.9g,%.9g\n", row.epoch, row.train_loss, row.val_dice);

        if (row.val_dice > result.best_val_dice) {
            result.best_val_dice = row.val_dice;
            result.best_epoch = epoch;
            ckpt::save(ckpt_path, model.state());
        }
    }
    if (csv) std::fclose(csv);
    return result;
}

}  // namespace etta
