#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etta/dataset.hpp"
#include "etta/nets.hpp"

namespace etta {

struct TrainConfig {
    int epochs = 30;
    int batch = 8;
    float lr = 1e-4f;
    double augment_p = 0.5;
    uint64_t seed = 0;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_dice = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val_dice = 0.0;
    int best_epoch = -1;
};

// Mean Dice of the argmax prediction over all foreground classes and
// samples, model run in eval (running-stat) mode.
double mean_foreground_dice(SegModel& model, const Dataset& ds, int batch = 8);

// Optimizes dice_loss(softmax(f(x)), onehot) + cross_entropy_loss(f(x), y)
// with Adam. Shuffling and augmentation draw from a stream derived from
// cfg.seed, so a rerun reproduces the loss curve bitwise. The checkpoint at
// ckpt_path always holds the best-validation-Dice state seen so far; the
// in-memory model is left at its final (not best) state. csv_path, when
// nonempty, receives an "epoch,train_loss,val_dice" log.
TrainResult train_source(SegModel& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg, const std::string& ckpt_path,
                         const std::string& csv_path = "");

}  // namespace etta
