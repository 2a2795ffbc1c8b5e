#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etta/dataset.hpp"
#include "etta/metrics.hpp"
#include "etta/nets.hpp"

namespace etta {

// Corruption recipe used to manufacture out-of-distribution mask patches.
struct PerturbConfig {
    float delta = 0.1f;             // FGSM step in image space
    double spatial_p = 0.5;         // probability of the affine warp
    double translate_px = 6.0;      // |tx|,|ty| bound
    double rotate_deg = 20.0;
    double scale_lo = 0.9, scale_hi = 1.1;
    double pixel_noise_sigma = 0.05;
    double patch_dropout_rate = 0.15;  // chance a 16x16 patch becomes background
};

struct FgsmResult {
    TensorF image;  // clip(I + delta*sign(dL/dI), 0, 1)
    TensorF probs;  // model prediction on the perturbed image
};

// One gradient-sign step in image space against the Dice objective, then a
// fresh eval-mode prediction. Parameters receive no gradient and keep their
// values; delta=0 reproduces the unperturbed prediction bitwise.
FgsmResult fgsm_perturb(SegModel& model, const TensorF& image,
                        const std::vector<uint8_t>& mask, float delta);

// Per-sample: affine warp with probability spatial_p (translation, rotation,
// scaling; out-of-bounds becomes background), additive pixel noise, random
// 16x16 patch dropout to background, then per-pixel renormalization. If a
// sample is never touched its bytes pass through unchanged.
TensorF spatial_perturb(const TensorF& probs, const PerturbConfig& cfg, Rng& rng);

// Patchwise labels: y=1 where at least tau of the patch's pixels changed
// class relative to the reference mask.
struct PatchLabelGrid {
    int64_t n = 0, kh = 0, kw = 0;
    int tau = 50;
    int patch = 16;
    std::vector<uint8_t> y;  // n*kh*kw
    double pos_fraction() const;
    std::vector<float> targets() const;  // y as floats for the BCE objective
};

PatchLabelGrid curate_labels(const TensorF& probs, const std::vector<uint8_t>& mask,
                             int tau = 50, int patch = 16);

// Mean binary cross-entropy of raw patch logits against curated labels.
TensorF energy_bce_loss(const TensorF& energy_logits, const PatchLabelGrid& labels);

// Linear warmup to the base rate, then cosine decay to zero. step is 1-based.
double lr_schedule(double base, int64_t step, int64_t warmup, int64_t total);

struct EnergyTrainConfig {
    int epochs = 40;
    int batch = 8;
    float lr = 1e-4f;
    int warmup_steps = 1000;
    int tau = 50;
    int patch = 16;
    uint64_t seed = 0;
    PerturbConfig perturb;
};

struct EnergyTrainResult {
    int64_t steps = 0;
    double final_loss = 0.0;
    double final_patch_accuracy = 0.0;
    double last_epoch_pos_fraction = 0.0;
};

// Trains the discriminator on batches of [perturbed predictions; one-hot
// ground truth], half of each prediction half FGSM-attacked, labels curated
// against the ground-truth masks. The segmentation model is frozen; a
// parameter-hash change aborts. Degenerate label balance (<1% or >99%
// positives over an epoch) aborts with a warning. csv_path, when nonempty,
// receives a "step,loss,patch_accuracy,pos_fraction" log.
EnergyTrainResult train_energy(EnergyModel& g, SegModel& f, const Dataset& train,
                               const EnergyTrainConfig& cfg,
                               const std::string& csv_path = "");

// Discriminator accuracy on batches manufactured exactly like training ones
// from held-out data, with labels curated the same way.
EnergyAccuracy eval_energy_accuracy(EnergyModel& g, SegModel& f, const Dataset& ds,
                                    const EnergyTrainConfig& cfg);

}  // namespace etta
