#pragma once

#include <cstdint>
#include <vector>

namespace etta {

// Overlap 2|A∩B|/(|A|+|B|) of one class; both-empty pairs score 1.0.
double dice_score(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                  uint8_t cls);

// Symmetric mean nearest-boundary Euclidean distance in pixels,
// sum over both boundaries / (|boundary(pred)| + |boundary(gt)|).
// Boundaries are foreground pixels with a 4-neighbor background or image
// border. Both masks empty -> 0; exactly one empty -> diag(h,w) sentinel.
double average_surface_distance(const std::vector<uint8_t>& pred,
                                const std::vector<uint8_t>& gt, int64_t h, int64_t w,
                                uint8_t cls);

double image_diagonal(int64_t h, int64_t w);

// Patch-label agreement of raw energy logits (positive logit predicts an
// out-of-distribution patch) against curated labels, plus the per-label
// breakdown.
struct EnergyAccuracy {
    double overall = 0.0;
    double on_clean = 0.0;  // label 0 patches
    double on_ood = 0.0;    // label 1 patches
    int64_t n_clean = 0;
    int64_t n_ood = 0;
};

EnergyAccuracy energy_accuracy(const std::vector<float>& energy_logits,
                               const std::vector<uint8_t>& labels);

}  // namespace etta
