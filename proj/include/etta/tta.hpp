#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etta/dataset.hpp"
#include "etta/nets.hpp"

namespace etta {

enum class AdaptMethod { kEnergy, kTent, kNone };

AdaptMethod adapt_method_from_string(const std::string& name);
std::string to_string(AdaptMethod m);

struct AdaptConfig {
    int iters = 10;
    float lr = 1e-3f;
    int batch = 4;
    AdaptMethod method = AdaptMethod::kEnergy;
    bool restore = true;
};

// Byte-exact capture of a model's full state (parameters and BatchNorm
// running statistics); restore() is idempotent.
class Snapshot {
public:
    explicit Snapshot(std::vector<StateEntry> entries);
    void restore() const;

private:
    std::vector<StateEntry> entries_;
    std::vector<std::vector<float>> saved_;
};

struct BatchAdaptResult {
    TensorF probs;                  // prediction after the last update
    std::vector<double> ood_trace;  // iters+1 values of mean sigma(patch logit)
    // per-iteration sigma grids for energy-map rendering, iters+1 x (N*K*K)
    std::vector<std::vector<float>> sigma_maps;
    int64_t map_n = 0, map_kh = 0, map_kw = 0;
};

// Episodic batch adaptation: batch-statistic BatchNorm forward, Adam over
// the BatchNorm affine parameters only (fresh optimizer state per batch),
// iters steps minimizing the mean patch binary cross-entropy toward the
// all-in-distribution target. The discriminator stays frozen (hash-checked);
// weights are restored afterwards when cfg.restore.
BatchAdaptResult energy_adapt_batch(SegModel& f, EnergyModel& g, const TensorF& images,
                                    const AdaptConfig& cfg);

// Same machinery minimizing mean prediction entropy. g, when given, is only
// probed for the diagnostic energy trace.
BatchAdaptResult tent_adapt_batch(SegModel& f, EnergyModel* g, const TensorF& images,
                                  const AdaptConfig& cfg);

struct BatchReport {
    int batch_idx = 0;
    std::string method;
    double pre_dice_c1 = 0, pre_dice_c2 = 0;
    double post_dice_c1 = 0, post_dice_c2 = 0;
    double pre_asd = 0, post_asd = 0;
    double energy_0 = 0, energy_final = 0;
    double ms = 0;
};

struct StreamSummary {
    std::vector<BatchReport> batches;
    double pre_dice = 0, post_dice = 0;  // mean over samples and foreground classes
    double pre_asd = 0, post_asd = 0;
    double frac_energy_decreased = 0;  // batches whose final OOD score < initial
};

// Sequential single-pass adaptation over a dataset split. Writes one CSV row
// per batch (ms last, excluded from reproducibility comparisons) and
// optional per-iteration PGM energy maps. Verifies after every batch that
// restore reproduced the pre-stream state hash, that non-BatchNorm
// parameters never changed, and that the discriminator hash is constant.
// method=none scores the unadapted model and touches no energy model.
StreamSummary run_stream(SegModel& f, EnergyModel* g, const Dataset& ds,
                         const AdaptConfig& cfg, const std::string& csv_path,
                         const std::string& maps_dir = "");

}  // namespace etta
