#include "etta/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace etta {

double dice_score(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                  uint8_t cls) {
    if (pred.size() != gt.size())
        throw std::invalid_argument("dice_score: mask sizes differ");
    int64_t inter = 0, a = 0, b = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        bool pa = pred[i] == cls, pb = gt[i] == cls;
        inter += pa && pb;
        a += pa;
        b += pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double image_diagonal(int64_t h, int64_t w) {
    return std::sqrt(static_cast<double>(h * h + w * w));
}

namespace {

std::vector<int64_t> boundary_of(const std::vector<uint8_t>& m, int64_t h, int64_t w,
                                 uint8_t cls) {
    std::vector<int64_t> out;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (m[y * w + x] != cls) continue;
            bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            if (!edge) {
                edge = m[(y - 1) * w + x] != cls || m[(y + 1) * w + x] != cls ||
                       m[y * w + x - 1] != cls || m[y * w + x + 1] != cls;
            }
            if (edge) out.push_back(y * w + x);
        }
    return out;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared distance transform (lower envelope of parabolas), skipping
// absent (infinite) sources.
void dt1d(const double* f, double* d, int64_t n, std::vector<int64_t>& v,
          std::vector<double>& z) {
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        double s = 0.0;
        while (k >= 0) {
            s = ((f[q] + static_cast<double>(q) * q) -
                 (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                (2.0 * q - 2.0 * v[k]);
            if (s <= z[k])
                --k;
            else
                break;
        }
        ++k;
        v[k] = q;
        z[k] = k == 0 ? -kInf : s;
        z[k + 1] = kInf;
    }
    if (k < 0) {
        for (int64_t q = 0; q < n; ++q) d[q] = kInf;
        return;
    }
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        d[q] = static_cast<double>(q - v[j]) * (q - v[j]) + f[v[j]];
    }
}

// Exact squared Euclidean distance to the nearest seed pixel.
std::vector<double> squared_edt(const std::vector<int64_t>& seeds, int64_t h, int64_t w) {
    std::vector<double> g(static_cast<size_t>(h * w), kInf);
    for (int64_t s : seeds) g[s] = 0.0;

    std::vector<double> row_in(std::max(h, w)), row_out(std::max(h, w));
    std::vector<int64_t> v(std::max(h, w));
    std::vector<double> z(std::max(h, w) + 1);

    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) row_in[x] = g[y * w + x];
        dt1d(row_in.data(), row_out.data(), w, v, z);
        for (int64_t x = 0; x < w; ++x) g[y * w + x] = row_out[x];
    }
    for (int64_t x = 0; x < w; ++x) {
        for (int64_t y = 0; y < h; ++y) row_in[y] = g[y * w + x];
        dt1d(row_in.data(), row_out.data(), h, v, z);
        for (int64_t y = 0; y < h; ++y) g[y * w + x] = row_out[y];
    }
    return g;
}

}  // namespace

double average_surface_distance(const std::vector<uint8_t>& pred,
                                const std::vector<uint8_t>& gt, int64_t h, int64_t w,
                                uint8_t cls) {
    if (pred.size() != gt.size() || static_cast<int64_t>(pred.size()) != h * w)
        throw std::invalid_argument("average_surface_distance: mask sizes differ");
    auto bp = boundary_of(pred, h, w, cls);
    auto bg = boundary_of(gt, h, w, cls);
    if (bp.empty() && bg.empty()) return 0.0;
    if (bp.empty() || bg.empty()) return image_diagonal(h, w);

    auto dist_to_gt = squared_edt(bg, h, w);
    auto dist_to_pred = squared_edt(bp, h, w);
    double acc = 0.0;
    for (int64_t p : bp) acc += std::sqrt(dist_to_gt[p]);
    for (int64_t p : bg) acc += std::sqrt(dist_to_pred[p]);
    return acc / static_cast<double>(bp.size() + bg.size());
}

EnergyAccuracy energy_accuracy(const std::vector<float>& energy_logits,
                               const std::vector<uint8_t>& labels) {
    if (energy_logits.size() != labels.size())
        throw std::invalid_argument("energy_accuracy: logit/label count mismatch");
    if (labels.empty()) throw std::invalid_argument("energy_accuracy: no patches");
    EnergyAccuracy r;
    int64_t hit_clean = 0, hit_ood = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        bool pred_ood = energy_logits[i] > 0.0f;
        if (labels[i] == 1) {
            ++r.n_ood;
            hit_ood += pred_ood;
        } else {
            ++r.n_clean;
            hit_clean += !pred_ood;
        }
    }
    r.overall = static_cast<double>(hit_clean + hit_ood) / static_cast<double>(labels.size());
    r.on_clean = r.n_clean ? static_cast<double>(hit_clean) / r.n_clean : 0.0;
    r.on_ood = r.n_ood ? static_cast<double>(hit_ood) / r.n_ood : 0.0;
    return r;
}

}  // namespace etta
