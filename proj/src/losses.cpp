#include "etta/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace etta {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

template <typename T>
void require_nchw(const Tensor<T>& t, const char* op) {
    if (t.rank() != 4) fail(std::string(op) + ": expected [N,C,H,W], got " + shape_str(t.shape()));
}

}  // namespace

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot, T eps) {
    require_nchw(probs, "dice_loss");
    if (probs.shape() != onehot.shape())
        fail("dice_loss: probs " + shape_str(probs.shape()) + " vs onehot " +
             shape_str(onehot.shape()));
    const int64_t N = probs.dim(0), C = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
    if (C < 2) fail("dice_loss: needs C >= 2 (background + foreground)");

    const int64_t terms = N * (C - 1);
    auto inter = std::make_shared<std::vector<T>>(terms);
    auto denom = std::make_shared<std::vector<T>>(terms);
    const T* p = probs.data().data();
    const T* y = onehot.data().data();
    T acc = 0;
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 1; c < C; ++c) {
            const T* pp = p + (n * C + c) * hw;
            const T* yy = y + (n * C + c) * hw;
            T si = 0, sp = 0, sy = 0;
            for (int64_t i = 0; i < hw; ++i) {
                si += pp[i] * yy[i];
                sp += pp[i];
                sy += yy[i];
            }
            int64_t t = n * (C - 1) + (c - 1);
            (*inter)[t] = T(2) * si + eps;
            (*denom)[t] = sp + sy + eps;
            acc += (*inter)[t] / (*denom)[t];
        }
    }
    T loss = T(1) - acc / static_cast<T>(terms);
    return detail::make_op<T>(
        {1}, {loss}, {probs},
        [probs, onehot, inter, denom, N, C, hw, terms](const T* g, GradSink<T>& sink) {
            T* gp = sink.sink(probs);
            if (!gp) return;
            const T* yd = onehot.data().data();
            const T scale = -g[0] / static_cast<T>(terms);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t c = 1; c < C; ++c) {
                    int64_t t = n * (C - 1) + (c - 1);
                    const T num = (*inter)[t], den = (*denom)[t];
                    const T inv_den = T(1) / den;
                    const T* yy = yd + (n * C + c) * hw;
                    T* gg = gp + (n * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i)
                        gg[i] += scale * (T(2) * yy[i] - num * inv_den) * inv_den;
                }
            }
        });
}

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels) {
    require_nchw(logits, "cross_entropy_loss");
    const int64_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const int64_t hw = H * W, chw = C * hw;
    if (static_cast<int64_t>(labels.size()) != N * hw)
        fail("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
             std::to_string(N * hw) + " pixels");
    for (uint8_t l : labels)
        if (l >= C)
            fail("cross_entropy_loss: label " + std::to_string(l) + " out of range, C=" +
                 std::to_string(C));

    auto softmax = std::make_shared<std::vector<T>>(logits.data().size());
    const T* z = logits.data().data();
    T acc = 0;
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t i = 0; i < hw; ++i) {
            const T* zi = z + n * chw + i;
            T m = zi[0];
            for (int64_t c = 1; c < C; ++c) m = std::max(m, zi[c * hw]);
            T sum = 0;
            for (int64_t c = 0; c < C; ++c) sum += std::exp(zi[c * hw] - m);
            const T lse = m + std::log(sum);
            const T inv = T(1) / sum;
            T* si = softmax->data() + n * chw + i;
            for (int64_t c = 0; c < C; ++c) si[c * hw] = std::exp(zi[c * hw] - m) * inv;
            acc += lse - zi[static_cast<int64_t>(labels[n * hw + i]) * hw];
        }
    }
    const int64_t count = N * hw;
    T loss = acc / static_cast<T>(count);
    auto lbl = std::make_shared<std::vector<uint8_t>>(labels);
    return detail::make_op<T>(
        {1}, {loss}, {logits},
        [logits, softmax, lbl, N, C, hw, chw, count](const T* g, GradSink<T>& sink) {
            T* gz = sink.sink(logits);
            if (!gz) return;
            const T scale = g[0] / static_cast<T>(count);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t i = 0; i < hw; ++i) {
                    const T* si = softmax->data() + n * chw + i;
                    T* gi = gz + n * chw + i;
                    int64_t t = static_cast<int64_t>((*lbl)[n * hw + i]);
                    for (int64_t c = 0; c < C; ++c)
                        gi[c * hw] += scale * (si[c * hw] - (c == t ? T(1) : T(0)));
                }
            }
        });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
    if (static_cast<size_t>(logits.numel()) != targets.size())
        fail("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
             std::to_string(logits.numel()) + " logits");
    if (logits.numel() == 0) fail("bce_with_logits: empty input");
    const T* z = logits.data().data();
    T acc = 0;
    for (size_t i = 0; i < targets.size(); ++i) {
        T g = z[i];
        acc += std::max(g, T(0)) - g * targets[i] + std::log1p(std::exp(-std::abs(g)));
    }
    const T inv = T(1) / static_cast<T>(targets.size());
    T loss = acc * inv;
    auto tgt = std::make_shared<std::vector<T>>(targets);
    return detail::make_op<T>({1}, {loss}, {logits},
                              [logits, tgt, inv](const T* g, GradSink<T>& sink) {
                                  T* gz = sink.sink(logits);
                                  if (!gz) return;
                                  const T* z = logits.data().data();
                                  const T s = g[0] * inv;
                                  for (size_t i = 0; i < tgt->size(); ++i) {
                                      T sig = z[i] >= T(0)
                                                  ? T(1) / (T(1) + std::exp(-z[i]))
                                                  : std::exp(z[i]) / (T(1) + std::exp(z[i]));
                                      gz[i] += s * (sig - (*tgt)[i]);
                                  }
                              });
}

template <typename T>
Tensor<T> softmax_entropy_mean(const Tensor<T>& logits) {
    require_nchw(logits, "softmax_entropy_mean");
    const int64_t N = logits.dim(0), C = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    const int64_t chw = C * hw;
    if (C < 2) fail("softmax_entropy_mean: needs C >= 2");

    auto softmax = std::make_shared<std::vector<T>>(logits.data().size());
    auto entropy = std::make_shared<std::vector<T>>(static_cast<size_t>(N * hw));
    const T* z = logits.data().data();
    T acc = 0;
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t i = 0; i < hw; ++i) {
            const T* zi = z + n * chw + i;
            T m = zi[0];
            for (int64_t c = 1; c < C; ++c) m = std::max(m, zi[c * hw]);
            T sum = 0;
            for (int64_t c = 0; c < C; ++c) sum += std::exp(zi[c * hw] - m);
            const T lse = m + std::log(sum);
            T* si = softmax->data() + n * chw + i;
            T h = 0;
            for (int64_t c = 0; c < C; ++c) {
                T logp = zi[c * hw] - lse;
                T p = std::exp(logp);
                si[c * hw] = p;
                h -= p * logp;
            }
            (*entropy)[n * hw + i] = h;
            acc += h;
        }
    }
    const int64_t count = N * hw;
    T loss = acc / static_cast<T>(count);
    return detail::make_op<T>(
        {1}, {loss}, {logits},
        [logits, softmax, entropy, N, C, hw, chw, count](const T* g, GradSink<T>& sink) {
            T* gz = sink.sink(logits);
            if (!gz) return;
            const T scale = g[0] / static_cast<T>(count);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t i = 0; i < hw; ++i) {
                    const T* si = softmax->data() + n * chw + i;
                    T* gi = gz + n * chw + i;
                    const T h = (*entropy)[n * hw + i];
                    for (int64_t c = 0; c < C; ++c) {
                        T p = si[c * hw];
                        // d/dz_c of −Σ p log p, with log p clamped for p → 0
                        T logp = p > T(0) ? std::log(p) : T(-745);
                        gi[c * hw] += scale * (-p * (logp + h));
                    }
                }
            }
        });
}

#define ETTA_INSTANTIATE_LOSSES(T)                                                        \
    template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, T);                 \
    template Tensor<T> cross_entropy_loss(const Tensor<T>&, const std::vector<uint8_t>&); \
    template Tensor<T> bce_with_logits(const Tensor<T>&, const std::vector<T>&);         \
    template Tensor<T> softmax_entropy_mean(const Tensor<T>&);

ETTA_INSTANTIATE_LOSSES(float)
ETTA_INSTANTIATE_LOSSES(double)
#undef ETTA_INSTANTIATE_LOSSES

}  // namespace etta
