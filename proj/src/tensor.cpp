#include "etta/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace etta {

namespace detail {

uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

template <typename T>
std::shared_ptr<detail::TensorNode<T>> make_node(std::vector<int64_t> shape, bool requires_grad) {
    auto n = std::make_shared<detail::TensorNode<T>>();
    for (int64_t d : shape)
        if (d < 0) fail("tensor: negative extent in shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value.resize(static_cast<size_t>(shape_numel(n->shape)), T(0));
    n->requires_grad = requires_grad;
    n->id = detail::next_node_id();
    return n;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace

namespace detail {

template <typename T>
Tensor<T> make_op(std::vector<int64_t> shape, std::vector<T> value,
                  const std::vector<Tensor<T>>& inputs,
                  std::function<void(const T*, GradSink<T>&)> backprop) {
    auto n = std::make_shared<detail::TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (static_cast<int64_t>(n->value.size()) != shape_numel(n->shape))
        fail("make_op: value size does not match shape " + shape_str(n->shape));
    n->id = detail::next_node_id();
    bool any = false;
    for (const auto& in : inputs) any = any || in.needs_grad();
    if (any) {
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<T>(std::move(n));
}

template Tensor<float> make_op(std::vector<int64_t>, std::vector<float>,
                               const std::vector<Tensor<float>>&,
                               std::function<void(const float*, GradSink<float>&)>);
template Tensor<double> make_op(std::vector<int64_t>, std::vector<double>,
                                const std::vector<Tensor<double>>&,
                                std::function<void(const double*, GradSink<double>&)>);

}  // namespace detail

namespace {
using detail::make_op;
}  // namespace

// ---- Tensor methods ----

template <typename T>
Tensor<T>::Tensor(std::vector<int64_t> shape, bool requires_grad)
    : n_(make_node<T>(std::move(shape), requires_grad)) {}

template <typename T>
Tensor<T>::Tensor(std::vector<int64_t> shape, std::vector<T> data, bool requires_grad)
    : n_(make_node<T>(std::move(shape), requires_grad)) {
    if (data.size() != n_->value.size())
        fail("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
             shape_str(n_->shape));
    n_->value = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<int64_t> shape, bool requires_grad) {
    return Tensor<T>(std::move(shape), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int64_t> shape, T value, bool requires_grad) {
    Tensor<T> t(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor<T>({1}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) fail("item(): tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad() {
    if (n_->grad.empty()) n_->grad.assign(n_->value.size(), T(0));
    return n_->grad;
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
    if (n_->grad.empty()) fail("grad(): no gradient has been accumulated for this tensor");
    return n_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
    auto n = std::make_shared<detail::TensorNode<T>>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->id = detail::next_node_id();
    return Tensor<T>(std::move(n));
}

namespace {

template <typename T>
class BackwardPass final : public GradSink<T> {
public:
    std::unordered_map<const detail::TensorNode<T>*, std::vector<T>> buffers;

    T* sink(const Tensor<T>& t) override {
        if (!t.needs_grad()) return nullptr;
        auto* key = t.node().get();
        auto it = buffers.find(key);
        if (it == buffers.end())
            it = buffers.emplace(key, std::vector<T>(t.data().size(), T(0))).first;
        return it->second.data();
    }
};

}  // namespace

template <typename T>
void Tensor<T>::backward() const {
    if (!n_) fail("backward(): undefined tensor");
    if (numel() != 1)
        fail("backward(): loss must be scalar, got shape " + shape_str(n_->shape));

    // Reachable subgraph, then descending creation order = topological order.
    std::vector<detail::TensorNode<T>*> order;
    std::unordered_map<const detail::TensorNode<T>*, std::shared_ptr<detail::TensorNode<T>>> keep;
    std::vector<std::shared_ptr<detail::TensorNode<T>>> stack{n_};
    keep.emplace(n_.get(), n_);
    while (!stack.empty()) {
        auto cur = stack.back();
        stack.pop_back();
        order.push_back(cur.get());
        for (const auto& p : cur->parents) {
            if (keep.emplace(p.get(), p).second) stack.push_back(p);
        }
    }
    std::sort(order.begin(), order.end(),
              [](const auto* a, const auto* b) { return a->id > b->id; });

    BackwardPass<T> pass;
    pass.buffers[n_.get()] = {T(1)};
    for (auto* node : order) {
        auto it = pass.buffers.find(node);
        if (it == pass.buffers.end()) continue;  // no gradient reached this node
        if (node->backprop) node->backprop(it->second.data(), pass);
        if (node->requires_grad) {
            if (node->grad.empty()) node->grad.assign(node->value.size(), T(0));
            const auto& src = it->second;
            for (size_t i = 0; i < src.size(); ++i) node->grad[i] += src[i];
        }
    }
}

// ---- elementwise ops ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op<T>(a.shape(), std::move(out), {a, b},
                      [a, b](const T* g, GradSink<T>& sink) {
                          size_t n = a.data().size();
                          if (T* ga = sink.sink(a))
                              for (size_t i = 0; i < n; ++i) ga[i] += g[i];
                          if (T* gb = sink.sink(b))
                              for (size_t i = 0; i < n; ++i) gb[i] += g[i];
                      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op<T>(a.shape(), std::move(out), {a, b},
                      [a, b](const T* g, GradSink<T>& sink) {
                          size_t n = a.data().size();
                          if (T* ga = sink.sink(a))
                              for (size_t i = 0; i < n; ++i) ga[i] += g[i];
                          if (T* gb = sink.sink(b))
                              for (size_t i = 0; i < n; ++i) gb[i] -= g[i];
                      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op<T>(a.shape(), std::move(out), {a, b},
                      [a, b](const T* g, GradSink<T>& sink) {
                          size_t n = a.data().size();
                          if (T* ga = sink.sink(a))
                              for (size_t i = 0; i < n; ++i) ga[i] += g[i] * b.data()[i];
                          if (T* gb = sink.sink(b))
                              for (size_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
                      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    return make_op<T>(a.shape(), std::move(out), {a},
                      [a, s](const T* g, GradSink<T>& sink) {
                          if (T* ga = sink.sink(a))
                              for (size_t i = 0; i < a.data().size(); ++i) ga[i] += g[i] * s;
                      });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v;
    return make_op<T>({1}, {acc}, {a}, [a](const T* g, GradSink<T>& sink) {
        if (T* ga = sink.sink(a))
            for (size_t i = 0; i < a.data().size(); ++i) ga[i] += g[0];
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    if (a.numel() == 0) fail("mean_all: empty tensor");
    T acc = 0;
    for (T v : a.data()) acc += v;
    T inv = T(1) / static_cast<T>(a.numel());
    return make_op<T>({1}, {acc * inv}, {a}, [a, inv](const T* g, GradSink<T>& sink) {
        if (T* ga = sink.sink(a))
            for (size_t i = 0; i < a.data().size(); ++i) ga[i] += g[0] * inv;
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    return make_op<T>(a.shape(), std::move(out), {a},
                      [a](const T* g, GradSink<T>& sink) {
                          if (T* ga = sink.sink(a))
                              for (size_t i = 0; i < a.data().size(); ++i)
                                  if (a.data()[i] > T(0)) ga[i] += g[i];
                      });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T negative_slope) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        T x = a.data()[i];
        out[i] = x > T(0) ? x : negative_slope * x;
    }
    // subgradient at 0 is the negative slope
    return make_op<T>(a.shape(), std::move(out), {a},
                      [a, negative_slope](const T* g, GradSink<T>& sink) {
                          if (T* ga = sink.sink(a))
                              for (size_t i = 0; i < a.data().size(); ++i)
                                  ga[i] += g[i] * (a.data()[i] > T(0) ? T(1) : negative_slope);
                      });
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a.data()[i]);
    auto yv = std::make_shared<std::vector<T>>(out);
    return make_op<T>(a.shape(), std::move(out), {a},
                      [a, yv](const T* g, GradSink<T>& sink) {
                          if (T* ga = sink.sink(a))
                              for (size_t i = 0; i < yv->size(); ++i)
                                  ga[i] += g[i] * (*yv)[i] * (T(1) - (*yv)[i]);
                      });
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& a) {
    if (a.rank() != 4) fail("softmax_channels: expected [N,C,H,W], got " + shape_str(a.shape()));
    int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    if (C < 2) fail("softmax_channels: needs C >= 2, got C=" + std::to_string(C));
    int64_t hw = H * W, chw = C * hw;
    std::vector<T> out(a.data().size());
    const T* x = a.data().data();
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t p = 0; p < hw; ++p) {
            const T* xi = x + n * chw + p;
            T* yi = out.data() + n * chw + p;
            T m = xi[0];
            for (int64_t c = 1; c < C; ++c) m = std::max(m, xi[c * hw]);
            T denom = 0;
            for (int64_t c = 0; c < C; ++c) {
                T e = std::exp(xi[c * hw] - m);
                yi[c * hw] = e;
                denom += e;
            }
            T inv = T(1) / denom;
            for (int64_t c = 0; c < C; ++c) yi[c * hw] *= inv;
        }
    }
    auto yv = std::make_shared<std::vector<T>>(out);
    return make_op<T>(a.shape(), std::move(out), {a},
                      [a, yv, N, C, hw, chw](const T* g, GradSink<T>& sink) {
                          T* ga = sink.sink(a);
                          if (!ga) return;
                          const T* yd = yv->data();
                          for (int64_t n = 0; n < N; ++n) {
                              for (int64_t p = 0; p < hw; ++p) {
                                  int64_t base = n * chw + p;
                                  T dot = 0;
                                  for (int64_t c = 0; c < C; ++c)
                                      dot += g[base + c * hw] * yd[base + c * hw];
                                  for (int64_t c = 0; c < C; ++c) {
                                      int64_t i = base + c * hw;
                                      ga[i] += yd[i] * (g[i] - dot);
                                  }
                              }
                          }
                      });
}

template <typename T>
Tensor<T> sign(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        T x = a.data()[i];
        out[i] = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
    }
    return Tensor<T>(a.shape(), std::move(out));
}

// ---- conv2d (im2col + GEMM) ----

namespace {

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride,
            int64_t pad, int64_t Ho, int64_t Wo, T* col) {
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                T* dst = col + ((c * k + ky) * k + kx) * (Ho * Wo);
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, T(0));
                        continue;
                    }
                    const T* row = x + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride - pad + kx;
                        dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? row[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride,
                int64_t pad, int64_t Ho, int64_t Wo, T* x) {
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                const T* src = col + ((c * k + ky) * k + kx) * (Ho * Wo);
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    T* row = x + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) row[ix] += src[oy * Wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding) {
    if (x.rank() != 4) fail("conv2d: input must be [N,Cin,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) fail("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(w.shape()));
    if (w.dim(2) != w.dim(3)) fail("conv2d: non-square kernel " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        fail("conv2d: input channels " + std::to_string(x.dim(1)) + " != weight channels " +
             std::to_string(w.dim(1)));
    if (b.rank() != 1 || b.dim(0) != w.dim(0))
        fail("conv2d: bias shape " + shape_str(b.shape()) + " does not match Cout=" +
             std::to_string(w.dim(0)));
    if (stride < 1) fail("conv2d: stride must be >= 1");
    if (padding < 0) fail("conv2d: padding must be >= 0");

    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0), k = w.dim(2);
    const int64_t Ho = (H + 2 * padding - k) / stride + 1;
    const int64_t Wo = (W + 2 * padding - k) / stride + 1;
    if (H + 2 * padding < k || W + 2 * padding < k || Ho < 1 || Wo < 1)
        fail("conv2d: kernel " + std::to_string(k) + " too large for padded input " +
             shape_str(x.shape()) + " pad=" + std::to_string(padding));

    const int64_t ckk = Cin * k * k;
    const int64_t ohw = Ho * Wo;
    std::vector<T> out(static_cast<size_t>(N * Cout * ohw));
    std::vector<T> col(static_cast<size_t>(ckk * ohw));
    CMapMat<T> wm(w.data().data(), Cout, ckk);
    for (int64_t n = 0; n < N; ++n) {
        im2col(x.data().data() + n * Cin * H * W, Cin, H, W, k, stride, padding, Ho, Wo,
               col.data());
        CMapMat<T> cm(col.data(), ckk, ohw);
        MapMat<T> ym(out.data() + n * Cout * ohw, Cout, ohw);
        ym.noalias() = wm * cm;
        for (int64_t co = 0; co < Cout; ++co) ym.row(co).array() += b.data()[co];
    }

    int s = stride, p = padding;
    return make_op<T>({N, Cout, Ho, Wo}, std::move(out), {x, w, b},
                      [x, w, b, N, Cin, H, W, Cout, k, Ho, Wo, ckk, ohw, s,
                       p](const T* g, GradSink<T>& sink) {
                          T* gx = sink.sink(x);
                          T* gw = sink.sink(w);
                          T* gb = sink.sink(b);
                          std::vector<T> col(static_cast<size_t>(ckk * ohw));
                          std::vector<T> gcol;
                          if (gx) gcol.resize(static_cast<size_t>(ckk * ohw));
                          CMapMat<T> wm(w.data().data(), Cout, ckk);
                          for (int64_t n = 0; n < N; ++n) {
                              CMapMat<T> gym(g + n * Cout * ohw, Cout, ohw);
                              if (gw || gx) {
                                  if (gw) {
                                      im2col(x.data().data() + n * Cin * H * W, Cin, H, W, k, s,
                                             p, Ho, Wo, col.data());
                                      CMapMat<T> cm(col.data(), ckk, ohw);
                                      MapMat<T> gwm(gw, Cout, ckk);
                                      gwm.noalias() += gym * cm.transpose();
                                  }
                                  if (gx) {
                                      MapMat<T> gcm(gcol.data(), ckk, ohw);
                                      gcm.noalias() = wm.transpose() * gym;
                                      col2im_add(gcol.data(), Cin, H, W, k, s, p, Ho, Wo,
                                                 gx + n * Cin * H * W);
                                  }
                              }
                              if (gb)
                                  for (int64_t co = 0; co < Cout; ++co)
                                      gb[co] += gym.row(co).sum();
                          }
                      });
}

// ---- pooling / resampling / concat ----

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
    if (x.rank() != 4) fail("maxpool2x2: expected [N,C,H,W], got " + shape_str(x.shape()));
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        fail("maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
    int64_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(static_cast<size_t>(N * C * Ho * Wo));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const T* xd = x.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* plane = xd + nc * H * W;
        for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
                int64_t base = (2 * oy) * W + 2 * ox;
                int64_t best = base;
                T bv = plane[base];
                for (int64_t d : {int64_t(1), W, W + 1}) {
                    if (plane[base + d] > bv) {
                        bv = plane[base + d];
                        best = base + d;
                    }
                }
                size_t oi = static_cast<size_t>(nc * Ho * Wo + oy * Wo + ox);
                out[oi] = bv;
                (*argmax)[oi] = nc * H * W + best;
            }
        }
    }
    return make_op<T>({N, C, Ho, Wo}, std::move(out), {x},
                      [x, argmax](const T* g, GradSink<T>& sink) {
                          if (T* gx = sink.sink(x))
                              for (size_t i = 0; i < argmax->size(); ++i)
                                  gx[(*argmax)[i]] += g[i];
                      });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    if (x.rank() != 4) fail("upsample_nearest2x: expected [N,C,H,W], got " + shape_str(x.shape()));
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t Ho = H * 2, Wo = W * 2;
    std::vector<T> out(static_cast<size_t>(N * C * Ho * Wo));
    const T* xd = x.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = xd + nc * H * W;
        T* dst = out.data() + nc * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y)
            for (int64_t xq = 0; xq < Wo; ++xq)
                dst[y * Wo + xq] = src[(y / 2) * W + (xq / 2)];
    }
    return make_op<T>({N, C, Ho, Wo}, std::move(out), {x},
                      [x, N, C, H, W, Ho, Wo](const T* g, GradSink<T>& sink) {
                          T* gx = sink.sink(x);
                          if (!gx) return;
                          for (int64_t nc = 0; nc < N * C; ++nc) {
                              const T* gsrc = g + nc * Ho * Wo;
                              T* gdst = gx + nc * H * W;
                              for (int64_t y = 0; y < Ho; ++y)
                                  for (int64_t xq = 0; xq < Wo; ++xq)
                                      gdst[(y / 2) * W + (xq / 2)] += gsrc[y * Wo + xq];
                          }
                      });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4)
        fail("concat_channels: expected [N,C,H,W] inputs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        fail("concat_channels: incompatible shapes " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    int64_t hw = H * W;
    std::vector<T> out(static_cast<size_t>(N * (Ca + Cb) * hw));
    for (int64_t n = 0; n < N; ++n) {
        std::copy_n(a.data().data() + n * Ca * hw, Ca * hw,
                    out.data() + n * (Ca + Cb) * hw);
        std::copy_n(b.data().data() + n * Cb * hw, Cb * hw,
                    out.data() + n * (Ca + Cb) * hw + Ca * hw);
    }
    return make_op<T>({N, Ca + Cb, H, W}, std::move(out), {a, b},
                      [a, b, N, Ca, Cb, hw](const T* g, GradSink<T>& sink) {
                          T* ga = sink.sink(a);
                          T* gb = sink.sink(b);
                          for (int64_t n = 0; n < N; ++n) {
                              const T* gn = g + n * (Ca + Cb) * hw;
                              if (ga)
                                  for (int64_t i = 0; i < Ca * hw; ++i)
                                      ga[n * Ca * hw + i] += gn[i];
                              if (gb)
                                  for (int64_t i = 0; i < Cb * hw; ++i)
                                      gb[n * Cb * hw + i] += gn[Ca * hw + i];
                          }
                      });
}

// ---- batch norm ----

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BnStats<T>& running, BnMode mode, T momentum, T eps) {
    if (x.rank() != 4) fail("batch_norm: expected [N,C,H,W], got " + shape_str(x.shape()));
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C)
        fail("batch_norm: gamma/beta must have " + std::to_string(C) + " elements");
    if (running.mean.size() != static_cast<size_t>(C) ||
        running.var.size() != static_cast<size_t>(C))
        fail("batch_norm: running stats sized for wrong channel count");
    const int64_t hw = H * W;
    const int64_t cnt = N * hw;
    const bool batch_stats = (mode == BnMode::kTrain || mode == BnMode::kAdapt);
    if (batch_stats && cnt < 2)
        fail("batch_norm: batch statistics need N*H*W >= 2, got " + std::to_string(cnt));

    std::vector<T> mean(C), var(C);
    const T* xd = x.data().data();
    if (batch_stats) {
        for (int64_t c = 0; c < C; ++c) {
            T m = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* p = xd + (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) m += p[i];
            }
            m /= static_cast<T>(cnt);
            T v = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* p = xd + (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    T d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(cnt);  // biased, used for normalization
            mean[c] = m;
            var[c] = v;
        }
        if (mode == BnMode::kTrain) {
            for (int64_t c = 0; c < C; ++c) {
                T unbiased = cnt > 1 ? var[c] * static_cast<T>(cnt) / static_cast<T>(cnt - 1)
                                     : var[c];
                running.mean[c] = (T(1) - momentum) * running.mean[c] + momentum * mean[c];
                running.var[c] = (T(1) - momentum) * running.var[c] + momentum * unbiased;
            }
        }
    } else {
        mean = running.mean;
        var = running.var;
    }

    std::vector<T> inv_std(C);
    for (int64_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

    auto xhat = std::make_shared<std::vector<T>>(x.data().size());
    std::vector<T> out(x.data().size());
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const T* p = xd + (n * C + c) * hw;
            T* xh = xhat->data() + (n * C + c) * hw;
            T* o = out.data() + (n * C + c) * hw;
            T m = mean[c], is = inv_std[c], ga = gamma.data()[c], be = beta.data()[c];
            for (int64_t i = 0; i < hw; ++i) {
                xh[i] = (p[i] - m) * is;
                o[i] = ga * xh[i] + be;
            }
        }
    }

    auto inv = std::make_shared<std::vector<T>>(std::move(inv_std));
    return make_op<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat, inv, N, C, hw, cnt, batch_stats](const T* g, GradSink<T>& sink) {
            T* gx = sink.sink(x);
            T* gg = sink.sink(gamma);
            T* gb = sink.sink(beta);
            for (int64_t c = 0; c < C; ++c) {
                T sum_g = 0, sum_gx = 0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* gp = g + (n * C + c) * hw;
                    const T* xh = xhat->data() + (n * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * xh[i];
                    }
                }
                if (gg) gg[c] += sum_gx;
                if (gb) gb[c] += sum_g;
                if (!gx) continue;
                T ga = gamma.data()[c], is = (*inv)[c];
                if (batch_stats) {
                    T inv_cnt = T(1) / static_cast<T>(cnt);
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gp = g + (n * C + c) * hw;
                        const T* xh = xhat->data() + (n * C + c) * hw;
                        T* gxp = gx + (n * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i)
                            gxp[i] += ga * is * (gp[i] - inv_cnt * (sum_g + xh[i] * sum_gx));
                    }
                } else {
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gp = g + (n * C + c) * hw;
                        T* gxp = gx + (n * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i) gxp[i] += ga * is * gp[i];
                    }
                }
            }
        });
}

#define ETTA_INSTANTIATE_OPS(T)                                                            \
    template class Tensor<T>;                                                              \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> scale(const Tensor<T>&, T);                                         \
    template Tensor<T> sum_all(const Tensor<T>&);                                          \
    template Tensor<T> mean_all(const Tensor<T>&);                                         \
    template Tensor<T> relu(const Tensor<T>&);                                             \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                    \
    template Tensor<T> sigmoid(const Tensor<T>&);                                          \
    template Tensor<T> softmax_channels(const Tensor<T>&);                                 \
    template Tensor<T> sign(const Tensor<T>&);                                             \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,   \
                              int);                                                        \
    template Tensor<T> maxpool2x2(const Tensor<T>&);                                       \
    template Tensor<T> upsample_nearest2x(const Tensor<T>&);                               \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                \
    template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                  BnStats<T>&, BnMode, T, T);

ETTA_INSTANTIATE_OPS(float)
ETTA_INSTANTIATE_OPS(double)
#undef ETTA_INSTANTIATE_OPS

}  // namespace etta
