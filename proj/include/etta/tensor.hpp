#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace etta {

enum class BnMode { kTrain, kEval, kAdapt };

template <typename T>
class GradSink;

namespace detail {

template <typename T>
struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const T* gout, GradSink<T>& sink)> backprop;
};

uint64_t next_node_id();

}  // namespace detail

// Value-semantics handle to a node in a dynamically built reverse-mode
// autodiff graph. Copies share storage. Gradients accumulate additively
// across backward() calls; zeroing is the optimizer caller's duty.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape, bool requires_grad = false);
    Tensor(std::vector<int64_t> shape, std::vector<T> data, bool requires_grad = false);
    Tensor(std::vector<int64_t> shape, std::initializer_list<T> data, bool requires_grad = false)
        : Tensor(std::move(shape), std::vector<T>(data), requires_grad) {}

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const { return n_->shape; }
    int64_t dim(size_t i) const { return n_->shape.at(i); }
    size_t rank() const { return n_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }

    std::vector<T>& data() { return n_->value; }
    const std::vector<T>& data() const { return n_->value; }
    T item() const;

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool v) { n_->requires_grad = v; }

    bool has_grad() const { return n_ && !n_->grad.empty(); }
    std::vector<T>& grad();              // allocates zeros on first use
    const std::vector<T>& grad() const;  // throws if never populated
    void zero_grad();

    uint64_t node_id() const { return n_->id; }
    bool is_graph_node() const { return !n_->parents.empty(); }
    // participates in gradient propagation
    bool needs_grad() const { return n_ && (n_->requires_grad || is_graph_node()); }

    // Value copy with no graph edges and no grad.
    Tensor detached() const;

    // Reverse pass from a scalar; accumulates into every reachable
    // requires_grad tensor. Deterministic given the op sequence.
    void backward() const;

    bool same_storage(const Tensor& other) const { return n_ == other.n_; }

    std::shared_ptr<detail::TensorNode<T>> node() const { return n_; }
    explicit Tensor(std::shared_ptr<detail::TensorNode<T>> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<detail::TensorNode<T>> n_;
};

// Hands backward closures the transient gradient buffer of each input that
// participates in the pass; returns nullptr for inputs that do not.
template <typename T>
class GradSink {
public:
    virtual ~GradSink() = default;
    virtual T* sink(const Tensor<T>& t) = 0;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

// Builds the output node of an op: records parents and the backward closure
// only when some input participates in gradient propagation.
template <typename T>
Tensor<T> make_op(std::vector<int64_t> shape, std::vector<T> value,
                  const std::vector<Tensor<T>>& inputs,
                  std::function<void(const T*, GradSink<T>&)> backprop);

extern template Tensor<float> make_op(std::vector<int64_t>, std::vector<float>,
                                      const std::vector<Tensor<float>>&,
                                      std::function<void(const float*, GradSink<float>&)>);
extern template Tensor<double> make_op(std::vector<int64_t>, std::vector<double>,
                                       const std::vector<Tensor<double>>&,
                                       std::function<void(const double*, GradSink<double>&)>);

}  // namespace detail

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

// ---- elementwise / reduction ops ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> sum_all(const Tensor<T>& a);
template <typename T> Tensor<T> mean_all(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T negative_slope);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
// per-pixel distribution over the channel axis of [N,C,H,W]; C >= 2
template <typename T> Tensor<T> softmax_channels(const Tensor<T>& a);
// elementwise {-1, 0, +1}; detached from the graph
template <typename T> Tensor<T> sign(const Tensor<T>& a);

// ---- structured ops ----
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int padding);
template <typename T> Tensor<T> maxpool2x2(const Tensor<T>& x);
template <typename T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct BnStats {
    std::vector<T> mean, var;
    explicit BnStats(int64_t channels = 0)
        : mean(static_cast<size_t>(channels), T(0)), var(static_cast<size_t>(channels), T(1)) {}
};

// train: batch statistics, running stats updated with momentum.
// eval:  running statistics.
// adapt: batch statistics, running stats untouched (test-time convention).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BnStats<T>& running, BnMode mode, T momentum = T(0.1), T eps = T(1e-5));

#define ETTA_EXTERN_OPS(T)                                                                \
    extern template class Tensor<T>;                                                      \
    extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                    \
    extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                    \
    extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                    \
    extern template Tensor<T> scale(const Tensor<T>&, T);                                 \
    extern template Tensor<T> sum_all(const Tensor<T>&);                                  \
    extern template Tensor<T> mean_all(const Tensor<T>&);                                 \
    extern template Tensor<T> relu(const Tensor<T>&);                                     \
    extern template Tensor<T> leaky_relu(const Tensor<T>&, T);                            \
    extern template Tensor<T> sigmoid(const Tensor<T>&);                                  \
    extern template Tensor<T> softmax_channels(const Tensor<T>&);                         \
    extern template Tensor<T> sign(const Tensor<T>&);                                     \
    extern template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                     int, int);                                           \
    extern template Tensor<T> maxpool2x2(const Tensor<T>&);                               \
    extern template Tensor<T> upsample_nearest2x(const Tensor<T>&);                       \
    extern template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);        \
    extern template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&,              \
                                         const Tensor<T>&, BnStats<T>&, BnMode, T, T);

ETTA_EXTERN_OPS(float)
ETTA_EXTERN_OPS(double)
#undef ETTA_EXTERN_OPS

}  // namespace etta
