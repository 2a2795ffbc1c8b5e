#include <doctest.h>

#include <cmath>
#include <vector>

#include "etta/adam.hpp"
#include "etta/rng.hpp"
#include "etta/tensor.hpp"

using namespace etta;

namespace {

// Direct nested-loop cross-correlation, the independent oracle for conv2d.
template <typename T>
std::vector<T> conv_oracle(const std::vector<T>& x, int64_t N, int64_t Cin, int64_t H,
                           int64_t W, const std::vector<T>& w, int64_t Cout, int64_t k,
                           const std::vector<T>& b, int64_t stride, int64_t pad, int64_t Ho,
                           int64_t Wo) {
    std::vector<T> y(static_cast<size_t>(N * Cout * Ho * Wo), T(0));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    T acc = b[co];
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t ky = 0; ky < k; ++ky)
                            for (int64_t kx = 0; kx < k; ++kx) {
                                int64_t iy = oy * stride - pad + ky;
                                int64_t ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x[((n * Cin + ci) * H + iy) * W + ix] *
                                       w[((co * Cin + ci) * k + ky) * k + kx];
                            }
                    y[((n * Cout + co) * Ho + oy) * Wo + ox] = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("conv2d all-ones 3x3 sums to 9") {
    TensorF x({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
    TensorF w({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
    TensorF b({1}, {0.0f});
    auto y = conv2d(x, w, b, 1, 0);
    CHECK(y.shape() == std::vector<int64_t>{1, 1, 1, 1});
    CHECK(y.item() == doctest::Approx(9.0f));
}

TEST_CASE("conv2d identity kernel reproduces input") {
    Rng rng(11);
    std::vector<float> xd(2 * 3 * 6 * 6);
    for (auto& v : xd) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    TensorF x({2, 3, 6, 6}, xd);
    const int64_t k = 3;
    std::vector<float> wd(3 * 3 * k * k, 0.0f);
    for (int64_t c = 0; c < 3; ++c) wd[((c * 3 + c) * k + k / 2) * k + k / 2] = 1.0f;
    TensorF w({3, 3, k, k}, wd);
    TensorF b({3}, std::vector<float>(3, 0.0f));
    auto y = conv2d(x, w, b, 1, static_cast<int>(k / 2));
    REQUIRE(y.shape() == x.shape());
    for (size_t i = 0; i < xd.size(); ++i) CHECK(y.data()[i] == doctest::Approx(xd[i]).epsilon(1e-6));
}

TEST_CASE("conv2d matches nested-loop oracle on strided padded case") {
    Rng rng(42);
    std::vector<float> xd(1 * 2 * 8 * 8), wd(3 * 2 * 5 * 5), bd(3);
    for (auto& v : xd) v = static_cast<float>(rng.normal());
    for (auto& v : wd) v = static_cast<float>(rng.normal());
    for (auto& v : bd) v = static_cast<float>(rng.normal());
    TensorF x({1, 2, 8, 8}, xd), w({3, 2, 5, 5}, wd), b({3}, bd);
    auto y = conv2d(x, w, b, 2, 2);
    REQUIRE(y.shape() == std::vector<int64_t>{1, 3, 4, 4});
    auto ref = conv_oracle(xd, 1, 2, 8, 8, wd, 3, 5, bd, 2, 2, 4, 4);
    for (size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(y.data()[i] - ref[i]) < 1e-5f);
}

TEST_CASE("conv2d rejects mismatched shapes") {
    TensorF x({1, 2, 8, 8});
    TensorF w({3, 3, 5, 5});  // channel mismatch
    TensorF b({3});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 2), std::invalid_argument);
    TensorF w2({3, 2, 5, 5});
    TensorF b2({4});
    CHECK_THROWS_AS(conv2d(x, w2, b2, 1, 2), std::invalid_argument);
}

TEST_CASE("batch_norm hand-computed 1x1x2x2 case") {
    TensorF x({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    TensorF gamma({1}, {1.0f});
    TensorF beta({1}, {0.0f});
    BnStats<float> stats(1);
    auto y = batch_norm(x, gamma, beta, stats, BnMode::kTrain);
    const float rstd = 1.0f / std::sqrt(1.25f + 1e-5f);
    const float expect[4] = {(1 - 2.5f) * rstd, (2 - 2.5f) * rstd, (3 - 2.5f) * rstd,
                             (4 - 2.5f) * rstd};
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    // momentum 0.1 with unbiased batch variance (1.25 * 4/3)
    CHECK(stats.mean[0] == doctest::Approx(0.9f * 0.0f + 0.1f * 2.5f));
    CHECK(stats.var[0] == doctest::Approx(0.9f * 1.0f + 0.1f * 1.25f * 4.0f / 3.0f));
}

TEST_CASE("batch_norm keeps already-normalized input and zero gamma gives beta") {
    // channel with mean 0 variance 1
    TensorF x({1, 1, 2, 2}, {-1.0f, 1.0f, -1.0f, 1.0f});
    TensorF gamma({1}, {1.0f});
    TensorF beta({1}, {0.0f});
    BnStats<float> stats(1);
    auto y = batch_norm(x, gamma, beta, stats, BnMode::kTrain);
    const float shrink = 1.0f / std::sqrt(1.0f + 1e-5f);
    for (int i = 0; i < 4; ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i] * shrink).epsilon(1e-6));

    TensorF g0({1}, {0.0f});
    TensorF b7({1}, {7.0f});
    BnStats<float> stats2(1);
    auto y2 = batch_norm(x, g0, b7, stats2, BnMode::kTrain);
    for (int i = 0; i < 4; ++i) CHECK(y2.data()[i] == doctest::Approx(7.0f));
}

TEST_CASE("batch_norm adapt mode leaves running stats bitwise unchanged") {
    Rng rng(3);
    std::vector<float> xd(2 * 3 * 4 * 4);
    for (auto& v : xd) v = static_cast<float>(rng.normal());
    TensorF x({2, 3, 4, 4}, xd);
    TensorF gamma({3}, std::vector<float>(3, 1.0f));
    TensorF beta({3}, std::vector<float>(3, 0.0f));
    BnStats<float> stats(3);
    stats.mean = {0.5f, -0.25f, 0.125f};
    stats.var = {2.0f, 0.5f, 1.5f};
    auto before_mean = stats.mean;
    auto before_var = stats.var;
    auto y_adapt = batch_norm(x, gamma, beta, stats, BnMode::kAdapt);
    CHECK(stats.mean == before_mean);
    CHECK(stats.var == before_var);

    // adapt normalizes by batch stats, eval by running stats
    BnStats<float> stats_train(3);
    auto y_train = batch_norm(x, gamma, beta, stats_train, BnMode::kTrain);
    for (size_t i = 0; i < xd.size(); ++i)
        CHECK(y_adapt.data()[i] == doctest::Approx(y_train.data()[i]));
    auto y_eval = batch_norm(x, gamma, beta, stats, BnMode::kEval);
    const float rstd0 = 1.0f / std::sqrt(2.0f + 1e-5f);
    CHECK(y_eval.data()[0] == doctest::Approx((xd[0] - 0.5f) * rstd0).epsilon(1e-5));
}

TEST_CASE("batch_norm rejects single-element batch statistics") {
    TensorF x({1, 2, 1, 1}, {1.0f, 2.0f});
    TensorF gamma({2}, {1.0f, 1.0f});
    TensorF beta({2}, {0.0f, 0.0f});
    BnStats<float> stats(2);
    CHECK_THROWS_AS(batch_norm(x, gamma, beta, stats, BnMode::kTrain), std::invalid_argument);
    CHECK_THROWS_AS(batch_norm(x, gamma, beta, stats, BnMode::kAdapt), std::invalid_argument);
    CHECK_NOTHROW(batch_norm(x, gamma, beta, stats, BnMode::kEval));
}

TEST_CASE("leaky_relu closed forms at slope 0.2") {
    TensorF x({3}, {3.0f, -5.0f, 0.0f});
    auto y = leaky_relu(x, 0.2f);
    CHECK(y.data()[0] == doctest::Approx(3.0f));
    CHECK(y.data()[1] == doctest::Approx(-1.0f));
    CHECK(y.data()[2] == doctest::Approx(0.0f));
}

TEST_CASE("sigmoid closed forms and saturation") {
    TensorF x({3}, {0.0f, 1000.0f, -std::log(3.0f)});
    auto y = sigmoid(x);
    CHECK(y.data()[0] == doctest::Approx(0.5f));
    CHECK(y.data()[1] == doctest::Approx(1.0f));
    CHECK(std::isfinite(y.data()[1]));
    CHECK(y.data()[2] == doctest::Approx(0.25f).epsilon(1e-6));
    TensorF big({2}, {-1000.0f, 745.0f});
    auto yb = sigmoid(big);
    CHECK(yb.data()[0] >= 0.0f);
    CHECK(yb.data()[1] <= 1.0f);
}

TEST_CASE("softmax_channels closed forms") {
    TensorF zeros({1, 3, 1, 1}, {0.0f, 0.0f, 0.0f});
    auto u = softmax_channels(zeros);
    for (int c = 0; c < 3; ++c) CHECK(u.data()[c] == doctest::Approx(1.0f / 3.0f));

    TensorF sat({1, 3, 1, 1}, {2.0f, 2.0f, 1002.0f});
    auto s = softmax_channels(sat);
    CHECK(s.data()[0] == doctest::Approx(0.0f).epsilon(1e-6));
    CHECK(s.data()[1] == doctest::Approx(0.0f).epsilon(1e-6));
    CHECK(s.data()[2] == doctest::Approx(1.0f).epsilon(1e-6));

    TensorF ln({1, 3, 1, 1}, {std::log(1.0f), std::log(2.0f), std::log(3.0f)});
    auto p = softmax_channels(ln);
    CHECK(p.data()[0] == doctest::Approx(1.0f / 6.0f));
    CHECK(p.data()[1] == doctest::Approx(2.0f / 6.0f));
    CHECK(p.data()[2] == doctest::Approx(3.0f / 6.0f));
}

TEST_CASE("softmax_channels sums to one per pixel and requires C >= 2") {
    Rng rng(5);
    std::vector<float> xd(2 * 4 * 3 * 3);
    for (auto& v : xd) v = static_cast<float>(rng.uniform(-4.0, 4.0));
    TensorF x({2, 4, 3, 3}, xd);
    auto p = softmax_channels(x);
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 9; ++i) {
            float s = 0;
            for (int c = 0; c < 4; ++c) s += p.data()[(n * 4 + c) * 9 + i];
            CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
        }
    TensorF bad({1, 1, 2, 2});
    CHECK_THROWS_AS(softmax_channels(bad), std::invalid_argument);
}

TEST_CASE("sign is detached and matches elementwise definition") {
    TensorF x({3}, {-3.2f, 0.0f, 7.1f}, true);
    auto s = sign(x);
    CHECK(s.data() == std::vector<float>{-1.0f, 0.0f, 1.0f});
    CHECK_FALSE(s.is_graph_node());
    CHECK_FALSE(s.requires_grad());
    auto z = sign(TensorF({4}, std::vector<float>(4, 0.0f)));
    CHECK(z.data() == std::vector<float>(4, 0.0f));
}

TEST_CASE("backward of sum gives unit gradients") {
    TensorF x({4}, {1.0f, 2.0f, 3.0f, 4.0f}, true);
    sum_all(x).backward();
    CHECK(x.grad() == std::vector<float>(4, 1.0f));
}

TEST_CASE("backward of sum of squares is 2x") {
    TensorF x({2}, {1.0f, -2.0f}, true);
    sum_all(mul(x, x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
    CHECK(x.grad()[1] == doctest::Approx(-4.0f));
}

TEST_CASE("gradients accumulate additively across backward calls") {
    TensorF x({2}, {1.0f, 2.0f}, true);
    sum_all(x).backward();
    sum_all(x).backward();
    CHECK(x.grad() == std::vector<float>{2.0f, 2.0f});
    x.zero_grad();
    CHECK(x.grad() == std::vector<float>{0.0f, 0.0f});
}

TEST_CASE("backward rejects non-scalar losses") {
    TensorF x({2}, {1.0f, 2.0f}, true);
    auto y = add(x, x);
    CHECK_THROWS_AS(y.backward(), std::invalid_argument);
}

TEST_CASE("backward through shared subexpression sums both paths") {
    // y = x*x + x  =>  dy/dx = 2x + 1
    TensorF x({1}, {3.0f}, true);
    auto y = add(mul(x, x), x);
    sum_all(y).backward();
    CHECK(x.grad()[0] == doctest::Approx(7.0f));
}

TEST_CASE("maxpool upsample concat shapes and values") {
    TensorF x({1, 1, 2, 2}, {1.0f, 5.0f, 3.0f, 2.0f}, true);
    auto m = maxpool2x2(x);
    CHECK(m.shape() == std::vector<int64_t>{1, 1, 1, 1});
    CHECK(m.item() == doctest::Approx(5.0f));
    sum_all(m).backward();
    CHECK(x.grad() == std::vector<float>{0.0f, 1.0f, 0.0f, 0.0f});

    TensorF u0({1, 1, 1, 2}, {1.0f, 2.0f});
    auto up = upsample_nearest2x(u0);
    CHECK(up.shape() == std::vector<int64_t>{1, 1, 2, 4});
    CHECK(up.data() == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2});

    TensorF a({1, 1, 1, 2}, {1.0f, 2.0f});
    TensorF b({1, 2, 1, 2}, {3.0f, 4.0f, 5.0f, 6.0f});
    auto c = concat_channels(a, b);
    CHECK(c.shape() == std::vector<int64_t>{1, 3, 1, 2});
    CHECK(c.data() == std::vector<float>{1, 2, 3, 4, 5, 6});
    TensorF bad({1, 1, 2, 2});
    CHECK_THROWS_AS(concat_channels(a, bad), std::invalid_argument);
}

TEST_CASE("adam first step moves by about minus lr") {
    TensorD p({1}, {0.0}, true);
    p.grad()[0] = 1.0;
    Adam<double> opt({p}, AdamConfig<double>{0.1, 0.9, 0.999, 1e-8});
    opt.step();
    CHECK(std::abs(p.data()[0] - (-0.1)) < 1e-6);
}

TEST_CASE("adam leaves params unchanged under zero gradients") {
    TensorF p({3}, {1.0f, -2.0f, 0.5f}, true);
    (void)p.grad();  // allocate zeros
    Adam<float> opt({p}, AdamConfig<float>{});
    opt.step();
    CHECK(p.data() == std::vector<float>{1.0f, -2.0f, 0.5f});
}

TEST_CASE("adam two steps match scripted scalar reference") {
    TensorD p({1}, {0.5}, true);
    AdamConfig<double> cfg{0.01, 0.9, 0.999, 1e-8};
    Adam<double> opt({p}, cfg);

    // independent scalar trace with constant gradient 1
    double ref = 0.5, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
        m = 0.9 * m + 0.1 * 1.0;
        v = 0.999 * v + 0.001 * 1.0;
        double mhat = m / (1.0 - std::pow(0.9, t));
        double vhat = v / (1.0 - std::pow(0.999, t));
        ref -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
    }

    p.grad()[0] = 1.0;
    opt.step();
    p.zero_grad();
    p.grad()[0] = 1.0;
    opt.step();
    CHECK(std::abs(p.data()[0] - ref) < 1e-9);
    CHECK(opt.step_count() == 2);
}

TEST_CASE("adam requires gradients to be present") {
    TensorF p({2}, {0.0f, 0.0f}, true);
    Adam<float> opt({p}, AdamConfig<float>{});
    CHECK_THROWS_AS(opt.step(), std::runtime_error);
}

TEST_CASE("identical op sequences are bitwise deterministic") {
    auto run = [] {
        Rng rng(99);
        std::vector<float> xd(1 * 2 * 8 * 8), wd(4 * 2 * 3 * 3), bd(4);
        for (auto& v : xd) v = static_cast<float>(rng.normal());
        for (auto& v : wd) v = static_cast<float>(rng.normal());
        for (auto& v : bd) v = static_cast<float>(rng.normal());
        TensorF x({1, 2, 8, 8}, xd, true);
        TensorF w({4, 2, 3, 3}, wd, true);
        TensorF b({4}, bd, true);
        auto y = mean_all(relu(conv2d(x, w, b, 1, 1)));
        y.backward();
        std::vector<float> out = y.data();
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        return out;
    };
    CHECK(run() == run());
}
