#include "etta/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "etta/losses.hpp"
#include "etta/rng.hpp"

namespace etta::gradcheck {

namespace {

TensorD random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Values pushed away from 0 so piecewise-linear kinks stay out of the
// finite-difference window.
TensorD random_kink_free(std::vector<int64_t> shape, Rng& rng) {
    TensorD t(std::move(shape));
    for (auto& v : t.data()) {
        double x = rng.uniform(0.05, 1.0);
        v = rng.bernoulli(0.5) ? x : -x;
    }
    return t;
}

}  // namespace

CheckResult check_scalar_fn(const std::string& name,
                            const std::function<TensorD(const TensorD&)>& loss_fn,
                            TensorD probe, int probes, uint64_t seed, double h, double tol) {
    const bool prior_rg = probe.requires_grad();
    probe.set_requires_grad(true);
    probe.zero_grad();  // clear residue left by earlier checks sharing this tensor
    TensorD loss = loss_fn(probe);
    if (loss.numel() != 1) throw std::logic_error("gradcheck: loss_fn must return a scalar");
    loss.backward();
    std::vector<double> analytic = probe.has_grad()
                                       ? probe.grad()
                                       : std::vector<double>(probe.data().size(), 0.0);
    probe.zero_grad();
    probe.set_requires_grad(prior_rg);

    Rng rng(derive_seed(seed, 0x67636b));
    const int64_t n = probe.numel();
    const int want = std::min<int64_t>(probes, n);
    std::vector<int64_t> idx;
    while (static_cast<int>(idx.size()) < want) {
        int64_t i = rng.uniform_int(n);
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
    }

    CheckResult res{name, 0.0, true};
    for (int64_t i : idx) {
        const double x0 = probe.data()[i];
        probe.data()[i] = x0 + h;
        const double fp = loss_fn(probe).item();
        probe.data()[i] = x0 - h;
        const double fm = loss_fn(probe).item();
        probe.data()[i] = x0;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
        const double rel = std::abs(a - numeric) / denom;
        res.max_rel_err = std::max(res.max_rel_err, rel);
        if (!(rel < tol) || !std::isfinite(a)) res.ok = false;
    }
    return res;
}

std::vector<CheckResult> run_suite(uint64_t seed, bool verbose) {
    std::vector<CheckResult> out;
    int case_id = 0;
    auto run = [&](const std::string& name, const std::function<TensorD(const TensorD&)>& fn,
                   TensorD probe) {
        out.push_back(check_scalar_fn(name, fn, std::move(probe), 10,
                                      derive_seed(seed, 1000 + case_id++)));
        if (verbose)
            std::printf("%-34s max_rel_err=%.3e %s\n", out.back().name.c_str(),
                        out.back().max_rel_err, out.back().ok ? "ok" : "FAIL");
    };

    Rng rng(derive_seed(seed, 1));
    // fixed weighting turns any op output into a scalar with dense gradients
    auto weighted = [](TensorD w) {
        return [w](TensorD y) { return sum_all(mul(y, w)); };
    };

    {
        auto w = random_tensor({2, 3, 4, 4}, rng);
        auto other = random_tensor({2, 3, 4, 4}, rng);
        auto red = weighted(w);
        run("add", [&, red](const TensorD& x) { return red(add(x, other)); },
            random_tensor({2, 3, 4, 4}, rng));
        run("sub", [&, red](const TensorD& x) { return red(sub(other, x)); },
            random_tensor({2, 3, 4, 4}, rng));
        run("mul.lhs", [&, red](const TensorD& x) { return red(mul(x, other)); },
            random_tensor({2, 3, 4, 4}, rng));
        run("mul.rhs", [&, red](const TensorD& x) { return red(mul(other, x)); },
            random_tensor({2, 3, 4, 4}, rng));
        run("scale", [&, red](const TensorD& x) { return red(scale(x, 2.75)); },
            random_tensor({2, 3, 4, 4}, rng));
        run("sum_all", [](const TensorD& x) { return sum_all(x); },
            random_tensor({2, 3, 4, 4}, rng));
        run("mean_all", [](const TensorD& x) { return mean_all(x); },
            random_tensor({2, 3, 4, 4}, rng));
        run("relu", [&, red](const TensorD& x) { return red(relu(x)); },
            random_kink_free({2, 3, 4, 4}, rng));
        run("leaky_relu", [&, red](const TensorD& x) { return red(leaky_relu(x, 0.2)); },
            random_kink_free({2, 3, 4, 4}, rng));
        run("sigmoid", [&, red](const TensorD& x) { return red(sigmoid(x)); },
            random_tensor({2, 3, 4, 4}, rng, -4.0, 4.0));
        run("softmax_channels",
            [&, red](const TensorD& x) { return red(softmax_channels(x)); },
            random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0));
    }

    {
        auto x0 = random_tensor({2, 2, 6, 6}, rng);
        auto w0 = random_tensor({3, 2, 3, 3}, rng);
        auto b0 = random_tensor({3}, rng);
        auto wo = random_tensor({2, 3, 3, 3}, rng);  // stride 2, pad 1 on 6x6
        auto red = weighted(wo);
        run("conv2d.input",
            [&, red](const TensorD& x) { return red(conv2d(x, w0, b0, 2, 1)); }, x0);
        run("conv2d.weight",
            [&, red](const TensorD& w) { return red(conv2d(x0, w, b0, 2, 1)); }, w0);
        run("conv2d.bias",
            [&, red](const TensorD& b) { return red(conv2d(x0, w0, b, 2, 1)); }, b0);
    }

    {
        auto w = random_tensor({2, 2, 2, 2}, rng);
        auto red = weighted(w);
        run("maxpool2x2", [&, red](const TensorD& x) { return red(maxpool2x2(x)); },
            random_tensor({2, 2, 4, 4}, rng));
        auto wu = random_tensor({2, 2, 8, 8}, rng);
        auto redu = weighted(wu);
        run("upsample_nearest2x",
            [&, redu](const TensorD& x) { return redu(upsample_nearest2x(x)); },
            random_tensor({2, 2, 4, 4}, rng));
        auto other = random_tensor({2, 3, 4, 4}, rng);
        auto wc = random_tensor({2, 5, 4, 4}, rng);
        auto redc = weighted(wc);
        run("concat_channels.lhs",
            [&, redc](const TensorD& a) { return redc(concat_channels(a, other)); },
            random_tensor({2, 2, 4, 4}, rng));
        auto wc2 = random_tensor({2, 5, 4, 4}, rng);
        auto redc2 = weighted(wc2);
        run("concat_channels.rhs",
            [&, redc2](const TensorD& b) { return redc2(concat_channels(other, b)); },
            random_tensor({2, 2, 4, 4}, rng));
    }

    {
        auto x0 = random_tensor({2, 3, 4, 4}, rng);
        auto gamma0 = random_tensor({3}, rng, 0.5, 1.5);
        auto beta0 = random_tensor({3}, rng);
        BnStats<double> stats0(3);
        for (auto& v : stats0.mean) v = rng.uniform(-0.5, 0.5);
        for (auto& v : stats0.var) v = rng.uniform(0.5, 2.0);
        auto w = random_tensor({2, 3, 4, 4}, rng);
        auto red = weighted(w);
        for (BnMode mode : {BnMode::kTrain, BnMode::kEval, BnMode::kAdapt}) {
            const char* mn = mode == BnMode::kTrain ? "train"
                             : mode == BnMode::kEval ? "eval"
                                                     : "adapt";
            run(std::string("batch_norm.") + mn + ".input",
                [=](const TensorD& x) {
                    BnStats<double> s = stats0;
                    return red(batch_norm(x, gamma0, beta0, s, mode));
                },
                x0);
            run(std::string("batch_norm.") + mn + ".gamma",
                [=](const TensorD& g) {
                    BnStats<double> s = stats0;
                    return red(batch_norm(x0, g, beta0, s, mode));
                },
                gamma0);
            run(std::string("batch_norm.") + mn + ".beta",
                [=](const TensorD& b) {
                    BnStats<double> s = stats0;
                    return red(batch_norm(x0, gamma0, b, s, mode));
                },
                beta0);
        }
    }

    {
        // losses; probs strictly inside (0,1) so dice stays smooth
        const int64_t N = 2, C = 3, H = 4, W = 4;
        TensorD onehot({N, C, H, W});
        std::vector<uint8_t> labels(static_cast<size_t>(N * H * W));
        Rng lr(derive_seed(seed, 2));
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < H * W; ++i) {
                int cls = static_cast<int>(lr.uniform_int(C));
                labels[n * H * W + i] = static_cast<uint8_t>(cls);
                onehot.data()[(n * C + cls) * H * W + i] = 1.0;
            }
        run("dice_loss",
            [onehot](const TensorD& p) { return dice_loss(p, onehot, 1e-5); },
            random_tensor({N, C, H, W}, rng, 0.05, 0.95));
        run("cross_entropy_loss",
            [labels](const TensorD& z) { return cross_entropy_loss(z, labels); },
            random_tensor({N, C, H, W}, rng, -2.0, 2.0));
        std::vector<double> targets(static_cast<size_t>(N * H * W));
        for (auto& t : targets) t = lr.bernoulli(0.5) ? 1.0 : 0.0;
        run("bce_with_logits",
            [targets](const TensorD& z) { return bce_with_logits(z, targets); },
            random_tensor({N, 1, H, W}, rng, -3.0, 3.0));
        run("softmax_entropy_mean",
            [](const TensorD& z) { return softmax_entropy_mean(z); },
            random_tensor({N, C, H, W}, rng, -2.0, 2.0));
    }

    return out;
}

bool all_ok(const std::vector<CheckResult>& results) {
    return std::all_of(results.begin(), results.end(),
                       [](const CheckResult& r) { return r.ok; });
}

}  // namespace etta::gradcheck
