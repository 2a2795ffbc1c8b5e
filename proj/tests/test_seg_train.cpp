#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "etta/checkpoint.hpp"
#include "etta/dataset.hpp"
#include "etta/nets.hpp"
#include "etta/seg_train.hpp"
#include "etta/synth.hpp"

using namespace etta;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("etta_test_" + tag);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("zero learning rate trains nothing but still advances running stats") {
    fs::path dir = scratch_dir("seg_lr0");
    build_dataset(dir.string(), 10, DomainSpec::source(), 3, 32, 32);
    Dataset train = Dataset::open(dir.string(), "train");
    Dataset val = Dataset::open(dir.string(), "val");

    SegModel f(3, 16, 4);
    const uint64_t p0 = param_hash(f.state());
    const uint64_t s0 = full_state_hash(f.state());

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.lr = 0.0f;
    train_source(f, train, val, cfg, (dir / "ck.t").string());

    CHECK(param_hash(f.state()) == p0);
    CHECK(full_state_hash(f.state()) != s0);
    fs::remove_all(dir);
}

TEST_CASE("training is bitwise reproducible from the seed") {
    fs::path dir = scratch_dir("seg_repro");
    build_dataset(dir.string(), 10, DomainSpec::source(), 17, 32, 32);
    Dataset train = Dataset::open(dir.string(), "train");
    Dataset val = Dataset::open(dir.string(), "val");

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 9;

    auto run = [&](const std::string& tag) {
        SegModel f(3, 16, 6);
        TrainResult r = train_source(f, train, val, cfg, (dir / (tag + ".ck")).string(),
                                     (dir / (tag + ".csv")).string());
        return std::pair<uint64_t, TrainResult>(full_state_hash(f.state()), r);
    };
    auto [ha, ra] = run("a");
    auto [hb, rb] = run("b");

    CHECK(ha == hb);
    REQUIRE(ra.log.size() == 2);
    REQUIRE(rb.log.size() == 2);
    for (size_t i = 0; i < ra.log.size(); ++i) {
        CHECK(ra.log[i].train_loss == rb.log[i].train_loss);
        CHECK(ra.log[i].val_dice == rb.log[i].val_dice);
    }
    CHECK(ra.best_val_dice == rb.best_val_dice);
    CHECK(ra.best_epoch == rb.best_epoch);
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    CHECK(slurp(dir / "a.ck") == slurp(dir / "b.ck"));

    const std::string log = slurp(dir / "a.csv");
    CHECK(log.rfind("epoch,train_loss,val_dice\n", 0) == 0);

    SUBCASE("the checkpoint holds the best-validation state") {
        SegModel fresh(3, 16, 0);
        ckpt::load((dir / "a.ck").string(), fresh.state());
        CHECK(mean_foreground_dice(fresh, val) == ra.best_val_dice);
        CHECK(ra.best_epoch >= 1);
    }
    fs::remove_all(dir);
}

TEST_CASE("train_source rejects unusable inputs") {
    fs::path dir = scratch_dir("seg_bad");
    // n=2 leaves the 20% validation slice empty, which open() refuses to hand out
    build_dataset((dir / "tiny").string(), 2, DomainSpec::source(), 1, 32, 32);
    CHECK_THROWS_AS(Dataset::open((dir / "tiny").string(), "val"), std::runtime_error);

    build_dataset((dir / "small").string(), 5, DomainSpec::source(), 1, 32, 32);
    Dataset train = Dataset::open((dir / "small").string(), "train");
    Dataset val = Dataset::open((dir / "small").string(), "val");
    REQUIRE(train.size() == 3);
    REQUIRE(val.size() == 1);

    SegModel f(3, 16, 2);
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_WITH_AS(train_source(f, train, val, cfg, (dir / "ck.t").string()),
                         "train_source: epochs and batch must be positive",
                         std::invalid_argument);
    fs::remove_all(dir);
}
