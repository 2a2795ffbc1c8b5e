#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "etta/checkpoint.hpp"
#include "etta/dataset.hpp"
#include "etta/energy_train.hpp"
#include "etta/gradcheck.hpp"
#include "etta/nets.hpp"
#include "etta/seg_train.hpp"
#include "etta/synth.hpp"
#include "etta/tta.hpp"

namespace {

using namespace etta;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Flag {
    const char* name;
    const char* def;  // nullptr = required
    const char* help;
    bool is_switch = false;
    std::string value;
    bool set = false;
};

class Command {
public:
    Command(std::string name, std::string blurb, std::vector<Flag> flags)
        : name_(std::move(name)), blurb_(std::move(blurb)), flags_(std::move(flags)) {
        flags_.push_back({"config", "", "key=value file, explicit flags win", false, "", false});
    }

    const std::string& name() const { return name_; }

    void usage(std::FILE* out) const {
        std::fprintf(out, "usage: etta %s [flags]\n  %s\n", name_.c_str(), blurb_.c_str());
        for (const Flag& f : flags_) {
            if (f.is_switch)
                std::fprintf(out, "  --%-18s %s (off by default)\n", f.name, f.help);
            else if (f.def)
                std::fprintf(out, "  --%-18s %s (default %s)\n", f.name, f.help,
                             *f.def ? f.def : "empty");
            else
                std::fprintf(out, "  --%-18s %s (required)\n", f.name, f.help);
        }
    }

    // false = --help handled, nothing to run
    bool parse(int argc, char** argv) {
        for (int i = 0; i < argc; ++i) {
            std::string a = argv[i];
            if (a == "--help" || a == "-h") {
                usage(stdout);
                return false;
            }
            if (a.rfind("--", 0) != 0)
                throw UsageError(name_ + ": unexpected argument '" + a + "'");
            Flag* f = find(a.substr(2));
            if (!f) throw UsageError(name_ + ": unknown flag '" + a + "'");
            if (f->is_switch) {
                f->value = "1";
                f->set = true;
                continue;
            }
            if (i + 1 >= argc) throw UsageError(name_ + ": flag '" + a + "' needs a value");
            f->value = argv[++i];
            f->set = true;
        }
        if (Flag* c = find("config"); c->set) apply_config(c->value);
        for (Flag& f : flags_) {
            if (!f.set && !f.is_switch) {
                if (!f.def)
                    throw UsageError(name_ + ": missing required flag '--" +
                                     std::string(f.name) + "'");
                f.value = f.def;
            }
        }
        return true;
    }

    const std::string& str(const char* name) const { return find_checked(name).value; }

    int64_t i64(const char* name) const {
        const std::string& s = str(name);
        try {
            size_t pos = 0;
            long long v = std::stoll(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError(name_ + ": flag '--" + name + "' expects an integer, got '" + s +
                             "'");
        }
    }

    uint64_t u64(const char* name) const {
        const std::string& s = str(name);
        try {
            size_t pos = 0;
            unsigned long long v = std::stoull(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError(name_ + ": flag '--" + name + "' expects an unsigned integer, got '" +
                             s + "'");
        }
    }

    double f64(const char* name) const {
        const std::string& s = str(name);
        try {
            size_t pos = 0;
            double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError(name_ + ": flag '--" + name + "' expects a number, got '" + s +
                             "'");
        }
    }

    bool on(const char* name) const {
        const std::string& v = find_checked(name).value;
        return v == "1" || v == "true";
    }

private:
    Flag* find(const std::string& key) {
        for (Flag& f : flags_)
            if (key == f.name) return &f;
        return nullptr;
    }

    const Flag& find_checked(const char* key) const {
        for (const Flag& f : flags_)
            if (std::strcmp(key, f.name) == 0) return f;
        throw std::logic_error(std::string("flag table misses '") + key + "'");
    }

    void apply_config(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw UsageError(path + ": cannot open config file");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (size_t hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            auto trim = [](const std::string& s) {
                size_t a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                size_t b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            std::string t = trim(line);
            if (t.empty()) continue;
            size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
            std::string key = trim(t.substr(0, eq));
            std::string val = trim(t.substr(eq + 1));
            Flag* f = find(key);
            if (!f || key == "config")
                throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                                 "'");
            if (!f->set) {
                f->value = val;
                f->set = true;
            }
        }
    }

    std::string name_;
    std::string blurb_;
    std::vector<Flag> flags_;
};

int dispatch(Command& c, int argc, char** argv, const std::function<int(Command&)>& run) {
    try {
        if (!c.parse(argc, argv)) return 0;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "etta: %s\n", e.what());
        c.usage(stderr);
        return 1;
    }
    try {
        return run(c);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "etta: %s\n", e.what());
        c.usage(stderr);
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "etta %s: %s\n", c.name().c_str(), e.what());
        return 2;
    }
}

SegModel load_seg(const std::string& path) {
    SegModel f;
    ckpt::load(path, f.state());
    return f;
}

EnergyModel load_energy(const std::string& path) {
    EnergyModel g;
    ckpt::load(path, g.state());
    return g;
}

int cmd_gen_data(int argc, char** argv) {
    Command c("gen-data", "write a synthetic dataset directory",
              {{"out", nullptr, "output directory"},
               {"n", nullptr, "number of samples"},
               {"domain", "source", "rendering domain, source|target"},
               {"seed", "0", "master seed"},
               {"h", "64", "sample height"},
               {"w", "64", "sample width"},
               {"force", nullptr, "overwrite a non-empty directory", true}});
    return dispatch(c, argc, argv, [](Command& a) {
        DomainSpec domain;
        try {
            domain = DomainSpec::by_name(a.str("domain"));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        const int64_t n = a.i64("n");
        build_dataset(a.str("out"), static_cast<int>(n), domain, a.u64("seed"), a.i64("h"),
                      a.i64("w"), a.on("force"));
        std::printf("wrote %lld %s samples to %s\n", static_cast<long long>(n),
                    domain.name.c_str(), a.str("out").c_str());
        return 0;
    });
}

int cmd_train_seg(int argc, char** argv) {
    Command c("train-seg", "train the segmentation model on a source dataset",
              {{"data", nullptr, "dataset directory"},
               {"out", nullptr, "checkpoint path for the best validation state"},
               {"epochs", "30", "training epochs"},
               {"batch", "8", "batch size"},
               {"lr", "1e-4", "Adam learning rate"},
               {"augment-p", "0.5", "per-sample augmentation probability"},
               {"seed", "0", "master seed (weights, shuffling, augmentation)"},
               {"log-csv", "", "per-epoch CSV log path"}});
    return dispatch(c, argc, argv, [](Command& a) {
        Dataset train = Dataset::open(a.str("data"), "train");
        Dataset val = Dataset::open(a.str("data"), "val");
        TrainConfig cfg;
        cfg.epochs = static_cast<int>(a.i64("epochs"));
        cfg.batch = static_cast<int>(a.i64("batch"));
        cfg.lr = static_cast<float>(a.f64("lr"));
        cfg.augment_p = a.f64("augment-p");
        cfg.seed = a.u64("seed");
        SegModel model(3, 16, cfg.seed);
        TrainResult r = train_source(model, train, val, cfg, a.str("out"), a.str("log-csv"));
        std::printf("best_val_dice %.9g at epoch %d, checkpoint %s\n", r.best_val_dice,
                    r.best_epoch, a.str("out").c_str());
        return 0;
    });
}

int cmd_train_energy(int argc, char** argv) {
    Command c("train-energy", "train the patch energy discriminator against a frozen model",
              {{"data", nullptr, "source dataset directory"},
               {"seg", nullptr, "trained segmentation checkpoint"},
               {"out", nullptr, "output energy checkpoint"},
               {"delta", "0.1", "FGSM perturbation magnitude"},
               {"tau", "50", "patch label threshold (mismatched pixels)"},
               {"patch", "16", "patch edge length"},
               {"epochs", "40", "training epochs"},
               {"batch", "8", "samples per batch (doubled with ground-truth positives)"},
               {"lr", "1e-4", "base Adam learning rate"},
               {"warmup", "1000", "linear warmup steps before cosine decay"},
               {"spatial-p", "0.5", "affine warp probability"},
               {"noise-sigma", "0.05", "pixel label noise sigma"},
               {"dropout-rate", "0.15", "16x16 patch dropout probability"},
               {"seed", "0", "master seed"},
               {"log-csv", "", "per-step CSV log path"}});
    return dispatch(c, argc, argv, [](Command& a) {
        Dataset train = Dataset::open(a.str("data"), "train");
        SegModel f = load_seg(a.str("seg"));
        EnergyTrainConfig cfg;
        cfg.epochs = static_cast<int>(a.i64("epochs"));
        cfg.batch = static_cast<int>(a.i64("batch"));
        cfg.lr = static_cast<float>(a.f64("lr"));
        cfg.warmup_steps = static_cast<int>(a.i64("warmup"));
        cfg.tau = static_cast<int>(a.i64("tau"));
        cfg.patch = static_cast<int>(a.i64("patch"));
        cfg.seed = a.u64("seed");
        cfg.perturb.delta = static_cast<float>(a.f64("delta"));
        cfg.perturb.spatial_p = a.f64("spatial-p");
        cfg.perturb.pixel_noise_sigma = a.f64("noise-sigma");
        cfg.perturb.patch_dropout_rate = a.f64("dropout-rate");
        EnergyModel g(3, cfg.seed);
        EnergyTrainResult r = train_energy(g, f, train, cfg, a.str("log-csv"));
        ckpt::save(a.str("out"), g.state());
        std::printf("steps %lld final_loss %.9g final_patch_accuracy %.9g pos_fraction %.9g\n",
                    static_cast<long long>(r.steps), r.final_loss, r.final_patch_accuracy,
                    r.last_epoch_pos_fraction);
        return 0;
    });
}

int cmd_adapt(int argc, char** argv) {
    Command c("adapt", "stream a dataset split through test-time adaptation",
              {{"data", nullptr, "dataset directory"},
               {"seg", nullptr, "segmentation checkpoint"},
               {"energy", "", "energy checkpoint (required for --method energy)"},
               {"method", "energy", "adaptation objective, energy|tent|none"},
               {"iters", "10", "update steps per batch"},
               {"lr", "1e-3", "Adam learning rate over BatchNorm affine parameters"},
               {"batch", "4", "stream batch size"},
               {"split", "test", "dataset split, train|val|test|all"},
               {"out-csv", nullptr, "per-batch report CSV"},
               {"emit-energy-maps", "", "directory for per-iteration PGM energy maps"},
               {"no-restore", nullptr, "keep adapting continually instead of per-batch", true}});
    return dispatch(c, argc, argv, [](Command& a) {
        AdaptConfig cfg;
        try {
            cfg.method = adapt_method_from_string(a.str("method"));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        cfg.iters = static_cast<int>(a.i64("iters"));
        cfg.lr = static_cast<float>(a.f64("lr"));
        cfg.batch = static_cast<int>(a.i64("batch"));
        cfg.restore = !a.on("no-restore");
        if (cfg.method == AdaptMethod::kEnergy && a.str("energy").empty())
            throw UsageError("adapt: --method energy requires --energy CKPT");

        Dataset ds = Dataset::open(a.str("data"), a.str("split"));
        SegModel f = load_seg(a.str("seg"));
        std::unique_ptr<EnergyModel> g;
        if (cfg.method != AdaptMethod::kNone && !a.str("energy").empty())
            g = std::make_unique<EnergyModel>(load_energy(a.str("energy")));
        StreamSummary s = run_stream(f, g.get(), ds, cfg, a.str("out-csv"),
                                     a.str("emit-energy-maps"));
        std::printf(
            "batches %zu pre_dice %.9g post_dice %.9g pre_asd %.9g post_asd %.9g "
            "frac_energy_decreased %.9g\n",
            s.batches.size(), s.pre_dice, s.post_dice, s.pre_asd, s.post_asd,
            s.frac_energy_decreased);
        return 0;
    });
}

int cmd_eval(int argc, char** argv) {
    Command c("eval", "score a checkpoint on a dataset split without adaptation",
              {{"data", nullptr, "dataset directory"},
               {"seg", nullptr, "segmentation checkpoint"},
               {"split", "test", "dataset split, train|val|test|all"},
               {"batch", "4", "evaluation batch size"},
               {"out-csv", nullptr, "per-batch report CSV"}});
    return dispatch(c, argc, argv, [](Command& a) {
        Dataset ds = Dataset::open(a.str("data"), a.str("split"));
        SegModel f = load_seg(a.str("seg"));
        AdaptConfig cfg;
        cfg.method = AdaptMethod::kNone;
        cfg.batch = static_cast<int>(a.i64("batch"));
        StreamSummary s = run_stream(f, nullptr, ds, cfg, a.str("out-csv"));
        std::printf("batches %zu dice %.9g asd %.9g\n", s.batches.size(), s.pre_dice,
                    s.pre_asd);
        return 0;
    });
}

int cmd_eval_energy(int argc, char** argv) {
    Command c("eval-energy", "score the discriminator on curated held-out patches",
              {{"data", nullptr, "dataset directory"},
               {"seg", nullptr, "segmentation checkpoint"},
               {"energy", nullptr, "energy checkpoint"},
               {"split", "val", "dataset split, train|val|test|all"},
               {"delta", "0.1", "FGSM perturbation magnitude"},
               {"tau", "50", "patch label threshold"},
               {"patch", "16", "patch edge length"},
               {"batch", "8", "samples per batch"},
               {"spatial-p", "0.5", "affine warp probability"},
               {"noise-sigma", "0.05", "pixel label noise sigma"},
               {"dropout-rate", "0.15", "16x16 patch dropout probability"},
               {"seed", "0", "evaluation perturbation seed"}});
    return dispatch(c, argc, argv, [](Command& a) {
        Dataset ds = Dataset::open(a.str("data"), a.str("split"));
        SegModel f = load_seg(a.str("seg"));
        EnergyModel g = load_energy(a.str("energy"));
        EnergyTrainConfig cfg;
        cfg.batch = static_cast<int>(a.i64("batch"));
        cfg.tau = static_cast<int>(a.i64("tau"));
        cfg.patch = static_cast<int>(a.i64("patch"));
        cfg.seed = a.u64("seed");
        cfg.perturb.delta = static_cast<float>(a.f64("delta"));
        cfg.perturb.spatial_p = a.f64("spatial-p");
        cfg.perturb.pixel_noise_sigma = a.f64("noise-sigma");
        cfg.perturb.patch_dropout_rate = a.f64("dropout-rate");
        EnergyAccuracy r = eval_energy_accuracy(g, f, ds, cfg);
        std::printf("overall,on_clean,on_ood,n_clean,n_ood\n%.9g,%.9g,%.9g,%lld,%lld\n",
                    r.overall, r.on_clean, r.on_ood, static_cast<long long>(r.n_clean),
                    static_cast<long long>(r.n_ood));
        return 0;
    });
}

int cmd_gradcheck(int argc, char** argv) {
    Command c("gradcheck", "finite-difference checks for every primitive and loss",
              {{"seed", "0", "probe seed"},
               {"quiet", nullptr, "suppress per-check lines", true}});
    return dispatch(c, argc, argv, [](Command& a) {
        auto results = gradcheck::run_suite(a.u64("seed"), !a.on("quiet"));
        const bool ok = gradcheck::all_ok(results);
        std::printf("gradcheck: %zu checks, %s\n", results.size(), ok ? "all ok" : "FAILED");
        if (!ok) throw std::runtime_error("finite-difference suite failed");
        return 0;
    });
}

void top_usage(std::FILE* out) {
    std::fprintf(out,
                 "usage: etta <command> [flags]\n"
                 "commands:\n"
                 "  gen-data      write a synthetic dataset directory\n"
                 "  train-seg     train the segmentation model\n"
                 "  train-energy  train the patch energy discriminator\n"
                 "  adapt         test-time adaptation over a stream\n"
                 "  eval          score a checkpoint without adaptation\n"
                 "  eval-energy   score the discriminator on curated patches\n"
                 "  gradcheck     finite-difference gradient suite\n"
                 "run 'etta <command> --help' for the full flag list\n");
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        top_usage(stderr);
        return 1;
    }
    const std::string cmd = argv[1];
    if (cmd == "--help" || cmd == "-h" || cmd == "help") {
        top_usage(stdout);
        return 0;
    }
    if (cmd == "gen-data") return cmd_gen_data(argc - 2, argv + 2);
    if (cmd == "train-seg") return cmd_train_seg(argc - 2, argv + 2);
    if (cmd == "train-energy") return cmd_train_energy(argc - 2, argv + 2);
    if (cmd == "adapt") return cmd_adapt(argc - 2, argv + 2);
    if (cmd == "eval") return cmd_eval(argc - 2, argv + 2);
    if (cmd == "eval-energy") return cmd_eval_energy(argc - 2, argv + 2);
    if (cmd == "gradcheck") return cmd_gradcheck(argc - 2, argv + 2);
    std::fprintf(stderr, "etta: unknown command '%s'\n", cmd.c_str());
    top_usage(stderr);
    return 1;
}
