// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// fails. Criterion 9 shells out to the CLI binary (--cli PATH); scratch files
// land under --scratch DIR.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "p3d/autodiff.hpp"
#include "p3d/io_util.hpp"
#include "p3d/metrics.hpp"
#include "p3d/model.hpp"
#include "p3d/pipeline.hpp"
#include "p3d/rng.hpp"
#include "p3d/training.hpp"
#include "p3d/transfer.hpp"

namespace fs = std::filesystem;
using namespace p3d;
using testutil::random_kernel2d;
using testutil::random_tensor;

namespace {

struct Context {
    std::string cli;
    fs::path scratch;
};

struct Outcome {
    bool pass = false;
    std::string detail;
};

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// --- 1: slice equivalence ------------------------------------------------------

Outcome criterion_slice_equivalence(const Context&) {
    Rng rng(20240101);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const std::int64_t cin = 1 + static_cast<std::int64_t>(rng.below(4));
        const std::int64_t cout = 1 + static_cast<std::int64_t>(rng.below(4));
        const std::int64_t depth = 1 + static_cast<std::int64_t>(rng.below(16));
        const std::int64_t h = 8 + static_cast<std::int64_t>(rng.below(9));
        const std::int64_t w = 8 + static_cast<std::int64_t>(rng.below(9));
        const PadMode pad = rep % 2 ? PadMode::kSame : PadMode::kValid;

        const Kernel2D k2 = random_kernel2d<float>(rng, cout, cin, 3, 3);
        ConvWeights w3 = map_kernel_2d_to_3d(k2);
        w3.padding = pad;
        const Tensor vol = random_tensor<float>(rng, {1, cin, depth, h, w});
        const Tensor y3 = conv3d(vol, w3);

        for (std::int64_t d = 0; d < depth; ++d) {
            Tensor x2({1, cin, h, w});
            for (std::int64_t c = 0; c < cin; ++c)
                for (std::int64_t i = 0; i < h; ++i)
                    for (std::int64_t j = 0; j < w; ++j)
                        x2.at4(0, c, i, j) = vol.at5(0, c, d, i, j);
            const Tensor y2 = conv2d(x2, k2, pad);
            for (std::int64_t c = 0; c < cout; ++c)
                for (std::int64_t i = 0; i < y2.extent(2); ++i)
                    for (std::int64_t j = 0; j < y2.extent(3); ++j)
                        worst = std::max(worst,
                                         std::abs(static_cast<double>(y3.at5(0, c, d, i, j)) -
                                                  static_cast<double>(y2.at4(0, c, i, j))));
        }
    }
    Outcome out;
    out.pass = worst <= 1e-6;
    std::ostringstream os;
    os << "max |planar3d - slice2d| = " << worst << " over 50 kernels (tolerance 1e-6)";
    out.detail = os.str();
    return out;
}

// --- 2: whole-encoder equivalence ------------------------------------------------

Tensor maxpool2d_ref(const Tensor& x) {
    const std::int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor out({n, c, h / 2, w / 2});
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t cc = 0; cc < c; ++cc)
            for (std::int64_t y = 0; y < h / 2; ++y)
                for (std::int64_t xx = 0; xx < w / 2; ++xx) {
                    float best = x.at4(nn, cc, 2 * y, 2 * xx);
                    best = std::max(best, x.at4(nn, cc, 2 * y, 2 * xx + 1));
                    best = std::max(best, x.at4(nn, cc, 2 * y + 1, 2 * xx));
                    best = std::max(best, x.at4(nn, cc, 2 * y + 1, 2 * xx + 1));
                    out.at4(nn, cc, y, xx) = best;
                }
    return out;
}

Outcome criterion_encoder_equivalence(const Context&) {
    Rng rng(20240202);
    const Network net = build(NetworkSpec::vgg16(1.0 / 8.0), 77);
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
        const Tensor in = random_tensor<float>(rng, {1, 3, 16, 64, 64});
        ActivationTrace trace;
        net.forward(in, &trace);
        for (std::int64_t d = 0; d < 16; ++d) {
            // independent per-slice 2D encoder with the same weights
            Tensor x({1, 3, 64, 64});
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t i = 0; i < 64; ++i)
                    for (std::int64_t j = 0; j < 64; ++j)
                        x.at4(0, c, i, j) = in.at5(0, c, d, i, j);
            for (std::size_t s = 0; s < net.spec.encoder.size(); ++s) {
                for (int j = 0; j < net.spec.encoder[s].conv_count; ++j) {
                    const NetLayer& l = net.layer("enc" + std::to_string(s + 1) + "_conv" +
                                                  std::to_string(j + 1));
                    const Kernel2D k2 = flatten_planar_to_2d(
                        ConvWeights{l.kernel, l.bias, {1, 1, 1}, {1, 1, 1}, PadMode::kSame});
                    Tensor y = conv2d(x, k2, PadMode::kSame);
                    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = std::max(0.0f, y[i]);
                    x = std::move(y);
                }
                const Tensor& stage3d = trace.at("enc" + std::to_string(s + 1));
                for (std::int64_t c = 0; c < x.extent(1); ++c)
                    for (std::int64_t i = 0; i < x.extent(2); ++i)
                        for (std::int64_t j = 0; j < x.extent(3); ++j)
                            worst = std::max(
                                worst, std::abs(static_cast<double>(stage3d.at5(0, c, d, i, j)) -
                                                static_cast<double>(x.at4(0, c, i, j))));
                x = maxpool2d_ref(x);
            }
        }
    }
    Outcome out;
    out.pass = worst <= 1e-5;
    std::ostringstream os;
    os << "max stage deviation = " << worst << " over 10 inputs x 16 slices x 5 stages "
       << "(tolerance 1e-5)";
    out.detail = os.str();
    return out;
}

// --- 3: windowing arithmetic -----------------------------------------------------

Outcome criterion_windowing(const Context&) {
    Rng rng(20240303);
    Outcome out;

    Volume v(256, 4, 4);
    for (float& x : v.data) x = static_cast<float>(rng.uniform(-1, 1));
    const WindowSet ws = decompose(v, 16, 8);
    if (ws.windows.size() != 31) {
        out.detail = "expected 31 windows, got " + std::to_string(ws.windows.size());
        return out;
    }
    // keep ranges, quoted 1-based: [1..12], [5..12] x29, [5..16]
    for (std::int64_t i = 0; i < 31; ++i) {
        const auto [first, last] = compose_keep_range(i, 31, 16, 8);
        const std::int64_t want_first = i == 0 ? 0 : 4;
        const std::int64_t want_last = i == 30 ? 16 : 12;
        if (first != want_first || last != want_last) {
            out.detail = "keep range of window " + std::to_string(i) + " is [" +
                         std::to_string(first + 1) + ".." + std::to_string(last) + "]";
            return out;
        }
    }

    int identities = 0;
    for (int rep = 0; rep < 200; ++rep) {
        const std::int64_t wd = 2 * (1 + static_cast<std::int64_t>(rng.below(10)));
        const std::int64_t s =
            2 * (1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(wd / 2))));
        const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(8));
        Volume rv(wd + s * (n - 1), 3, 4);
        for (float& x : rv.data) x = static_cast<float>(rng.uniform(-1, 1));
        const Volume back = compose(decompose(rv, wd, s));
        if (back.data != rv.data) {
            out.detail = "roundtrip mismatch at geometry wd=" + std::to_string(wd) +
                         " s=" + std::to_string(s) + " n=" + std::to_string(n);
            return out;
        }
        ++identities;
    }
    out.pass = true;
    out.detail = "31 windows, keep ranges [1..12]/[5..12]/[5..16], " +
                 std::to_string(identities) + " exact roundtrips";
    return out;
}

// --- 4: transfer accounting ------------------------------------------------------

Outcome criterion_transfer_accounting(const Context&) {
    Rng rng(20240404);
    for (int rep = 0; rep < 20; ++rep) {
        WeightManifest m;
        const int layers = 1 + static_cast<int>(rng.below(6));
        std::int64_t cin = 1 + static_cast<std::int64_t>(rng.below(4));
        for (int l = 0; l < layers; ++l) {
            const std::int64_t cout = 1 + static_cast<std::int64_t>(rng.below(8));
            const std::int64_t kh = 1 + static_cast<std::int64_t>(rng.below(4));
            const std::int64_t kw = 1 + static_cast<std::int64_t>(rng.below(4));
            m.layers.push_back(layer_from_kernel2d("layer" + std::to_string(l),
                                                   random_kernel2d<float>(rng, cout, cin, kh, kw)));
            cin = cout;
        }
        const WeightManifest mapped = map_weightset(m);
        if (count_params(mapped) != count_params(m))
            return {false, "parameter count changed on manifest " + std::to_string(rep)};
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            if (floats_to_le_bytes(mapped.layers[l].bias_data) !=
                floats_to_le_bytes(m.layers[l].bias_data))
                return {false, "bias bytes changed in layer " + std::to_string(l)};
        }
    }
    return {true, "count_params invariant and bias bytes identical over 20 manifests"};
}

// --- 5: gradient suite -----------------------------------------------------------

Outcome criterion_gradients(const Context&) {
    Rng rng(20240505);
    using Point = std::map<std::string, Tensor64>;
    const double eps = 1e-4;
    double worst = 0.0;
    std::string worst_op = "none";
    const auto track = [&](const char* op, double err) {
        if (err > worst) {
            worst = err;
            worst_op = op;
        }
    };
    const auto signed_away = [&rng](Shape shape) {
        Tensor64 t(std::move(shape));
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double mag = rng.uniform(0.1, 1.0);
            t[i] = rng.below(2) ? mag : -mag;
        }
        return t;
    };

    for (int rep = 0; rep < 20; ++rep) {
        {
            Point p{{"x", random_tensor<double>(rng, {1, 2, 2, 6, 6})},
                    {"k", random_tensor<double>(rng, {2, 2, 2, 3, 3})},
                    {"b", random_tensor<double>(rng, {2})}};
            const bool same = rep % 2 == 0;
            track("conv3d", grad_check<double>(
                                [same](Tape64& t, const Point& q) {
                                    return t.sum(t.conv3d(
                                        t.leaf(q.at("x"), "x", true), t.leaf(q.at("k"), "k", true),
                                        t.leaf(q.at("b"), "b", true), {1, 1, 1}, {1, 1, 1},
                                        same ? PadMode::kSame : PadMode::kValid));
                                },
                                p, eps));
        }
        {
            Point p{{"x", random_tensor<double>(rng, {1, 2, 2, 3, 3})},
                    {"k", random_tensor<double>(rng, {2, 2, 1, 2, 2})},
                    {"b", random_tensor<double>(rng, {2})}};
            track("transpose_conv3d",
                  grad_check<double>(
                      [](Tape64& t, const Point& q) {
                          return t.sum(t.transpose_conv3d(t.leaf(q.at("x"), "x", true),
                                                          t.leaf(q.at("k"), "k", true),
                                                          t.leaf(q.at("b"), "b", true), {1, 2, 2}));
                      },
                      p, eps));
        }
        {
            Point p{{"x", signed_away({1, 2, 2, 4, 4})}};
            track("maxpool3d", grad_check<double>(
                                   [](Tape64& t, const Point& q) {
                                       return t.sum(t.maxpool3d(t.leaf(q.at("x"), "x", true),
                                                                {1, 2, 2}, {1, 2, 2}));
                                   },
                                   p, eps));
        }
        {
            Point p{{"x", random_tensor<double>(rng, {3, 4, 5}, -3.0, 3.0)}};
            track("sigmoid", grad_check<double>(
                                 [](Tape64& t, const Point& q) {
                                     return t.sum(t.sigmoid(t.leaf(q.at("x"), "x", true)));
                                 },
                                 p, eps));
        }
        {
            Point p{{"x", signed_away({3, 4, 5})}};
            track("relu", grad_check<double>(
                              [](Tape64& t, const Point& q) {
                                  return t.sum(t.relu(t.leaf(q.at("x"), "x", true)));
                              },
                              p, eps));
        }
        {
            Tensor64 target({2, 1, 4, 4, 4});
            for (std::int64_t i = 0; i < target.numel(); ++i)
                target[i] = rng.below(8) == 0 ? 1.0 : 0.0;
            Point p{{"pred", random_tensor<double>(rng, {2, 1, 4, 4, 4}, 0.2, 0.8)}};
            track("loss_bce_dice",
                  grad_check<double>(
                      [target](Tape64& t, const Point& q) {
                          return t.loss(LossKind::kBceDice, t.leaf(q.at("pred"), "pred", true),
                                        target);
                      },
                      p, eps));
        }
    }
    Outcome out;
    out.pass = worst < 1e-4;
    std::ostringstream os;
    os << "max relative error " << worst << " (worst op: " << worst_op
       << "), 20 instances per op, 64-bit mode (tolerance 1e-4)";
    out.detail = os.str();
    return out;
}

// --- 6: loss identities ------------------------------------------------------------

Outcome criterion_loss_identities(const Context&) {
    Rng rng(20240606);
    Tensor target({1, 1, 8, 8, 8});
    for (std::int64_t i = 0; i < target.numel(); ++i) target[i] = rng.below(5) == 0 ? 1.0f : 0.0f;
    Tensor perfect(target.shape());
    for (std::int64_t i = 0; i < perfect.numel(); ++i)
        perfect[i] = target[i] == 1.0f ? 1.0f - 1e-7f : 1e-7f;
    const double at_optimum = loss_bce_dice(perfect, target);

    Tensor pred_half({1, 1, 16, 16, 16}, 0.5f);
    Tensor target_half({1, 1, 16, 16, 16}, 0.0f);
    for (std::int64_t i = 0; i < target_half.numel() / 2; ++i) target_half[i] = 1.0f;
    const double half_case = loss_bce_dice(pred_half, target_half);

    Outcome out;
    out.pass = at_optimum < 1e-3 && std::abs(half_case - 1.1931) < 1e-3;
    std::ostringstream os;
    os << "clamped-perfect loss = " << at_optimum << " (< 1e-3), half-ones loss = " << half_case
       << " (1.1931 +- 1e-3)";
    out.detail = os.str();
    return out;
}

// --- 7: toy overfit experiment -------------------------------------------------------

Outcome criterion_overfit(const Context&) {
    const double t_start = now_seconds();
    for (const std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        std::cout << "  seed " << seed << ": generating 8 volumes 16x64x64, lesion ratio 0.002"
                  << std::endl;
        const auto data = gen_synthetic(seed, 8, {16, 64, 64}, 0.002);
        std::vector<TrainingWindow> train;
        for (const auto& [vol, mask] : data) {
            auto ws = prepare_training_windows(vol, mask, 16, 8);
            for (auto& w : ws) train.push_back(std::move(w));
        }
        const std::vector<TrainingWindow> val{train.front()};

        TrainConfig cfg;
        cfg.learning_rate = 1e-3;  // 5e-5 scaled up for desk speed
        cfg.batch_size = 2;
        cfg.max_epochs = 300;
        cfg.patience = 300;
        cfg.seed = seed;
        Network net = build(NetworkSpec::vgg16(1.0 / 8.0), seed);

        FitOptions opts;
        opts.on_epoch = [&](const EpochStats& es) {
            if (es.epoch % 5 == 0 || es.train_soft_dice >= 0.9)
                std::cout << "  seed " << seed << " epoch " << es.epoch << ": loss "
                          << es.train_loss << ", soft dice " << es.train_soft_dice << std::endl;
            return es.train_soft_dice >= 0.92;
        };
        const TrainLog log = fit(net, train, val, cfg, opts);

        const auto [final_loss, soft_dice] = evaluate_windows(net, train, cfg.loss_kind, 2);
        (void)final_loss;
        std::int64_t inter = 0, pos_pred = 0, pos_true = 0;
        for (const TrainingWindow& w : train) {
            Tensor in({1, 3, 16, 64, 64});
            std::copy(w.input.data(), w.input.data() + w.input.numel(), in.data());
            const Tensor prob = net.forward(in);
            for (std::int64_t i = 0; i < prob.numel(); ++i) {
                const bool p = prob[i] >= 0.5f;
                const bool t = w.target[i] >= 0.5f;
                pos_pred += p;
                pos_true += t;
                inter += p && t;
            }
        }
        const double hard_dice =
            pos_pred + pos_true == 0 ? 1.0
                                     : 2.0 * static_cast<double>(inter) /
                                           static_cast<double>(pos_pred + pos_true);

        std::ostringstream os;
        os << "seed " << seed << ": soft dice " << soft_dice << " (>= 0.9), thresholded dice "
           << hard_dice << " (>= 0.8) after " << log.epochs.size() << " epochs, "
           << now_seconds() - t_start << " s";
        if (soft_dice >= 0.9 && hard_dice >= 0.8) return {true, os.str()};
        std::cout << "  " << os.str() << " -- trying next seed" << std::endl;
    }
    return {false, "no seed of {1,2,3} reached soft dice 0.9 and thresholded dice 0.8"};
}

// --- 8: metrics oracle ----------------------------------------------------------------

Outcome criterion_metrics_oracle(const Context&) {
    Rng rng(20240808);
    for (int rep = 0; rep < 100; ++rep) {
        MaskVolume pred(3, 5, 4), truth(3, 5, 4);
        const double dp = rng.uniform(0.05, 0.6), dt = rng.uniform(0.05, 0.6);
        for (auto& v : pred.data) v = rng.uniform() < dp ? 1 : 0;
        for (auto& v : truth.data) v = rng.uniform() < dt ? 1 : 0;
        // independent brute-force confusion counting
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            tp += pred.data[i] && truth.data[i];
            fp += pred.data[i] && !truth.data[i];
            fn += !pred.data[i] && truth.data[i];
        }
        const double dice_ref =
            2 * tp + fp + fn == 0 ? 1.0
                                  : 2.0 * static_cast<double>(tp) /
                                        static_cast<double>(2 * tp + fp + fn);
        const double sens_ref = tp + fn == 0
                                    ? 1.0
                                    : static_cast<double>(tp) / static_cast<double>(tp + fn);
        if (dice_binary(pred, truth) != dice_ref)
            return {false, "dice disagrees with the confusion counter at rep " +
                               std::to_string(rep)};
        if (sensitivity(pred, truth) != sens_ref)
            return {false, "sensitivity disagrees with the confusion counter at rep " +
                               std::to_string(rep)};
    }

    std::vector<ScanMetrics> entries;
    const std::vector<std::pair<std::string, double>> means = {
        {"01", 0.69}, {"07", 0.50}, {"08", 0.64}};
    int id = 0;
    for (const auto& [center, mean] : means)
        for (int k = 0; k < 5; ++k)
            entries.push_back({"s" + std::to_string(id++), center, mean, 0.5, 0.002});
    const SegmentationReport report = aggregate(entries);
    const double rounded = std::round(report.center_mean_dice.mean * 100.0) / 100.0;
    if (std::abs(rounded - 0.61) > 1e-9)
        return {false, "center-mean dice average " + std::to_string(report.center_mean_dice.mean)};
    return {true, "100 exact confusion-matrix agreements; center means {0.69,0.50,0.64} -> 0.61"};
}

// --- 9: CLI determinism -----------------------------------------------------------------

int run_cli(const std::string& cli, const std::string& args) {
    const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
}

bool same_bytes(const fs::path& a, const fs::path& b) {
    return read_file_bytes(a) == read_file_bytes(b);
}

Outcome criterion_determinism(const Context& ctx) {
    if (ctx.cli.empty()) return {false, "no --cli path given"};
    const fs::path dir = ctx.scratch / "determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);

    const std::string data = (dir / "data").string();
    if (run_cli(ctx.cli, "gen --out " + data + " --seed 11 --count 3 --extents 32,32,32") != 0)
        return {false, "gen failed"};

    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 2;
    cfg.patience = 2;
    cfg.seed = 42;
    cfg.save(dir / "cfg.json");

    for (const char* run : {"run_a", "run_b"}) {
        if (run_cli(ctx.cli, "train --config " + (dir / "cfg.json").string() + " --data " + data +
                                 " --out " + (dir / run).string() +
                                 " --width-scale 0.0625") != 0)
            return {false, std::string("train failed for ") + run};
    }
    const fs::path wa = dir / "run_a" / "net" / "weights";
    const fs::path wb = dir / "run_b" / "net" / "weights";
    for (const auto& entry : fs::directory_iterator(wa)) {
        const fs::path other = wb / entry.path().filename();
        if (!fs::exists(other) || !same_bytes(entry.path(), other))
            return {false, "weight file differs between runs: " + entry.path().filename().string()};
    }

    for (const char* out : {"mask_a", "mask_b"}) {
        if (run_cli(ctx.cli, "segment --net " + (dir / "run_a" / "net").string() + " --in " +
                                 (data + "/scan000.pv3d") + " --out " +
                                 (dir / (std::string(out) + ".pv3d")).string() +
                                 " --prob " + (dir / (std::string(out) + ".prob.pv3d")).string()) !=
            0)
            return {false, "segment failed"};
    }
    if (!same_bytes(dir / "mask_a.pv3d", dir / "mask_b.pv3d"))
        return {false, "masks differ between identical segment runs"};
    if (!same_bytes(dir / "mask_a.prob.pv3d", dir / "mask_b.prob.pv3d"))
        return {false, "probability volumes differ between identical segment runs"};
    return {true, "train twice -> byte-identical weights; segment twice -> byte-identical masks"};
}

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;  // 0 = report only
    std::function<Outcome(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    Context ctx;
    ctx.scratch = fs::temp_directory_path() / "p3d_acceptance";
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--cli" && i + 1 < argc) ctx.cli = argv[++i];
        if (arg == "--scratch" && i + 1 < argc) ctx.scratch = argv[++i];
        if (arg == "--only" && i + 1 < argc) only = std::atoi(argv[++i]);
    }
    fs::create_directories(ctx.scratch);

    const std::vector<Criterion> criteria = {
        {1, "slice-equivalence oracle", 30.0, criterion_slice_equivalence},
        {2, "whole-encoder equivalence", 60.0, criterion_encoder_equivalence},
        {3, "windowing arithmetic", 10.0, criterion_windowing},
        {4, "transfer accounting", 5.0, criterion_transfer_accounting},
        {5, "gradient suite", 120.0, criterion_gradients},
        {6, "loss identities", 0.0, criterion_loss_identities},
        {7, "toy overfit experiment", 0.0, criterion_overfit},
        {8, "metrics oracle", 0.0, criterion_metrics_oracle},
        {9, "command determinism", 0.0, criterion_determinism},
    };

    int failures = 0;
    for (const Criterion& c : criteria) {
        if (only != 0 && c.id != only) continue;
        const double t0 = now_seconds();
        Outcome outcome;
        try {
            outcome = c.run(ctx);
        } catch (const std::exception& e) {
            outcome = {false, std::string("exception: ") + e.what()};
        }
        const double dt = now_seconds() - t0;
        bool in_budget = c.budget_seconds == 0.0 || dt < c.budget_seconds;
        const bool pass = outcome.pass && in_budget;
        std::printf("[%s] %d. %s (%.1f s%s): %s\n", pass ? "PASS" : "FAIL", c.id, c.name, dt,
                    in_budget ? "" : ", OVER BUDGET", outcome.detail.c_str());
        std::fflush(stdout);
        if (!pass) ++failures;
    }
    if (failures == 0) {
        std::printf("acceptance: all criteria passed\n");
    } else {
        std::printf("acceptance: %d criteria FAILED\n", failures);
    }
    return failures == 0 ? 0 : 1;
}
