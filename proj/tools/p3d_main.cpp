// p3d: planar 3D transfer-learning segmentation toolkit.
//
// Subcommands: convert (2D -> planar 3D weight manifests), gen (synthetic
// volumes), train, segment (sliding-window inference), evaluate, selfcheck.
// Thread count comes from the P3D_THREADS environment variable.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "p3d/error.hpp"
#include "p3d/io_util.hpp"
#include "p3d/metrics.hpp"
#include "p3d/model.hpp"
#include "p3d/pipeline.hpp"
#include "p3d/rng.hpp"
#include "p3d/training.hpp"
#include "p3d/transfer.hpp"
#include "p3d/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitFormat = 2;  // format, geometry and contract violations
constexpr int kExitIntegrity = 3;
constexpr int kExitNonFinite = 4;
constexpr int kExitDivergence = 5;

class WallTimer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Written atomically next to every command's outputs; holds what is needed to
// replay the command.
void write_run_manifest(const fs::path& path, const std::string& command, const json& config,
                        const json& inputs, const json& outputs, std::uint64_t seed,
                        double wall_seconds) {
    json doc;
    doc["format"] = "p3d-run";
    doc["toolkit_version"] = p3d::kVersion;
    doc["command"] = command;
    doc["config"] = config;
    doc["inputs"] = inputs;
    doc["outputs"] = outputs;
    doc["seed"] = seed;
    doc["wall_seconds"] = wall_seconds;
    p3d::write_file_atomic(path, doc.dump(2) + "\n");
}

struct ScanPair {
    std::string name;
    fs::path volume;
    fs::path mask;
};

// NAME.pv3d with sibling NAME.mask.pv3d, sorted by name (the dataset order).
std::vector<ScanPair> list_scan_pairs(const fs::path& dir) {
    std::vector<ScanPair> out;
    if (!fs::is_directory(dir)) throw p3d::FormatError("not a directory: " + dir.string());
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string fname = entry.path().filename().string();
        if (fname.size() < 5 || fname.substr(fname.size() - 5) != ".pv3d") continue;
        if (fname.size() > 10 && fname.substr(fname.size() - 10) == ".mask.pv3d") continue;
        ScanPair p;
        p.name = fname.substr(0, fname.size() - 5);
        p.volume = entry.path();
        p.mask = dir / (p.name + ".mask.pv3d");
        if (!fs::exists(p.mask))
            throw p3d::FormatError("scan " + p.name + " has no mask file " + p.mask.string());
        out.push_back(std::move(p));
    }
    std::sort(out.begin(), out.end(),
              [](const ScanPair& a, const ScanPair& b) { return a.name < b.name; });
    if (out.empty()) throw p3d::FormatError("no .pv3d scans found in " + dir.string());
    return out;
}

std::map<std::string, std::string> load_centers(const fs::path& file) {
    json doc;
    try {
        doc = json::parse(p3d::read_file_bytes(file));
    } catch (const json::parse_error& e) {
        throw p3d::FormatError("centers map " + file.string() + ": " + e.what());
    }
    std::map<std::string, std::string> out;
    for (const auto& [key, value] : doc.items()) out[key] = value.get<std::string>();
    return out;
}

// --- convert -----------------------------------------------------------------

int cmd_convert(const fs::path& in_dir, const fs::path& out_dir) {
    const WallTimer timer;
    const p3d::WeightManifest m2d = p3d::load_weights(in_dir);
    const p3d::WeightManifest m3d = p3d::map_weightset(m2d);
    p3d::save_weights(m3d, out_dir);

    const std::int64_t pin = p3d::count_params(m2d);
    const std::int64_t pout = p3d::count_params(m3d);
    std::cout << "converted " << m2d.layers.size() << " layers: params in = " << pin
              << ", params out = " << pout << (pin == pout ? " (equal)" : " (MISMATCH)") << "\n";
    if (pin != pout) throw p3d::IntegrityError("parameter count changed during mapping");

    write_run_manifest(out_dir / "run.json", "convert", json::object(),
                       {{"manifest", in_dir.string()}}, {{"manifest", out_dir.string()}},
                       /*seed=*/0, timer.seconds());
    return 0;
}

// --- gen -----------------------------------------------------------------------

int cmd_gen(const fs::path& out_dir, std::uint64_t seed, int count,
            std::array<std::int64_t, 3> extents, double lesion_ratio) {
    const WallTimer timer;
    fs::create_directories(out_dir);
    const auto data = p3d::gen_synthetic(seed, count, extents, lesion_ratio);
    const std::vector<std::string> center_cycle = {"01", "07", "08"};
    json centers;
    for (std::size_t i = 0; i < data.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scan%03zu", i);
        p3d::save_volume(out_dir / (std::string(name) + ".pv3d"), data[i].first);
        p3d::save_mask(out_dir / (std::string(name) + ".mask.pv3d"), data[i].second);
        centers[name] = center_cycle[i % center_cycle.size()];
        std::cout << name << ": lesion ratio "
                  << p3d::voxel_ratio(data[i].second) << "\n";
    }
    p3d::write_file_atomic(out_dir / "centers.json", centers.dump(2) + "\n");

    write_run_manifest(out_dir / "run.json", "gen",
                       {{"count", count},
                        {"extents", extents},
                        {"lesion_ratio", lesion_ratio}},
                       json::object(), {{"data", out_dir.string()}}, seed, timer.seconds());
    std::cout << "wrote " << data.size() << " scan/mask pairs to " << out_dir.string() << "\n";
    return 0;
}

// --- segment --------------------------------------------------------------------

std::array<std::int64_t, 3> parse_extents(const std::string& s) {
    std::array<std::int64_t, 3> out{};
    if (std::sscanf(s.c_str(), "%ld,%ld,%ld", &out[0], &out[1], &out[2]) != 3)
        throw p3d::FormatError("bad extents '" + s + "', expected D,H,W");
    return out;
}

struct SegmentOptions {
    fs::path net_dir;
    fs::path input;
    fs::path output;
    std::string prob_path;
    std::string threshold_mode = "literal";
    double threshold = 0.5;
    std::string target;   // "D,H,W"; empty = derive from the window geometry
    std::string permute;  // "a,b,c" source-axis order, e.g. axial -> sagittal
    std::int64_t window_depth = 16;
    std::int64_t window_stride = 8;
    bool identity_probe = false;
};

int cmd_segment(const SegmentOptions& opt) {
    const WallTimer timer;

    std::optional<p3d::Network> net;
    std::int64_t target_hw = 64;
    if (!opt.identity_probe) {
        net = p3d::load_network(opt.net_dir);
        target_hw = 0;  // derived below from the divisibility rule
    }

    p3d::Volume vol = p3d::load_volume(opt.input);
    if (!opt.permute.empty()) {
        const auto o = parse_extents(opt.permute);
        vol = p3d::permute_axes(vol, {static_cast<int>(o[0]), static_cast<int>(o[1]),
                                      static_cast<int>(o[2])});
        std::cout << "permuted axes (" << opt.permute << ") -> " << vol.extents[0] << "x"
                  << vol.extents[1] << "x" << vol.extents[2] << "\n";
    }
    const auto original = vol.extents;

    std::array<std::int64_t, 3> target{};
    if (!opt.target.empty()) {
        target = parse_extents(opt.target);
    } else {
        // nearest window-compatible depth, height/width snapped to the
        // network's divisibility requirement
        const std::int64_t steps = std::max<std::int64_t>(
            0, std::llround(static_cast<double>(vol.extents[0] - opt.window_depth) /
                            static_cast<double>(opt.window_stride)));
        target[0] = opt.window_depth + steps * opt.window_stride;
        std::int64_t div = 1;
        if (net) div = std::int64_t{1} << net->spec.stage_count();
        const auto snap = [div](std::int64_t e) {
            return std::max<std::int64_t>(div, (e + div / 2) / div * div);
        };
        target[1] = snap(vol.extents[1]);
        target[2] = snap(vol.extents[2]);
    }
    if (target != vol.extents) {
        std::cout << "resampling " << original[0] << "x" << original[1] << "x" << original[2]
                  << " -> " << target[0] << "x" << target[1] << "x" << target[2] << "\n";
        vol = p3d::resample(vol, target);
    }

    vol = p3d::normalize_scan(vol);
    p3d::WindowSet windows = p3d::decompose(vol, opt.window_depth, opt.window_stride);
    std::cout << "windows: " << windows.windows.size() << " (depth " << opt.window_depth
              << ", stride " << opt.window_stride << ")\n";

    const WallTimer infer_timer;
    p3d::WindowSet outputs = windows;
    for (std::size_t i = 0; i < windows.windows.size(); ++i) {
        const p3d::Tensor& slab = windows.windows[i].slab;
        if (opt.identity_probe) {
            outputs.windows[i].slab = slab;  // pass-through debug path
            continue;
        }
        const p3d::Tensor batch = p3d::replicate_channels(p3d::slab_to_tensor(slab));
        const p3d::Tensor prob = net->forward(batch);
        if (!prob.all_finite())
            throw p3d::Error("non-finite network output on window " + std::to_string(i));
        outputs.windows[i].slab =
            prob.reshaped({slab.extent(0), slab.extent(1), slab.extent(2)});
    }
    const double infer_seconds = infer_timer.seconds();

    const p3d::Volume prediction = p3d::compose(outputs);
    const p3d::ThresholdMode mode = opt.threshold_mode == "fixed"
                                        ? p3d::ThresholdMode::kFixed
                                        : p3d::ThresholdMode::kLiteralRescale;
    const p3d::MaskVolume mask =
        p3d::binarize(prediction, mode, static_cast<float>(opt.threshold));
    p3d::save_mask(opt.output, mask);
    if (!opt.prob_path.empty()) p3d::save_volume(opt.prob_path, prediction);

    std::cout << "inference: " << infer_seconds << " s ("
              << infer_seconds / static_cast<double>(windows.windows.size())
              << " s/window), positive voxels: " << mask.positive_count() << "\n";

    write_run_manifest(
        opt.output.string() + ".run.json", "segment",
        {{"threshold_mode", opt.threshold_mode},
         {"threshold", opt.threshold},
         {"window_depth", opt.window_depth},
         {"window_stride", opt.window_stride},
         {"target", {target[0], target[1], target[2]}},
         {"permute", opt.permute},
         {"identity_probe", opt.identity_probe}},
        {{"volume", opt.input.string()},
         {"net", opt.identity_probe ? std::string("(identity probe)") : opt.net_dir.string()}},
        {{"mask", opt.output.string()}, {"probabilities", opt.prob_path}},
        /*seed=*/0, timer.seconds());
    std::cout << "scan time: " << timer.seconds() << " s\n";
    return 0;
}

// --- train -----------------------------------------------------------------------

struct TrainOptions {
    fs::path config;
    fs::path data_dir;
    fs::path out_dir;
    bool folds = false;
    double width_scale = 1.0 / 8.0;
    std::string encoder_weights;  // optional planar manifest directory
    std::int64_t window_depth = 16;
    std::int64_t window_stride = 8;
    std::optional<std::uint64_t> seed_override;
    std::optional<double> lr_override;
};

std::vector<p3d::TrainingWindow> windows_for(const std::vector<ScanPair>& scans,
                                             std::int64_t wd, std::int64_t stride) {
    std::vector<p3d::TrainingWindow> out;
    for (const ScanPair& s : scans) {
        const p3d::Volume vol = p3d::load_volume(s.volume);
        const p3d::MaskVolume mask = p3d::load_mask(s.mask);
        auto ws = p3d::prepare_training_windows(vol, mask, wd, stride);
        for (auto& w : ws) out.push_back(std::move(w));
    }
    return out;
}

int train_one(const p3d::TrainConfig& cfg, const p3d::NetworkSpec& spec,
              const p3d::WeightManifest* encoder_weights,
              const std::vector<ScanPair>& train_scans, const std::vector<ScanPair>& val_scans,
              const TrainOptions& opt, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const WallTimer timer;

    const auto train_windows = windows_for(train_scans, opt.window_depth, opt.window_stride);
    const auto val_windows = windows_for(val_scans, opt.window_depth, opt.window_stride);
    std::cout << "training on " << train_windows.size() << " windows, validating on "
              << val_windows.size() << "\n";

    p3d::Network net = p3d::build(spec, cfg.seed, encoder_weights);
    const p3d::TrainLog log = [&] {
        try {
            return p3d::fit(net, train_windows, val_windows, cfg);
        } catch (const p3d::DivergenceError& e) {
            std::cerr << "divergence at epoch " << e.epoch << ", batch " << e.batch << ": "
                      << e.what() << "\n";
            throw;
        }
    }();

    p3d::save_network(net, out_dir / "net");
    p3d::write_file_atomic(out_dir / "trainlog.csv", log.to_csv());
    cfg.save(out_dir / "config.json");

    json inputs;
    for (const ScanPair& s : train_scans) inputs["train"].push_back(s.name);
    for (const ScanPair& s : val_scans) inputs["validation"].push_back(s.name);
    write_run_manifest(out_dir / "run.json", "train", json::parse(cfg.to_json()), inputs,
                       {{"net", (out_dir / "net").string()},
                        {"trainlog", (out_dir / "trainlog.csv").string()}},
                       cfg.seed, timer.seconds());

    std::cout << "stopped after " << log.epochs.size() << " epochs (" << log.stop_reason
              << "), best epoch " << log.best_epoch << " with validation loss "
              << log.best_val_loss << "\n";
    return 0;
}

int cmd_train(const TrainOptions& opt) {
    p3d::TrainConfig cfg = p3d::TrainConfig::load(opt.config);
    if (opt.seed_override) cfg.seed = *opt.seed_override;  // flags win over the file
    if (opt.lr_override) cfg.learning_rate = *opt.lr_override;
    cfg.validate();

    const p3d::NetworkSpec spec = p3d::NetworkSpec::vgg16(opt.width_scale);
    std::optional<p3d::WeightManifest> encoder;
    if (!opt.encoder_weights.empty()) encoder = p3d::load_weights(opt.encoder_weights);

    const std::vector<ScanPair> scans = list_scan_pairs(opt.data_dir);

    if (!opt.folds) {
        if (scans.size() < 2)
            throw p3d::ContractError("need at least 2 scans (train + validation)");
        std::vector<ScanPair> train_scans(scans.begin(), scans.end() - 1);
        std::vector<ScanPair> val_scans{scans.back()};  // last scan validates
        return train_one(cfg, spec, encoder ? &*encoder : nullptr, train_scans, val_scans, opt,
                         opt.out_dir);
    }

    const auto centers = load_centers(opt.data_dir / "centers.json");
    std::vector<p3d::ScanId> ids;
    std::map<std::string, const ScanPair*> by_name;
    for (const ScanPair& s : scans) {
        const auto it = centers.find(s.name);
        if (it == centers.end())
            throw p3d::FormatError("scan " + s.name + " missing from centers.json");
        ids.push_back({it->second, s.name});
        by_name[s.name] = &s;
    }
    const p3d::FoldPlan plan = p3d::make_folds(ids, cfg.seed);
    fs::create_directories(opt.out_dir);
    p3d::write_file_atomic(opt.out_dir / "foldplan.json", plan.to_json());

    const auto resolve = [&](const std::vector<p3d::ScanId>& list) {
        std::vector<ScanPair> out;
        for (const p3d::ScanId& id : list) out.push_back(*by_name.at(id.name));
        return out;
    };
    for (std::size_t k = 0; k < plan.folds.size(); ++k) {
        std::cout << "=== fold " << k + 1 << "/" << plan.folds.size() << "\n";
        const int rc = train_one(cfg, spec, encoder ? &*encoder : nullptr,
                                 resolve(plan.folds[k].train), resolve(plan.folds[k].validation),
                                 opt, opt.out_dir / ("fold_" + std::to_string(k + 1)));
        if (rc != 0) return rc;
    }
    return 0;
}

// --- evaluate -----------------------------------------------------------------------

int cmd_evaluate(const fs::path& pred_dir, const fs::path& truth_dir, const std::string& centers_file,
                 const std::string& out_prefix) {
    const WallTimer timer;
    std::map<std::string, std::string> centers;
    if (!centers_file.empty()) centers = load_centers(centers_file);

    const auto masks_in = [](const fs::path& dir) {
        std::map<std::string, fs::path> out;
        if (!fs::is_directory(dir)) throw p3d::FormatError("not a directory: " + dir.string());
        for (const auto& entry : fs::directory_iterator(dir)) {
            std::string fname = entry.path().filename().string();
            if (fname.size() < 5 || fname.substr(fname.size() - 5) != ".pv3d") continue;
            fname = fname.substr(0, fname.size() - 5);
            const std::string suffix = ".mask";
            if (fname.size() > suffix.size() &&
                fname.substr(fname.size() - suffix.size()) == suffix)
                fname = fname.substr(0, fname.size() - suffix.size());
            out[fname] = entry.path();
        }
        return out;
    };
    const auto preds = masks_in(pred_dir);
    const auto truths = masks_in(truth_dir);
    if (preds.empty()) throw p3d::FormatError("no predictions in " + pred_dir.string());
    for (const auto& [name, path] : preds)
        if (!truths.count(name))
            throw p3d::FormatError("prediction " + name + " has no matching truth mask");
    for (const auto& [name, path] : truths)
        if (!preds.count(name))
            throw p3d::FormatError("truth " + name + " has no matching prediction");

    std::vector<p3d::ScanMetrics> entries;
    for (const auto& [name, path] : preds) {
        const p3d::MaskVolume pred = p3d::load_mask(path);
        const p3d::MaskVolume truth = p3d::load_mask(truths.at(name));
        p3d::ScanMetrics e;
        e.scan = name;
        const auto it = centers.find(name);
        e.center = it == centers.end() ? "00" : it->second;
        e.dice = p3d::dice_binary(pred, truth);
        e.sensitivity = p3d::sensitivity(pred, truth);
        e.positive_ratio = p3d::voxel_ratio(truth);
        entries.push_back(std::move(e));
    }
    const p3d::SegmentationReport report = p3d::aggregate(entries);

    p3d::write_file_atomic(out_prefix + ".report.json", report.to_json());
    p3d::write_file_atomic(out_prefix + ".report.csv", report.to_csv());
    p3d::write_file_atomic(out_prefix + ".plotdata.csv", report.plot_data_csv());

    for (const p3d::CenterStats& c : report.centers)
        std::cout << "center " << c.center << ": dice " << c.dice.mean << " +- " << c.dice.stddev
                  << ", sensitivity " << c.sensitivity.mean << " +- " << c.sensitivity.stddev
                  << " (" << c.dice.count << " scans)\n";
    std::cout << "average of centers: dice " << report.center_mean_dice.mean << ", sensitivity "
              << report.center_mean_sensitivity.mean << "\n";
    std::cout << "per scan: dice " << report.overall_dice.mean << " +- "
              << report.overall_dice.stddev << ", sensitivity " << report.overall_sensitivity.mean
              << " +- " << report.overall_sensitivity.stddev << "\n";

    write_run_manifest(out_prefix + ".run.json", "evaluate",
                       {{"centers", centers_file}},
                       {{"pred", pred_dir.string()}, {"truth", truth_dir.string()}},
                       {{"report", out_prefix + ".report.json"}}, /*seed=*/0, timer.seconds());
    return 0;
}

// --- selfcheck --------------------------------------------------------------------

int cmd_selfcheck() {
    int failures = 0;
    const auto report = [&failures](const std::string& what, bool ok) {
        std::cout << (ok ? "[PASS] " : "[FAIL] ") << what << "\n";
        if (!ok) ++failures;
    };

    p3d::Rng rng(2024);
    {
        p3d::Volume v(40, 6, 6);
        for (float& x : v.data) x = static_cast<float>(rng.uniform(-1, 1));
        const p3d::Volume back = p3d::compose(p3d::decompose(v, 16, 8));
        report("windowing decompose/compose roundtrip", back.data == v.data);
    }
    {
        const fs::path dir = fs::temp_directory_path() / "p3d_selfcheck_manifest";
        fs::remove_all(dir);
        p3d::WeightManifest m;
        p3d::Kernel2D k;
        k.kernels = p3d::Tensor({2, 3, 3, 3});
        for (std::int64_t i = 0; i < k.kernels.numel(); ++i)
            k.kernels[i] = static_cast<float>(rng.uniform(-1, 1));
        k.biases = {0.5f, -0.5f};
        m.layers.push_back(p3d::layer_from_kernel2d("probe", k));
        p3d::save_weights(m, dir);
        const p3d::WeightManifest back = p3d::load_weights(dir);
        report("weight manifest save/load roundtrip",
               back.layers.size() == 1 && back.layers[0].kernel_data == m.layers[0].kernel_data &&
                   back.layers[0].bias_data == m.layers[0].bias_data);
        const p3d::WeightManifest planar = p3d::map_weightset(m);
        report("2d -> planar mapping preserves the parameter count",
               p3d::count_params(planar) == p3d::count_params(m));
        fs::remove_all(dir);
    }
    {
        const fs::path file = fs::temp_directory_path() / "p3d_selfcheck.pv3d";
        p3d::Volume v(3, 4, 5);
        for (float& x : v.data) x = static_cast<float>(rng.uniform(-1, 1));
        p3d::save_volume(file, v);
        const p3d::Volume back = p3d::load_volume(file);
        report("pv3d volume roundtrip", back.data == v.data && back.extents == v.extents);
        fs::remove(file);
    }
    return failures == 0 ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"planar 3D transfer-learning segmentation toolkit"};
    app.set_version_flag("--version", std::string("p3d ") + p3d::kVersion);
    app.require_subcommand(1);

    // convert
    auto* convert = app.add_subcommand("convert", "map a 2D weight manifest to planar 3D");
    std::string convert_in, convert_out;
    convert->add_option("--in", convert_in, "input manifest directory (conv2d layers)")
        ->required();
    convert->add_option("--out", convert_out, "output manifest directory")->required();

    // gen
    auto* gen = app.add_subcommand("gen", "generate synthetic unbalanced volumes");
    std::string gen_out, gen_extents = "16,64,64";
    std::uint64_t gen_seed = 1;
    int gen_count = 8;
    double gen_ratio = 0.002;
    gen->add_option("--out", gen_out, "output data directory")->required();
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--count", gen_count, "number of scan/mask pairs");
    gen->add_option("--extents", gen_extents, "volume extents D,H,W");
    gen->add_option("--lesion-ratio", gen_ratio, "target positive voxel fraction");

    // segment
    auto* segment = app.add_subcommand("segment", "sliding-window volume segmentation");
    SegmentOptions seg;
    std::string seg_net, seg_in, seg_out;
    segment->add_option("--net", seg_net, "trained network directory");
    segment->add_option("--in", seg_in, "input volume (.pv3d)")->required();
    segment->add_option("--out", seg_out, "output mask (.pv3d)")->required();
    segment->add_option("--prob", seg.prob_path, "also write raw probabilities (.pv3d)");
    segment->add_option("--threshold-mode", seg.threshold_mode, "literal | fixed")
        ->check(CLI::IsMember({"literal", "fixed"}));
    segment->add_option("--threshold", seg.threshold, "threshold for fixed mode");
    segment->add_option("--target", seg.target, "resample target D,H,W (default: derived)");
    segment->add_option("--permute", seg.permute,
                        "permute input axes first; source axis order a,b,c");
    segment->add_option("--window", seg.window_depth, "window depth");
    segment->add_option("--stride", seg.window_stride, "window stride");
    segment->add_flag("--identity-probe", seg.identity_probe,
                      "replace the network with a pass-through (windowing debug)");

    // train
    auto* train = app.add_subcommand("train", "train on paired volume/mask data");
    TrainOptions tr;
    std::string tr_config, tr_data, tr_out;
    double tr_lr = -1.0;
    std::int64_t tr_seed = -1;
    train->add_option("--config", tr_config, "train config (.json)")->required();
    train->add_option("--data", tr_data, "data directory of NAME.pv3d / NAME.mask.pv3d pairs")
        ->required();
    train->add_option("--out", tr_out, "run output directory")->required();
    train->add_flag("--folds", tr.folds, "run the per-center cross-validation plan");
    train->add_option("--width-scale", tr.width_scale, "channel width multiplier");
    train->add_option("--encoder-weights", tr.encoder_weights,
                      "planar manifest directory for the transferred encoder");
    train->add_option("--window", tr.window_depth, "window depth");
    train->add_option("--stride", tr.window_stride, "window stride");
    train->add_option("--seed", tr_seed, "override the config seed");
    train->add_option("--lr", tr_lr, "override the config learning rate");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "score predicted masks against truth");
    std::string ev_pred, ev_truth, ev_centers, ev_out;
    evaluate->add_option("--pred", ev_pred, "directory of predicted masks")->required();
    evaluate->add_option("--truth", ev_truth, "directory of truth masks")->required();
    evaluate->add_option("--centers", ev_centers, "scan -> center map (.json)");
    evaluate->add_option("--out", ev_out, "output prefix for report files")->required();

    // selfcheck
    app.add_subcommand("selfcheck", "run windowing/manifest/volume roundtrip checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (convert->parsed()) return cmd_convert(convert_in, convert_out);
        if (gen->parsed())
            return cmd_gen(gen_out, gen_seed, gen_count, parse_extents(gen_extents), gen_ratio);
        if (segment->parsed()) {
            seg.net_dir = seg_net;
            seg.input = seg_in;
            seg.output = seg_out;
            if (!seg.identity_probe && seg_net.empty())
                throw p3d::ContractError("--net is required unless --identity-probe is given");
            return cmd_segment(seg);
        }
        if (train->parsed()) {
            tr.config = tr_config;
            tr.data_dir = tr_data;
            tr.out_dir = tr_out;
            if (tr_seed >= 0) tr.seed_override = static_cast<std::uint64_t>(tr_seed);
            if (tr_lr >= 0.0) tr.lr_override = tr_lr;
            return cmd_train(tr);
        }
        if (evaluate->parsed()) return cmd_evaluate(ev_pred, ev_truth, ev_centers, ev_out);
        if (app.get_subcommand("selfcheck")->parsed()) return cmd_selfcheck();
    } catch (const p3d::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const p3d::IntegrityError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIntegrity;
    } catch (const p3d::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const p3d::GeometryError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const p3d::DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const p3d::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const p3d::Error& e) {
        const std::string what = e.what();
        std::cerr << "error: " << what << "\n";
        return what.find("non-finite") != std::string::npos ? kExitNonFinite : kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return 0;
}
