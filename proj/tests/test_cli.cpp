#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "helpers.hpp"
#include "json.hpp"
#include "p3d/io_util.hpp"
#include "p3d/model.hpp"
#include "p3d/pipeline.hpp"
#include "p3d/rng.hpp"
#include "p3d/training.hpp"
#include "p3d/transfer.hpp"

namespace fs = std::filesystem;
using namespace p3d;
using testutil::TempDir;

namespace {

std::string cli_path() {
    const char* env = std::getenv("P3D_BIN");
    REQUIRE_MESSAGE(env != nullptr, "P3D_BIN must point at the p3d binary");
    return env;
}

struct CliResult {
    int exit_code = -1;
    std::string output;
};

CliResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path log =
        fs::temp_directory_path() / ("p3d_cli_out_" + std::to_string(++counter) + ".txt");
    const std::string cmd = cli_path() + " " + args + " > " + log.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream in(log);
    std::ostringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    fs::remove(log);
    return r;
}

// strip the wall-time column before comparing train logs
std::string without_seconds_column(const std::string& csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        const auto last_comma = line.rfind(',');
        out << line.substr(0, last_comma) << '\n';
    }
    return out.str();
}

}  // namespace

TEST_CASE("convert: fixture roundtrip, re-run rejection, corruption detection") {
    TempDir dir("cli_convert");
    Rng rng(81);
    WeightManifest m;
    m.layers.push_back(
        layer_from_kernel2d("a", testutil::random_kernel2d<float>(rng, 2, 1, 3, 3)));
    m.layers.push_back(
        layer_from_kernel2d("b", testutil::random_kernel2d<float>(rng, 3, 2, 3, 3)));
    save_weights(m, dir.path() / "m2d");

    const std::string out_dir = (dir.path() / "m3d").string();
    const CliResult r = run_cli("convert --in " + (dir.path() / "m2d").string() + " --out " + out_dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("params in = ") != std::string::npos);
    CHECK(r.output.find("(equal)") != std::string::npos);
    const WeightManifest converted = load_weights(out_dir);
    CHECK(converted.layers[0].is_planar());

    SUBCASE("re-running on the converted output exits 2") {
        const CliResult again = run_cli("convert --in " + out_dir + " --out " +
                                        (dir.path() / "m3d_again").string());
        CHECK(again.exit_code == 2);
    }
    SUBCASE("corrupted blob exits 3") {
        std::string bytes = read_file_bytes(dir.path() / "m2d" / "a.bin");
        bytes[3] = static_cast<char>(bytes[3] ^ 0x10);
        write_file_atomic(dir.path() / "m2d" / "a.bin", bytes);
        const CliResult bad = run_cli("convert --in " + (dir.path() / "m2d").string() + " --out " +
                                      (dir.path() / "m3d_bad").string());
        CHECK(bad.exit_code == 3);
    }
}

TEST_CASE("segment identity probe proves the windowing roundtrip end to end") {
    TempDir dir("cli_probe");
    Rng rng(82);
    Volume v(40, 16, 16);
    for (float& x : v.data) x = static_cast<float>(rng.uniform(0.0, 100.0));
    save_volume(dir.path() / "vol.pv3d", v);

    const CliResult r = run_cli("segment --identity-probe --in " +
                                (dir.path() / "vol.pv3d").string() + " --out " +
                                (dir.path() / "mask.pv3d").string() + " --prob " +
                                (dir.path() / "prob.pv3d").string());
    REQUIRE(r.exit_code == 0);
    const Volume prob = load_volume(dir.path() / "prob.pv3d");
    const Volume expected = normalize_scan(v);
    REQUIRE(prob.extents == expected.extents);
    for (std::size_t i = 0; i < prob.data.size(); ++i) CHECK(prob.data[i] == expected.data[i]);
}

TEST_CASE("segment logs 31 windows for a 256-slice volume") {
    TempDir dir("cli_windows");
    Rng rng(83);
    Volume v(256, 8, 8);
    for (float& x : v.data) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    save_volume(dir.path() / "vol.pv3d", v);
    const CliResult r = run_cli("segment --identity-probe --in " +
                                (dir.path() / "vol.pv3d").string() + " --out " +
                                (dir.path() / "mask.pv3d").string());
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("windows: 31") != std::string::npos);
}

TEST_CASE("train and segment on synthetic data produce a binary mask file") {
    TempDir dir("cli_train");
    const std::string data = (dir.path() / "data").string();
    REQUIRE(run_cli("gen --out " + data + " --seed 3 --count 2 --extents 32,32,32").exit_code == 0);

    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 1;
    cfg.patience = 1;
    cfg.seed = 5;
    cfg.save(dir.path() / "cfg.json");
    const CliResult tr = run_cli("train --config " + (dir.path() / "cfg.json").string() +
                                 " --data " + data + " --out " + (dir.path() / "run").string() +
                                 " --width-scale 0.0625");
    REQUIRE(tr.exit_code == 0);
    CHECK(fs::exists(dir.path() / "run" / "trainlog.csv"));
    CHECK(fs::exists(dir.path() / "run" / "run.json"));

    const CliResult seg = run_cli("segment --net " + (dir.path() / "run" / "net").string() +
                                  " --in " + data + "/scan000.pv3d --out " +
                                  (dir.path() / "mask.pv3d").string());
    REQUIRE(seg.exit_code == 0);
    const MaskVolume mask = load_mask(dir.path() / "mask.pv3d");  // dtype 1 enforced by loader
    mask.validate();
}

TEST_CASE("train with zero learning rate keeps the seeded initialization") {
    TempDir dir("cli_lr0");
    const std::string data = (dir.path() / "data").string();
    REQUIRE(run_cli("gen --out " + data + " --seed 4 --count 2 --extents 32,32,32").exit_code == 0);

    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.max_epochs = 2;
    cfg.patience = 2;
    cfg.seed = 77;
    cfg.save(dir.path() / "cfg.json");
    REQUIRE(run_cli("train --config " + (dir.path() / "cfg.json").string() + " --data " + data +
                    " --out " + (dir.path() / "run").string() + " --width-scale 0.0625")
                .exit_code == 0);

    // the written weights must equal a fresh build with the same seed
    const Network reference = build(NetworkSpec::vgg16(0.0625), 77);
    const Network trained = load_network(dir.path() / "run" / "net");
    REQUIRE(trained.layers.size() == reference.layers.size());
    for (std::size_t i = 0; i < trained.layers.size(); ++i) {
        CHECK(trained.layers[i].kernel.vec() == reference.layers[i].kernel.vec());
        CHECK(trained.layers[i].bias == reference.layers[i].bias);
    }
}

TEST_CASE("two train runs with one seed write identical logs up to wall time") {
    TempDir dir("cli_det");
    const std::string data = (dir.path() / "data").string();
    REQUIRE(run_cli("gen --out " + data + " --seed 6 --count 2 --extents 32,32,32").exit_code == 0);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 2;
    cfg.patience = 2;
    cfg.seed = 13;
    cfg.save(dir.path() / "cfg.json");
    for (const char* run : {"ra", "rb"})
        REQUIRE(run_cli("train --config " + (dir.path() / "cfg.json").string() + " --data " +
                        data + " --out " + (dir.path() / run).string() + " --width-scale 0.0625")
                    .exit_code == 0);
    const std::string la = read_file_bytes(dir.path() / "ra" / "trainlog.csv");
    const std::string lb = read_file_bytes(dir.path() / "rb" / "trainlog.csv");
    CHECK(without_seconds_column(la) == without_seconds_column(lb));
}

TEST_CASE("train with folds writes the fold plan and per-fold runs") {
    TempDir dir("cli_folds");
    const std::string data = (dir.path() / "data").string();
    // 6 scans over 3 centers (round-robin in gen) -> 2 folds
    REQUIRE(run_cli("gen --out " + data + " --seed 8 --count 6 --extents 32,32,32").exit_code == 0);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 1;
    cfg.patience = 1;
    cfg.seed = 21;
    cfg.save(dir.path() / "cfg.json");
    const CliResult r = run_cli("train --config " + (dir.path() / "cfg.json").string() +
                                " --data " + data + " --out " + (dir.path() / "run").string() +
                                " --folds --width-scale 0.0625");
    REQUIRE(r.exit_code == 0);
    const FoldPlan plan = FoldPlan::from_json(read_file_bytes(dir.path() / "run" / "foldplan.json"));
    CHECK(plan.folds.size() == 2);
    CHECK(fs::exists(dir.path() / "run" / "fold_1" / "net" / "weights" / "manifest.json"));
    CHECK(fs::exists(dir.path() / "run" / "fold_2" / "trainlog.csv"));
}

TEST_CASE("evaluate scores perfect predictions as ones and respects mask symmetry") {
    TempDir dir("cli_eval");
    Rng rng(84);
    fs::create_directories(dir.path() / "pred");
    fs::create_directories(dir.path() / "truth");
    nlohmann::json centers;
    for (int i = 0; i < 6; ++i) {
        MaskVolume truth(4, 8, 8), pred(4, 8, 8);
        for (std::size_t j = 0; j < truth.data.size(); ++j) {
            truth.data[j] = rng.uniform() < 0.2 ? 1 : 0;
            pred.data[j] = rng.uniform() < 0.2 ? 1 : 0;
        }
        const std::string name = "scan" + std::to_string(i);
        save_mask(dir.path() / "truth" / (name + ".pv3d"), truth);
        save_mask(dir.path() / "pred" / (name + ".pv3d"), pred);
        centers[name] = i % 2 ? "01" : "07";
    }
    write_file_atomic(dir.path() / "centers.json", centers.dump() + "\n");

    SUBCASE("pred == truth gives all ones") {
        const CliResult r = run_cli("evaluate --pred " + (dir.path() / "truth").string() +
                                    " --truth " + (dir.path() / "truth").string() +
                                    " --centers " + (dir.path() / "centers.json").string() +
                                    " --out " + (dir.path() / "perfect").string());
        REQUIRE(r.exit_code == 0);
        const std::string csv = read_file_bytes(dir.path() / "perfect.report.csv");
        CHECK(csv.find("dice,per_scan,1,0,6") != std::string::npos);
        CHECK(csv.find("sensitivity,per_scan,1,0,6") != std::string::npos);
    }
    SUBCASE("swapping pred and truth keeps dice and changes sensitivity") {
        const CliResult a = run_cli("evaluate --pred " + (dir.path() / "pred").string() +
                                    " --truth " + (dir.path() / "truth").string() + " --out " +
                                    (dir.path() / "ab").string());
        const CliResult b = run_cli("evaluate --pred " + (dir.path() / "truth").string() +
                                    " --truth " + (dir.path() / "pred").string() + " --out " +
                                    (dir.path() / "ba").string());
        REQUIRE(a.exit_code == 0);
        REQUIRE(b.exit_code == 0);
        const auto ja = nlohmann::json::parse(read_file_bytes(dir.path() / "ab.report.json"));
        const auto jb = nlohmann::json::parse(read_file_bytes(dir.path() / "ba.report.json"));
        CHECK(ja["per_scan"]["dice"]["mean"] == jb["per_scan"]["dice"]["mean"]);
        CHECK(ja["per_scan"]["sensitivity"]["mean"] != jb["per_scan"]["sensitivity"]["mean"]);
    }
    SUBCASE("unmatched files exit 2") {
        fs::remove(dir.path() / "pred" / "scan0.pv3d");
        const CliResult r = run_cli("evaluate --pred " + (dir.path() / "pred").string() +
                                    " --truth " + (dir.path() / "truth").string() + " --out " +
                                    (dir.path() / "bad").string());
        CHECK(r.exit_code == 2);
    }
}

TEST_CASE("selfcheck passes") {
    const CliResult r = run_cli("selfcheck");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("[FAIL]") == std::string::npos);
}

TEST_CASE("segment rejects a missing network with a usable error") {
    TempDir dir("cli_nonet");
    Volume v(16, 32, 32, 0.0f);
    v.data[0] = 1.0f;
    save_volume(dir.path() / "vol.pv3d", v);
    const CliResult r = run_cli("segment --net " + (dir.path() / "nowhere").string() + " --in " +
                                (dir.path() / "vol.pv3d").string() + " --out " +
                                (dir.path() / "m.pv3d").string());
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("error") != std::string::npos);
}
