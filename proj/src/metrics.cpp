#include "p3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"
#include "p3d/error.hpp"

namespace p3d {

using nlohmann::json;

namespace {

void check_extents(const MaskVolume& a, const MaskVolume& b, const char* op) {
    if (a.extents != b.extents)
        throw ContractError(std::string(op) + ": mask extents differ");
}

}  // namespace

double dice_binary(const MaskVolume& x, const MaskVolume& y) {
    check_extents(x, y, "dice_binary");
    std::int64_t nx = 0, ny = 0, inter = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        nx += x.data[i];
        ny += y.data[i];
        inter += static_cast<std::int64_t>(x.data[i] & y.data[i]);
    }
    if (nx + ny == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(nx + ny);
}

double sensitivity(const MaskVolume& pred, const MaskVolume& truth) {
    check_extents(pred, truth, "sensitivity");
    std::int64_t tp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        if (truth.data[i]) {
            if (pred.data[i])
                ++tp;
            else
                ++fn;
        }
    }
    if (tp + fn == 0) return 1.0;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double voxel_ratio(const MaskVolume& y) {
    if (y.numel() == 0) return 0.0;
    return static_cast<double>(y.positive_count()) / static_cast<double>(y.numel());
}

namespace {

MetricStats stats_of(const std::vector<double>& xs) {
    MetricStats s;
    s.count = static_cast<std::int64_t>(xs.size());
    if (xs.empty()) return s;
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size()));
    return s;
}

json stats_json(const MetricStats& s) {
    return {{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}};
}

}  // namespace

SegmentationReport aggregate(const std::vector<ScanMetrics>& entries) {
    if (entries.empty()) throw ContractError("aggregate: no entries");
    for (const ScanMetrics& e : entries)
        if (e.center.empty())
            throw ContractError("aggregate: scan '" + e.scan + "' has no center tag");

    SegmentationReport r;
    r.scans = entries;

    std::map<std::string, std::vector<const ScanMetrics*>> by_center;
    std::vector<double> dices, senss, ratios;
    for (const ScanMetrics& e : entries) {
        by_center[e.center].push_back(&e);
        dices.push_back(e.dice);
        senss.push_back(e.sensitivity);
        ratios.push_back(e.positive_ratio);
    }
    r.overall_dice = stats_of(dices);
    r.overall_sensitivity = stats_of(senss);
    r.overall_ratio = stats_of(ratios);

    std::vector<double> center_dice_means, center_sens_means;
    for (const auto& [center, scans] : by_center) {
        std::vector<double> d, s, v;
        for (const ScanMetrics* e : scans) {
            d.push_back(e->dice);
            s.push_back(e->sensitivity);
            v.push_back(e->positive_ratio);
        }
        CenterStats cs;
        cs.center = center;
        cs.dice = stats_of(d);
        cs.sensitivity = stats_of(s);
        cs.positive_ratio = stats_of(v);
        center_dice_means.push_back(cs.dice.mean);
        center_sens_means.push_back(cs.sensitivity.mean);
        r.centers.push_back(std::move(cs));
    }
    r.center_mean_dice = stats_of(center_dice_means);
    r.center_mean_sensitivity = stats_of(center_sens_means);
    return r;
}

std::string SegmentationReport::to_json() const {
    json doc;
    doc["format"] = "p3d-report";
    doc["version"] = 1;
    doc["scans"] = json::array();
    for (const ScanMetrics& e : scans)
        doc["scans"].push_back({{"scan", e.scan},
                                {"center", e.center},
                                {"dice", e.dice},
                                {"sensitivity", e.sensitivity},
                                {"positive_ratio", e.positive_ratio}});
    doc["centers"] = json::array();
    for (const CenterStats& c : centers)
        doc["centers"].push_back({{"center", c.center},
                                  {"dice", stats_json(c.dice)},
                                  {"sensitivity", stats_json(c.sensitivity)},
                                  {"positive_ratio", stats_json(c.positive_ratio)}});
    doc["per_scan"] = {{"dice", stats_json(overall_dice)},
                       {"sensitivity", stats_json(overall_sensitivity)},
                       {"positive_ratio", stats_json(overall_ratio)}};
    doc["center_mean"] = {{"dice", stats_json(center_mean_dice)},
                          {"sensitivity", stats_json(center_mean_sensitivity)}};
    return doc.dump(2) + "\n";
}

std::string SegmentationReport::to_csv() const {
    std::ostringstream os;
    os << "metric,group,mean,std,count\n";
    const auto emit = [&os](const std::string& metric, const std::string& group,
                            const MetricStats& s) {
        os << metric << ',' << group << ',' << s.mean << ',' << s.stddev << ',' << s.count << '\n';
    };
    for (const CenterStats& c : centers) emit("dice", "center_" + c.center, c.dice);
    emit("dice", "average_of_centers", center_mean_dice);
    emit("dice", "per_scan", overall_dice);
    for (const CenterStats& c : centers) emit("sensitivity", "center_" + c.center, c.sensitivity);
    emit("sensitivity", "average_of_centers", center_mean_sensitivity);
    emit("sensitivity", "per_scan", overall_sensitivity);
    for (const CenterStats& c : centers)
        emit("positive_ratio", "center_" + c.center, c.positive_ratio);
    emit("positive_ratio", "per_scan", overall_ratio);
    return std::move(os).str();
}

std::string SegmentationReport::plot_data_csv() const {
    std::ostringstream os;
    os << "scan,center,dice,sensitivity,positive_ratio\n";
    for (const ScanMetrics& e : scans)
        os << e.scan << ',' << e.center << ',' << e.dice << ',' << e.sensitivity << ','
           << e.positive_ratio << '\n';
    return std::move(os).str();
}

}  // namespace p3d
