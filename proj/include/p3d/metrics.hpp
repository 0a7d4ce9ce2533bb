#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p3d/pipeline.hpp"

namespace p3d {

// Overlap score 2|X∩Y| / (|X|+|Y|); 1.0 when both masks are empty (0/0
// convention, chosen here: two empty masks agree perfectly).
double dice_binary(const MaskVolume& x, const MaskVolume& y);

// Recall TP/(TP+FN); 1.0 when the truth is empty (no positives to find).
double sensitivity(const MaskVolume& pred, const MaskVolume& truth);

// Positive voxels over total voxels.
double voxel_ratio(const MaskVolume& y);

struct ScanMetrics {
    std::string scan;
    std::string center;
    double dice = 0.0;
    double sensitivity = 0.0;
    double positive_ratio = 0.0;
};

struct MetricStats {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
    std::int64_t count = 0;
};

struct CenterStats {
    std::string center;
    MetricStats dice, sensitivity, positive_ratio;
};

// Per-scan entries with per-center and overall statistics. The overall block
// is computed across all scans; the center-mean block averages the per-center
// means (the reporting layout of per-center columns plus an average column).
// Both are kept because the two readings differ in general.
struct SegmentationReport {
    std::vector<ScanMetrics> scans;
    std::vector<CenterStats> centers;  // ordered by center id
    MetricStats overall_dice, overall_sensitivity, overall_ratio;
    MetricStats center_mean_dice, center_mean_sensitivity;

    std::string to_json() const;
    std::string to_csv() const;        // metric x center table plus average rows
    std::string plot_data_csv() const; // one row per scan
};

SegmentationReport aggregate(const std::vector<ScanMetrics>& entries);

}  // namespace p3d
