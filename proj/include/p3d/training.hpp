#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "p3d/losses.hpp"
#include "p3d/model.hpp"
#include "p3d/pipeline.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

struct TrainConfig {
    double learning_rate = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
    double decay = 1.99e-7;  // lr_t = learning_rate / (1 + decay * t)
    int batch_size = 2;
    int max_epochs = 100;
    int patience = 40;
    std::uint64_t seed = 0;
    bool encoder_trainable = true;
    LossKind loss_kind = LossKind::kBceDice;

    void validate() const;
    double lr_at(std::int64_t t) const { return learning_rate / (1.0 + decay * static_cast<double>(t)); }

    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static TrainConfig load(const std::filesystem::path& path);
};

struct ScanId {
    std::string center;
    std::string name;
    bool operator==(const ScanId&) const = default;
};

struct Fold {
    std::vector<ScanId> test;
    std::vector<ScanId> validation;
    std::vector<ScanId> train;
};

struct FoldPlan {
    std::vector<Fold> folds;

    std::string to_json() const;
    static FoldPlan from_json(const std::string& text);
};

// Fold k tests on the k-th scan (names sorted lexicographically) of every
// center; the last remaining scan in dataset order validates; the rest train,
// shuffled with the run seed. Requires the same scan count per center.
FoldPlan make_folds(const std::vector<ScanId>& scans, std::uint64_t seed);

struct EpochStats {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double train_soft_dice = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    int best_epoch = 0;  // 1-based
    double best_val_loss = 0.0;
    std::string stop_reason;  // "max_epochs" | "early_stop" | "stopped_by_callback"

    // columns: epoch, train_loss, val_loss, lr_t, seconds
    std::string to_csv() const;
};

// First/second moment buffers per parameter plus the global step count.
struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    std::int64_t t = 0;
};

// Single bias-corrected update of one parameter buffer, step index t >= 1:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   p <- p - lr/(1+decay*t) * m_hat / (sqrt(v_hat) + eps)
void adam_update(std::vector<float>& param, const Tensor& grad, Tensor& m, Tensor& v,
                 std::int64_t t, const TrainConfig& cfg);

// Applies one optimizer step to every parameter present in the gradient set.
void adam_step(Network& net, const GradientSet& grads, AdamState& state, const TrainConfig& cfg);

// One network input/target pair: input (3,D,H,W), target (1,D,H,W) of {0,1}.
struct TrainingWindow {
    Tensor input;
    Tensor target;
};

// normalize -> replicate channels -> decompose, for volume and mask alike.
std::vector<TrainingWindow> prepare_training_windows(const Volume& scan, const MaskVolume& mask,
                                                     std::int64_t window_depth = 16,
                                                     std::int64_t stride = 8);

struct FitOptions {
    // Called after every epoch; returning true stops training (the best-epoch
    // restore still applies). Used by controlled experiments.
    std::function<bool(const EpochStats&)> on_epoch;
};

// Epoch loop with seeded shuffling, early stopping after `patience` epochs
// without validation improvement, and best-epoch weight restore. Deterministic
// for a fixed seed and thread configuration. Throws DivergenceError when a
// batch loss turns non-finite.
TrainLog fit(Network& net, const std::vector<TrainingWindow>& train,
             const std::vector<TrainingWindow>& validation, const TrainConfig& cfg,
             const FitOptions& options = {});

// Mean loss and soft dice of the network over a window list (forward only).
std::pair<double, double> evaluate_windows(const Network& net,
                                           const std::vector<TrainingWindow>& windows,
                                           LossKind kind, int batch_size);

// Smooth random backgrounds with bright ellipsoidal lesions occupying
// approximately lesion_ratio of the voxels (within +-25%); masks mark lesion
// voxels. Deterministic per seed.
std::vector<std::pair<Volume, MaskVolume>> gen_synthetic(std::uint64_t seed, int count,
                                                         std::array<std::int64_t, 3> extents,
                                                         double lesion_ratio);

}  // namespace p3d
