#include "p3d/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "p3d/error.hpp"
#include "p3d/io_util.hpp"
#include "p3d/rng.hpp"

namespace p3d {

using nlohmann::json;

void TrainConfig::validate() const {
    // zero is allowed so no-op training runs stay expressible
    if (learning_rate < 0.0) throw ContractError("learning_rate must not be negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ContractError("adam betas must lie in [0,1)");
    if (!(epsilon > 0.0)) throw ContractError("adam epsilon must be positive");
    if (decay < 0.0) throw ContractError("decay must be non-negative");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (max_epochs < 1) throw ContractError("max_epochs must be >= 1");
    if (patience < 1 || patience > max_epochs)
        throw ContractError("patience must lie in [1, max_epochs]");
}

std::string TrainConfig::to_json() const {
    json doc;
    doc["format"] = "p3d-trainconfig";
    doc["version"] = 1;
    doc["learning_rate"] = learning_rate;
    doc["beta1"] = beta1;
    doc["beta2"] = beta2;
    doc["epsilon"] = epsilon;
    doc["decay"] = decay;
    doc["batch_size"] = batch_size;
    doc["max_epochs"] = max_epochs;
    doc["patience"] = patience;
    doc["seed"] = seed;
    doc["encoder_trainable"] = encoder_trainable;
    doc["loss_kind"] = loss_kind_name(loss_kind);
    return doc.dump(2) + "\n";
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    if (doc.value("format", "") != "p3d-trainconfig")
        throw FormatError("train config: missing p3d-trainconfig format marker");
    TrainConfig c;
    try {
        c.learning_rate = doc.value("learning_rate", c.learning_rate);
        c.beta1 = doc.value("beta1", c.beta1);
        c.beta2 = doc.value("beta2", c.beta2);
        c.epsilon = doc.value("epsilon", c.epsilon);
        c.decay = doc.value("decay", c.decay);
        c.batch_size = doc.value("batch_size", c.batch_size);
        c.max_epochs = doc.value("max_epochs", c.max_epochs);
        c.patience = doc.value("patience", c.patience);
        c.seed = doc.value("seed", c.seed);
        c.encoder_trainable = doc.value("encoder_trainable", c.encoder_trainable);
        c.loss_kind = loss_kind_from_name(doc.value("loss_kind", "bce_dice"));
    } catch (const json::exception& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

void TrainConfig::save(const std::filesystem::path& path) const {
    write_file_atomic(path, to_json());
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    return from_json(read_file_bytes(path));
}

namespace {

json scan_json(const ScanId& s) { return {{"center", s.center}, {"name", s.name}}; }

ScanId scan_from_json(const json& j) {
    return {j.at("center").get<std::string>(), j.at("name").get<std::string>()};
}

}  // namespace

std::string FoldPlan::to_json() const {
    json doc;
    doc["format"] = "p3d-foldplan";
    doc["version"] = 1;
    doc["folds"] = json::array();
    for (const Fold& f : folds) {
        json jf;
        for (const ScanId& s : f.test) jf["test"].push_back(scan_json(s));
        for (const ScanId& s : f.validation) jf["validation"].push_back(scan_json(s));
        for (const ScanId& s : f.train) jf["train"].push_back(scan_json(s));
        doc["folds"].push_back(std::move(jf));
    }
    return doc.dump(2) + "\n";
}

FoldPlan FoldPlan::from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("fold plan: ") + e.what());
    }
    if (doc.value("format", "") != "p3d-foldplan")
        throw FormatError("fold plan: missing p3d-foldplan format marker");
    FoldPlan plan;
    for (const json& jf : doc.at("folds")) {
        Fold f;
        for (const json& s : jf.value("test", json::array())) f.test.push_back(scan_from_json(s));
        for (const json& s : jf.value("validation", json::array()))
            f.validation.push_back(scan_from_json(s));
        for (const json& s : jf.value("train", json::array())) f.train.push_back(scan_from_json(s));
        plan.folds.push_back(std::move(f));
    }
    return plan;
}

FoldPlan make_folds(const std::vector<ScanId>& scans, std::uint64_t seed) {
    if (scans.empty()) throw ContractError("make_folds: no scans");
    std::set<std::pair<std::string, std::string>> unique;
    for (const ScanId& s : scans)
        if (!unique.insert({s.center, s.name}).second)
            throw ContractError("make_folds: duplicate scan " + s.center + "/" + s.name);

    std::map<std::string, std::vector<std::string>> by_center;
    for (const ScanId& s : scans) by_center[s.center].push_back(s.name);
    const std::size_t per_center = by_center.begin()->second.size();
    for (const auto& [center, names] : by_center)
        if (names.size() != per_center)
            throw ContractError("make_folds: center " + center + " has " +
                                std::to_string(names.size()) + " scans, expected " +
                                std::to_string(per_center));

    std::map<std::string, std::vector<std::string>> sorted = by_center;
    for (auto& [center, names] : sorted) std::sort(names.begin(), names.end());

    Rng rng(seed);
    FoldPlan plan;
    for (std::size_t k = 0; k < per_center; ++k) {
        Fold f;
        std::set<std::pair<std::string, std::string>> test_set;
        for (const auto& [center, names] : sorted) {
            f.test.push_back({center, names[k]});
            test_set.insert({center, names[k]});
        }
        std::vector<ScanId> remaining;
        for (const ScanId& s : scans)
            if (!test_set.count({s.center, s.name})) remaining.push_back(s);
        // dataset-order reading of "the last scan validates"
        f.validation.push_back(remaining.back());
        remaining.pop_back();
        f.train = std::move(remaining);
        rng.shuffle(f.train);
        plan.folds.push_back(std::move(f));
    }
    return plan;
}

std::string TrainLog::to_csv() const {
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,lr_t,seconds\n";
    for (const EpochStats& e : epochs)
        os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ','
           << e.seconds << '\n';
    return std::move(os).str();
}

void adam_update(std::vector<float>& param, const Tensor& grad, Tensor& m, Tensor& v,
                 std::int64_t t, const TrainConfig& cfg) {
    if (t < 1) throw ContractError("adam step index must be >= 1");
    if (grad.numel() != static_cast<std::int64_t>(param.size()))
        throw ContractError("adam_update: gradient/parameter size mismatch");
    const double lr = cfg.lr_at(t);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::int64_t i = 0; i < grad.numel(); ++i) {
        const double g = static_cast<double>(grad[i]);
        const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
        const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double m_hat = mi / bc1;
        const double v_hat = vi / bc2;
        param[static_cast<std::size_t>(i)] -=
            static_cast<float>(lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
    }
}

namespace {

void adam_update_layer_part(NetLayer& layer, bool kernel_part, const Tensor& grad,
                            AdamState& state, const std::string& key, const TrainConfig& cfg) {
    Tensor& m = state.m.try_emplace(key, Tensor(grad.shape(), 0.0f)).first->second;
    Tensor& v = state.v.try_emplace(key, Tensor(grad.shape(), 0.0f)).first->second;
    if (kernel_part) {
        adam_update(layer.kernel.vec(), grad, m, v, state.t, cfg);
    } else {
        adam_update(layer.bias, grad, m, v, state.t, cfg);
    }
}

}  // namespace

void adam_step(Network& net, const GradientSet& grads, AdamState& state, const TrainConfig& cfg) {
    net.apply_gradients_check_shapes(grads);
    ++state.t;
    for (const auto& [name, grad] : grads) {
        const auto dot = name.rfind('.');
        NetLayer& layer = net.layer(name.substr(0, dot));
        adam_update_layer_part(layer, name.substr(dot + 1) == "kernel", grad, state, name, cfg);
    }
}

std::vector<TrainingWindow> prepare_training_windows(const Volume& scan, const MaskVolume& mask,
                                                     std::int64_t window_depth,
                                                     std::int64_t stride) {
    if (scan.extents != mask.extents)
        throw ContractError("prepare_training_windows: volume and mask extents differ");
    const Volume norm = normalize_scan(scan);
    const WindowSet vol_ws = decompose(norm, window_depth, stride);

    Volume mask_as_volume(mask.extents[0], mask.extents[1], mask.extents[2]);
    for (std::size_t i = 0; i < mask.data.size(); ++i)
        mask_as_volume.data[i] = static_cast<float>(mask.data[i]);
    const WindowSet mask_ws = decompose(mask_as_volume, window_depth, stride);

    std::vector<TrainingWindow> out;
    out.reserve(vol_ws.windows.size());
    for (std::size_t i = 0; i < vol_ws.windows.size(); ++i) {
        const Tensor& slab = vol_ws.windows[i].slab;  // (wd,h,w)
        const Shape s = slab.shape();
        TrainingWindow w;
        const Tensor one_channel = slab.reshaped({1, 1, s[0], s[1], s[2]});
        w.input = replicate_channels(one_channel).reshaped({3, s[0], s[1], s[2]});
        w.target = mask_ws.windows[i].slab.reshaped({1, s[0], s[1], s[2]});
        out.push_back(std::move(w));
    }
    return out;
}

namespace {

// Stack windows picked by `order[from..from+count)` into batch tensors
// (N,3,D,H,W) and (N,1,D,H,W).
std::pair<Tensor, Tensor> stack_batch(const std::vector<TrainingWindow>& ws,
                                      const std::vector<std::size_t>& order, std::size_t from,
                                      std::size_t count) {
    const Shape in_s = ws[order[from]].input.shape();    // (3,D,H,W)
    const Shape tg_s = ws[order[from]].target.shape();   // (1,D,H,W)
    Tensor in({static_cast<std::int64_t>(count), in_s[0], in_s[1], in_s[2], in_s[3]});
    Tensor tg({static_cast<std::int64_t>(count), tg_s[0], tg_s[1], tg_s[2], tg_s[3]});
    for (std::size_t i = 0; i < count; ++i) {
        const TrainingWindow& w = ws[order[from + i]];
        if (w.input.shape() != in_s || w.target.shape() != tg_s)
            throw ContractError("training windows have inconsistent shapes");
        std::copy(w.input.data(), w.input.data() + w.input.numel(),
                  in.data() + static_cast<std::int64_t>(i) * w.input.numel());
        std::copy(w.target.data(), w.target.data() + w.target.numel(),
                  tg.data() + static_cast<std::int64_t>(i) * w.target.numel());
    }
    return {std::move(in), std::move(tg)};
}

std::vector<std::size_t> identity_order(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

struct LayerSnapshot {
    std::vector<Tensor> kernels;
    std::vector<std::vector<float>> biases;
};

LayerSnapshot snapshot(const Network& net) {
    LayerSnapshot s;
    for (const NetLayer& l : net.layers) {
        s.kernels.push_back(l.kernel);
        s.biases.push_back(l.bias);
    }
    return s;
}

void restore(Network& net, const LayerSnapshot& s) {
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        net.layers[i].kernel = s.kernels[i];
        net.layers[i].bias = s.biases[i];
    }
}

}  // namespace

std::pair<double, double> evaluate_windows(const Network& net,
                                           const std::vector<TrainingWindow>& windows,
                                           LossKind kind, int batch_size) {
    if (windows.empty()) throw ContractError("evaluate_windows: no windows");
    const std::vector<std::size_t> order = identity_order(windows.size());
    double loss_sum = 0.0, dice_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t from = 0; from < windows.size(); from += static_cast<std::size_t>(batch_size)) {
        const std::size_t count =
            std::min(windows.size() - from, static_cast<std::size_t>(batch_size));
        auto [in, tg] = stack_batch(windows, order, from, count);
        const Tensor prob = net.forward(in);
        const LossValue lv = loss_forward(kind, prob, tg);
        loss_sum += lv.value * static_cast<double>(count);
        dice_sum += lv.soft_dice * static_cast<double>(count);
        seen += count;
    }
    return {loss_sum / static_cast<double>(seen), dice_sum / static_cast<double>(seen)};
}

TrainLog fit(Network& net, const std::vector<TrainingWindow>& train,
             const std::vector<TrainingWindow>& validation, const TrainConfig& cfg,
             const FitOptions& options) {
    cfg.validate();
    if (train.empty() || validation.empty())
        throw ContractError("fit: train and validation streams must be non-empty");

    set_encoder_trainable(net, cfg.encoder_trainable);

    Rng rng(cfg.seed);
    AdamState state;
    TrainLog log;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    LayerSnapshot best_params = snapshot(net);

    std::vector<std::size_t> order = identity_order(train.size());
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        rng.shuffle(order);

        double loss_sum = 0.0, dice_sum = 0.0;
        std::size_t seen = 0;
        int batch_index = 0;
        for (std::size_t from = 0; from < train.size();
             from += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
            const std::size_t count =
                std::min(train.size() - from, static_cast<std::size_t>(cfg.batch_size));
            auto [in, tg] = stack_batch(train, order, from, count);

            Tape tape;
            const Tape::Id input = tape.leaf(std::move(in));
            const Tape::Id prob = net.forward_on_tape(tape, input, /*with_grad=*/true);
            const Tape::Id loss_id = tape.loss(cfg.loss_kind, prob, std::move(tg));
            const LossValue lv = tape.last_loss();
            if (!std::isfinite(lv.value))
                throw DivergenceError("non-finite training loss at epoch " +
                                          std::to_string(epoch) + ", batch " +
                                          std::to_string(batch_index),
                                      epoch, batch_index);
            const GradientSet grads =
                tape.backward(loss_id, Tensor({1}, std::vector<float>{1.0f}));
            adam_step(net, grads, state, cfg);

            loss_sum += lv.value * static_cast<double>(count);
            dice_sum += lv.soft_dice * static_cast<double>(count);
            seen += count;
        }

        const auto [val_loss, val_dice] =
            evaluate_windows(net, validation, cfg.loss_kind, cfg.batch_size);
        (void)val_dice;
        if (!std::isfinite(val_loss))
            throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch),
                                  epoch, -1);

        EpochStats es;
        es.epoch = epoch;
        es.train_loss = loss_sum / static_cast<double>(seen);
        es.train_soft_dice = dice_sum / static_cast<double>(seen);
        es.val_loss = val_loss;
        es.lr = cfg.lr_at(state.t);
        es.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(es);

        if (val_loss < best_val) {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = snapshot(net);
        }
        if (options.on_epoch && options.on_epoch(es)) {
            log.stop_reason = "stopped_by_callback";
            break;
        }
        if (epoch - best_epoch >= cfg.patience) {
            log.stop_reason = "early_stop";
            break;
        }
    }
    if (log.stop_reason.empty()) log.stop_reason = "max_epochs";

    restore(net, best_params);
    log.best_epoch = best_epoch;
    log.best_val_loss = best_val;
    return log;
}

std::vector<std::pair<Volume, MaskVolume>> gen_synthetic(std::uint64_t seed, int count,
                                                         std::array<std::int64_t, 3> extents,
                                                         double lesion_ratio) {
    if (!(lesion_ratio > 0.0 && lesion_ratio < 1.0))
        throw ContractError("gen_synthetic: lesion_ratio must lie strictly in (0,1)");
    if (count < 1) throw ContractError("gen_synthetic: count must be >= 1");
    for (std::int64_t e : extents)
        if (e < 4) throw ContractError("gen_synthetic: extents must be >= 4");
    const std::int64_t d = extents[0], h = extents[1], w = extents[2];
    const std::int64_t total = d * h * w;
    const std::int64_t target = std::llround(lesion_ratio * static_cast<double>(total));
    if (target < 1)
        throw ContractError("gen_synthetic: lesion_ratio " + std::to_string(lesion_ratio) +
                            " yields no lesion voxels at these extents");

    Rng rng(seed);
    std::vector<std::pair<Volume, MaskVolume>> out;
    for (int k = 0; k < count; ++k) {
        // smooth background from upsampled coarse noise
        Volume coarse(std::max<std::int64_t>(2, d / 8), std::max<std::int64_t>(2, h / 8),
                      std::max<std::int64_t>(2, w / 8));
        for (float& x : coarse.data) x = static_cast<float>(rng.uniform(-0.35, 0.35));
        Volume vol = resample(coarse, extents);
        MaskVolume mask(d, h, w);

        std::int64_t placed = 0;
        std::int64_t attempts = 0;
        const std::int64_t max_attempts = 1000 + 50 * target;
        while (placed < target) {
            if (++attempts > max_attempts)
                throw ContractError("gen_synthetic: lesion_ratio infeasible for these extents");
            const std::int64_t remaining = target - placed;
            if (remaining < 10) {
                // single voxels close the gap exactly
                const std::int64_t dd = static_cast<std::int64_t>(rng.below(d));
                const std::int64_t hh = static_cast<std::int64_t>(rng.below(h));
                const std::int64_t ww = static_cast<std::int64_t>(rng.below(w));
                if (!mask.at(dd, hh, ww)) {
                    mask.at(dd, hh, ww) = 1;
                    vol.at(dd, hh, ww) = 1.1f;
                    ++placed;
                }
                continue;
            }
            // ellipsoid; sizes chosen so a blob never overshoots the target band
            double rd, rh, rw;
            if (remaining >= 60) {
                rd = rng.uniform(1.0, 1.6);
                rh = rng.uniform(1.6, 2.6);
                rw = rng.uniform(1.6, 2.6);
            } else {
                rd = rng.uniform(0.8, 1.1);
                rh = rng.uniform(0.9, 1.4);
                rw = rng.uniform(0.9, 1.4);
            }
            const double cd = rng.uniform(rd, static_cast<double>(d - 1) - rd);
            const double ch = rng.uniform(rh, static_cast<double>(h - 1) - rh);
            const double cw = rng.uniform(rw, static_cast<double>(w - 1) - rw);
            const std::int64_t d0 = static_cast<std::int64_t>(std::floor(cd - rd));
            const std::int64_t d1 = static_cast<std::int64_t>(std::ceil(cd + rd));
            const std::int64_t h0 = static_cast<std::int64_t>(std::floor(ch - rh));
            const std::int64_t h1 = static_cast<std::int64_t>(std::ceil(ch + rh));
            const std::int64_t w0 = static_cast<std::int64_t>(std::floor(cw - rw));
            const std::int64_t w1 = static_cast<std::int64_t>(std::ceil(cw + rw));
            for (std::int64_t dd = std::max<std::int64_t>(0, d0); dd <= std::min(d - 1, d1); ++dd)
                for (std::int64_t hh = std::max<std::int64_t>(0, h0); hh <= std::min(h - 1, h1);
                     ++hh)
                    for (std::int64_t ww = std::max<std::int64_t>(0, w0);
                         ww <= std::min(w - 1, w1); ++ww) {
                        const double rz = (static_cast<double>(dd) - cd) / rd;
                        const double ry = (static_cast<double>(hh) - ch) / rh;
                        const double rx = (static_cast<double>(ww) - cw) / rw;
                        const double r2 = rz * rz + ry * ry + rx * rx;
                        if (r2 > 1.0) continue;
                        if (!mask.at(dd, hh, ww)) {
                            mask.at(dd, hh, ww) = 1;
                            ++placed;
                        }
                        vol.at(dd, hh, ww) = std::max(
                            vol.at(dd, hh, ww), static_cast<float>(1.0 + 0.3 * (1.0 - r2)));
                    }
        }
        vol.provenance = "synthetic seed " + std::to_string(seed) + " #" + std::to_string(k);
        out.emplace_back(std::move(vol), std::move(mask));
    }
    return out;
}

}  // namespace p3d
