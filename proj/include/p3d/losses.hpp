#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "p3d/error.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

enum class LossKind { kBceDice, kBce, kDice, kFocal };

inline const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::kBceDice: return "bce_dice";
        case LossKind::kBce: return "bce";
        case LossKind::kDice: return "dice";
        case LossKind::kFocal: return "focal";
    }
    return "?";
}

inline LossKind loss_kind_from_name(const std::string& s) {
    if (s == "bce_dice") return LossKind::kBceDice;
    if (s == "bce") return LossKind::kBce;
    if (s == "dice") return LossKind::kDice;
    if (s == "focal") return LossKind::kFocal;
    throw ContractError("unknown loss kind '" + s + "'");
}

// Predictions are clamped to [delta, 1-delta] inside the cross-entropy terms
// so log() stays finite; the soft-dice smoothing term keeps empty masks away
// from 0/0. Both constants are fixed here rather than configurable.
constexpr double kLossClampDelta = 1e-7;
constexpr double kDiceSmoothing = 1.0;
constexpr double kFocalGamma = 2.0;

struct LossValue {
    double value = 0.0;
    double bce = 0.0;        // mean binary cross-entropy (clamped)
    double soft_dice = 0.0;  // smoothed soft dice of probabilities vs targets
};

namespace detail {

inline double clampp(double p) {
    return std::min(1.0 - kLossClampDelta, std::max(kLossClampDelta, p));
}

}  // namespace detail

template <typename T>
LossValue loss_forward(LossKind kind, const TensorT<T>& pred, const TensorT<T>& target) {
    if (!pred.same_shape(target))
        throw ContractError("loss: prediction shape " + shape_str(pred.shape()) +
                            " != target shape " + shape_str(target.shape()));
    const std::int64_t v = pred.numel();
    double bce = 0.0, focal = 0.0, sum_pt = 0.0, sum_p = 0.0, sum_t = 0.0;
    for (std::int64_t i = 0; i < v; ++i) {
        const double p = static_cast<double>(pred[i]);
        const double t = static_cast<double>(target[i]);
        const double pc = detail::clampp(p);
        bce -= t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
        if (kind == LossKind::kFocal) {
            focal -= t * std::pow(1.0 - pc, kFocalGamma) * std::log(pc) +
                     (1.0 - t) * std::pow(pc, kFocalGamma) * std::log(1.0 - pc);
        }
        sum_pt += p * t;
        sum_p += p;
        sum_t += t;
    }
    bce /= static_cast<double>(v);
    focal /= static_cast<double>(v);
    const double dice = (2.0 * sum_pt + kDiceSmoothing) / (sum_p + sum_t + kDiceSmoothing);

    LossValue out;
    out.bce = bce;
    out.soft_dice = dice;
    switch (kind) {
        case LossKind::kBceDice: out.value = bce - dice + 1.0; break;
        case LossKind::kBce: out.value = bce; break;
        case LossKind::kDice: out.value = 1.0 - dice; break;
        case LossKind::kFocal: out.value = focal; break;
    }
    return out;
}

// d(loss)/d(pred), scaled by the upstream seed. The clamp makes the
// cross-entropy terms flat outside [delta, 1-delta].
template <typename T>
TensorT<T> loss_backward(LossKind kind, const TensorT<T>& pred, const TensorT<T>& target,
                         double seed) {
    const std::int64_t v = pred.numel();
    const double vd = static_cast<double>(v);

    double sum_pt = 0.0, sum_p = 0.0, sum_t = 0.0;
    for (std::int64_t i = 0; i < v; ++i) {
        sum_pt += static_cast<double>(pred[i]) * static_cast<double>(target[i]);
        sum_p += static_cast<double>(pred[i]);
        sum_t += static_cast<double>(target[i]);
    }
    const double num = 2.0 * sum_pt + kDiceSmoothing;
    const double den = sum_p + sum_t + kDiceSmoothing;

    TensorT<T> grad(pred.shape());
    for (std::int64_t i = 0; i < v; ++i) {
        const double p = static_cast<double>(pred[i]);
        const double t = static_cast<double>(target[i]);
        const bool inside = p > kLossClampDelta && p < 1.0 - kLossClampDelta;
        const double pc = detail::clampp(p);

        double d_bce = 0.0;
        if (inside) d_bce = (-t / pc + (1.0 - t) / (1.0 - pc)) / vd;
        const double d_dice = (2.0 * t * den - num) / (den * den);

        double g = 0.0;
        switch (kind) {
            case LossKind::kBceDice: g = d_bce - d_dice; break;
            case LossKind::kBce: g = d_bce; break;
            case LossKind::kDice: g = -d_dice; break;
            case LossKind::kFocal: {
                if (inside) {
                    const double gm = kFocalGamma;
                    const double a =
                        t * (-gm * std::pow(1.0 - pc, gm - 1.0) * std::log(pc) +
                             std::pow(1.0 - pc, gm) / pc);
                    const double b =
                        (1.0 - t) * (gm * std::pow(pc, gm - 1.0) * std::log(1.0 - pc) -
                                     std::pow(pc, gm) / (1.0 - pc));
                    g = -(a + b) / vd;
                }
                break;
            }
        }
        grad[i] = static_cast<T>(g * seed);
    }
    return grad;
}

// Convenience wrapper for the default objective: mean binary cross-entropy
// combined with smoothed soft dice, BC(X,Y) - D(X,Y) + 1.
template <typename T>
double loss_bce_dice(const TensorT<T>& pred, const TensorT<T>& target) {
    return loss_forward(LossKind::kBceDice, pred, target).value;
}

}  // namespace p3d
