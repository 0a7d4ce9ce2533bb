#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "p3d/conv.hpp"
#include "p3d/error.hpp"
#include "p3d/losses.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

template <typename T>
using GradientSetT = std::map<std::string, TensorT<T>>;

using GradientSet = GradientSetT<float>;

// Reverse-mode tape over the tensor kernels. Records every executed primitive
// in order; backward() replays the records in exact reverse order. One tape
// per training step, confined to a single thread.
//
// The same tape instantiated with T = double is the 64-bit checking mode used
// by grad_check; training uses T = float.
template <typename T>
class TapeT {
public:
    using Id = std::size_t;

    TapeT() = default;
    // backward closures capture `this`
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;
    TapeT(TapeT&&) = delete;
    TapeT& operator=(TapeT&&) = delete;

    Id leaf(TensorT<T> value, std::string name = "", bool requires_grad = false) {
        Node n;
        n.op = "leaf";
        n.name = std::move(name);
        n.is_leaf = true;
        n.requires_grad = requires_grad;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    Id conv3d(Id x, Id kernel, Id bias, Dims3 stride = {1, 1, 1}, Dims3 dilation = {1, 1, 1},
              PadMode padding = PadMode::kSame) {
        const ConvWeightsT<T> w = make_weights(kernel, bias, stride, dilation, padding);
        TensorT<T> y = p3d::conv3d(value(x), w);
        const bool need_x = nodes_[x].requires_grad;
        const bool need_k = nodes_[kernel].requires_grad;
        const bool need_b = nodes_[bias].requires_grad;
        return record("conv3d", std::move(y), {x, kernel, bias},
                      [this, x, kernel, bias, stride, dilation, padding, need_x, need_k,
                       need_b](Id self) {
                          const ConvWeightsT<T> wb =
                              make_weights(kernel, bias, stride, dilation, padding);
                          const TensorT<T>& gy = grads_[self];
                          if (need_x)
                              accumulate(x, conv3d_backward_input(gy, value(x), wb));
                          if (need_k)
                              accumulate(kernel, conv3d_backward_kernel(value(x), gy, wb));
                          if (need_b) {
                              auto db = conv3d_backward_bias(gy);
                              const std::int64_t nb = static_cast<std::int64_t>(db.size());
                              accumulate(bias, TensorT<T>({nb}, std::move(db)));
                          }
                      });
    }

    Id conv2d(Id x, Id kernel, Id bias, PadMode padding = PadMode::kSame,
              Dims3 stride = {1, 1, 1}, Dims3 dilation = {1, 1, 1}) {
        const Kernel2DT<T> w = make_kernel2d(kernel, bias);
        TensorT<T> y = p3d::conv2d(value(x), w, padding, stride, dilation);
        const bool need_x = nodes_[x].requires_grad;
        const bool need_k = nodes_[kernel].requires_grad;
        const bool need_b = nodes_[bias].requires_grad;
        return record("conv2d", std::move(y), {x, kernel, bias},
                      [this, x, kernel, bias, padding, stride, dilation, need_x, need_k,
                       need_b](Id self) {
                          const Kernel2DT<T> wb = make_kernel2d(kernel, bias);
                          const TensorT<T>& gy = grads_[self];
                          if (need_x)
                              accumulate(x, conv2d_backward_input(gy, value(x), wb, padding,
                                                                  stride, dilation));
                          if (need_k)
                              accumulate(kernel, conv2d_backward_kernel(value(x), gy, wb, padding,
                                                                        stride, dilation));
                          if (need_b) {
                              auto db = conv2d_backward_bias(gy);
                              const std::int64_t nb = static_cast<std::int64_t>(db.size());
                              accumulate(bias, TensorT<T>({nb}, std::move(db)));
                          }
                      });
    }

    Id transpose_conv3d(Id x, Id kernel, Id bias, Dims3 upsample, Dims3 dilation = {1, 1, 1},
                        PadMode padding = PadMode::kSame) {
        const ConvWeightsT<T> w = make_weights(kernel, bias, {1, 1, 1}, dilation, padding);
        TensorT<T> y = p3d::transpose_conv3d(value(x), w, upsample);
        const bool need_x = nodes_[x].requires_grad;
        const bool need_k = nodes_[kernel].requires_grad;
        const bool need_b = nodes_[bias].requires_grad;
        return record("transpose_conv3d", std::move(y), {x, kernel, bias},
                      [this, x, kernel, bias, upsample, dilation, padding, need_x, need_k,
                       need_b](Id self) {
                          const ConvWeightsT<T> wb =
                              make_weights(kernel, bias, {1, 1, 1}, dilation, padding);
                          const TensorT<T>& gy = grads_[self];
                          if (need_x)
                              accumulate(x, transpose_conv3d_backward_input(gy, value(x), wb,
                                                                            upsample));
                          if (need_k)
                              accumulate(kernel, transpose_conv3d_backward_kernel(value(x), gy, wb,
                                                                                  upsample));
                          if (need_b) {
                              auto db = conv3d_backward_bias(gy);
                              const std::int64_t nb = static_cast<std::int64_t>(db.size());
                              accumulate(bias, TensorT<T>({nb}, std::move(db)));
                          }
                      });
    }

    Id maxpool3d(Id x, Dims3 window, Dims3 stride) {
        TensorT<std::int64_t> argmax;
        TensorT<T> y = p3d::maxpool3d(value(x), window, stride, &argmax);
        const bool need_x = nodes_[x].requires_grad;
        return record("maxpool3d", std::move(y), {x},
                      [this, x, argmax = std::move(argmax), need_x](Id self) {
                          if (need_x)
                              accumulate(x, maxpool3d_backward(grads_[self], argmax,
                                                               value(x).shape()));
                      });
    }

    Id relu(Id x) { return activation_op(x, Activation::kRelu, "relu"); }
    Id sigmoid(Id x) { return activation_op(x, Activation::kSigmoid, "sigmoid"); }

    Id concat_channels(Id a, Id b) {
        TensorT<T> y = p3d::concat_channels(value(a), value(b));
        const std::int64_t ca = value(a).extent(1);
        const std::int64_t ct = y.extent(1);
        const bool need_a = nodes_[a].requires_grad;
        const bool need_b = nodes_[b].requires_grad;
        return record("concat_channels", std::move(y), {a, b},
                      [this, a, b, ca, ct, need_a, need_b](Id self) {
                          if (need_a) accumulate(a, slice_channels(grads_[self], 0, ca));
                          if (need_b) accumulate(b, slice_channels(grads_[self], ca, ct));
                      });
    }

    Id add(Id a, Id b) {
        TensorT<T> y = p3d::add(value(a), value(b));
        const bool need_a = nodes_[a].requires_grad;
        const bool need_b = nodes_[b].requires_grad;
        return record("add", std::move(y), {a, b}, [this, a, b, need_a, need_b](Id self) {
            if (need_a) accumulate(a, grads_[self]);
            if (need_b) accumulate(b, grads_[self]);
        });
    }

    Id mul(Id a, Id b) {
        const TensorT<T>& va = value(a);
        const TensorT<T>& vb = value(b);
        if (!va.same_shape(vb)) throw DimensionError("mul shape mismatch");
        TensorT<T> y(va.shape());
        for (std::int64_t i = 0; i < va.numel(); ++i) y[i] = va[i] * vb[i];
        const bool need_a = nodes_[a].requires_grad;
        const bool need_b = nodes_[b].requires_grad;
        return record("mul", std::move(y), {a, b}, [this, a, b, need_a, need_b](Id self) {
            const TensorT<T>& gy = grads_[self];
            if (need_a) {
                TensorT<T> ga(gy.shape());
                for (std::int64_t i = 0; i < gy.numel(); ++i) ga[i] = gy[i] * value(b)[i];
                accumulate(a, std::move(ga));
            }
            if (need_b) {
                TensorT<T> gb(gy.shape());
                for (std::int64_t i = 0; i < gy.numel(); ++i) gb[i] = gy[i] * value(a)[i];
                accumulate(b, std::move(gb));
            }
        });
    }

    Id sum(Id x) {
        double acc = 0.0;
        const TensorT<T>& vx = value(x);
        for (std::int64_t i = 0; i < vx.numel(); ++i) acc += static_cast<double>(vx[i]);
        const bool need_x = nodes_[x].requires_grad;
        return record("sum", TensorT<T>({1}, std::vector<T>{static_cast<T>(acc)}), {x},
                      [this, x, need_x](Id self) {
                          if (!need_x) return;
                          TensorT<T> g(value(x).shape(), grads_[self][0]);
                          accumulate(x, std::move(g));
                      });
    }

    // Scalar segmentation loss vs a constant target.
    Id loss(LossKind kind, Id pred, TensorT<T> target) {
        const LossValue lv = loss_forward(kind, value(pred), target);
        last_loss_ = lv;
        const bool need_p = nodes_[pred].requires_grad;
        return record(std::string("loss_") + loss_kind_name(kind),
                      TensorT<T>({1}, std::vector<T>{static_cast<T>(lv.value)}), {pred},
                      [this, kind, pred, target = std::move(target), need_p](Id self) {
                          if (!need_p) return;
                          accumulate(pred,
                                     loss_backward(kind, value(pred), target,
                                                   static_cast<double>(grads_[self][0])));
                      });
    }

    // Extension point for callers recording their own operations. A node
    // recorded without a backward rule throws when backward() reaches it.
    Id custom_op(std::string op_name, TensorT<T> result, std::vector<Id> inputs,
                 std::function<void(Id)> backward_rule = nullptr) {
        bool req = false;
        for (Id i : inputs) req = req || nodes_[i].requires_grad;
        Node n;
        n.op = std::move(op_name);
        n.requires_grad = req;
        n.value = std::move(result);
        n.backward = std::move(backward_rule);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    const TensorT<T>& value(Id id) const { return nodes_[id].value; }
    std::size_t size() const { return nodes_.size(); }

    // Soft-dice / cross-entropy components of the most recent loss node.
    const LossValue& last_loss() const { return last_loss_; }

    // Accumulated gradient of a node after backward(); empty if none reached it.
    const TensorT<T>* grad(Id id) const {
        return grads_[id].numel() == 0 ? nullptr : &grads_[id];
    }

    // Walks the records in reverse execution order and returns gradients for
    // every named leaf with requires_grad set. Frozen leaves get no entry.
    GradientSetT<T> backward(Id output, const TensorT<T>& seed) {
        if (nodes_.empty()) throw ContractError("backward on an empty tape");
        if (!seed.same_shape(value(output)))
            throw ContractError("backward seed shape " + shape_str(seed.shape()) +
                                " != output shape " + shape_str(value(output).shape()));
        grads_.assign(nodes_.size(), TensorT<T>());
        grads_[output] = seed;
        for (std::size_t i = output + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (grads_[i].numel() == 0 || !n.requires_grad || n.is_leaf) continue;
            if (!n.backward)
                throw UnsupportedOpError("operation '" + n.op + "' has no backward rule");
            n.backward(i);
        }
        GradientSetT<T> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (!n.is_leaf || !n.requires_grad || n.name.empty()) continue;
            if (grads_[i].numel() == 0) continue;
            if (!grads_[i].all_finite())
                throw ContractError("non-finite gradient for parameter '" + n.name + "'");
            out.emplace(n.name, std::move(grads_[i]));
        }
        return out;
    }

private:
    struct Node {
        std::string op;
        std::string name;
        bool is_leaf = false;
        bool requires_grad = false;
        TensorT<T> value;
        std::function<void(Id)> backward;
    };

    Id record(std::string op, TensorT<T> result, std::vector<Id> inputs,
              std::function<void(Id)> bwd) {
        bool req = false;
        for (Id i : inputs) req = req || nodes_[i].requires_grad;
        Node n;
        n.op = std::move(op);
        n.requires_grad = req;
        n.value = std::move(result);
        if (req) n.backward = std::move(bwd);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    Id activation_op(Id x, Activation kind, const char* name) {
        TensorT<T> y = p3d::activation(value(x), kind);
        const bool need_x = nodes_[x].requires_grad;
        return record(name, std::move(y), {x}, [this, x, kind, need_x](Id self) {
            if (need_x)
                accumulate(x, activation_backward(grads_[self], value(x), value(self), kind));
        });
    }

    ConvWeightsT<T> make_weights(Id kernel, Id bias, Dims3 stride, Dims3 dilation,
                                 PadMode padding) const {
        ConvWeightsT<T> w;
        w.kernels = value(kernel);
        w.biases = value(bias).vec();
        w.stride = stride;
        w.dilation = dilation;
        w.padding = padding;
        return w;
    }

    Kernel2DT<T> make_kernel2d(Id kernel, Id bias) const {
        Kernel2DT<T> w;
        w.kernels = value(kernel);
        w.biases = value(bias).vec();
        return w;
    }

    void accumulate(Id id, TensorT<T> g) {
        if (grads_[id].numel() == 0) {
            grads_[id] = std::move(g);
            return;
        }
        TensorT<T>& dst = grads_[id];
        for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
    }

    std::vector<Node> nodes_;
    std::vector<TensorT<T>> grads_;
    LossValue last_loss_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

// Central-difference check of backward() for a scalar-valued graph. Returns
// the maximum elementwise relative error with denominator max(|a|,|b|,1e-8).
// Callers keep relu inputs and pooling ties away from the sampled points.
template <typename T>
double grad_check(
    const std::function<typename TapeT<T>::Id(TapeT<T>&, const std::map<std::string, TensorT<T>>&)>&
        build,
    const std::map<std::string, TensorT<T>>& point, T eps) {
    if (static_cast<double>(eps) < 1e-6 || static_cast<double>(eps) > 1e-3)
        throw ContractError("grad_check eps must lie in [1e-6, 1e-3]");

    TapeT<T> tape;
    const auto out = build(tape, point);
    if (tape.value(out).numel() != 1)
        throw ContractError("grad_check requires a scalar-valued graph, got shape " +
                            shape_str(tape.value(out).shape()));
    const GradientSetT<T> analytic = tape.backward(out, TensorT<T>({1}, std::vector<T>{T{1}}));

    const auto eval = [&build](const std::map<std::string, TensorT<T>>& p) {
        TapeT<T> t;
        const auto o = build(t, p);
        return static_cast<double>(t.value(o)[0]);
    };

    double max_rel = 0.0;
    for (const auto& [name, grad] : analytic) {
        std::map<std::string, TensorT<T>> perturbed = point;
        TensorT<T>& param = perturbed.at(name);
        for (std::int64_t i = 0; i < param.numel(); ++i) {
            const T saved = param[i];
            param[i] = saved + eps;
            const double hi = eval(perturbed);
            param[i] = saved - eps;
            const double lo = eval(perturbed);
            param[i] = saved;
            const double numeric = (hi - lo) / (2.0 * static_cast<double>(eps));
            const double a = static_cast<double>(grad[i]);
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace p3d
