#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ops.hpp"
#include "registry.hpp"
#include "rng.hpp"

namespace drnet {

// The candidate operation set. skip_connect is the fast-forward branch.
enum class BranchKind {
    max_pool_3x3,
    avg_pool_3x3,
    skip_connect,
    sep_conv_3x3,
    sep_conv_5x5,
};

inline constexpr int kBranchCount = 5;  // B+1

const std::array<BranchKind, kBranchCount>& default_catalog();
const char* branch_kind_name(BranchKind kind);
BranchKind branch_kind_from_string(const std::string& name);

// Per-channel batchnorm with trainable affine and running statistics
// (momentum 0.9, eps 1e-5).
template <typename S>
struct BatchNormLayer {
    Tensor<S> scale, shift, running_mean, running_var;

    void init(int channels) {
        scale = Tensor<S>::full({channels}, S(1));
        shift = Tensor<S>::zeros({channels});
        running_mean = Tensor<S>::zeros({channels});
        running_var = Tensor<S>::full({channels}, S(1));
    }

    Tensor<S> forward(Tape<S>* tape, Tensor<S> x, RunMode mode) {
        return batchnorm2d(tape, x, scale, shift, running_mean, running_var, mode.training,
                           mode.training && mode.update_stats, S(0.9), S(1e-5));
    }

    void collect(const std::string& prefix, ParamRegistry<S>& reg) {
        reg.add_param(prefix + ".scale", scale);
        reg.add_param(prefix + ".shift", shift);
        reg.add_buffer(prefix + ".running_mean", running_mean);
        reg.add_buffer(prefix + ".running_var", running_var);
    }
};

template <typename S>
struct ConvLayer {
    Tensor<S> w;
    Tensor<S> bias;  // optional
    Conv2dAttrs attrs;

    // Kaiming fan-in normal initialization.
    void init(int out_c, int in_c_per_group, int k, int stride, int pad, int groups, Rng& rng,
              bool with_bias = false) {
        w = Tensor<S>({out_c, in_c_per_group, k, k});
        const double fan_in = static_cast<double>(in_c_per_group) * k * k;
        const double std = std::sqrt(2.0 / fan_in);
        for (auto& v : w.values()) v = static_cast<S>(rng.normal(0.0, std));
        if (with_bias) bias = Tensor<S>::zeros({out_c});
        attrs = {stride, pad, groups};
    }

    Tensor<S> forward(Tape<S>* tape, Tensor<S> x) const {
        return conv2d(tape, x, w, bias.valid() ? &bias : nullptr, attrs);
    }
};

// ReLU -> depthwise kxk -> pointwise 1x1 -> batchnorm.
template <typename S>
struct SepConvUnit {
    ConvLayer<S> dw, pw;
    BatchNormLayer<S> bn;

    void init(int channels, int k, int stride, Rng& rng) {
        dw.init(channels, 1, k, stride, k / 2, channels, rng);
        pw.init(channels, channels, 1, 1, 0, 1, rng);
        bn.init(channels);
    }

    Tensor<S> forward(Tape<S>* tape, Tensor<S> x, RunMode mode) {
        return bn.forward(tape, pw.forward(tape, dw.forward(tape, relu(tape, x))), mode);
    }

    void collect(const std::string& prefix, ParamRegistry<S>& reg) {
        reg.add_param(prefix + ".dw.w", dw.w);
        reg.add_param(prefix + ".pw.w", pw.w);
        bn.collect(prefix + ".bn", reg);
    }
};

// Halves the spatial extent without losing pixels: two 1x1 stride-2 convs,
// the second on the input shifted one pixel down-right, concatenated, then
// batchnorm. Requires even extents.
template <typename S>
struct FactorizedReduce {
    ConvLayer<S> conv_a, conv_b;
    BatchNormLayer<S> bn;
    int out_channels = 0;

    void init(int in_c, int out_c, Rng& rng) {
        out_channels = out_c;
        conv_a.init(out_c / 2, in_c, 1, 2, 0, 1, rng);
        conv_b.init(out_c - out_c / 2, in_c, 1, 2, 0, 1, rng);
        bn.init(out_c);
    }

    Tensor<S> forward(Tape<S>* tape, Tensor<S> x, RunMode mode) {
        if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
            throw ShapeError("factorized reduce requires even spatial extents, got " +
                             std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
        Tensor<S> a = conv_a.forward(tape, x);
        Tensor<S> b = conv_b.forward(tape, crop2d(tape, x, 1, 1));
        return bn.forward(tape, concat_channels(tape, {a, b}), mode);
    }

    void collect(const std::string& prefix, ParamRegistry<S>& reg) {
        reg.add_param(prefix + ".a.w", conv_a.w);
        reg.add_param(prefix + ".b.w", conv_b.w);
        bn.collect(prefix + ".bn", reg);
    }
};

// One candidate transformation on a connection. Channel-preserving; spatial
// extent divides by stride.
template <typename S>
class Branch {
public:
    BranchKind kind = BranchKind::skip_connect;
    int channels = 0;
    int stride = 1;

    Tensor<S> forward(Tape<S>* tape, Tensor<S> x, RunMode mode);
    void collect(const std::string& prefix, ParamRegistry<S>& reg);
    std::int64_t param_count() const;

    // sep conv components (two stacked units; the first carries the stride)
    std::vector<SepConvUnit<S>> units;
    // stride-2 skip
    FactorizedReduce<S> reduce;
    bool has_reduce = false;
};

template <typename S>
Branch<S> build_branch(BranchKind kind, int channels, int stride, Rng& rng);

// Constant cost of one branch application in multiply-accumulate units,
// given the input plane (C,H,W). Counts conv MACs and one op per pooling
// window element; elementwise layers are free by convention.
std::int64_t branch_flops(BranchKind kind, int channels, int h, int w, int stride);

}  // namespace drnet
