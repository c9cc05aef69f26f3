#pragma once

#include <vector>

#include "branch.hpp"

namespace drnet {

// Per-cell hypernetwork: two separable conv blocks (pointwise 1x1 then
// depthwise 5x5, both stride 2), global average pooling, and an affine head
// emitting C*(B+1) importance logits per instance. The affine head starts
// at zero so training begins from uniform routing.
template <typename S>
class RouterNet {
public:
    void init(int in_channels, int connections, int branches, Rng& rng);

    // x is the channel concatenation of the two cell inputs. Returns
    // importance logits shaped (N, C, B+1).
    Tensor<S> forward(Tape<S>* tape, Tensor<S> x) const;

    void collect(const std::string& prefix, ParamRegistry<S>& reg);

    // Cost of one application given the concatenated input plane.
    std::int64_t flops(int in_channels, int h, int w) const;

    int connections() const { return connections_; }
    int branches() const { return branches_; }
    int in_channels() const { return in_channels_; }

    static constexpr int kMid1 = 16;
    static constexpr int kMid2 = 32;

private:
    ConvLayer<S> pw1_, dw1_, pw2_, dw2_;
    Tensor<S> head_w_, head_b_;
    int in_channels_ = 0, connections_ = 0, branches_ = 0;
};

// Standard Gumbel(0,1) noise: g = -log(-log(u)), u uniform on (0,1) with
// endpoints excluded.
template <typename S>
Tensor<S> gumbel_sample(const std::vector<int>& shape, Rng& rng);

// Row-wise softmax of (logits + g)/tau over the last axis. Passing an
// invalid g (default) means expected mode, i.e. g = 0. Differentiable with
// respect to the logits.
template <typename S>
Tensor<S> recalibrate(Tape<S>* tape, Tensor<S> logits, double tau, Tensor<S> g = Tensor<S>());

// One connection's branch selection: the minimal prefix of branches in
// descending weight order (ties toward the lower index) whose cumulative
// mass reaches the threshold.
struct ConnectionDecision {
    std::vector<int> selected;      // in descending-weight order
    double mass = 0.0;              // s_c; exactly 1 when all branches selected
    std::vector<double> rescaled;   // per branch; zero when unselected
    double threshold = 0.0;
};

// The threshold is interpreted as a fraction of the row's total mass, so a
// threshold of 1 always selects every branch even when the float row sums
// to 1 +- 1e-6. When every branch is selected the weights pass through
// unrescaled. Comparison carries a 1e-12 relative slack so exact-boundary
// prefixes (e.g. four branches of a uniform row at T = 0.8) are kept.
ConnectionDecision route_threshold_row(const std::vector<double>& row, double threshold);

// weights: (C, B+1) matrix for a single instance.
template <typename S>
std::vector<ConnectionDecision> route_threshold(const Tensor<S>& weights, double threshold);

}  // namespace drnet
