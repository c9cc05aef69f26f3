#include "router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace drnet {

template <typename S>
void RouterNet<S>::init(int in_channels, int connections, int branches, Rng& rng) {
    if (in_channels < 1 || connections < 1 || branches < 1)
        throw ConfigError("router: channel, connection and branch counts must be positive");
    in_channels_ = in_channels;
    connections_ = connections;
    branches_ = branches;
    pw1_.init(kMid1, in_channels, 1, 2, 0, 1, rng, /*with_bias=*/true);
    dw1_.init(kMid1, 1, 5, 2, 2, kMid1, rng);
    pw2_.init(kMid2, kMid1, 1, 2, 0, 1, rng, /*with_bias=*/true);
    dw2_.init(kMid2, 1, 5, 2, 2, kMid2, rng);
    const int out = connections * branches;
    head_w_ = Tensor<S>::zeros({out, kMid2});
    head_b_ = Tensor<S>::zeros({out});
}

template <typename S>
Tensor<S> RouterNet<S>::forward(Tape<S>* tape, Tensor<S> x) const {
    if (x.dim(1) != in_channels_)
        throw ShapeError("router: input has " + std::to_string(x.dim(1)) +
                         " channels on axis 1, expected " + std::to_string(in_channels_));
    Tensor<S> h = relu(tape, dw1_.forward(tape, pw1_.forward(tape, x)));
    h = relu(tape, dw2_.forward(tape, pw2_.forward(tape, h)));
    Tensor<S> pooled = global_avg_pool(tape, h);
    Tensor<S> flat = linear(tape, pooled, head_w_, &head_b_);
    return reshape(tape, flat, {x.dim(0), connections_, branches_});
}

template <typename S>
void RouterNet<S>::collect(const std::string& prefix, ParamRegistry<S>& reg) {
    reg.add_param(prefix + ".pw1.w", pw1_.w);
    reg.add_param(prefix + ".pw1.b", pw1_.bias);
    reg.add_param(prefix + ".dw1.w", dw1_.w);
    reg.add_param(prefix + ".pw2.w", pw2_.w);
    reg.add_param(prefix + ".pw2.b", pw2_.bias);
    reg.add_param(prefix + ".dw2.w", dw2_.w);
    reg.add_param(prefix + ".head.w", head_w_);
    reg.add_param(prefix + ".head.b", head_b_);
}

template <typename S>
std::int64_t RouterNet<S>::flops(int in_channels, int h, int w) const {
    auto half = [](int v) { return conv_out_extent(v, 1, 2, 0); };
    std::int64_t total = 0;
    int ph = half(h), pw = half(w);
    total += static_cast<std::int64_t>(ph) * pw * kMid1 * in_channels;  // pw1
    int dh = conv_out_extent(ph, 5, 2, 2), dw = conv_out_extent(pw, 5, 2, 2);
    total += static_cast<std::int64_t>(dh) * dw * kMid1 * 25;  // dw1
    int qh = half(dh), qw = half(dw);
    total += static_cast<std::int64_t>(qh) * qw * kMid2 * kMid1;  // pw2
    int eh = conv_out_extent(qh, 5, 2, 2), ew = conv_out_extent(qw, 5, 2, 2);
    total += static_cast<std::int64_t>(eh) * ew * kMid2 * 25;  // dw2
    total += static_cast<std::int64_t>(connections_) * branches_ * kMid2;  // head
    return total;
}

template <typename S>
Tensor<S> gumbel_sample(const std::vector<int>& shape, Rng& rng) {
    Tensor<S> g(shape);
    for (auto& v : g.values()) {
        const double u = rng.uniform();
        v = static_cast<S>(-std::log(-std::log(u)));
    }
    return g;
}

template <typename S>
Tensor<S> recalibrate(Tape<S>* tape, Tensor<S> logits, double tau, Tensor<S> g) {
    if (!(tau > 0.0)) throw NumericError("recalibrate: temperature must be positive, got " +
                                         std::to_string(tau));
    Tensor<S> t = logits;
    if (g.valid()) {
        if (g.shape() != logits.shape())
            throw ShapeError("recalibrate: noise shape does not match logits");
        t = add(tape, t, g);
    }
    t = scalar_mul(tape, t, static_cast<S>(1.0 / tau));
    return softmax(tape, t);
}

ConnectionDecision route_threshold_row(const std::vector<double>& row, double threshold) {
    if (row.empty()) throw ShapeError("route_threshold: empty weight row");
    if (!(threshold > 0.0) || threshold > 1.0)
        throw NumericError("route_threshold: threshold must lie in (0, 1], got " +
                           std::to_string(threshold));
    const int k = static_cast<int>(row.size());
    std::vector<int> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (row[static_cast<std::size_t>(a)] != row[static_cast<std::size_t>(b)])
            return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
        return a < b;
    });
    double total = 0.0;
    for (double v : row) total += v;

    ConnectionDecision d;
    d.threshold = threshold;
    d.rescaled.assign(static_cast<std::size_t>(k), 0.0);
    // The full threshold always keeps every branch, however peaked the
    // row; below it, the relative slack only decides exact-boundary
    // prefixes (e.g. four fifths of a uniform row at T = 0.8).
    const double target =
        threshold == 1.0 ? total : threshold * total * (1.0 - 1e-12);
    double cum = 0.0;
    int taken = 0;
    for (int i = 0; i < k; ++i) {
        cum += row[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        d.selected.push_back(order[static_cast<std::size_t>(i)]);
        taken = i + 1;
        if (threshold == 1.0 ? taken == k : cum >= target) break;
    }
    if (taken == k) {
        // Select-all keeps the weights untouched (rescale factor 1).
        d.mass = 1.0;
        for (int i = 0; i < k; ++i)
            d.rescaled[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(i)];
    } else {
        d.mass = cum;
        for (int idx : d.selected)
            d.rescaled[static_cast<std::size_t>(idx)] = row[static_cast<std::size_t>(idx)] / cum;
    }
    return d;
}

template <typename S>
std::vector<ConnectionDecision> route_threshold(const Tensor<S>& weights, double threshold) {
    if (weights.ndim() != 2)
        throw ShapeError("route_threshold: expected a (connections, branches) matrix, got " +
                         std::to_string(weights.ndim()) + " axes");
    const int C = weights.dim(0), K = weights.dim(1);
    std::vector<ConnectionDecision> out;
    out.reserve(static_cast<std::size_t>(C));
    std::vector<double> row(static_cast<std::size_t>(K));
    for (int c = 0; c < C; ++c) {
        for (int b = 0; b < K; ++b)
            row[static_cast<std::size_t>(b)] = static_cast<double>(weights.data()[c * K + b]);
        out.push_back(route_threshold_row(row, threshold));
    }
    return out;
}

template class RouterNet<float>;
template class RouterNet<double>;
template Tensor<float> gumbel_sample<float>(const std::vector<int>&, Rng&);
template Tensor<double> gumbel_sample<double>(const std::vector<int>&, Rng&);
template Tensor<float> recalibrate<float>(Tape<float>*, Tensor<float>, double, Tensor<float>);
template Tensor<double> recalibrate<double>(Tape<double>*, Tensor<double>, double, Tensor<double>);
template std::vector<ConnectionDecision> route_threshold<float>(const Tensor<float>&, double);
template std::vector<ConnectionDecision> route_threshold<double>(const Tensor<double>&, double);

}  // namespace drnet
