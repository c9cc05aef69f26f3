#include "branch.hpp"

namespace drnet {

const std::array<BranchKind, kBranchCount>& default_catalog() {
    static const std::array<BranchKind, kBranchCount> cat = {
        BranchKind::max_pool_3x3, BranchKind::avg_pool_3x3, BranchKind::skip_connect,
        BranchKind::sep_conv_3x3, BranchKind::sep_conv_5x5};
    return cat;
}

const char* branch_kind_name(BranchKind kind) {
    switch (kind) {
        case BranchKind::max_pool_3x3: return "max_pool_3x3";
        case BranchKind::avg_pool_3x3: return "avg_pool_3x3";
        case BranchKind::skip_connect: return "skip_connect";
        case BranchKind::sep_conv_3x3: return "sep_conv_3x3";
        case BranchKind::sep_conv_5x5: return "sep_conv_5x5";
    }
    return "?";
}

BranchKind branch_kind_from_string(const std::string& name) {
    for (BranchKind k : default_catalog())
        if (name == branch_kind_name(k)) return k;
    throw ConfigError("unknown branch kind: " + name);
}

template <typename S>
Tensor<S> Branch<S>::forward(Tape<S>* tape, Tensor<S> x, RunMode mode) {
    if (x.dim(1) != channels)
        throw ShapeError(std::string(branch_kind_name(kind)) + ": input has " +
                         std::to_string(x.dim(1)) + " channels on axis 1, branch expects " +
                         std::to_string(channels));
    switch (kind) {
        case BranchKind::max_pool_3x3:
            return maxpool2d(tape, x, 3, stride, 1);
        case BranchKind::avg_pool_3x3:
            return avgpool2d(tape, x, 3, stride, 1);
        case BranchKind::skip_connect:
            if (stride == 1) return x;
            return reduce.forward(tape, x, mode);
        case BranchKind::sep_conv_3x3:
        case BranchKind::sep_conv_5x5: {
            Tensor<S> y = x;
            for (auto& u : units) y = u.forward(tape, y, mode);
            return y;
        }
    }
    throw Error("unreachable branch kind");
}

template <typename S>
void Branch<S>::collect(const std::string& prefix, ParamRegistry<S>& reg) {
    if (has_reduce) reduce.collect(prefix + ".fr", reg);
    for (std::size_t i = 0; i < units.size(); ++i)
        units[i].collect(prefix + ".sep" + std::to_string(i), reg);
}

template <typename S>
std::int64_t Branch<S>::param_count() const {
    std::int64_t n = 0;
    if (has_reduce)
        n += reduce.conv_a.w.size() + reduce.conv_b.w.size() + reduce.bn.scale.size() +
             reduce.bn.shift.size();
    for (const auto& u : units)
        n += u.dw.w.size() + u.pw.w.size() + u.bn.scale.size() + u.bn.shift.size();
    return n;
}

template <typename S>
Branch<S> build_branch(BranchKind kind, int channels, int stride, Rng& rng) {
    if (channels < 1) throw ConfigError("branch channels must be >= 1");
    if (stride != 1 && stride != 2) throw ConfigError("branch stride must be 1 or 2");
    Branch<S> b;
    b.kind = kind;
    b.channels = channels;
    b.stride = stride;
    switch (kind) {
        case BranchKind::max_pool_3x3:
        case BranchKind::avg_pool_3x3:
            break;  // parameter-free
        case BranchKind::skip_connect:
            if (stride == 2) {
                b.reduce.init(channels, channels, rng);
                b.has_reduce = true;
            }
            break;
        case BranchKind::sep_conv_3x3:
        case BranchKind::sep_conv_5x5: {
            const int k = kind == BranchKind::sep_conv_3x3 ? 3 : 5;
            b.units.resize(2);
            b.units[0].init(channels, k, stride, rng);
            b.units[1].init(channels, k, 1, rng);
            break;
        }
    }
    return b;
}

std::int64_t branch_flops(BranchKind kind, int channels, int h, int w, int stride) {
    if (channels < 1 || h < 1 || w < 1) throw ShapeError("branch_flops: invalid input shape");
    if (stride != 1 && stride != 2) throw ShapeError("branch_flops: stride must be 1 or 2");
    const std::int64_t C = channels;
    switch (kind) {
        case BranchKind::max_pool_3x3:
        case BranchKind::avg_pool_3x3: {
            const std::int64_t ho = conv_out_extent(h, 3, stride, 1);
            const std::int64_t wo = conv_out_extent(w, 3, stride, 1);
            return ho * wo * C * 9;
        }
        case BranchKind::skip_connect: {
            if (stride == 1) return 0;
            // Two half-width 1x1 stride-2 convs over C input channels.
            const std::int64_t ho = h / 2, wo = w / 2;
            return ho * wo * C * C;
        }
        case BranchKind::sep_conv_3x3:
        case BranchKind::sep_conv_5x5: {
            const std::int64_t k = kind == BranchKind::sep_conv_3x3 ? 3 : 5;
            const std::int64_t ho = conv_out_extent(h, static_cast<int>(k), stride,
                                                    static_cast<int>(k) / 2);
            const std::int64_t wo = conv_out_extent(w, static_cast<int>(k), stride,
                                                    static_cast<int>(k) / 2);
            // Two stacked units, both at the output extent.
            return 2 * (ho * wo * C * k * k + ho * wo * C * C);
        }
    }
    throw Error("unreachable branch kind");
}

template class Branch<float>;
template class Branch<double>;
template Branch<float> build_branch<float>(BranchKind, int, int, Rng&);
template Branch<double> build_branch<double>(BranchKind, int, int, Rng&);

}  // namespace drnet
