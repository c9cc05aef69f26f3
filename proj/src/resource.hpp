#pragma once

#include "backbone.hpp"

namespace drnet {

// Constant per-branch costs, fixed once the network's shapes are known.
// Units are multiply-accumulates: conv and linear MACs plus one op per
// pooling window element; elementwise layers, batchnorm, and global
// pooling are free by convention.
struct ResourceModel {
    int cells = 0, connections = 0, branches = 0;
    std::vector<std::vector<std::vector<std::int64_t>>> cost;  // [L][C][B+1]
    std::int64_t stem_flops = 0;
    std::int64_t adapter_flops = 0;
    std::int64_t router_flops = 0;
    std::int64_t classifier_flops = 0;

    std::int64_t fixed_cost(bool include_router = true) const {
        return stem_flops + adapter_flops + classifier_flops +
               (include_router ? router_flops : 0);
    }
    std::int64_t full_variable() const {
        std::int64_t t = 0;
        for (const auto& cell : cost)
            for (const auto& conn : cell)
                for (std::int64_t v : conn) t += v;
        return t;
    }
    std::int64_t full_total(bool include_router = true) const {
        return fixed_cost(include_router) + full_variable();
    }
};

template <typename S>
ResourceModel precompute_costs(const Network<S>& net);

// The (C, B+1) cost matrix of one cell as a constant tensor.
template <typename S>
Tensor<S> cost_tensor(const ResourceModel& model, int cell);

// Triple-sum dot product of recalibrated weights against the cost table;
// one value per instance, differentiable with respect to the weights.
// Covers only the branch (variable) costs.
template <typename S>
Tensor<S> expected_resource(Tape<S>* tape, const std::vector<Tensor<S>>& weights,
                            const ResourceModel& model);

// Cost actually spent by a routed inference: fixed cost plus the selected
// branches' constants. Exact integer arithmetic.
std::int64_t realized_resource(const std::vector<std::vector<ConnectionDecision>>& decisions,
                               const ResourceModel& model, bool include_router = true);

}  // namespace drnet
