#include "resource.hpp"

namespace drnet {

namespace {
std::int64_t adapter_flops(int in_c, int out_c, int in_res, bool reducing) {
    if (reducing) {
        const std::int64_t half = in_res / 2;
        return half * half * static_cast<std::int64_t>(out_c) * in_c;
    }
    return static_cast<std::int64_t>(in_res) * in_res * out_c * in_c;
}
}  // namespace

template <typename S>
ResourceModel precompute_costs(const Network<S>& net) {
    const BackboneConfig& cfg = net.config();
    ResourceModel m;
    m.cells = cfg.cells;
    m.connections = net.topology().connections();
    m.branches = cfg.branch_count;
    m.stem_flops = static_cast<std::int64_t>(cfg.input_size) * cfg.input_size *
                   cfg.init_channels * cfg.input_channels * 9;
    m.classifier_flops =
        static_cast<std::int64_t>(net.cells().back().width) * cfg.nodes * cfg.num_classes;

    m.cost.resize(static_cast<std::size_t>(m.cells));
    for (int l = 0; l < m.cells; ++l) {
        const auto& cell = net.cells()[static_cast<std::size_t>(l)];
        m.adapter_flops += adapter_flops(cell.in0_channels, cell.width, cell.in0_res,
                                         cell.pre0.reducing);
        m.adapter_flops += adapter_flops(cell.in1_channels, cell.width, cell.in1_res, false);
        int rc, rres;
        net.router_input_shape(l, rc, rres);
        m.router_flops += net.routers()[static_cast<std::size_t>(l)].flops(rc, rres, rres);

        auto& per_cell = m.cost[static_cast<std::size_t>(l)];
        per_cell.resize(static_cast<std::size_t>(m.connections));
        for (int c = 0; c < m.connections; ++c) {
            const auto& conn = cell.conns[static_cast<std::size_t>(c)];
            // Input nodes sit at the adapter resolution; intermediate nodes
            // at the cell's output resolution.
            const int src_res = conn.source <= 1 ? cell.in1_res : cell.out_res;
            auto& row = per_cell[static_cast<std::size_t>(c)];
            row.resize(static_cast<std::size_t>(m.branches));
            for (int b = 0; b < m.branches; ++b)
                row[static_cast<std::size_t>(b)] =
                    branch_flops(cfg.catalog[static_cast<std::size_t>(b)], cell.width, src_res,
                                 src_res, conn.stride);
        }
    }
    return m;
}

template <typename S>
Tensor<S> cost_tensor(const ResourceModel& model, int cell) {
    if (cell < 0 || cell >= model.cells)
        throw ShapeError("cost_tensor: cell index out of range");
    Tensor<S> t({model.connections, model.branches});
    const auto& per_cell = model.cost[static_cast<std::size_t>(cell)];
    for (int c = 0; c < model.connections; ++c)
        for (int b = 0; b < model.branches; ++b)
            t.data()[c * model.branches + b] =
                static_cast<S>(per_cell[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)]);
    return t;
}

template <typename S>
Tensor<S> expected_resource(Tape<S>* tape, const std::vector<Tensor<S>>& weights,
                            const ResourceModel& model) {
    if (static_cast<int>(weights.size()) != model.cells)
        throw ShapeError("expected_resource: weight list has " + std::to_string(weights.size()) +
                         " cells, model has " + std::to_string(model.cells));
    Tensor<S> total;
    for (int l = 0; l < model.cells; ++l) {
        const Tensor<S>& w = weights[static_cast<std::size_t>(l)];
        if (w.ndim() != 3 || w.dim(1) != model.connections || w.dim(2) != model.branches)
            throw ShapeError("expected_resource: cell " + std::to_string(l) +
                             " weights must be (N," + std::to_string(model.connections) + "," +
                             std::to_string(model.branches) + ")");
        Tensor<S> contrib =
            sum_per_instance(tape, mul(tape, w, cost_tensor<S>(model, l)));
        total = total.valid() ? add(tape, total, contrib) : contrib;
    }
    return total;
}

std::int64_t realized_resource(const std::vector<std::vector<ConnectionDecision>>& decisions,
                               const ResourceModel& model, bool include_router) {
    if (static_cast<int>(decisions.size()) != model.cells)
        throw ShapeError("realized_resource: decisions cover " + std::to_string(decisions.size()) +
                         " cells, model has " + std::to_string(model.cells));
    std::int64_t total = model.fixed_cost(include_router);
    for (int l = 0; l < model.cells; ++l) {
        const auto& per_cell = decisions[static_cast<std::size_t>(l)];
        if (static_cast<int>(per_cell.size()) != model.connections)
            throw ShapeError("realized_resource: cell " + std::to_string(l) +
                             " has incomplete decisions");
        for (int c = 0; c < model.connections; ++c)
            for (int b : per_cell[static_cast<std::size_t>(c)].selected)
                total += model.cost[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)]
                                   [static_cast<std::size_t>(b)];
    }
    return total;
}

template ResourceModel precompute_costs<float>(const Network<float>&);
template ResourceModel precompute_costs<double>(const Network<double>&);
template Tensor<float> cost_tensor<float>(const ResourceModel&, int);
template Tensor<double> cost_tensor<double>(const ResourceModel&, int);
template Tensor<float> expected_resource<float>(Tape<float>*, const std::vector<Tensor<float>>&,
                                                const ResourceModel&);
template Tensor<double> expected_resource<double>(Tape<double>*,
                                                  const std::vector<Tensor<double>>&,
                                                  const ResourceModel&);

}  // namespace drnet
