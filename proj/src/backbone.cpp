#include "backbone.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>

namespace drnet {

void BackboneConfig::validate() {
    if (cells < 1) throw ConfigError("cells (L) must be >= 1");
    if (nodes < 1) throw ConfigError("nodes (N) must be >= 1");
    if (fan_in < 1 || fan_in > 2)
        throw ConfigError("fan_in (n) must be 1 or 2; node 2 has only two predecessors");
    if (init_channels < 1) throw ConfigError("init_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (input_size < 4 || input_size % 4 != 0)
        throw ConfigError("input_size must be a positive multiple of 4");
    if (!(aux_weight > 0.0) || aux_weight > 1.0)
        throw ConfigError("aux_weight must lie in (0, 1]");
    if (catalog.empty())
        catalog.assign(default_catalog().begin(), default_catalog().end());
    branch_count = static_cast<int>(catalog.size());
    if (no_reductions) reduction_cells.clear();
    else if (reduction_cells.empty() && cells >= 2)
        reduction_cells = {cells / 3, 2 * cells / 3};
    std::sort(reduction_cells.begin(), reduction_cells.end());
    reduction_cells.erase(std::unique(reduction_cells.begin(), reduction_cells.end()),
                          reduction_cells.end());
    for (int r : reduction_cells)
        if (r < 0 || r >= cells)
            throw ConfigError("reduction cell index " + std::to_string(r) + " out of range");
    if (reduction_cells.size() > 2)
        throw ConfigError("at most two reduction stages are supported");
    if (aux_cell == -1) aux_cell = cells >= 2 ? 2 * cells / 3 : -2;
    if (aux_cell >= cells) throw ConfigError("aux_cell index out of range");
}

CellTopology build_topology(const BackboneConfig& config) {
    BackboneConfig cfg = config;
    cfg.validate();
    CellTopology topo;
    topo.nodes = cfg.nodes;
    topo.fan_in = cfg.fan_in;
    Rng rng(derive_seed(cfg.topology_seed, "topology"));
    for (int i = 2; i < 2 + cfg.nodes; ++i) {
        std::vector<int> preds{i - 1};
        if (cfg.fan_in == 2) {
            int r = static_cast<int>(rng.next_below(2));
            if (r == i - 1) r = 0;  // node 2 always pairs x1 with x0
            preds.push_back(r);
        }
        topo.preds.push_back(std::move(preds));
    }
    return topo;
}

std::string count_candidate_architectures(int branch_count, int cells, int connections) {
    if (branch_count < 1 || cells < 0 || connections < 0)
        throw ConfigError("candidate count: invalid arguments");
    namespace mp = boost::multiprecision;
    mp::cpp_int subsets = (mp::cpp_int(1) << branch_count) - 1;  // non-empty branch subsets
    mp::cpp_int total = 1;
    const std::int64_t sites = static_cast<std::int64_t>(cells) * connections;
    for (std::int64_t i = 0; i < sites; ++i) total *= subsets;
    return total.str();
}

template <typename S>
Network<S>::Network(const BackboneConfig& config, std::uint64_t init_seed) : config_(config) {
    config_.validate();
    topology_ = build_topology(config_);
    Rng rng(derive_seed(init_seed, "init"));

    const int L = config_.cells, N = config_.nodes;
    auto is_reduction = [&](int l) {
        return std::find(config_.reduction_cells.begin(), config_.reduction_cells.end(), l) !=
               config_.reduction_cells.end();
    };

    stem_conv_.init(config_.init_channels, config_.input_channels, 3, 1, 1, 1, rng);
    stem_bn_.init(config_.init_channels);
    params_.add_param("stem.conv.w", stem_conv_.w);
    stem_bn_.collect("stem.bn", params_);

    int reductions_so_far = 0;
    std::vector<int> out_channels(static_cast<std::size_t>(L));
    std::vector<int> out_res(static_cast<std::size_t>(L));
    cells_.resize(static_cast<std::size_t>(L));
    routers_.resize(static_cast<std::size_t>(L));

    for (int l = 0; l < L; ++l) {
        detail::Cell<S>& cell = cells_[static_cast<std::size_t>(l)];
        cell.index = l;
        cell.reduction = is_reduction(l);
        if (cell.reduction) ++reductions_so_far;
        cell.width = config_.init_channels * (1 << reductions_so_far);

        cell.in0_channels = l >= 2 ? out_channels[static_cast<std::size_t>(l - 2)]
                                   : config_.init_channels;
        cell.in1_channels = l >= 1 ? out_channels[static_cast<std::size_t>(l - 1)]
                                   : config_.init_channels;
        cell.in0_res = l >= 2 ? out_res[static_cast<std::size_t>(l - 2)] : config_.input_size;
        cell.in1_res = l >= 1 ? out_res[static_cast<std::size_t>(l - 1)] : config_.input_size;
        if (cell.in0_res != cell.in1_res && cell.in0_res != 2 * cell.in1_res)
            throw ConfigError("cell " + std::to_string(l) + ": unsupported input resolution pair");

        const std::string cp = "cell" + std::to_string(l);
        cell.pre0.init(cell.in0_channels, cell.width, cell.in0_res != cell.in1_res, rng);
        cell.pre1.init(cell.in1_channels, cell.width, false, rng);
        cell.pre0.collect(cp + ".pre0", params_);
        cell.pre1.collect(cp + ".pre1", params_);

        const int C = topology_.connections();
        cell.conns.resize(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) {
            detail::Connection<S>& conn = cell.conns[static_cast<std::size_t>(c)];
            conn.source = topology_.source_of(c);
            conn.stride = (cell.reduction && conn.source <= 1) ? 2 : 1;
            for (int b = 0; b < config_.branch_count; ++b) {
                conn.branches.push_back(build_branch<S>(
                    config_.catalog[static_cast<std::size_t>(b)], cell.width, conn.stride, rng));
                conn.branches.back().collect(
                    cp + ".conn" + std::to_string(c) + ".b" + std::to_string(b), params_);
            }
        }

        routers_[static_cast<std::size_t>(l)].init(cell.in0_channels + cell.in1_channels, C,
                                                   config_.branch_count, rng);
        routers_[static_cast<std::size_t>(l)].collect("router" + std::to_string(l), params_);

        out_channels[static_cast<std::size_t>(l)] = N * cell.width;
        cell.out_res = cell.reduction ? cell.in1_res / 2 : cell.in1_res;
        out_res[static_cast<std::size_t>(l)] = cell.out_res;
    }

    const int last_c = out_channels[static_cast<std::size_t>(L - 1)];
    classifier_w_ = Tensor<S>({config_.num_classes, last_c});
    {
        const double std = std::sqrt(2.0 / last_c);
        for (auto& v : classifier_w_.values()) v = static_cast<S>(rng.normal(0.0, std));
    }
    classifier_b_ = Tensor<S>::zeros({config_.num_classes});
    params_.add_param("classifier.w", classifier_w_);
    params_.add_param("classifier.b", classifier_b_);

    if (config_.aux_enabled()) {
        const int aux_c = out_channels[static_cast<std::size_t>(config_.aux_cell)];
        aux_w_ = Tensor<S>({config_.num_classes, aux_c});
        const double std = std::sqrt(2.0 / aux_c);
        for (auto& v : aux_w_.values()) v = static_cast<S>(rng.normal(0.0, std));
        aux_b_ = Tensor<S>::zeros({config_.num_classes});
        params_.add_param("aux.w", aux_w_);
        params_.add_param("aux.b", aux_b_);
    }
}

template <typename S>
Tensor<S> Network<S>::stem_forward(Tape<S>* tape, Tensor<S> batch, RunMode mode) {
    if (batch.ndim() != 4 || batch.dim(1) != config_.input_channels)
        throw ShapeError("network input must be (N," + std::to_string(config_.input_channels) +
                         ",H,W)");
    return stem_bn_.forward(tape, stem_conv_.forward(tape, batch), mode);
}

template <typename S>
Tensor<S> Network<S>::router_input(Tape<S>* tape, Tensor<S> x0, Tensor<S> x1) const {
    // At a reduction boundary the older input is one step larger; pool it
    // down so the two can be concatenated.
    if (x0.dim(2) != x1.dim(2)) {
        Tensor<S> big = x0.dim(2) > x1.dim(2) ? x0 : x1;
        Tensor<S> small = x0.dim(2) > x1.dim(2) ? x1 : x0;
        big = avgpool2d(tape, big, 2, 2, 0);
        return x0.dim(2) > x1.dim(2) ? concat_channels(tape, {big, small})
                                     : concat_channels(tape, {small, big});
    }
    return concat_channels(tape, {x0, x1});
}

template <typename S>
void Network<S>::router_input_shape(int cell, int& channels, int& res) const {
    const auto& c = cells_[static_cast<std::size_t>(cell)];
    channels = c.in0_channels + c.in1_channels;
    res = std::min(c.in0_res, c.in1_res);
}

template <typename S>
ForwardResult<S> Network<S>::forward(Tape<S>* tape, Tensor<S> batch, RoutingPolicy<S>& policy,
                                     RunMode mode, ForwardTrace<S>* trace) {
    const int batch_n = batch.dim(0);
    const int C = topology_.connections();
    Tensor<S> stem_out = stem_forward(tape, batch, mode);
    Tensor<S> prev_prev = stem_out, prev = stem_out;
    ForwardResult<S> result;

    for (int l = 0; l < config_.cells; ++l) {
        detail::Cell<S>& cell = cells_[static_cast<std::size_t>(l)];
        Tensor<S> x0 = prev_prev, x1 = prev;
        if (trace) {
            trace->raw_input0.push_back(x0);
            trace->raw_input1.push_back(x1);
        }

        Tensor<S> logits;
        if (policy.use_router())
            logits = routers_[static_cast<std::size_t>(l)].forward(
                tape, router_input(tape, x0, x1));
        if (trace) trace->router_logits.push_back(logits);

        Tensor<S> weights = policy.weights_for_cell(l, tape, logits, batch_n);
        if (weights.ndim() != 3 || weights.dim(0) != batch_n || weights.dim(1) != C ||
            weights.dim(2) != config_.branch_count)
            throw ShapeError("cell " + std::to_string(l) + ": routing weights must be (" +
                             std::to_string(batch_n) + "," + std::to_string(C) + "," +
                             std::to_string(config_.branch_count) + ")");
        if (trace) trace->weights.push_back(weights);

        std::vector<Tensor<S>> nodes;
        nodes.push_back(cell.pre0.forward(tape, x0, mode));
        nodes.push_back(cell.pre1.forward(tape, x1, mode));

        for (int i = 2; i < 2 + config_.nodes; ++i) {
            Tensor<S> acc;
            for (int slot = 0; slot < config_.fan_in; ++slot) {
                const int c = (i - 2) * config_.fan_in + slot;
                detail::Connection<S>& conn = cell.conns[static_cast<std::size_t>(c)];
                Tensor<S> src = nodes[static_cast<std::size_t>(conn.source)];
                Tensor<S> w_conn = select_row(tape, weights, c);

                // Without a tape, branches whose weight column is zero for
                // every instance are skipped outright.
                std::vector<int> active;
                for (int b = 0; b < config_.branch_count; ++b) {
                    if (tape) {
                        active.push_back(b);
                        continue;
                    }
                    bool nonzero = false;
                    for (int n = 0; n < batch_n && !nonzero; ++n)
                        nonzero = w_conn.data()[n * config_.branch_count + b] != S(0);
                    if (nonzero) active.push_back(b);
                }
                std::vector<Tensor<S>> outs;
                outs.reserve(active.size());
                for (int b : active)
                    outs.push_back(
                        conn.branches[static_cast<std::size_t>(b)].forward(tape, src, mode));
                Tensor<S> w_used = w_conn;
                if (static_cast<int>(active.size()) != config_.branch_count) {
                    w_used = Tensor<S>({batch_n, static_cast<int>(active.size())});
                    for (int n = 0; n < batch_n; ++n)
                        for (std::size_t a = 0; a < active.size(); ++a)
                            w_used.data()[n * static_cast<int>(active.size()) +
                                          static_cast<int>(a)] =
                                w_conn.data()[n * config_.branch_count +
                                              active[a]];
                }
                Tensor<S> contrib = weighted_sum(tape, outs, w_used);
                acc = slot == 0 ? contrib : add(tape, acc, contrib);
            }
            nodes.push_back(acc);
        }

        std::vector<Tensor<S>> intermediates(nodes.begin() + 2, nodes.end());
        Tensor<S> out = concat_channels(tape, intermediates);
        if (trace) {
            trace->node_values.push_back(intermediates);
            trace->cell_outputs.push_back(out);
        }

        if (mode.training && config_.aux_enabled() && l == config_.aux_cell) {
            Tensor<S> pooled = global_avg_pool(tape, out);
            result.aux_logits = linear(tape, pooled, aux_w_, &aux_b_);
        }
        prev_prev = prev;
        prev = out;
    }

    Tensor<S> pooled = global_avg_pool(tape, prev);
    result.logits = linear(tape, pooled, classifier_w_, &classifier_b_);
    return result;
}

template class Network<float>;
template class Network<double>;

}  // namespace drnet
