#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "branch.hpp"
#include "router.hpp"

namespace drnet {

// Static architecture description. Defaults follow the small CIFAR
// configuration: reduction cells at floor(L/3) and floor(2L/3), auxiliary
// classifier at floor(2L/3) with weight 0.4.
struct BackboneConfig {
    int cells = 5;           // L
    int nodes = 4;           // N intermediate nodes per cell
    int fan_in = 2;          // n predecessors per node (1 or 2)
    int branch_count = kBranchCount;  // B+1
    int init_channels = 15;
    int num_classes = 10;
    int input_channels = 3;
    int input_size = 32;
    std::vector<int> reduction_cells;  // filled by validate() when empty
    bool no_reductions = false;        // forces an all-stride-1 backbone
    int aux_cell = -1;                 // -1: default; -2: disabled
    double aux_weight = 0.4;
    std::uint64_t topology_seed = 1;
    std::vector<BranchKind> catalog;   // empty: full default catalog

    int connections() const { return fan_in * nodes; }
    bool aux_enabled() const { return aux_cell >= 0; }

    // Fills defaults and checks invariants; throws ConfigError.
    void validate();
};

// One shared connection pattern: for each intermediate node i (2..N+1) an
// ordered predecessor list. All cells are structurally identical.
struct CellTopology {
    int nodes = 0;
    int fan_in = 0;
    std::vector<std::vector<int>> preds;  // preds[i-2] -> list of size fan_in

    int connections() const { return nodes * fan_in; }
    // Connection index for (node i, slot s): (i-2)*fan_in + s.
    int source_of(int conn) const {
        return preds[static_cast<std::size_t>(conn / fan_in)]
                    [static_cast<std::size_t>(conn % fan_in)];
    }
};

// Deterministic in topology_seed: node i takes x_{i-1} plus one of the two
// cell inputs at random.
CellTopology build_topology(const BackboneConfig& config);

// Exact (2^{B+1} - 1)^{L*C} as a decimal string.
std::string count_candidate_architectures(int branch_count, int cells, int connections);

// Supplies per-cell branch weights during a forward pass. When use_router()
// is false the router is neither evaluated nor differentiated.
template <typename S>
class RoutingPolicy {
public:
    virtual ~RoutingPolicy() = default;
    virtual bool use_router() const { return true; }
    // logits: (N, C, B+1) when use_router(), invalid otherwise.
    virtual Tensor<S> weights_for_cell(int cell, Tape<S>* tape, Tensor<S> logits, int batch) = 0;
};

// Fixed uniform 1/(B+1) weights; the w/o-router ablation.
template <typename S>
class UniformPolicy : public RoutingPolicy<S> {
public:
    explicit UniformPolicy(int connections, int branches)
        : connections_(connections), branches_(branches) {}
    bool use_router() const override { return false; }
    Tensor<S> weights_for_cell(int, Tape<S>*, Tensor<S>, int batch) override {
        return Tensor<S>::full({batch, connections_, branches_},
                               S(1) / static_cast<S>(branches_));
    }

private:
    int connections_, branches_;
};

// Optional capture of intermediate values for tests and reports.
template <typename S>
struct ForwardTrace {
    std::vector<Tensor<S>> raw_input0, raw_input1;   // per cell, pre-adapter
    std::vector<Tensor<S>> cell_outputs;             // per cell
    std::vector<std::vector<Tensor<S>>> node_values; // per cell, nodes 2..N+1
    std::vector<Tensor<S>> router_logits;            // per cell (may be invalid)
    std::vector<Tensor<S>> weights;                  // per cell, as applied
};

template <typename S>
struct ForwardResult {
    Tensor<S> logits;
    Tensor<S> aux_logits;  // valid only in training mode with aux enabled
};

namespace detail {

// ReLU -> 1x1 conv -> batchnorm, or a factorized reduce when the input
// arrives at twice the target resolution.
template <typename S>
struct Adapter {
    bool reducing = false;
    ConvLayer<S> conv;
    BatchNormLayer<S> bn;
    FactorizedReduce<S> fr;

    void init(int in_c, int out_c, bool reduce, Rng& rng) {
        reducing = reduce;
        if (reduce) {
            fr.init(in_c, out_c, rng);
        } else {
            conv.init(out_c, in_c, 1, 1, 0, 1, rng);
            bn.init(out_c);
        }
    }
    Tensor<S> forward(Tape<S>* tape, Tensor<S> x, RunMode mode) {
        if (reducing) return fr.forward(tape, relu(tape, x), mode);
        return bn.forward(tape, conv.forward(tape, relu(tape, x)), mode);
    }
    void collect(const std::string& prefix, ParamRegistry<S>& reg) {
        if (reducing) {
            fr.collect(prefix + ".fr", reg);
        } else {
            reg.add_param(prefix + ".conv.w", conv.w);
            bn.collect(prefix + ".bn", reg);
        }
    }
};

template <typename S>
struct Connection {
    int source = 0;  // node id within the cell
    int stride = 1;
    std::vector<Branch<S>> branches;
};

template <typename S>
struct Cell {
    int index = 0;
    bool reduction = false;
    int width = 0;       // node channels
    int in0_channels = 0, in1_channels = 0;
    int in0_res = 0, in1_res = 0;  // square spatial extents of raw inputs
    int out_res = 0;
    Adapter<S> pre0, pre1;
    std::vector<Connection<S>> conns;
};

}  // namespace detail

// The L-cell network: stem, cells, per-cell routers, main and auxiliary
// classifiers. Structure is fixed at construction; all randomness comes
// from the config's topology seed and the init seed.
template <typename S>
class Network {
public:
    Network(const BackboneConfig& config, std::uint64_t init_seed);

    const BackboneConfig& config() const { return config_; }
    const CellTopology& topology() const { return topology_; }

    ForwardResult<S> forward(Tape<S>* tape, Tensor<S> batch, RoutingPolicy<S>& policy,
                             RunMode mode, ForwardTrace<S>* trace = nullptr);

    ParamRegistry<S>& params() { return params_; }
    const ParamRegistry<S>& params() const { return params_; }
    std::int64_t param_count() const { return params_.trainable_count(); }

    const std::vector<detail::Cell<S>>& cells() const { return cells_; }
    const std::vector<RouterNet<S>>& routers() const { return routers_; }
    int stem_channels() const { return config_.init_channels; }

    // Router input plane for cell l (after spatial harmonization).
    void router_input_shape(int cell, int& channels, int& res) const;

    std::string candidate_architectures() const {
        return count_candidate_architectures(config_.branch_count, config_.cells,
                                             topology_.connections());
    }

private:
    Tensor<S> stem_forward(Tape<S>* tape, Tensor<S> batch, RunMode mode);
    Tensor<S> router_input(Tape<S>* tape, Tensor<S> x0, Tensor<S> x1) const;

    BackboneConfig config_;
    CellTopology topology_;
    ParamRegistry<S> params_;
    ConvLayer<S> stem_conv_;
    BatchNormLayer<S> stem_bn_;
    std::vector<detail::Cell<S>> cells_;
    std::vector<RouterNet<S>> routers_;
    Tensor<S> classifier_w_, classifier_b_;
    Tensor<S> aux_w_, aux_b_;
};

}  // namespace drnet
