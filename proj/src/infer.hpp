#pragma once

#include "train.hpp"

namespace drnet {

// One routed (or full-branch) prediction and its accounting.
struct InferenceRecord {
    int instance = 0;
    int prediction = -1;
    int label = -1;
    double confidence = 0.0;  // max softmax probability
    bool correct = false;
    std::int64_t flops = 0;   // realized per-instance cost
    int selected_branches = 0;
    std::vector<float> logits;  // raw class scores
    std::vector<std::vector<ConnectionDecision>> decisions;  // per cell; empty for full-branch
};

enum class WeightMode { expected, sampled };

WeightMode weight_mode_from_string(const std::string& s);
const char* weight_mode_name(WeightMode m);

// A trained model ready for inference: the checkpoint's router mode and
// final annealed temperature decide how importance weights are produced.
template <typename S>
struct InferenceContext {
    Network<S>* net = nullptr;
    const ResourceModel* model = nullptr;
    RouterMode router_mode = RouterMode::gumbel;
    double tau = 0.5;

    bool include_router_cost() const { return router_mode != RouterMode::none; }
};

// Threshold-routed prediction executing only the selected branches.
// Sampled mode draws fresh Gumbel noise from rng; expected mode (g = 0)
// is deterministic.
template <typename S>
InferenceRecord predict_dynamic(InferenceContext<S>& ctx, const Dataset& data, int index,
                                double threshold, WeightMode mode = WeightMode::expected,
                                Rng* rng = nullptr);

// All branches, recalibrated weights, no thresholding.
template <typename S>
InferenceRecord predict_full(InferenceContext<S>& ctx, const Dataset& data, int index,
                             WeightMode mode = WeightMode::expected, Rng* rng = nullptr);

struct SweepRow {
    double threshold = 0;
    double accuracy = 0;
    double mean_flops = 0;
    double mean_selected_branches = 0;
};

template <typename S>
std::vector<SweepRow> sweep(InferenceContext<S>& ctx, const Dataset& data,
                            const std::vector<double>& thresholds,
                            WeightMode mode = WeightMode::expected, Rng* rng = nullptr);

// Per-connection, per-branch selection frequency over the dataset.
struct SelectionRatios {
    int cells = 0, connections = 0, branches = 0;
    std::vector<double> freq;  // [(l*C + c) * (B+1) + b]
    double at(int l, int c, int b) const {
        return freq[static_cast<std::size_t>((l * connections + c) * branches + b)];
    }
};

template <typename S>
SelectionRatios branch_selection_ratios(InferenceContext<S>& ctx, const Dataset& data,
                                        double threshold,
                                        std::vector<InferenceRecord>* records_out = nullptr);

struct EasyHardReport {
    std::size_t group_size = 0;
    double easy_accuracy = 0, hard_accuracy = 0;
    double easy_mean_flops = 0, hard_mean_flops = 0;
    double flops_ratio = 0;  // easy / hard
};

// Easy instances are the most confident `quantile` fraction, hard the
// least confident; ties fall back to ascending instance order (stable).
EasyHardReport partition_easy_hard(const std::vector<InferenceRecord>& records, double quantile);

}  // namespace drnet
