#pragma once

#include "resource.hpp"

namespace drnet {

// One batch's loss breakdown. `total` is the taped scalar to backpropagate;
// the doubles are detached readouts.
template <typename S>
struct LossReport {
    double ce_main = 0.0;
    double ce_aux = 0.0;
    double resource_term = 0.0;
    double total_value = 0.0;
    std::vector<unsigned char> correct;    // per instance, from current argmax
    std::vector<double> expected_flops;    // per instance, variable + fixed
    int num_correct = 0;
    Tensor<S> total;
};

// total = CE(main) + aux_weight * CE(aux) + lambda * mean over correct
// instances of ln(per-instance expected branch cost). The correctness
// indicator is recomputed from the current predictions and treated as a
// constant gate; the resource term vanishes when lambda is zero or no
// instance is correct. aux_logits may be invalid (no auxiliary head).
template <typename S>
LossReport<S> compute_loss(Tape<S>* tape, Tensor<S> logits, Tensor<S> aux_logits,
                           const std::vector<int>& labels,
                           const std::vector<Tensor<S>>& weights, const ResourceModel* model,
                           double lambda, double aux_weight, bool flops_include_router = true);

// argmax per row; ties toward the lower index.
template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& t);

}  // namespace drnet
