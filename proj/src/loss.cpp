#include "loss.hpp"

namespace drnet {

template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& t) {
    const int N = t.dim(0), K = t.dim(t.ndim() - 1);
    std::vector<int> out(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const S* row = t.data() + static_cast<std::int64_t>(n) * K;
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > row[best]) best = k;
        out[static_cast<std::size_t>(n)] = best;
    }
    return out;
}

template <typename S>
LossReport<S> compute_loss(Tape<S>* tape, Tensor<S> logits, Tensor<S> aux_logits,
                           const std::vector<int>& labels,
                           const std::vector<Tensor<S>>& weights, const ResourceModel* model,
                           double lambda, double aux_weight, bool flops_include_router) {
    if (lambda < 0) throw ConfigError("lambda must be non-negative");
    const int N = logits.dim(0);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("compute_loss: label count does not match batch");

    LossReport<S> report;
    Tensor<S> ce_main = nll_loss(tape, log_softmax(tape, logits), labels);
    report.ce_main = static_cast<double>(ce_main.item());
    Tensor<S> total = ce_main;
    if (aux_logits.valid()) {
        Tensor<S> ce_aux = nll_loss(tape, log_softmax(tape, aux_logits), labels);
        report.ce_aux = static_cast<double>(ce_aux.item());
        total = add(tape, total, scalar_mul(tape, ce_aux, static_cast<S>(aux_weight)));
    }

    const std::vector<int> preds = argmax_rows(logits);
    report.correct.resize(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        report.correct[static_cast<std::size_t>(n)] =
            preds[static_cast<std::size_t>(n)] == labels[static_cast<std::size_t>(n)] ? 1 : 0;
        report.num_correct += report.correct[static_cast<std::size_t>(n)];
    }

    if (model) {
        const bool need_grad = lambda > 0.0 && report.num_correct > 0;
        Tensor<S> evar = expected_resource(need_grad ? tape : nullptr, weights, *model);
        const double fixed = static_cast<double>(model->fixed_cost(flops_include_router));
        report.expected_flops.resize(static_cast<std::size_t>(N));
        for (int n = 0; n < N; ++n)
            report.expected_flops[static_cast<std::size_t>(n)] =
                static_cast<double>(evar.data()[n]) + fixed;
        if (need_grad) {
            for (int n = 0; n < N; ++n)
                if (report.correct[static_cast<std::size_t>(n)] && !(evar.data()[n] > S(0)))
                    throw NumericError(
                        "resource regularizer: expected branch cost is not positive for "
                        "instance " + std::to_string(n));
            Tensor<S> gate({N});
            const S unit = static_cast<S>(lambda / report.num_correct);
            for (int n = 0; n < N; ++n)
                gate.data()[n] = report.correct[static_cast<std::size_t>(n)] ? unit : S(0);
            // Gate entries are constants: no gradient flows through the
            // correctness indicator.
            Tensor<S> term = sum_all(tape, mul(tape, log_elem(tape, evar), gate));
            report.resource_term = static_cast<double>(term.item());
            total = add(tape, total, term);
        }
    }

    report.total = total;
    report.total_value = static_cast<double>(total.item());
    return report;
}

template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);
template LossReport<float> compute_loss<float>(Tape<float>*, Tensor<float>, Tensor<float>,
                                               const std::vector<int>&,
                                               const std::vector<Tensor<float>>&,
                                               const ResourceModel*, double, double, bool);
template LossReport<double> compute_loss<double>(Tape<double>*, Tensor<double>, Tensor<double>,
                                                 const std::vector<int>&,
                                                 const std::vector<Tensor<double>>&,
                                                 const ResourceModel*, double, double, bool);

}  // namespace drnet
