#include "infer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace drnet {

WeightMode weight_mode_from_string(const std::string& s) {
    if (s == "expected") return WeightMode::expected;
    if (s == "sampled") return WeightMode::sampled;
    throw ConfigError("unknown weight mode: " + s);
}

const char* weight_mode_name(WeightMode m) {
    return m == WeightMode::expected ? "expected" : "sampled";
}

namespace {

// Produces recalibrated weights, optionally thresholded into masked and
// rescaled rows; collects per-cell decisions.
template <typename S>
class InferencePolicy : public RoutingPolicy<S> {
public:
    InferencePolicy(RouterMode router_mode, double tau, double threshold, WeightMode wmode,
                    Rng* rng, int cells, int connections, int branches)
        : router_mode_(router_mode), tau_(tau), threshold_(threshold), wmode_(wmode), rng_(rng),
          connections_(connections), branches_(branches) {
        decisions_.resize(static_cast<std::size_t>(cells));
    }

    bool use_router() const override { return router_mode_ != RouterMode::none; }

    Tensor<S> weights_for_cell(int cell, Tape<S>* tape, Tensor<S> logits, int batch) override {
        Tensor<S> w;
        if (router_mode_ == RouterMode::none) {
            w = Tensor<S>::full({batch, connections_, branches_},
                                S(1) / static_cast<S>(branches_));
        } else {
            Tensor<S> g;
            if (wmode_ == WeightMode::sampled) {
                if (!rng_) throw Error("sampled weight mode needs an rng");
                g = gumbel_sample<S>(logits.shape(), *rng_);
            }
            w = recalibrate(tape, logits, tau_, g);
        }
        if (threshold_ <= 0.0) return w;  // full-branch mode

        Tensor<S> masked({batch, connections_, branches_});
        auto& cell_decisions = decisions_[static_cast<std::size_t>(cell)];
        cell_decisions.clear();
        std::vector<double> row(static_cast<std::size_t>(branches_));
        for (int n = 0; n < batch; ++n) {
            std::vector<ConnectionDecision> per_conn;
            per_conn.reserve(static_cast<std::size_t>(connections_));
            for (int c = 0; c < connections_; ++c) {
                const S* src =
                    w.data() + (static_cast<std::int64_t>(n) * connections_ + c) * branches_;
                for (int b = 0; b < branches_; ++b)
                    row[static_cast<std::size_t>(b)] = static_cast<double>(src[b]);
                ConnectionDecision d = route_threshold_row(row, threshold_);
                S* dst = masked.data() +
                         (static_cast<std::int64_t>(n) * connections_ + c) * branches_;
                const bool all = static_cast<int>(d.selected.size()) == branches_;
                for (int b = 0; b < branches_; ++b)
                    dst[b] = all ? src[b] : static_cast<S>(d.rescaled[static_cast<std::size_t>(b)]);
                per_conn.push_back(std::move(d));
            }
            cell_decisions.push_back(std::move(per_conn));
        }
        return masked;
    }

    // decisions[cell][instance][connection]
    const std::vector<std::vector<std::vector<ConnectionDecision>>>& decisions() const {
        return decisions_;
    }

private:
    RouterMode router_mode_;
    double tau_, threshold_;
    WeightMode wmode_;
    Rng* rng_;
    int connections_, branches_;
    std::vector<std::vector<std::vector<ConnectionDecision>>> decisions_;
};

template <typename S>
InferenceRecord run_one(InferenceContext<S>& ctx, const Dataset& data, int index,
                        double threshold, WeightMode mode, Rng* rng) {
    if (!ctx.net || !ctx.model) throw Error("inference context is not initialized");
    const BackboneConfig& cfg = ctx.net->config();
    Tensor<S> batch = assemble_batch<S>(data, {index}, false, nullptr);
    InferencePolicy<S> policy(ctx.router_mode, ctx.tau, threshold, mode, rng, cfg.cells,
                              ctx.net->topology().connections(), cfg.branch_count);
    ForwardResult<S> out = ctx.net->forward(nullptr, batch, policy, RunMode::eval());
    Tensor<S> probs = softmax<S>(nullptr, out.logits);

    InferenceRecord rec;
    rec.instance = index;
    rec.label = data.labels[static_cast<std::size_t>(index)];
    rec.prediction = argmax_rows(out.logits)[0];
    rec.confidence = static_cast<double>(probs.data()[rec.prediction]);
    rec.correct = rec.prediction == rec.label;
    rec.logits.assign(out.logits.data(), out.logits.data() + out.logits.size());
    if (threshold > 0.0) {
        rec.decisions.reserve(static_cast<std::size_t>(cfg.cells));
        for (int l = 0; l < cfg.cells; ++l)
            rec.decisions.push_back(policy.decisions()[static_cast<std::size_t>(l)][0]);
        rec.flops = realized_resource(rec.decisions, *ctx.model, ctx.include_router_cost());
        for (const auto& per_conn : rec.decisions)
            for (const auto& d : per_conn)
                rec.selected_branches += static_cast<int>(d.selected.size());
    } else {
        rec.flops = ctx.model->full_total(ctx.include_router_cost());
        rec.selected_branches =
            cfg.cells * ctx.net->topology().connections() * cfg.branch_count;
    }
    return rec;
}

}  // namespace

template <typename S>
InferenceRecord predict_dynamic(InferenceContext<S>& ctx, const Dataset& data, int index,
                                double threshold, WeightMode mode, Rng* rng) {
    if (!(threshold > 0.0) || threshold > 1.0)
        throw NumericError("predict_dynamic: threshold must lie in (0, 1]");
    return run_one(ctx, data, index, threshold, mode, rng);
}

template <typename S>
InferenceRecord predict_full(InferenceContext<S>& ctx, const Dataset& data, int index,
                             WeightMode mode, Rng* rng) {
    return run_one(ctx, data, index, 0.0, mode, rng);
}

template <typename S>
std::vector<SweepRow> sweep(InferenceContext<S>& ctx, const Dataset& data,
                            const std::vector<double>& thresholds, WeightMode mode, Rng* rng) {
    if (data.size() == 0) throw DataError("sweep: empty dataset");
    std::vector<SweepRow> rows;
    for (double t : thresholds) {
        SweepRow row;
        row.threshold = t;
        std::int64_t correct = 0;
        double flops = 0, selected = 0;
        for (int i = 0; i < data.size(); ++i) {
            InferenceRecord rec = predict_dynamic(ctx, data, i, t, mode, rng);
            correct += rec.correct ? 1 : 0;
            flops += static_cast<double>(rec.flops);
            selected += rec.selected_branches;
        }
        const double n = static_cast<double>(data.size());
        const double conns =
            static_cast<double>(ctx.net->config().cells) * ctx.net->topology().connections();
        row.accuracy = static_cast<double>(correct) / n;
        row.mean_flops = flops / n;
        row.mean_selected_branches = selected / n / conns;
        rows.push_back(row);
    }
    return rows;
}

template <typename S>
SelectionRatios branch_selection_ratios(InferenceContext<S>& ctx, const Dataset& data,
                                        double threshold,
                                        std::vector<InferenceRecord>* records_out) {
    if (data.size() == 0) throw DataError("branch_selection_ratios: empty dataset");
    SelectionRatios r;
    r.cells = ctx.net->config().cells;
    r.connections = ctx.net->topology().connections();
    r.branches = ctx.net->config().branch_count;
    r.freq.assign(static_cast<std::size_t>(r.cells) * r.connections * r.branches, 0.0);
    for (int i = 0; i < data.size(); ++i) {
        InferenceRecord rec = predict_dynamic(ctx, data, i, threshold);
        for (int l = 0; l < r.cells; ++l)
            for (int c = 0; c < r.connections; ++c)
                for (int b : rec.decisions[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)]
                                 .selected)
                    r.freq[static_cast<std::size_t>((l * r.connections + c) * r.branches + b)] +=
                        1.0;
        if (records_out) records_out->push_back(std::move(rec));
    }
    for (double& f : r.freq) f /= static_cast<double>(data.size());
    return r;
}

EasyHardReport partition_easy_hard(const std::vector<InferenceRecord>& records, double quantile) {
    if (!(quantile > 0.0) || quantile >= 1.0)
        throw ConfigError("partition_easy_hard: quantile must lie in (0, 1)");
    const std::size_t n = records.size();
    const std::size_t k = static_cast<std::size_t>(quantile * static_cast<double>(n));
    if (k < 2)
        throw DataError("partition_easy_hard: fewer than 2 instances per group (" +
                        std::to_string(k) + ")");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (records[a].confidence != records[b].confidence)
            return records[a].confidence > records[b].confidence;
        return records[a].instance < records[b].instance;
    });
    auto group_stats = [&](std::size_t begin, std::size_t end, double& acc, double& flops) {
        std::int64_t correct = 0;
        double f = 0;
        for (std::size_t i = begin; i < end; ++i) {
            correct += records[order[i]].correct ? 1 : 0;
            f += static_cast<double>(records[order[i]].flops);
        }
        acc = static_cast<double>(correct) / static_cast<double>(end - begin);
        flops = f / static_cast<double>(end - begin);
    };
    EasyHardReport rep;
    rep.group_size = k;
    group_stats(0, k, rep.easy_accuracy, rep.easy_mean_flops);
    group_stats(n - k, n, rep.hard_accuracy, rep.hard_mean_flops);
    rep.flops_ratio = rep.hard_mean_flops > 0 ? rep.easy_mean_flops / rep.hard_mean_flops : 0.0;
    return rep;
}

#define DRNET_INSTANTIATE_INFER(S)                                                             \
    template InferenceRecord predict_dynamic<S>(InferenceContext<S>&, const Dataset&, int,     \
                                                double, WeightMode, Rng*);                     \
    template InferenceRecord predict_full<S>(InferenceContext<S>&, const Dataset&, int,        \
                                             WeightMode, Rng*);                               \
    template std::vector<SweepRow> sweep<S>(InferenceContext<S>&, const Dataset&,              \
                                            const std::vector<double>&, WeightMode, Rng*);     \
    template SelectionRatios branch_selection_ratios<S>(InferenceContext<S>&, const Dataset&,  \
                                                        double, std::vector<InferenceRecord>*);

DRNET_INSTANTIATE_INFER(float)
DRNET_INSTANTIATE_INFER(double)
#undef DRNET_INSTANTIATE_INFER

}  // namespace drnet
