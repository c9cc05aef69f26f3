#include "train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace drnet {

Stage stage_from_string(const std::string& s) {
    if (s == "pretrain") return Stage::pretrain;
    if (s == "finetune") return Stage::finetune;
    throw ConfigError("unknown stage: " + s);
}

RouterMode router_mode_from_string(const std::string& s) {
    if (s == "gumbel") return RouterMode::gumbel;
    if (s == "softmax") return RouterMode::softmax;
    if (s == "none") return RouterMode::none;
    throw ConfigError("unknown router mode: " + s);
}

const char* stage_name(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }

const char* router_mode_name(RouterMode m) {
    switch (m) {
        case RouterMode::gumbel: return "gumbel";
        case RouterMode::softmax: return "softmax";
        case RouterMode::none: return "none";
    }
    return "?";
}

double anneal_tau(const TrainConfig& config, int epoch) {
    if (epoch < 0) throw ConfigError("anneal_tau: epoch must be non-negative");
    if (config.stage == Stage::pretrain) return config.tau_fixed;
    return std::max(config.tau_floor, config.tau_start * std::exp(-config.tau_decay * epoch));
}

double effective_tau(const TrainConfig& config, int epoch) {
    if (config.router_mode == RouterMode::softmax) return 1.0;
    return anneal_tau(config, epoch);
}

double cosine_lr(double lr_init, int epoch, int total_epochs) {
    if (total_epochs <= 1) return lr_init;
    const double t = static_cast<double>(epoch) / (total_epochs - 1);
    return 0.5 * lr_init * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <typename S>
void sgd_step(std::vector<Parameter<S>>& params, std::vector<Tensor<S>>& velocity, double lr,
              double momentum, double weight_decay, bool nesterov) {
    if (velocity.size() != params.size())
        throw ShapeError("sgd_step: velocity list does not parallel the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable) continue;
        Tensor<S>& p = params[i].tensor;
        if (!p.grad_allocated()) continue;
        Tensor<S>& v = velocity[i];
        if (!v.valid()) v = Tensor<S>::zeros(p.shape());
        const auto& g = p.grad();
        const S mu = static_cast<S>(momentum);
        const S wd = static_cast<S>(weight_decay);
        const S eta = static_cast<S>(lr);
        for (std::int64_t k = 0; k < p.size(); ++k) {
            const S gk = g[k] + wd * p.data()[k];
            v.data()[k] = mu * v.data()[k] + gk;
            p.data()[k] -= eta * (nesterov ? gk + mu * v.data()[k] : v.data()[k]);
        }
    }
}

template <typename S>
Tensor<S> TrainingPolicy<S>::weights_for_cell(int cell, Tape<S>* tape, Tensor<S> logits,
                                              int batch) {
    Tensor<S> w;
    if (mode_ == RouterMode::none) {
        w = Tensor<S>::full({batch, connections_, branches_}, S(1) / static_cast<S>(branches_));
    } else {
        Tensor<S> g;
        if (mode_ == RouterMode::gumbel) {
            if (!gumbel_rng_) throw Error("gumbel mode needs a noise stream");
            g = gumbel_sample<S>(logits.shape(), *gumbel_rng_);
        }
        w = recalibrate(tape, logits, tau_, g);
    }
    if (drop_branch_p_ > 0.0) {
        Tensor<S> mask({batch, connections_, branches_});
        for (int n = 0; n < batch; ++n)
            for (int c = 0; c < connections_; ++c) {
                S* row = mask.data() + (static_cast<std::int64_t>(n) * connections_ + c) *
                                           branches_;
                bool any = false;
                for (int b = 0; b < branches_; ++b) {
                    row[b] = drop_rng_->bernoulli(drop_branch_p_) ? S(0) : S(1);
                    any = any || row[b] != S(0);
                }
                // A fully dropped connection keeps its original weights.
                if (!any) std::fill(row, row + branches_, S(1));
            }
        w = row_renormalize(tape, mul(tape, w, mask));
    }
    if (drop_conn_p_ > 0.0) {
        Tensor<S> mask({batch, connections_, 1});
        const S keep_scale = static_cast<S>(1.0 / (1.0 - drop_conn_p_));
        for (std::int64_t i = 0; i < mask.size(); ++i)
            mask.data()[i] = drop_rng_->bernoulli(drop_conn_p_) ? S(0) : keep_scale;
        w = mul(tape, w, mask);
    }
    weights_[static_cast<std::size_t>(cell)] = w;
    return w;
}

namespace {

// Expected-mode (noise-free) policy for validation and quick accuracy.
template <typename S>
class ExpectedPolicy : public RoutingPolicy<S> {
public:
    ExpectedPolicy(RouterMode mode, double tau, int connections, int branches)
        : mode_(mode), tau_(tau), connections_(connections), branches_(branches) {}
    bool use_router() const override { return mode_ != RouterMode::none; }
    Tensor<S> weights_for_cell(int, Tape<S>* tape, Tensor<S> logits, int batch) override {
        if (mode_ == RouterMode::none)
            return Tensor<S>::full({batch, connections_, branches_},
                                   S(1) / static_cast<S>(branches_));
        return recalibrate(tape, logits, tau_);
    }

private:
    RouterMode mode_;
    double tau_;
    int connections_, branches_;
};

std::vector<int> batch_slice(const std::vector<int>& order, std::size_t start, std::size_t count) {
    return std::vector<int>(order.begin() + static_cast<std::ptrdiff_t>(start),
                            order.begin() + static_cast<std::ptrdiff_t>(start + count));
}

}  // namespace

template <typename S>
double evaluate_accuracy(Network<S>& net, const Dataset& data, const std::vector<int>& indices,
                         RouterMode mode, double tau, int batch_size) {
    const BackboneConfig& cfg = net.config();
    ExpectedPolicy<S> policy(mode, tau, net.topology().connections(), cfg.branch_count);
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t count =
            std::min(static_cast<std::size_t>(batch_size), indices.size() - start);
        std::vector<int> idx = batch_slice(indices, start, count);
        Tensor<S> batch = assemble_batch<S>(data, idx, false, nullptr);
        ForwardResult<S> out = net.forward(nullptr, batch, policy, RunMode::eval());
        std::vector<int> preds = argmax_rows(out.logits);
        std::vector<int> labels = gather_labels(data, idx);
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (preds[i] == labels[i]) ++correct;
    }
    return indices.empty() ? 0.0 : static_cast<double>(correct) / indices.size();
}

template <typename S>
TrainOutcome train_stage(Network<S>& net, const ResourceModel& model, const Dataset& data,
                         const TrainConfig& config,
                         const std::function<void(const EpochStats&)>& on_epoch) {
    if (config.epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (config.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (config.val_fraction < 0.0 || config.val_fraction >= 1.0)
        throw ConfigError("train: val_fraction must lie in [0, 1)");
    const BackboneConfig& bcfg = net.config();
    const int C = net.topology().connections();

    // Seeded holdout split.
    std::vector<int> all(static_cast<std::size_t>(data.size()));
    std::iota(all.begin(), all.end(), 0);
    {
        Rng split_rng(derive_seed(config.seed, "split"));
        for (std::size_t i = all.size(); i > 1; --i)
            std::swap(all[i - 1], all[split_rng.next_below(i)]);
    }
    const std::size_t val_n = static_cast<std::size_t>(config.val_fraction * data.size());
    std::vector<int> val_idx(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(val_n));
    std::vector<int> train_idx(all.begin() + static_cast<std::ptrdiff_t>(val_n), all.end());
    if (train_idx.empty()) throw ConfigError("train: empty training split");

    auto& params = net.params().all();
    std::vector<Tensor<S>> velocity(params.size());

    TrainOutcome outcome;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double tau = effective_tau(config, epoch);
        const double lr = cosine_lr(config.lr_init, epoch, config.epochs);
        const double ramp =
            config.epochs > 1 ? static_cast<double>(epoch) / (config.epochs - 1) : 0.0;
        const double p_branch = config.drop_branch_max * ramp;
        const double p_conn = config.drop_connection_max * ramp;
        const double lambda = config.stage == Stage::finetune ? config.lambda : 0.0;

        Rng order_rng(derive_seed(config.seed, "order", static_cast<std::uint64_t>(epoch)));
        std::vector<int> order = train_idx;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[order_rng.next_below(i)]);

        double loss_sum = 0, flops_sum = 0, resource_sum = 0;
        std::int64_t correct = 0, seen = 0;
        int batches = 0;

        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(config.batch_size), order.size() - start);
            std::vector<int> idx = batch_slice(order, start, count);
            const std::uint64_t b = static_cast<std::uint64_t>(batches);
            Rng aug_rng(derive_seed(config.seed, "augment", static_cast<std::uint64_t>(epoch), b));
            Rng gumbel_rng(derive_seed(config.seed, "gumbel", static_cast<std::uint64_t>(epoch), b));
            Rng drop_rng(derive_seed(config.seed, "dropout", static_cast<std::uint64_t>(epoch), b));

            Tensor<S> batch = assemble_batch<S>(data, idx, true, &aug_rng);
            std::vector<int> labels = gather_labels(data, idx);

            TrainingPolicy<S> policy(config.router_mode, tau, bcfg.cells, C, bcfg.branch_count);
            policy.set_noise(&gumbel_rng);
            policy.set_dropout(p_branch, p_conn, &drop_rng);

            Tape<S> tape;
            ForwardResult<S> fwd = net.forward(&tape, batch, policy, RunMode::train());
            LossReport<S> loss =
                compute_loss(&tape, fwd.logits, fwd.aux_logits, labels, policy.collected(),
                             &model, lambda, bcfg.aux_weight,
                             /*flops_include_router=*/config.router_mode != RouterMode::none);
            if (!std::isfinite(loss.total_value))
                throw NumericError("training diverged: non-finite loss " +
                                   std::to_string(loss.total_value) + " at epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(batches) +
                                   " (tau=" + std::to_string(tau) + ", lr=" + std::to_string(lr) +
                                   ")");
            tape.backward(loss.total);
            sgd_step(params, velocity, lr, config.momentum, config.weight_decay, config.nesterov);
            net.params().zero_grads();

            loss_sum += loss.total_value * static_cast<double>(count);
            for (unsigned char c : loss.correct) correct += c;
            seen += static_cast<std::int64_t>(count);
            double batch_flops = 0;
            for (double f : loss.expected_flops) batch_flops += f;
            flops_sum += batch_flops / static_cast<double>(count);
            resource_sum += loss.resource_term;
            ++batches;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.tau = tau;
        stats.lr = lr;
        stats.drop_branch = p_branch;
        stats.drop_connection = p_conn;
        stats.train_loss = loss_sum / static_cast<double>(seen);
        stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
        stats.mean_expected_flops = batches ? flops_sum / batches : 0;
        stats.resource_term = batches ? resource_sum / batches : 0;

        if (!val_idx.empty()) {
            // Expected-mode validation at the current temperature.
            double vloss = 0;
            std::int64_t vcorrect = 0;
            ExpectedPolicy<S> vpolicy(config.router_mode, tau, C, bcfg.branch_count);
            for (std::size_t start = 0; start < val_idx.size(); start += 256) {
                const std::size_t count = std::min<std::size_t>(256, val_idx.size() - start);
                std::vector<int> idx = batch_slice(val_idx, start, count);
                Tensor<S> batch = assemble_batch<S>(data, idx, false, nullptr);
                std::vector<int> labels = gather_labels(data, idx);
                ForwardResult<S> out = net.forward(nullptr, batch, vpolicy, RunMode::eval());
                Tensor<S> ce = nll_loss<S>(nullptr, log_softmax<S>(nullptr, out.logits), labels);
                vloss += static_cast<double>(ce.item()) * static_cast<double>(count);
                std::vector<int> preds = argmax_rows(out.logits);
                for (std::size_t i = 0; i < idx.size(); ++i)
                    if (preds[i] == labels[i]) ++vcorrect;
            }
            stats.val_loss = vloss / static_cast<double>(val_idx.size());
            stats.val_accuracy = static_cast<double>(vcorrect) / static_cast<double>(val_idx.size());
        }

        outcome.epochs.push_back(stats);
        outcome.final_tau = tau;
        if (on_epoch) on_epoch(stats);

        if (config.stage == Stage::pretrain && config.early_stop_patience > 0 &&
            !val_idx.empty()) {
            if (stats.val_loss < best_val - 1e-6) {
                best_val = stats.val_loss;
                since_best = 0;
            } else if (++since_best >= config.early_stop_patience) {
                outcome.early_stopped = true;
                break;
            }
        }
    }
    return outcome;
}

template void sgd_step<float>(std::vector<Parameter<float>>&, std::vector<Tensor<float>>&, double,
                              double, double, bool);
template void sgd_step<double>(std::vector<Parameter<double>>&, std::vector<Tensor<double>>&,
                               double, double, double, bool);
template class TrainingPolicy<float>;
template class TrainingPolicy<double>;
template TrainOutcome train_stage<float>(Network<float>&, const ResourceModel&, const Dataset&,
                                         const TrainConfig&,
                                         const std::function<void(const EpochStats&)>&);
template TrainOutcome train_stage<double>(Network<double>&, const ResourceModel&, const Dataset&,
                                          const TrainConfig&,
                                          const std::function<void(const EpochStats&)>&);
template double evaluate_accuracy<float>(Network<float>&, const Dataset&, const std::vector<int>&,
                                         RouterMode, double, int);
template double evaluate_accuracy<double>(Network<double>&, const Dataset&,
                                          const std::vector<int>&, RouterMode, double, int);

}  // namespace drnet
