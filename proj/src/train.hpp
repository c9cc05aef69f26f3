#pragma once

#include <functional>

#include "data.hpp"
#include "loss.hpp"

namespace drnet {

enum class Stage { pretrain, finetune };
enum class RouterMode { gumbel, softmax, none };

Stage stage_from_string(const std::string& s);
RouterMode router_mode_from_string(const std::string& s);
const char* stage_name(Stage s);
const char* router_mode_name(RouterMode m);

struct TrainConfig {
    Stage stage = Stage::pretrain;
    int epochs = 60;
    int batch_size = 128;
    double lr_init = 0.025;  // 0.005 for the fine-tuning stage
    double momentum = 0.9;
    bool nesterov = false;
    double weight_decay = 3e-4;
    double tau_fixed = 3.0;     // pretraining temperature
    double tau_start = 1.0;     // fine-tuning anneal start
    double tau_decay = 0.0006;  // per-epoch exponential rate
    double tau_floor = 0.5;
    double lambda = 0.0;  // resource regularization strength (fine-tuning)
    double drop_connection_max = 0.1;
    double drop_branch_max = 0.7;
    std::uint64_t seed = 1;
    RouterMode router_mode = RouterMode::gumbel;
    int early_stop_patience = 20;  // pretraining only; 0 disables
    double val_fraction = 0.1;
};

// Pretraining holds tau at tau_fixed; fine-tuning anneals
// tau_start * exp(-tau_decay * epoch) down to tau_floor.
double anneal_tau(const TrainConfig& config, int epoch);

// The softmax-only ablation trains and infers at a constant temperature of
// one, with no Gumbel noise; other modes follow the annealing schedule.
double effective_tau(const TrainConfig& config, int epoch);

// Half-cosine from lr_init at epoch 0 to exactly 0 at the final epoch.
double cosine_lr(double lr_init, int epoch, int total_epochs);

// Classical (optionally Nesterov) momentum SGD with coupled weight decay:
// g = grad + wd*p; v = mu*v + g; p -= lr * (nesterov ? g + mu*v : v).
// Velocity tensors must parallel the parameter list; non-trainable entries
// are skipped.
template <typename S>
void sgd_step(std::vector<Parameter<S>>& params, std::vector<Tensor<S>>& velocity, double lr,
              double momentum, double weight_decay, bool nesterov);

// Produces branch weights during training: router logits recalibrated at
// the given temperature (with fresh per-instance Gumbel noise in gumbel
// mode), then structural dropout in weight space. Collects the per-cell
// weights for the resource term.
template <typename S>
class TrainingPolicy : public RoutingPolicy<S> {
public:
    TrainingPolicy(RouterMode mode, double tau, int cells, int connections, int branches)
        : mode_(mode), tau_(tau), connections_(connections), branches_(branches) {
        weights_.resize(static_cast<std::size_t>(cells));
    }

    void set_noise(Rng* gumbel_rng) { gumbel_rng_ = gumbel_rng; }
    void set_dropout(double drop_branch_p, double drop_conn_p, Rng* rng) {
        drop_branch_p_ = drop_branch_p;
        drop_conn_p_ = drop_conn_p;
        drop_rng_ = rng;
    }

    bool use_router() const override { return mode_ != RouterMode::none; }
    Tensor<S> weights_for_cell(int cell, Tape<S>* tape, Tensor<S> logits, int batch) override;

    const std::vector<Tensor<S>>& collected() const { return weights_; }

private:
    RouterMode mode_;
    double tau_;
    int connections_, branches_;
    Rng* gumbel_rng_ = nullptr;
    double drop_branch_p_ = 0.0, drop_conn_p_ = 0.0;
    Rng* drop_rng_ = nullptr;
    std::vector<Tensor<S>> weights_;
};

struct EpochStats {
    int epoch = 0;
    double tau = 0, lr = 0, drop_branch = 0, drop_connection = 0;
    double train_loss = 0, train_accuracy = 0;
    double val_loss = 0, val_accuracy = 0;
    double mean_expected_flops = 0;  // variable + fixed, averaged over batches
    double resource_term = 0;        // averaged over batches
};

struct TrainOutcome {
    std::vector<EpochStats> epochs;
    double final_tau = 0;
    bool early_stopped = false;
};

// One optimization stage over a seeded 90/10 train/validation split.
// Aborts with NumericError when the loss stops being finite.
template <typename S>
TrainOutcome train_stage(Network<S>& net, const ResourceModel& model, const Dataset& data,
                         const TrainConfig& config,
                         const std::function<void(const EpochStats&)>& on_epoch = {});

// Eval-mode accuracy with full-branch expected weights at temperature tau.
template <typename S>
double evaluate_accuracy(Network<S>& net, const Dataset& data, const std::vector<int>& indices,
                         RouterMode mode, double tau, int batch_size = 64);

}  // namespace drnet
