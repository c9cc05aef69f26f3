#pragma once

#include "checkpoint.hpp"
#include "config.hpp"

namespace drnet {

struct EvalSummary {
    double threshold = 0;     // 0 means full-branch
    double accuracy = 0;
    double mean_flops = 0;
    double mean_selected_branches = 0;
    std::string weight_mode;
};

// Command entry points shared by the C API and tests. Each creates a
// run-named subdirectory under paths.out_dir, takes an exclusive lock on
// it, and writes metric files in metrics.format plus a run_meta file
// echoing every config key.
std::string run_train(const RunConfig& config);                    // returns checkpoint path
EvalSummary run_eval(const RunConfig& config);
std::string run_sweep(const RunConfig& config);                    // returns table path
std::string run_report(const RunConfig& config);                   // returns run dir
std::string run_inspect(const RunConfig& config);                  // returns summary text

// Dataset construction per the data.* keys. Normalization statistics are
// computed on the train split; pass them through `stats_from` for
// eval-side datasets.
Dataset build_dataset(const RunConfig& config, bool train_split);

int run_command(Command cmd, const RunConfig& config, std::string* text_out);

}  // namespace drnet
