// drnet command-line interface. Talks to the engine exclusively through
// the public C API in drnet/drnet.h.

#include <drnet/drnet.h>

#include <CLI11.hpp>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

namespace {

struct ConfigHandle {
    drn_config* cfg = drn_config_create();
    ~ConfigHandle() { drn_config_destroy(cfg); }
};

int fail(drn_status status) {
    std::fprintf(stderr, "error: %s\n", drn_last_error());
    return static_cast<int>(status);
}

int apply(drn_status status) { return status == DRN_OK ? 0 : fail(status); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"drnet - instance-aware dynamic-routing network engine"};
    app.require_subcommand(1);

    std::string config_file;
    std::vector<std::string> overrides;
    std::string preset, checkpoint, init_checkpoint, out_dir, stage, router_mode, weight_mode,
        threshold, metrics_format;
    std::string lambda_s, epochs_s, seed_s;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "configuration file (key = value lines)");
        cmd->add_option("--set", overrides, "override a config key, e.g. --set train.epochs=30")
            ->take_all();
        cmd->add_option("--preset", preset, "architecture preset: drnet-s, drnet-m, drnet-l, toy");
        cmd->add_option("--checkpoint", checkpoint, "checkpoint path (paths.checkpoint)");
        cmd->add_option("--out", out_dir, "output directory (paths.out_dir)");
        cmd->add_option("--format", metrics_format, "metrics format: csv or jsonl");
    };

    CLI::App* train = app.add_subcommand("train", "run one optimization stage");
    add_common(train);
    train->add_option("--stage", stage, "pretrain or finetune");
    train->add_option("--init-checkpoint", init_checkpoint,
                      "pretrained checkpoint to fine-tune from");
    train->add_option("--lambda", lambda_s, "resource regularization strength");
    train->add_option("--epochs", epochs_s, "epoch budget");
    train->add_option("--seed", seed_s, "training seed");
    train->add_option("--router-mode", router_mode, "gumbel, softmax, or none");

    CLI::App* eval = app.add_subcommand("eval", "accuracy and FLOPs at one threshold");
    add_common(eval);
    eval->add_option("--threshold", threshold, "routing threshold in (0,1], or 'full'");
    eval->add_option("--weight-mode", weight_mode, "expected or sampled");

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "threshold sweep table");
    add_common(sweep_cmd);
    sweep_cmd->add_option("--weight-mode", weight_mode, "expected or sampled");

    CLI::App* report = app.add_subcommand("report", "selection ratios and easy/hard split");
    add_common(report);
    report->add_option("--threshold", threshold, "routing threshold in (0,1]");

    CLI::App* inspect = app.add_subcommand("inspect", "architecture summary and cost table");
    add_common(inspect);

    CLI11_PARSE(app, argc, argv);

    ConfigHandle handle;
    if (!config_file.empty()) {
        if (int rc = apply(drn_config_load_file(handle.cfg, config_file.c_str()))) return rc;
    }
    // Shortcut flags land on their config keys; --set wins last.
    auto set_if = [&](const char* key, const std::string& value) -> int {
        if (value.empty()) return 0;
        return apply(drn_config_set(handle.cfg, key, value.c_str()));
    };
    if (int rc = set_if("preset", preset)) return rc;
    if (int rc = set_if("paths.checkpoint", checkpoint)) return rc;
    if (int rc = set_if("paths.init_checkpoint", init_checkpoint)) return rc;
    if (int rc = set_if("paths.out_dir", out_dir)) return rc;
    if (int rc = set_if("train.stage", stage)) return rc;
    if (int rc = set_if("train.lambda", lambda_s)) return rc;
    if (int rc = set_if("train.epochs", epochs_s)) return rc;
    if (int rc = set_if("train.seed", seed_s)) return rc;
    if (int rc = set_if("train.router_mode", router_mode)) return rc;
    if (int rc = set_if("eval.threshold", threshold)) return rc;
    if (int rc = set_if("eval.weight_mode", weight_mode)) return rc;
    if (int rc = set_if("metrics.format", metrics_format)) return rc;
    for (const std::string& kv : overrides) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            return static_cast<int>(DRN_ERR_CONFIG);
        }
        if (int rc = apply(drn_config_set(handle.cfg, kv.substr(0, eq).c_str(),
                                          kv.substr(eq + 1).c_str())))
            return rc;
    }

    std::vector<char> text(1 << 16);
    drn_status status;
    if (train->parsed()) status = drn_cmd_train(handle.cfg, text.data(), text.size());
    else if (eval->parsed()) status = drn_cmd_eval(handle.cfg, text.data(), text.size());
    else if (sweep_cmd->parsed()) status = drn_cmd_sweep(handle.cfg, text.data(), text.size());
    else if (report->parsed()) status = drn_cmd_report(handle.cfg, text.data(), text.size());
    else status = drn_cmd_inspect(handle.cfg, text.data(), text.size());

    if (status != DRN_OK) return fail(status);
    if (text[0]) std::printf("%s", text.data());
    return 0;
}
