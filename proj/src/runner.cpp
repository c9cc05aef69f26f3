#include "runner.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

namespace drnet {

namespace {

namespace fs = std::filesystem;

// Exclusive ownership of a run directory while a command writes into it.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : lock_path_(dir / ".lock") {
        const int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw IoError("output directory " + dir.string() +
                          " is locked by another run (remove " + lock_path_.string() +
                          " if that run is dead)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~DirLock() { ::unlink(lock_path_.c_str()); }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path lock_path_;
};

std::string trim_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

// Run names follow the R-<lambda> / T-<threshold> convention.
std::string run_name(const RunConfig& cfg, Command cmd) {
    std::ostringstream os;
    os << command_name(cmd);
    switch (cmd) {
        case Command::train: {
            os << "-" << cfg.get("train.stage") << "-" << cfg.get("train.router_mode");
            if (stage_from_string(cfg.get("train.stage")) == Stage::finetune)
                os << "-R-" << trim_number(cfg.get_double("train.lambda"));
            break;
        }
        case Command::eval:
            if (cfg.get("eval.threshold") == "full") os << "-full";
            else os << "-T-" << trim_number(cfg.get_double("eval.threshold"));
            os << "-" << cfg.get("eval.weight_mode");
            break;
        case Command::sweep:
            os << "-" << cfg.get("eval.weight_mode");
            break;
        case Command::report:
            os << "-T-" << trim_number(cfg.get_double("eval.threshold"));
            break;
        case Command::inspect:
            break;
    }
    return os.str();
}

fs::path prepare_run_dir(const RunConfig& cfg, Command cmd) {
    fs::path dir = fs::path(cfg.get("paths.out_dir")) / run_name(cfg, cmd);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string());
    return dir;
}

std::string metrics_ext(const RunConfig& cfg) {
    const std::string f = cfg.get("metrics.format");
    if (f != "csv" && f != "jsonl") throw ConfigError("metrics.format must be csv or jsonl");
    return f;
}

void write_meta(const RunConfig& cfg, Command cmd, const fs::path& dir) {
    MetricRecord rec;
    rec.emplace_back("command", std::string(command_name(cmd)));
    rec.emplace_back("run", run_name(cfg, cmd));
    for (auto& kv : cfg.echo_record()) rec.push_back(kv);
    const std::string fmt = metrics_ext(cfg);
    emit_metrics({rec}, fmt, (dir / ("run_meta." + fmt)).string());
}

struct LoadedModel {
    std::unique_ptr<Network<float>> net;
    CheckpointMeta meta;
    ResourceModel model;
    InferenceContext<float> ctx;
};

LoadedModel load_model(const RunConfig& cfg) {
    const std::string path = cfg.get("paths.checkpoint");
    if (path.empty())
        throw ConfigError("paths.checkpoint is required for eval/sweep/report");
    LoadedModel m;
    m.net = load_network(path, &m.meta);
    if (m.meta.stage == "none")
        throw ConfigError(path + ": checkpoint has no training stage recorded");
    m.model = precompute_costs(*m.net);
    m.ctx.net = m.net.get();
    m.ctx.model = &m.model;
    m.ctx.router_mode = router_mode_from_string(m.meta.router_mode);
    m.ctx.tau = m.meta.final_tau;
    return m;
}

void apply_stats(Dataset& ds, const CheckpointMeta& meta) {
    ds.mean = meta.norm_mean;
    ds.stddev = meta.norm_std;
}

}  // namespace

Dataset build_dataset(const RunConfig& cfg, bool train_split) {
    const std::string source = cfg.get("data.source");
    Dataset ds;
    if (source == "synthetic") {
        const int classes = static_cast<int>(cfg.get_int("data.synthetic_classes"));
        const int train_pc = static_cast<int>(cfg.get_int("data.synthetic_train_per_class"));
        const int test_pc = static_cast<int>(cfg.get_int("data.synthetic_test_per_class"));
        const int size = static_cast<int>(cfg.get_int("data.synthetic_size"));
        const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("data.synthetic_seed"));
        ds = train_split ? make_synthetic(classes, train_pc, size, size, seed, 0)
                         : make_synthetic(classes, test_pc, size, size, seed, train_pc);
    } else if (source == "cifar10") {
        const auto files =
            cfg.get_string_list(train_split ? "data.cifar_train_files" : "data.cifar_test_files");
        if (files.empty())
            throw ConfigError(std::string("data.cifar_") + (train_split ? "train" : "test") +
                              "_files is empty");
        ds = load_cifar10_binary(files);
    } else {
        throw ConfigError("data.source must be synthetic or cifar10");
    }
    if (train_split) compute_normalization(ds);
    return ds;
}

std::string run_train(const RunConfig& cfg) {
    const Command cmd = Command::train;
    const fs::path dir = prepare_run_dir(cfg, cmd);
    DirLock lock(dir);
    write_meta(cfg, cmd, dir);

    BackboneConfig bcfg = cfg.backbone();
    TrainConfig tcfg = cfg.train();
    Dataset data = build_dataset(cfg, /*train_split=*/true);
    if (data.num_classes != bcfg.num_classes)
        throw ConfigError("dataset has " + std::to_string(data.num_classes) +
                          " classes, network expects " + std::to_string(bcfg.num_classes));

    std::unique_ptr<Network<float>> net;
    CheckpointMeta meta;
    if (tcfg.stage == Stage::finetune) {
        const std::string init = cfg.get("paths.init_checkpoint");
        if (init.empty())
            throw ConfigError("fine-tuning requires paths.init_checkpoint from a pretraining run");
        net = load_network(init, &meta);
        if (meta.stage != "pretrain" && meta.stage != "finetune")
            throw ConfigError(init + ": fine-tuning requires a pretrained checkpoint, found stage '" +
                              meta.stage + "'");
        const BackboneConfig& stored = net->config();
        if (stored.cells != bcfg.cells || stored.init_channels != bcfg.init_channels ||
            stored.nodes != bcfg.nodes || stored.num_classes != bcfg.num_classes)
            throw ConfigError(init + ": checkpoint architecture does not match the configured one");
        // The stored normalization statistics stay authoritative.
        apply_stats(data, meta);
    } else {
        net = std::make_unique<Network<float>>(bcfg, tcfg.seed);
        meta.init_seed = tcfg.seed;
        meta.norm_mean = data.mean;
        meta.norm_std = data.stddev;
    }
    meta.stage = stage_name(tcfg.stage);
    meta.train_seed = tcfg.seed;
    meta.router_mode = router_mode_name(tcfg.router_mode);

    ResourceModel model = precompute_costs(*net);

    std::vector<MetricRecord> epoch_records;
    TrainOutcome outcome = train_stage(*net, model, data, tcfg, [&](const EpochStats& s) {
        MetricRecord rec;
        rec.emplace_back("epoch", s.epoch);
        rec.emplace_back("tau", s.tau);
        rec.emplace_back("lr", s.lr);
        rec.emplace_back("train_loss", s.train_loss);
        rec.emplace_back("train_accuracy", s.train_accuracy);
        rec.emplace_back("val_loss", s.val_loss);
        rec.emplace_back("val_accuracy", s.val_accuracy);
        rec.emplace_back("mean_expected_flops", s.mean_expected_flops);
        rec.emplace_back("resource_term", s.resource_term);
        rec.emplace_back("drop_branch", s.drop_branch);
        rec.emplace_back("drop_connection", s.drop_connection);
        epoch_records.push_back(std::move(rec));
    });

    meta.final_tau = outcome.final_tau;
    const std::string fmt = metrics_ext(cfg);
    emit_metrics(epoch_records, fmt, (dir / ("train_epochs." + fmt)).string());

    std::string ckpt = cfg.get("paths.checkpoint");
    if (ckpt.empty()) ckpt = (dir / "checkpoint.drnet").string();
    save_checkpoint(ckpt, *net, meta);
    return ckpt;
}

EvalSummary run_eval(const RunConfig& cfg) {
    const fs::path dir = prepare_run_dir(cfg, Command::eval);
    DirLock lock(dir);
    write_meta(cfg, Command::eval, dir);

    LoadedModel m = load_model(cfg);
    Dataset test = build_dataset(cfg, /*train_split=*/false);
    apply_stats(test, m.meta);

    const WeightMode wmode = weight_mode_from_string(cfg.get("eval.weight_mode"));
    Rng rng(derive_seed(static_cast<std::uint64_t>(cfg.get_int("eval.sample_seed")), "eval"));
    Rng* rp = wmode == WeightMode::sampled ? &rng : nullptr;

    EvalSummary sum;
    sum.weight_mode = weight_mode_name(wmode);
    const bool full = cfg.get("eval.threshold") == "full";
    sum.threshold = full ? 0.0 : cfg.get_double("eval.threshold");
    std::int64_t correct = 0;
    double flops = 0, selected = 0;
    for (int i = 0; i < test.size(); ++i) {
        InferenceRecord rec = full
                                  ? predict_full(m.ctx, test, i, wmode, rp)
                                  : predict_dynamic(m.ctx, test, i, sum.threshold, wmode, rp);
        correct += rec.correct ? 1 : 0;
        flops += static_cast<double>(rec.flops);
        selected += rec.selected_branches;
    }
    const double n = static_cast<double>(test.size());
    sum.accuracy = static_cast<double>(correct) / n;
    sum.mean_flops = flops / n;
    sum.mean_selected_branches =
        selected / n /
        (static_cast<double>(m.net->config().cells) * m.net->topology().connections());

    MetricRecord rec;
    rec.emplace_back("threshold", full ? MetricValue(std::string("full"))
                                       : MetricValue(sum.threshold));
    rec.emplace_back("weight_mode", sum.weight_mode);
    rec.emplace_back("accuracy", sum.accuracy);
    rec.emplace_back("mean_flops", sum.mean_flops);
    rec.emplace_back("mean_selected_branches", sum.mean_selected_branches);
    rec.emplace_back("instances", static_cast<std::int64_t>(test.size()));
    const std::string fmt = metrics_ext(cfg);
    emit_metrics({rec}, fmt, (dir / ("eval_summary." + fmt)).string());
    return sum;
}

std::string run_sweep(const RunConfig& cfg) {
    const fs::path dir = prepare_run_dir(cfg, Command::sweep);
    DirLock lock(dir);
    write_meta(cfg, Command::sweep, dir);

    LoadedModel m = load_model(cfg);
    Dataset test = build_dataset(cfg, /*train_split=*/false);
    apply_stats(test, m.meta);

    const WeightMode wmode = weight_mode_from_string(cfg.get("eval.weight_mode"));
    Rng rng(derive_seed(static_cast<std::uint64_t>(cfg.get_int("eval.sample_seed")), "sweep"));
    Rng* rp = wmode == WeightMode::sampled ? &rng : nullptr;
    const std::vector<double> thresholds = cfg.get_double_list("eval.thresholds");
    if (thresholds.empty()) throw ConfigError("eval.thresholds is empty");

    std::vector<SweepRow> rows = sweep(m.ctx, test, thresholds, wmode, rp);
    std::vector<MetricRecord> recs;
    for (const auto& r : rows) {
        MetricRecord rec;
        rec.emplace_back("threshold", r.threshold);
        rec.emplace_back("accuracy", r.accuracy);
        rec.emplace_back("mean_flops", r.mean_flops);
        rec.emplace_back("mean_selected_branches", r.mean_selected_branches);
        rec.emplace_back("weight_mode", std::string(weight_mode_name(wmode)));
        recs.push_back(std::move(rec));
    }
    const std::string fmt = metrics_ext(cfg);
    const std::string path = (dir / ("sweep." + fmt)).string();
    emit_metrics(recs, fmt, path);
    return path;
}

std::string run_report(const RunConfig& cfg) {
    const fs::path dir = prepare_run_dir(cfg, Command::report);
    DirLock lock(dir);
    write_meta(cfg, Command::report, dir);

    LoadedModel m = load_model(cfg);
    Dataset test = build_dataset(cfg, /*train_split=*/false);
    apply_stats(test, m.meta);

    const double threshold = cfg.get_double("eval.threshold");
    std::vector<InferenceRecord> records;
    SelectionRatios ratios = branch_selection_ratios(m.ctx, test, threshold, &records);

    const std::string fmt = metrics_ext(cfg);
    // Heatmap-ready selection ratio matrix.
    std::vector<MetricRecord> ratio_recs;
    for (int l = 0; l < ratios.cells; ++l)
        for (int c = 0; c < ratios.connections; ++c)
            for (int b = 0; b < ratios.branches; ++b) {
                MetricRecord rec;
                rec.emplace_back("cell", l);
                rec.emplace_back("connection", c);
                rec.emplace_back("branch", b);
                rec.emplace_back("kind", std::string(branch_kind_name(
                                             m.net->config().catalog[static_cast<std::size_t>(b)])));
                rec.emplace_back("frequency", ratios.at(l, c, b));
                ratio_recs.push_back(std::move(rec));
            }
    emit_metrics(ratio_recs, fmt, (dir / ("selection_ratios." + fmt)).string());

    // Per-instance decision log, replayable.
    std::vector<MetricRecord> inst_recs;
    for (const auto& r : records) {
        std::string sel;
        for (std::size_t l = 0; l < r.decisions.size(); ++l)
            for (std::size_t c = 0; c < r.decisions[l].size(); ++c) {
                sel += (sel.empty() ? "" : ";");
                sel += std::to_string(l) + ":" + std::to_string(c) + ":";
                const auto& d = r.decisions[l][c];
                for (std::size_t k = 0; k < d.selected.size(); ++k)
                    sel += (k ? "|" : "") + std::to_string(d.selected[k]);
            }
        MetricRecord rec;
        rec.emplace_back("instance", r.instance);
        rec.emplace_back("label", r.label);
        rec.emplace_back("prediction", r.prediction);
        rec.emplace_back("confidence", r.confidence);
        rec.emplace_back("correct", static_cast<std::int64_t>(r.correct ? 1 : 0));
        rec.emplace_back("flops", static_cast<std::int64_t>(r.flops));
        rec.emplace_back("selected_branches", r.selected_branches);
        rec.emplace_back("decisions", sel);
        inst_recs.push_back(std::move(rec));
    }
    emit_metrics(inst_recs, fmt, (dir / ("instances." + fmt)).string());

    EasyHardReport eh = partition_easy_hard(records, cfg.get_double("eval.quantile"));
    MetricRecord ehr;
    ehr.emplace_back("quantile", cfg.get_double("eval.quantile"));
    ehr.emplace_back("group_size", static_cast<std::int64_t>(eh.group_size));
    ehr.emplace_back("easy_accuracy", eh.easy_accuracy);
    ehr.emplace_back("hard_accuracy", eh.hard_accuracy);
    ehr.emplace_back("easy_mean_flops", eh.easy_mean_flops);
    ehr.emplace_back("hard_mean_flops", eh.hard_mean_flops);
    ehr.emplace_back("flops_ratio", eh.flops_ratio);
    emit_metrics({ehr}, fmt, (dir / ("easy_hard." + fmt)).string());
    return dir.string();
}

std::string run_inspect(const RunConfig& cfg) {
    const fs::path dir = prepare_run_dir(cfg, Command::inspect);
    DirLock lock(dir);
    write_meta(cfg, Command::inspect, dir);

    BackboneConfig bcfg = cfg.backbone();
    TrainConfig tcfg = cfg.train();
    Network<float> net(bcfg, tcfg.seed);
    ResourceModel model = precompute_costs(net);

    const std::string fmt = metrics_ext(cfg);
    std::vector<MetricRecord> cost_recs;
    for (int l = 0; l < model.cells; ++l)
        for (int c = 0; c < model.connections; ++c)
            for (int b = 0; b < model.branches; ++b) {
                MetricRecord rec;
                rec.emplace_back("cell", l);
                rec.emplace_back("connection", c);
                rec.emplace_back("source", net.topology().source_of(c));
                rec.emplace_back("stride",
                                 net.cells()[static_cast<std::size_t>(l)]
                                     .conns[static_cast<std::size_t>(c)]
                                     .stride);
                rec.emplace_back("branch", b);
                rec.emplace_back("kind", std::string(branch_kind_name(
                                             bcfg.catalog[static_cast<std::size_t>(b)])));
                rec.emplace_back("flops",
                                 model.cost[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)]
                                           [static_cast<std::size_t>(b)]);
                cost_recs.push_back(std::move(rec));
            }
    emit_metrics(cost_recs, fmt, (dir / ("cost_breakdown." + fmt)).string());

    std::ostringstream os;
    os << "cells (L): " << bcfg.cells << "\n";
    os << "nodes per cell (N): " << bcfg.nodes << "\n";
    os << "fan-in (n): " << bcfg.fan_in << "\n";
    os << "connections per cell (C): " << net.topology().connections() << "\n";
    os << "branches per connection (B+1): " << bcfg.branch_count << "\n";
    os << "parameters: " << net.param_count() << " ("
       << trim_number(static_cast<double>(net.param_count()) / 1e6) << "M)\n";
    os << "full-branch flops: " << model.full_total() << " ("
       << trim_number(static_cast<double>(model.full_total()) / 1e6) << "M)\n";
    os << "  stem: " << model.stem_flops << "\n";
    os << "  adapters: " << model.adapter_flops << "\n";
    os << "  routers: " << model.router_flops << "\n";
    os << "  classifier: " << model.classifier_flops << "\n";
    os << "  branches: " << model.full_variable() << "\n";
    os << "candidate architectures: " << net.candidate_architectures() << "\n";

    MetricRecord rec;
    rec.emplace_back("cells", bcfg.cells);
    rec.emplace_back("connections", net.topology().connections());
    rec.emplace_back("branches", bcfg.branch_count);
    rec.emplace_back("parameters", net.param_count());
    rec.emplace_back("full_flops", model.full_total());
    rec.emplace_back("fixed_flops", model.fixed_cost());
    rec.emplace_back("router_flops", model.router_flops);
    rec.emplace_back("candidate_architectures", net.candidate_architectures());
    emit_metrics({rec}, fmt, (dir / ("inspect." + fmt)).string());
    return os.str();
}

int run_command(Command cmd, const RunConfig& cfg, std::string* text_out) {
    switch (cmd) {
        case Command::train: {
            const std::string ckpt = run_train(cfg);
            if (text_out) *text_out = "checkpoint written to " + ckpt;
            return 0;
        }
        case Command::eval: {
            EvalSummary s = run_eval(cfg);
            if (text_out) {
                std::ostringstream os;
                os << "threshold: " << (s.threshold == 0 ? std::string("full")
                                                         : trim_number(s.threshold))
                   << "\nweight mode: " << s.weight_mode << "\naccuracy: " << s.accuracy
                   << "\nmean flops: " << s.mean_flops
                   << "\nmean selected branches: " << s.mean_selected_branches << "\n";
                *text_out = os.str();
            }
            return 0;
        }
        case Command::sweep: {
            const std::string path = run_sweep(cfg);
            if (text_out) *text_out = "sweep table written to " + path;
            return 0;
        }
        case Command::report: {
            const std::string d = run_report(cfg);
            if (text_out) *text_out = "report written to " + d;
            return 0;
        }
        case Command::inspect: {
            const std::string text = run_inspect(cfg);
            if (text_out) *text_out = text;
            return 0;
        }
    }
    throw Error("unreachable command");
}

}  // namespace drnet
