#include "drnet/drnet.h"

#include <cstring>
#include <string>

#include "runner.hpp"

using namespace drnet;

namespace {

thread_local std::string g_last_error;

void copy_out(const std::string& s, char* buf, size_t cap) {
    if (!buf || cap == 0) return;
    const size_t n = std::min(cap - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
}

drn_status status_of(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return DRN_ERR_CONFIG;
    if (dynamic_cast<const DataError*>(&e)) return DRN_ERR_DATA;
    return DRN_ERR_RUNTIME;
}

template <typename F>
drn_status guarded(F&& fn) {
    try {
        fn();
        g_last_error.clear();
        return DRN_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_of(e);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return DRN_ERR_RUNTIME;
    }
}

}  // namespace

struct drn_config {
    RunConfig cfg;
};

struct drn_dataset {
    Dataset ds;
};

struct drn_model {
    std::unique_ptr<Network<float>> net;
    CheckpointMeta meta;
    ResourceModel model;
};

static drn_status run_cmd_impl(Command cmd, const drn_config* cfg, char* text, size_t cap);

extern "C" {

const char* drn_version(void) { return "1.0.0"; }

const char* drn_last_error(void) { return g_last_error.c_str(); }

drn_config* drn_config_create(void) { return new drn_config(); }

void drn_config_destroy(drn_config* cfg) { delete cfg; }

drn_status drn_config_load_file(drn_config* cfg, const char* path) {
    if (!cfg || !path) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] { cfg->cfg.load_file(path); });
}

drn_status drn_config_set(drn_config* cfg, const char* key, const char* value) {
    if (!cfg || !key || !value) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] { cfg->cfg.set(key, value); });
}

drn_status drn_config_get(const drn_config* cfg, const char* key, char* buf, size_t cap) {
    if (!cfg || !key) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] { copy_out(cfg->cfg.get(key), buf, cap); });
}

drn_status drn_dataset_open(const drn_config* cfg, const char* split, drn_dataset** out) {
    if (!cfg || !split || !out) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] {
        const std::string s = split;
        if (s != "train" && s != "test") throw ConfigError("split must be train or test");
        auto ds = std::make_unique<drn_dataset>();
        ds->ds = build_dataset(cfg->cfg, s == "train");
        *out = ds.release();
    });
}

void drn_dataset_destroy(drn_dataset* ds) { delete ds; }

int64_t drn_dataset_size(const drn_dataset* ds) { return ds ? ds->ds.size() : 0; }

int drn_dataset_num_classes(const drn_dataset* ds) { return ds ? ds->ds.num_classes : 0; }

int drn_dataset_label(const drn_dataset* ds, int64_t index) {
    if (!ds || index < 0 || index >= ds->ds.size()) return -1;
    return ds->ds.labels[static_cast<std::size_t>(index)];
}

drn_status drn_model_build(const drn_config* cfg, drn_model** out) {
    if (!cfg || !out) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] {
        auto m = std::make_unique<drn_model>();
        BackboneConfig bcfg = cfg->cfg.backbone();
        TrainConfig tcfg = cfg->cfg.train();
        m->net = std::make_unique<Network<float>>(bcfg, tcfg.seed);
        m->meta.init_seed = tcfg.seed;
        m->meta.router_mode = router_mode_name(tcfg.router_mode);
        m->meta.final_tau = tcfg.tau_fixed;
        m->model = precompute_costs(*m->net);
        *out = m.release();
    });
}

drn_status drn_model_load(const char* checkpoint_path, drn_model** out) {
    if (!checkpoint_path || !out) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] {
        auto m = std::make_unique<drn_model>();
        m->net = load_network(checkpoint_path, &m->meta);
        m->model = precompute_costs(*m->net);
        *out = m.release();
    });
}

drn_status drn_model_save(const drn_model* model, const char* checkpoint_path) {
    if (!model || !checkpoint_path) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] { save_checkpoint(checkpoint_path, *model->net, model->meta); });
}

void drn_model_destroy(drn_model* model) { delete model; }

uint64_t drn_model_param_count(const drn_model* model) {
    return model ? static_cast<uint64_t>(model->net->param_count()) : 0;
}

uint64_t drn_model_full_flops(const drn_model* model) {
    return model ? static_cast<uint64_t>(model->model.full_total()) : 0;
}

uint64_t drn_model_fixed_flops(const drn_model* model) {
    return model ? static_cast<uint64_t>(model->model.fixed_cost()) : 0;
}

uint64_t drn_model_router_flops(const drn_model* model) {
    return model ? static_cast<uint64_t>(model->model.router_flops) : 0;
}

drn_status drn_model_candidate_count(const drn_model* model, char* buf, size_t cap) {
    if (!model) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] { copy_out(model->net->candidate_architectures(), buf, cap); });
}

drn_status drn_model_predict(drn_model* model, drn_dataset* ds, int64_t index,
                             double threshold, int* prediction, double* confidence,
                             uint64_t* flops) {
    if (!model || !ds) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] {
        if (index < 0 || index >= ds->ds.size())
            throw DataError("instance index out of range");
        InferenceContext<float> ctx;
        ctx.net = model->net.get();
        ctx.model = &model->model;
        ctx.router_mode = router_mode_from_string(model->meta.router_mode);
        ctx.tau = model->meta.final_tau;
        ds->ds.mean = model->meta.norm_mean;
        ds->ds.stddev = model->meta.norm_std;
        InferenceRecord rec =
            predict_dynamic(ctx, ds->ds, static_cast<int>(index), threshold);
        if (prediction) *prediction = rec.prediction;
        if (confidence) *confidence = rec.confidence;
        if (flops) *flops = static_cast<uint64_t>(rec.flops);
    });
}

drn_status drn_cmd_train(const drn_config* cfg, char* text, size_t cap) {
    return run_cmd_impl(Command::train, cfg, text, cap);
}
drn_status drn_cmd_eval(const drn_config* cfg, char* text, size_t cap) {
    return run_cmd_impl(Command::eval, cfg, text, cap);
}
drn_status drn_cmd_sweep(const drn_config* cfg, char* text, size_t cap) {
    return run_cmd_impl(Command::sweep, cfg, text, cap);
}
drn_status drn_cmd_report(const drn_config* cfg, char* text, size_t cap) {
    return run_cmd_impl(Command::report, cfg, text, cap);
}
drn_status drn_cmd_inspect(const drn_config* cfg, char* text, size_t cap) {
    return run_cmd_impl(Command::inspect, cfg, text, cap);
}

}  // extern "C"

static drn_status run_cmd_impl(Command cmd, const drn_config* cfg, char* text, size_t cap) {
    if (!cfg) {
        g_last_error = "null argument";
        return DRN_ERR_CONFIG;
    }
    return guarded([&] {
        std::string out;
        run_command(cmd, cfg->cfg, &out);
        copy_out(out, text, cap);
    });
}
