// Exercises the shared-library surface end to end: config handling,
// model introspection, a miniature two-stage training flow through the
// command entry points, checkpoint restore, and error-code mapping.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <drnet/drnet.h>

#include <cstring>
#include <filesystem>
#include <string>

namespace {

namespace fs = std::filesystem;

struct Config {
    drn_config* h = drn_config_create();
    ~Config() { drn_config_destroy(h); }
    void set(const char* k, const std::string& v) { REQUIRE(drn_config_set(h, k, v.c_str()) == DRN_OK); }
    std::string get(const char* k) const {
        char buf[256];
        REQUIRE(drn_config_get(h, k, buf, sizeof buf) == DRN_OK);
        return buf;
    }
};

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void tiny_run_keys(Config& cfg, const fs::path& out) {
    cfg.set("preset", "toy");
    cfg.set("data.synthetic_classes", "3");
    cfg.set("data.synthetic_train_per_class", "30");
    cfg.set("data.synthetic_test_per_class", "10");
    cfg.set("train.epochs", "2");
    cfg.set("train.batch_size", "32");
    cfg.set("train.early_stop_patience", "0");
    cfg.set("train.drop_branch_max", "0");
    cfg.set("train.drop_connection_max", "0");
    cfg.set("paths.out_dir", out.string());
}

}  // namespace

TEST_CASE("version and error strings exist") {
    CHECK(std::string(drn_version()) == "1.0.0");
    CHECK(drn_last_error() != nullptr);
}

TEST_CASE("config set/get round-trips and rejects unknown keys") {
    Config cfg;
    cfg.set("train.epochs", "7");
    CHECK(cfg.get("train.epochs") == "7");
    CHECK(drn_config_set(cfg.h, "bogus.key", "1") == DRN_ERR_CONFIG);
    CHECK(std::string(drn_last_error()).find("bogus.key") != std::string::npos);
    char buf[8];
    CHECK(drn_config_get(cfg.h, "also.bogus", buf, sizeof buf) == DRN_ERR_CONFIG);
}

TEST_CASE("datasets open per split with the configured sizes") {
    Config cfg;
    cfg.set("data.synthetic_classes", "4");
    cfg.set("data.synthetic_train_per_class", "6");
    cfg.set("data.synthetic_test_per_class", "2");
    drn_dataset* train = nullptr;
    drn_dataset* test = nullptr;
    REQUIRE(drn_dataset_open(cfg.h, "train", &train) == DRN_OK);
    REQUIRE(drn_dataset_open(cfg.h, "test", &test) == DRN_OK);
    CHECK(drn_dataset_size(train) == 24);
    CHECK(drn_dataset_size(test) == 8);
    CHECK(drn_dataset_num_classes(train) == 4);
    CHECK(drn_dataset_label(train, 0) == 0);
    CHECK(drn_dataset_label(train, 23) == 3);
    CHECK(drn_dataset_label(train, 24) == -1);
    drn_dataset* bad = nullptr;
    CHECK(drn_dataset_open(cfg.h, "validation", &bad) == DRN_ERR_CONFIG);
    drn_dataset_destroy(train);
    drn_dataset_destroy(test);
}

TEST_CASE("models build, introspect, and count candidates exactly") {
    Config cfg;
    cfg.set("preset", "drnet-s");
    drn_model* model = nullptr;
    REQUIRE(drn_model_build(cfg.h, &model) == DRN_OK);
    CHECK(drn_model_param_count(model) > 100000);
    CHECK(drn_model_full_flops(model) > drn_model_fixed_flops(model));
    CHECK(drn_model_router_flops(model) > 0);
    char buf[256];
    REQUIRE(drn_model_candidate_count(model, buf, sizeof buf) == DRN_OK);
    // 31^40 for L=5, C=8, B+1=5.
    CHECK(std::string(buf) ==
          "451302514611022222119906091571193923850834154614488607763201");
    drn_model_destroy(model);
}

TEST_CASE("the full train/eval/sweep/report/inspect flow works through the C API") {
    const fs::path out = fresh_dir("drnet_capi_flow");
    char text[65536];

    Config pre;
    tiny_run_keys(pre, out);
    pre.set("train.stage", "pretrain");
    pre.set("paths.checkpoint", (out / "pre.drnet").string());
    REQUIRE_MESSAGE(drn_cmd_train(pre.h, text, sizeof text) == DRN_OK, drn_last_error());
    CHECK(fs::exists(out / "pre.drnet"));

    Config fin;
    tiny_run_keys(fin, out);
    fin.set("train.stage", "finetune");
    fin.set("train.lambda", "0.1");
    fin.set("paths.init_checkpoint", (out / "pre.drnet").string());
    fin.set("paths.checkpoint", (out / "fin.drnet").string());
    REQUIRE_MESSAGE(drn_cmd_train(fin.h, text, sizeof text) == DRN_OK, drn_last_error());

    // Fine-tuning without a pretraining checkpoint is a config error.
    Config bad;
    tiny_run_keys(bad, fresh_dir("drnet_capi_bad"));
    bad.set("train.stage", "finetune");
    CHECK(drn_cmd_train(bad.h, text, sizeof text) == DRN_ERR_CONFIG);

    Config ev;
    tiny_run_keys(ev, out);
    ev.set("paths.checkpoint", (out / "fin.drnet").string());
    ev.set("eval.threshold", "0.8");
    REQUIRE_MESSAGE(drn_cmd_eval(ev.h, text, sizeof text) == DRN_OK, drn_last_error());
    CHECK(std::string(text).find("accuracy") != std::string::npos);

    Config sw;
    tiny_run_keys(sw, out);
    sw.set("paths.checkpoint", (out / "fin.drnet").string());
    sw.set("eval.thresholds", "0.6,0.8,1.0");
    REQUIRE_MESSAGE(drn_cmd_sweep(sw.h, text, sizeof text) == DRN_OK, drn_last_error());
    CHECK(fs::exists(out / "sweep-expected" / "sweep.csv"));

    Config rep;
    tiny_run_keys(rep, out);
    rep.set("paths.checkpoint", (out / "fin.drnet").string());
    REQUIRE_MESSAGE(drn_cmd_report(rep.h, text, sizeof text) == DRN_OK, drn_last_error());
    CHECK(fs::exists(out / "report-T-0.8" / "selection_ratios.csv"));
    CHECK(fs::exists(out / "report-T-0.8" / "easy_hard.csv"));

    Config ins;
    tiny_run_keys(ins, out);
    REQUIRE_MESSAGE(drn_cmd_inspect(ins.h, text, sizeof text) == DRN_OK, drn_last_error());
    CHECK(std::string(text).find("candidate architectures") != std::string::npos);

    // Load the trained model and predict through the handle API.
    drn_model* model = nullptr;
    REQUIRE(drn_model_load((out / "fin.drnet").string().c_str(), &model) == DRN_OK);
    drn_dataset* test = nullptr;
    REQUIRE(drn_dataset_open(ins.h, "test", &test) == DRN_OK);
    int prediction = -1;
    double confidence = 0;
    uint64_t flops = 0;
    REQUIRE(drn_model_predict(model, test, 0, 0.8, &prediction, &confidence, &flops) == DRN_OK);
    CHECK(prediction >= 0);
    CHECK(prediction < 3);
    CHECK(confidence > 0);
    CHECK(flops > 0);
    CHECK(drn_model_predict(model, test, 10000, 0.8, &prediction, &confidence, &flops) ==
          DRN_ERR_DATA);

    // Save/load round trip through the C surface.
    const fs::path copy = out / "copy.drnet";
    REQUIRE(drn_model_save(model, copy.string().c_str()) == DRN_OK);
    drn_model* reloaded = nullptr;
    REQUIRE(drn_model_load(copy.string().c_str(), &reloaded) == DRN_OK);
    CHECK(drn_model_param_count(reloaded) == drn_model_param_count(model));
    drn_model_destroy(reloaded);
    drn_model_destroy(model);
    drn_dataset_destroy(test);
    fs::remove_all(out);
}

TEST_CASE("missing checkpoints map to runtime errors, bad data to data errors") {
    Config cfg;
    cfg.set("paths.checkpoint", "/nonexistent/nowhere.drnet");
    cfg.set("paths.out_dir", fresh_dir("drnet_capi_err").string());
    char text[256];
    CHECK(drn_cmd_eval(cfg.h, text, sizeof text) == DRN_ERR_RUNTIME);
    CHECK(std::strlen(drn_last_error()) > 0);

    Config missing;
    missing.set("paths.out_dir", fresh_dir("drnet_capi_err2").string());
    CHECK(drn_cmd_eval(missing.h, text, sizeof text) == DRN_ERR_CONFIG);
}
