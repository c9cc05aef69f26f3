#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "config.hpp"

using namespace drnet;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

std::vector<MetricRecord> sample_records() {
    std::vector<MetricRecord> recs;
    for (int i = 0; i < 3; ++i) {
        MetricRecord r;
        r.emplace_back("epoch", i);
        r.emplace_back("loss", 0.1 + i * 1e-17 + 1.0 / 3.0);
        r.emplace_back("name", std::string("run,With\"odd\" chars") + std::to_string(i));
        recs.push_back(std::move(r));
    }
    return recs;
}

}  // namespace

TEST_CASE("csv and jsonl round-trip records exactly") {
    for (const std::string fmt : {"csv", "jsonl"}) {
        auto path = temp_file("drnet_metrics_rt." + fmt);
        auto recs = sample_records();
        emit_metrics(recs, fmt, path.string());
        auto parsed = parse_metrics(path.string(), fmt);
        REQUIRE(parsed.size() == recs.size());
        for (std::size_t i = 0; i < recs.size(); ++i) {
            REQUIRE(parsed[i].size() == recs[i].size());
            for (std::size_t k = 0; k < recs[i].size(); ++k) {
                CHECK(parsed[i][k].first == recs[i][k].first);
                CHECK(parsed[i][k].second == recs[i][k].second);
            }
        }
        std::filesystem::remove(path);
    }
}

TEST_CASE("an empty record list emits a bare file") {
    auto path = temp_file("drnet_metrics_empty.csv");
    emit_metrics({}, "csv", path.string());
    std::ifstream f(path);
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(content.empty());  // no records, no header to infer
    std::filesystem::remove(path);
}

TEST_CASE("heterogeneous schemas are rejected") {
    std::vector<MetricRecord> recs;
    MetricRecord a, b;
    a.emplace_back("x", 1);
    b.emplace_back("y", 2);
    recs.push_back(a);
    recs.push_back(b);
    CHECK_THROWS_AS(emit_metrics(recs, "csv", temp_file("drnet_bad.csv").string()), DataError);
}

TEST_CASE("full-precision doubles survive the serializer") {
    const double v = 0.1234567890123456789;
    CHECK(std::stod(format_full_precision(v)) == v);
    const double tiny = 3e-17;
    CHECK(std::stod(format_full_precision(tiny)) == tiny);
}

TEST_CASE("config defaults mirror the experimental constants") {
    RunConfig cfg;
    CHECK(cfg.get("train.tau_fixed") == "3.0");
    CHECK(cfg.get("train.tau_start") == "1.0");
    CHECK(cfg.get("train.tau_decay") == "0.0006");
    CHECK(cfg.get("train.tau_floor") == "0.5");
    CHECK(cfg.get("train.momentum") == "0.9");
    CHECK(cfg.get("train.weight_decay") == "0.0003");
    CHECK(cfg.get("train.batch_size") == "128");
    CHECK(cfg.get("train.drop_connection_max") == "0.1");
    CHECK(cfg.get("train.drop_branch_max") == "0.7");
    CHECK(cfg.get("backbone.aux_weight") == "0.4");
    TrainConfig t = cfg.train();
    CHECK(t.lr_init == 0.025);  // pretraining default
    cfg.set("train.stage", "finetune");
    CHECK(cfg.train().lr_init == 0.005);
}

TEST_CASE("unknown keys are rejected with field-level diagnostics") {
    RunConfig cfg;
    CHECK_THROWS_WITH_AS(cfg.set("train.leraning_rate", "0.1"),
                         doctest::Contains("train.leraning_rate"), ConfigError);
    CHECK_THROWS_AS((void)cfg.get("nope"), ConfigError);
}

TEST_CASE("config files parse with comments and report bad lines") {
    auto path = temp_file("drnet_cfg.conf");
    {
        std::ofstream f(path);
        f << "# toy run\n";
        f << "preset = toy\n";
        f << "train.epochs = 3   # short\n";
        f << "eval.threshold = 0.9\n";
    }
    RunConfig cfg;
    cfg.load_file(path.string());
    CHECK(cfg.get("backbone.cells") == "2");
    CHECK(cfg.get("backbone.init_channels") == "8");
    CHECK(cfg.get_int("train.epochs") == 3);
    CHECK(cfg.get_double("eval.threshold") == 0.9);
    {
        std::ofstream f(path);
        f << "train.epochs 3\n";
    }
    RunConfig cfg2;
    CHECK_THROWS_WITH_AS(cfg2.load_file(path.string()), doctest::Contains(":1"), ConfigError);
    std::filesystem::remove(path);
}

TEST_CASE("presets expand immediately so later keys override") {
    RunConfig cfg;
    cfg.set("preset", "drnet-m");
    CHECK(cfg.get("backbone.cells") == "10");
    CHECK(cfg.get("backbone.init_channels") == "20");
    cfg.set("backbone.init_channels", "24");
    CHECK(cfg.get("backbone.init_channels") == "24");
    CHECK_THROWS_AS(cfg.set("preset", "drnet-xxl"), ConfigError);
}

TEST_CASE("backbone and train views validate their fields") {
    RunConfig cfg;
    cfg.set("preset", "toy");
    BackboneConfig b = cfg.backbone();
    CHECK(b.cells == 2);
    CHECK(b.num_classes == 10);  // synthetic default
    cfg.set("train.lambda", "-1");
    CHECK_THROWS_AS((void)cfg.train(), ConfigError);
    cfg.set("train.lambda", "0.5");
    CHECK(cfg.train().lambda == 0.5);
    cfg.set("train.epochs", "abc");
    CHECK_THROWS_AS((void)cfg.train(), ConfigError);
}

TEST_CASE("the echo record carries every key for auditability") {
    RunConfig cfg;
    MetricRecord rec = cfg.echo_record();
    CHECK(rec.size() == RunConfig::defaults().size());
    CHECK(metric_field(rec, "train.tau_decay").as_string() == "0.0006");
}
