#include "config.hpp"

#include <fstream>
#include <sstream>

namespace drnet {

Command command_from_string(const std::string& s) {
    if (s == "train") return Command::train;
    if (s == "eval") return Command::eval;
    if (s == "sweep") return Command::sweep;
    if (s == "report") return Command::report;
    if (s == "inspect") return Command::inspect;
    throw ConfigError("unknown command: " + s);
}

const char* command_name(Command c) {
    switch (c) {
        case Command::train: return "train";
        case Command::eval: return "eval";
        case Command::sweep: return "sweep";
        case Command::report: return "report";
        case Command::inspect: return "inspect";
    }
    return "?";
}

const std::map<std::string, std::string>& RunConfig::defaults() {
    static const std::map<std::string, std::string> d = {
        {"preset", ""},
        // architecture
        {"backbone.cells", "5"},
        {"backbone.nodes", "4"},
        {"backbone.fan_in", "2"},
        {"backbone.init_channels", "15"},
        {"backbone.num_classes", "10"},
        {"backbone.input_size", "32"},
        {"backbone.aux_weight", "0.4"},
        {"backbone.aux_cell", "auto"},          // auto | off | index
        {"backbone.reduction_cells", "auto"},   // auto | comma list
        {"backbone.topology_seed", "1"},
        // data
        {"data.source", "synthetic"},  // synthetic | cifar10
        {"data.cifar_train_files", ""},
        {"data.cifar_test_files", ""},
        {"data.synthetic_classes", "10"},
        {"data.synthetic_train_per_class", "500"},
        {"data.synthetic_test_per_class", "100"},
        {"data.synthetic_size", "32"},
        {"data.synthetic_seed", "9000"},
        // optimization
        {"train.stage", "pretrain"},
        {"train.epochs", "60"},
        {"train.batch_size", "128"},
        {"train.lr", "auto"},  // 0.025 pretrain / 0.005 finetune
        {"train.momentum", "0.9"},
        {"train.nesterov", "false"},
        {"train.weight_decay", "0.0003"},
        {"train.tau_fixed", "3.0"},
        {"train.tau_start", "1.0"},
        {"train.tau_decay", "0.0006"},
        {"train.tau_floor", "0.5"},
        {"train.lambda", "0.0"},
        {"train.drop_connection_max", "0.1"},
        {"train.drop_branch_max", "0.7"},
        {"train.seed", "1"},
        {"train.router_mode", "gumbel"},
        {"train.early_stop_patience", "20"},
        {"train.val_fraction", "0.1"},
        // inference
        {"eval.threshold", "0.8"},
        {"eval.thresholds", "0.5,0.6,0.7,0.8,0.9,1.0"},
        {"eval.weight_mode", "expected"},
        {"eval.sample_seed", "77"},
        {"eval.quantile", "0.25"},
        // artifacts
        {"paths.checkpoint", ""},
        {"paths.init_checkpoint", ""},
        {"paths.out_dir", "runs"},
        {"metrics.format", "csv"},
    };
    return d;
}

RunConfig::RunConfig() : kv_(defaults()) {}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "preset") {
        kv_["preset"] = value;
        if (value.empty()) return;
        auto apply = [&](int cells, int channels) {
            kv_["backbone.cells"] = std::to_string(cells);
            kv_["backbone.init_channels"] = std::to_string(channels);
            kv_["backbone.nodes"] = "4";
            kv_["backbone.fan_in"] = "2";
        };
        if (value == "drnet-s") apply(5, 15);
        else if (value == "drnet-m") apply(10, 20);
        else if (value == "drnet-l") apply(10, 32);
        else if (value == "toy") apply(2, 8);
        else throw ConfigError("unknown preset: " + value);
        return;
    }
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("unknown config key: " + key);
    it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        auto trim = [](std::string s) {
            const std::size_t x = s.find_first_not_of(" \t\r");
            const std::size_t y = s.find_last_not_of(" \t\r");
            return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            set(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    const std::string& s = get(key);
    try {
        std::size_t pos = 0;
        const std::int64_t v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + s + "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& s = get(key);
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + s + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + s + "'");
}

std::vector<std::string> RunConfig::get_string_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const std::size_t b = tok.find_first_not_of(" \t");
        const std::size_t e = tok.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(tok.substr(b, e - b + 1));
    }
    return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : get_string_list(key)) {
        try {
            out.push_back(std::stod(s));
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected numbers, got '" + s + "'");
        }
    }
    return out;
}

BackboneConfig RunConfig::backbone() const {
    BackboneConfig b;
    b.cells = static_cast<int>(get_int("backbone.cells"));
    b.nodes = static_cast<int>(get_int("backbone.nodes"));
    b.fan_in = static_cast<int>(get_int("backbone.fan_in"));
    b.init_channels = static_cast<int>(get_int("backbone.init_channels"));
    b.input_size = static_cast<int>(get_int("backbone.input_size"));
    b.aux_weight = get_double("backbone.aux_weight");
    b.topology_seed = static_cast<std::uint64_t>(get_int("backbone.topology_seed"));
    if (get("data.source") == "cifar10") {
        b.num_classes = 10;
    } else {
        b.num_classes = static_cast<int>(get_int("data.synthetic_classes"));
        b.input_size = static_cast<int>(get_int("data.synthetic_size"));
    }
    const std::string aux = get("backbone.aux_cell");
    if (aux == "auto") b.aux_cell = -1;
    else if (aux == "off") b.aux_cell = -2;
    else b.aux_cell = std::stoi(aux);
    const std::string red = get("backbone.reduction_cells");
    if (red == "none") {
        b.no_reductions = true;
    } else if (red != "auto") {
        std::stringstream ss(red);
        std::string tok;
        while (std::getline(ss, tok, ',')) b.reduction_cells.push_back(std::stoi(tok));
    }
    b.validate();
    return b;
}

TrainConfig RunConfig::train() const {
    TrainConfig t;
    t.stage = stage_from_string(get("train.stage"));
    t.epochs = static_cast<int>(get_int("train.epochs"));
    const std::string lr = get("train.lr");
    t.lr_init = lr == "auto" ? (t.stage == Stage::pretrain ? 0.025 : 0.005) : get_double("train.lr");
    t.batch_size = static_cast<int>(get_int("train.batch_size"));
    t.momentum = get_double("train.momentum");
    t.nesterov = get_bool("train.nesterov");
    t.weight_decay = get_double("train.weight_decay");
    t.tau_fixed = get_double("train.tau_fixed");
    t.tau_start = get_double("train.tau_start");
    t.tau_decay = get_double("train.tau_decay");
    t.tau_floor = get_double("train.tau_floor");
    t.lambda = get_double("train.lambda");
    t.drop_connection_max = get_double("train.drop_connection_max");
    t.drop_branch_max = get_double("train.drop_branch_max");
    t.seed = static_cast<std::uint64_t>(get_int("train.seed"));
    t.router_mode = router_mode_from_string(get("train.router_mode"));
    t.early_stop_patience = static_cast<int>(get_int("train.early_stop_patience"));
    t.val_fraction = get_double("train.val_fraction");
    if (t.lambda < 0) throw ConfigError("train.lambda must be non-negative");
    return t;
}

MetricRecord RunConfig::echo_record() const {
    MetricRecord rec;
    for (const auto& [k, v] : kv_) rec.emplace_back(k, MetricValue(v));
    return rec;
}

}  // namespace drnet
