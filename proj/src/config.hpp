#pragma once

#include <map>

#include "backbone.hpp"
#include "infer.hpp"
#include "metrics.hpp"

namespace drnet {

enum class Command { train, eval, sweep, report, inspect };
Command command_from_string(const std::string& s);
const char* command_name(Command c);

// Flat key = value configuration with documented defaults. Unknown keys
// are rejected. `preset` expands to a bundle of backbone keys the moment
// it is assigned, so later assignments override it.
class RunConfig {
public:
    RunConfig();

    // Lines of "key = value"; '#' starts a comment.
    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;

    bool has_value(const std::string& key) const { return !get(key).empty(); }
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const;
    std::vector<std::string> get_string_list(const std::string& key) const;

    BackboneConfig backbone() const;
    TrainConfig train() const;

    // Every key/value, for the run's metadata record.
    MetricRecord echo_record() const;

    static const std::map<std::string, std::string>& defaults();

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace drnet
