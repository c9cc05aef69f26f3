#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace drnet {

// One structured record: ordered key/value pairs with a stable column
// order. Values keep their type so emitted files round-trip.
struct MetricValue {
    std::variant<std::int64_t, double, std::string> v;

    MetricValue() : v(std::int64_t{0}) {}
    MetricValue(std::int64_t i) : v(i) {}
    MetricValue(int i) : v(static_cast<std::int64_t>(i)) {}
    MetricValue(double d) : v(d) {}
    MetricValue(const char* s) : v(std::string(s)) {}
    MetricValue(std::string s) : v(std::move(s)) {}

    bool is_int() const { return std::holds_alternative<std::int64_t>(v); }
    bool is_double() const { return std::holds_alternative<double>(v); }
    bool is_string() const { return std::holds_alternative<std::string>(v); }
    std::int64_t as_int() const { return std::get<std::int64_t>(v); }
    double as_double() const {
        return is_int() ? static_cast<double>(as_int()) : std::get<double>(v);
    }
    const std::string& as_string() const { return std::get<std::string>(v); }

    bool operator==(const MetricValue& o) const { return v == o.v; }
};

using MetricRecord = std::vector<std::pair<std::string, MetricValue>>;

// Serializes a number with enough digits to round-trip exactly.
std::string format_full_precision(double v);

// format: "csv" (header row + quoted-as-needed fields) or "jsonl" (one
// self-describing object per line). Records must share one schema.
void emit_metrics(const std::vector<MetricRecord>& records, const std::string& format,
                  const std::string& path);

std::vector<MetricRecord> parse_metrics(const std::string& path, const std::string& format);

// Helper for records: lookup by key (throws if absent).
const MetricValue& metric_field(const MetricRecord& rec, const std::string& key);

}  // namespace drnet
