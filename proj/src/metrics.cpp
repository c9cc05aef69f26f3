#include "metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "errors.hpp"

namespace drnet {

std::string format_full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

std::string value_to_string(const MetricValue& v) {
    if (v.is_int()) return std::to_string(v.as_int());
    if (v.is_double()) return format_full_precision(v.as_double());
    return v.as_string();
}

MetricValue string_to_value(const std::string& s) {
    if (!s.empty()) {
        char* end = nullptr;
        const long long i = std::strtoll(s.c_str(), &end, 10);
        if (end && *end == '\0') return MetricValue(static_cast<std::int64_t>(i));
        end = nullptr;
        const double d = std::strtod(s.c_str(), &end);
        if (end && *end == '\0') return MetricValue(d);
    }
    return MetricValue(s);
}

void check_schema(const std::vector<MetricRecord>& records) {
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != records[0].size())
            throw DataError("emit_metrics: record " + std::to_string(r) +
                            " does not match the schema of record 0");
        for (std::size_t k = 0; k < records[r].size(); ++k)
            if (records[r][k].first != records[0][k].first)
                throw DataError("emit_metrics: record " + std::to_string(r) + " key '" +
                                records[r][k].first + "' breaks the schema");
    }
}

}  // namespace

void emit_metrics(const std::vector<MetricRecord>& records, const std::string& format,
                  const std::string& path) {
    check_schema(records);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    if (format == "csv") {
        if (!records.empty()) {
            for (std::size_t k = 0; k < records[0].size(); ++k)
                out << (k ? "," : "") << csv_escape(records[0][k].first);
            out << "\n";
        }
        for (const auto& rec : records) {
            for (std::size_t k = 0; k < rec.size(); ++k)
                out << (k ? "," : "") << csv_escape(value_to_string(rec[k].second));
            out << "\n";
        }
    } else if (format == "jsonl") {
        for (const auto& rec : records) {
            nlohmann::ordered_json j;
            for (const auto& [key, val] : rec) {
                if (val.is_int()) j[key] = val.as_int();
                else if (val.is_double()) j[key] = val.as_double();
                else j[key] = val.as_string();
            }
            out << j.dump() << "\n";
        }
    } else {
        throw ConfigError("unknown metrics format: " + format);
    }
    if (!out) throw IoError("short write to " + path);
}

std::vector<MetricRecord> parse_metrics(const std::string& path, const std::string& format) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<MetricRecord> records;
    std::string line;
    if (format == "csv") {
        if (!std::getline(in, line)) return records;
        const std::vector<std::string> header = split_csv_line(line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const std::vector<std::string> fields = split_csv_line(line);
            if (fields.size() != header.size())
                throw DataError(path + ": row has " + std::to_string(fields.size()) +
                                " fields, header has " + std::to_string(header.size()));
            MetricRecord rec;
            for (std::size_t k = 0; k < header.size(); ++k)
                rec.emplace_back(header[k], string_to_value(fields[k]));
            records.push_back(std::move(rec));
        }
    } else if (format == "jsonl") {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            nlohmann::ordered_json j = nlohmann::ordered_json::parse(line);
            MetricRecord rec;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (it->is_number_integer())
                    rec.emplace_back(it.key(), MetricValue(it->get<std::int64_t>()));
                else if (it->is_number_float())
                    rec.emplace_back(it.key(), MetricValue(it->get<double>()));
                else
                    rec.emplace_back(it.key(), MetricValue(it->get<std::string>()));
            }
            records.push_back(std::move(rec));
        }
    } else {
        throw ConfigError("unknown metrics format: " + format);
    }
    return records;
}

const MetricValue& metric_field(const MetricRecord& rec, const std::string& key) {
    for (const auto& [k, v] : rec)
        if (k == key) return v;
    throw DataError("metric record has no field '" + key + "'");
}

}  // namespace drnet
