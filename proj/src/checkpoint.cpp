#include "checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace drnet {

namespace {

constexpr const char* kMagic = "drnet-checkpoint v1";

std::string shape_field(const std::vector<int>& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s.empty() ? "1" : s;
}

std::vector<int> parse_shape_field(const std::string& s) {
    std::vector<int> shape;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t next = s.find('x', pos);
        if (next == std::string::npos) next = s.size();
        shape.push_back(std::stoi(s.substr(pos, next - pos)));
        pos = next + 1;
    }
    return shape;
}

void append_f32_le(std::string& out, float v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

float read_f32_le(const char* p) {
    const auto* u = reinterpret_cast<const unsigned char*>(p);
    std::uint32_t bits = static_cast<std::uint32_t>(u[0]) | (static_cast<std::uint32_t>(u[1]) << 8) |
                         (static_cast<std::uint32_t>(u[2]) << 16) |
                         (static_cast<std::uint32_t>(u[3]) << 24);
    return std::bit_cast<float>(bits);
}

std::uint32_t crc_of(const std::string& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
                static_cast<uInt>(bytes.size())));
}

std::string double_field(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

struct Header {
    BackboneConfig config;
    CheckpointMeta meta;
    std::vector<std::vector<int>> topology;  // preds per node
    struct Entry {
        std::string name;
        std::vector<int> shape;
        std::int64_t offset = 0;
        std::int64_t count = 0;
    };
    std::vector<Entry> entries;
    std::int64_t data_bytes = 0;
};

std::string render_header(const Header& h) {
    std::ostringstream os;
    os << kMagic << "\n";
    const auto& c = h.config;
    os << "config.cells = " << c.cells << "\n";
    os << "config.nodes = " << c.nodes << "\n";
    os << "config.fan_in = " << c.fan_in << "\n";
    os << "config.branch_count = " << c.branch_count << "\n";
    os << "config.init_channels = " << c.init_channels << "\n";
    os << "config.num_classes = " << c.num_classes << "\n";
    os << "config.input_channels = " << c.input_channels << "\n";
    os << "config.input_size = " << c.input_size << "\n";
    os << "config.reduction_cells =";
    for (int r : c.reduction_cells) os << " " << r;
    os << "\n";
    os << "config.aux_cell = " << c.aux_cell << "\n";
    os << "config.aux_weight = " << double_field(c.aux_weight) << "\n";
    os << "config.topology_seed = " << c.topology_seed << "\n";
    os << "topology =";
    for (const auto& preds : h.topology) {
        os << " ";
        for (std::size_t i = 0; i < preds.size(); ++i) os << (i ? "," : "") << preds[i];
    }
    os << "\n";
    os << "meta.stage = " << h.meta.stage << "\n";
    os << "meta.final_tau = " << double_field(h.meta.final_tau) << "\n";
    os << "meta.router_mode = " << h.meta.router_mode << "\n";
    os << "meta.init_seed = " << h.meta.init_seed << "\n";
    os << "meta.train_seed = " << h.meta.train_seed << "\n";
    os << "norm.mean = " << double_field(h.meta.norm_mean[0]) << " "
       << double_field(h.meta.norm_mean[1]) << " " << double_field(h.meta.norm_mean[2]) << "\n";
    os << "norm.std = " << double_field(h.meta.norm_std[0]) << " "
       << double_field(h.meta.norm_std[1]) << " " << double_field(h.meta.norm_std[2]) << "\n";
    os << "tensors = " << h.entries.size() << "\n";
    for (const auto& e : h.entries)
        os << e.name << " " << shape_field(e.shape) << " " << e.offset << " " << e.count << "\n";
    os << "data_bytes = " << h.data_bytes << "\n";
    os << "DATA\n";
    return os.str();
}

Header parse_header(const std::string& text, std::size_t& data_start) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kMagic)
        throw IoError("checkpoint: bad magic line '" + line + "'");
    Header h;
    auto expect_kv = [](const std::string& l, const std::string& key) {
        const std::string pre = key + " = ";
        if (l.rfind(pre, 0) != 0) throw IoError("checkpoint: expected '" + key + "', got '" + l + "'");
        return l.substr(pre.size());
    };
    auto next = [&]() {
        if (!std::getline(is, line)) throw IoError("checkpoint: truncated header");
        return line;
    };
    h.config.cells = std::stoi(expect_kv(next(), "config.cells"));
    h.config.nodes = std::stoi(expect_kv(next(), "config.nodes"));
    h.config.fan_in = std::stoi(expect_kv(next(), "config.fan_in"));
    h.config.branch_count = std::stoi(expect_kv(next(), "config.branch_count"));
    h.config.init_channels = std::stoi(expect_kv(next(), "config.init_channels"));
    h.config.num_classes = std::stoi(expect_kv(next(), "config.num_classes"));
    h.config.input_channels = std::stoi(expect_kv(next(), "config.input_channels"));
    h.config.input_size = std::stoi(expect_kv(next(), "config.input_size"));
    {
        std::istringstream rs(expect_kv(next(), "config.reduction_cells"));
        int v;
        while (rs >> v) h.config.reduction_cells.push_back(v);
    }
    h.config.aux_cell = std::stoi(expect_kv(next(), "config.aux_cell"));
    h.config.aux_weight = std::stod(expect_kv(next(), "config.aux_weight"));
    h.config.topology_seed = std::stoull(expect_kv(next(), "config.topology_seed"));
    {
        std::istringstream ts(expect_kv(next(), "topology"));
        std::string tok;
        while (ts >> tok) {
            std::vector<int> preds;
            std::size_t pos = 0;
            while (pos < tok.size()) {
                std::size_t comma = tok.find(',', pos);
                if (comma == std::string::npos) comma = tok.size();
                preds.push_back(std::stoi(tok.substr(pos, comma - pos)));
                pos = comma + 1;
            }
            h.topology.push_back(std::move(preds));
        }
    }
    h.meta.stage = expect_kv(next(), "meta.stage");
    h.meta.final_tau = std::stod(expect_kv(next(), "meta.final_tau"));
    h.meta.router_mode = expect_kv(next(), "meta.router_mode");
    h.meta.init_seed = std::stoull(expect_kv(next(), "meta.init_seed"));
    h.meta.train_seed = std::stoull(expect_kv(next(), "meta.train_seed"));
    {
        std::istringstream ms(expect_kv(next(), "norm.mean"));
        ms >> h.meta.norm_mean[0] >> h.meta.norm_mean[1] >> h.meta.norm_mean[2];
        std::istringstream ss(expect_kv(next(), "norm.std"));
        ss >> h.meta.norm_std[0] >> h.meta.norm_std[1] >> h.meta.norm_std[2];
    }
    const int tensors = std::stoi(expect_kv(next(), "tensors"));
    for (int i = 0; i < tensors; ++i) {
        std::istringstream es(next());
        Header::Entry e;
        std::string shape;
        if (!(es >> e.name >> shape >> e.offset >> e.count))
            throw IoError("checkpoint: malformed tensor index line: " + line);
        e.shape = parse_shape_field(shape);
        h.entries.push_back(std::move(e));
    }
    h.data_bytes = std::stoll(expect_kv(next(), "data_bytes"));
    if (next() != "DATA") throw IoError("checkpoint: missing DATA marker");
    data_start = static_cast<std::size_t>(is.tellg());
    return h;
}

}  // namespace

void save_checkpoint(const std::string& path, const Network<float>& net,
                     const CheckpointMeta& meta, const std::vector<Tensor<float>>* velocity) {
    Header h;
    h.config = net.config();
    h.meta = meta;
    h.topology = net.topology().preds;

    std::string blobs;
    const auto& params = net.params().all();
    std::int64_t offset = 0;
    auto add_entry = [&](const std::string& name, const Tensor<float>& t) {
        Header::Entry e;
        e.name = name;
        e.shape = t.shape();
        e.offset = offset;
        e.count = t.size();
        h.entries.push_back(std::move(e));
        for (std::int64_t i = 0; i < t.size(); ++i) append_f32_le(blobs, t.data()[i]);
        offset += t.size() * 4;
    };
    for (const auto& p : params) add_entry(p.name, p.tensor);
    if (velocity) {
        if (velocity->size() != params.size())
            throw IoError("checkpoint: optimizer state does not parallel parameters");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].trainable) continue;
            const Tensor<float>& v = (*velocity)[i];
            add_entry("opt:" + params[i].name,
                      v.valid() ? v : Tensor<float>::zeros(params[i].tensor.shape()));
        }
    }
    h.data_bytes = offset;

    std::string file = render_header(h);
    file += blobs;
    char crc_line[32];
    std::snprintf(crc_line, sizeof crc_line, "crc32 %08x\n", crc_of(file));
    file += crc_line;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw IoError("short write to " + path);
}

namespace {

std::string read_file_checked(const std::string& path, std::size_t& payload_end) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    // Fixed-width trailer "crc32 xxxxxxxx\n"; the blob may contain any
    // byte, so locate it by length rather than by newline search.
    constexpr std::size_t kTrailerLen = 15;
    if (bytes.size() < kTrailerLen + 1 || bytes.back() != '\n')
        throw IoError(path + ": missing checksum trailer");
    const std::size_t line_start = bytes.size() - kTrailerLen;
    const std::string trailer = bytes.substr(line_start, kTrailerLen - 1);
    if (trailer.rfind("crc32 ", 0) != 0) throw IoError(path + ": missing checksum trailer");
    const std::uint32_t stored =
        static_cast<std::uint32_t>(std::stoul(trailer.substr(6), nullptr, 16));
    const std::string payload = bytes.substr(0, line_start);
    if (crc_of(payload) != stored)
        throw IoError(path + ": checksum mismatch, file is corrupt");
    payload_end = line_start;
    return bytes;
}

void compare_config(const BackboneConfig& stored, const BackboneConfig& target) {
    std::vector<std::string> diffs;
    auto cmp = [&](const std::string& name, auto a, auto b) {
        if (a != b) diffs.push_back(name);
    };
    cmp("L", stored.cells, target.cells);
    cmp("N", stored.nodes, target.nodes);
    cmp("n", stored.fan_in, target.fan_in);
    cmp("B+1", stored.branch_count, target.branch_count);
    cmp("init_channels", stored.init_channels, target.init_channels);
    cmp("num_classes", stored.num_classes, target.num_classes);
    cmp("input_channels", stored.input_channels, target.input_channels);
    cmp("input_size", stored.input_size, target.input_size);
    cmp("reduction_cells", stored.reduction_cells, target.reduction_cells);
    cmp("aux_cell", stored.aux_cell, target.aux_cell);
    cmp("topology_seed", stored.topology_seed, target.topology_seed);
    if (!diffs.empty()) {
        std::string msg = "checkpoint incompatible with network; differing fields:";
        for (const auto& d : diffs) msg += " " + d;
        throw ConfigError(msg);
    }
}

}  // namespace

CheckpointMeta load_checkpoint(const std::string& path, Network<float>& net,
                               std::vector<Tensor<float>>* velocity) {
    std::size_t payload_end = 0;
    const std::string bytes = read_file_checked(path, payload_end);
    std::size_t data_start = 0;
    Header h = parse_header(bytes.substr(0, payload_end), data_start);
    compare_config(h.config, net.config());
    if (h.topology != net.topology().preds)
        throw ConfigError("checkpoint incompatible with network; differing fields: topology");

    std::map<std::string, const Header::Entry*> index;
    for (const auto& e : h.entries) index[e.name] = &e;

    auto load_into = [&](const std::string& name, Tensor<float>& t) {
        auto it = index.find(name);
        if (it == index.end()) throw IoError(path + ": tensor '" + name + "' missing");
        const Header::Entry& e = *it->second;
        if (e.shape != t.shape())
            throw ConfigError(path + ": tensor '" + name + "' has stored shape " +
                              shape_field(e.shape) + ", expected " + shape_field(t.shape()));
        const std::size_t base = data_start + static_cast<std::size_t>(e.offset);
        if (base + static_cast<std::size_t>(e.count) * 4 > payload_end)
            throw IoError(path + ": tensor '" + name + "' blob out of bounds");
        for (std::int64_t i = 0; i < e.count; ++i)
            t.data()[i] = read_f32_le(bytes.data() + base + static_cast<std::size_t>(i) * 4);
    };

    auto& params = net.params().all();
    for (auto& p : params) load_into(p.name, p.tensor);
    if (velocity) {
        velocity->assign(params.size(), Tensor<float>());
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].trainable) continue;
            if (index.count("opt:" + params[i].name)) {
                (*velocity)[i] = Tensor<float>::zeros(params[i].tensor.shape());
                load_into("opt:" + params[i].name, (*velocity)[i]);
            }
        }
    }
    return h.meta;
}

BackboneConfig peek_checkpoint_config(const std::string& path, CheckpointMeta* meta) {
    std::size_t payload_end = 0;
    const std::string bytes = read_file_checked(path, payload_end);
    std::size_t data_start = 0;
    Header h = parse_header(bytes.substr(0, payload_end), data_start);
    if (meta) *meta = h.meta;
    return h.config;
}

std::unique_ptr<Network<float>> load_network(const std::string& path, CheckpointMeta* meta) {
    CheckpointMeta m;
    BackboneConfig cfg = peek_checkpoint_config(path, &m);
    auto net = std::make_unique<Network<float>>(cfg, m.init_seed);
    load_checkpoint(path, *net);
    if (meta) *meta = m;
    return net;
}

}  // namespace drnet
