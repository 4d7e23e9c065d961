#include "tsmamba/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <type_traits>

#include "tsmamba/error.hpp"

namespace tsmamba {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host byte order");

using nlohmann::json;

namespace {

const std::set<std::string> kModelKeys = {
    "lookback",  "horizon",    "patch_len",  "d_model",     "n_layers",  "d_state",          "expand",
    "conv_kernel", "head_dim", "n_channels", "huber_delta", "norm_eps",  "revin_eps",        "xchannel_enabled",
    "revin_affine", "combine"};

template <typename T>
void read_key(const json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        require(it->is_number_unsigned(), ErrorKind::InvalidConfig,
                std::string("model.") + key + " must be a non-negative integer");
    } else if constexpr (std::is_same_v<T, bool>) {
        require(it->is_boolean(), ErrorKind::InvalidConfig, std::string("model.") + key + " must be a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
        require(it->is_number(), ErrorKind::InvalidConfig, std::string("model.") + key + " must be a number");
    }
    try {
        out = it->get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::InvalidConfig, std::string("model.") + key + ": " + e.what());
    }
}

std::size_t read_size(const json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    require(it != j.end() && it->is_number_unsigned(), ErrorKind::CorruptCheckpoint,
            where + ": missing or invalid '" + key + "'");
    return it->get<std::size_t>();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(static_cast<bool>(out), ErrorKind::IoError, "write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorKind::IoError, "cannot rename " + tmp + " to " + path);
    }
}

LrGroup group_for(const std::string& name) {
    const bool backbone = name.rfind("embed.", 0) == 0 || name.rfind("fwd_encoder.", 0) == 0 ||
                          name.rfind("bwd_encoder.", 0) == 0;
    return backbone ? LrGroup::Backbone : LrGroup::New;
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
    return json{{"lookback", c.lookback},
                {"horizon", c.horizon},
                {"patch_len", c.patch_len},
                {"d_model", c.d_model},
                {"n_layers", c.n_layers},
                {"d_state", c.d_state},
                {"expand", c.expand},
                {"conv_kernel", c.conv_kernel},
                {"head_dim", c.head_dim},
                {"n_channels", c.n_channels},
                {"huber_delta", c.huber_delta},
                {"norm_eps", c.norm_eps},
                {"revin_eps", c.revin_eps},
                {"xchannel_enabled", c.xchannel_enabled},
                {"revin_affine", c.revin_affine},
                {"combine", c.combine == CombineMode::Add ? "add" : "concat"}};
}

ModelConfig model_config_from_json(const json& j) {
    require(j.is_object(), ErrorKind::InvalidConfig, "model config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        require(kModelKeys.count(key) > 0, ErrorKind::InvalidConfig, "unknown model key '" + key + "'");
    }
    ModelConfig c;
    read_key(j, "lookback", c.lookback);
    read_key(j, "horizon", c.horizon);
    read_key(j, "patch_len", c.patch_len);
    read_key(j, "d_model", c.d_model);
    read_key(j, "n_layers", c.n_layers);
    read_key(j, "d_state", c.d_state);
    read_key(j, "expand", c.expand);
    read_key(j, "conv_kernel", c.conv_kernel);
    read_key(j, "head_dim", c.head_dim);
    read_key(j, "n_channels", c.n_channels);
    read_key(j, "huber_delta", c.huber_delta);
    read_key(j, "norm_eps", c.norm_eps);
    read_key(j, "revin_eps", c.revin_eps);
    read_key(j, "xchannel_enabled", c.xchannel_enabled);
    read_key(j, "revin_affine", c.revin_affine);
    std::string combine = "add";
    read_key(j, "combine", combine);
    require(combine == "add" || combine == "concat", ErrorKind::InvalidConfig,
            "model.combine must be \"add\" or \"concat\"");
    c.combine = combine == "add" ? CombineMode::Add : CombineMode::Concat;
    return c;
}

std::string encode_container(json manifest, const NamedTensors& tensors) {
    json index = json::object();
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        require(!index.contains(name), ErrorKind::InvalidConfig, "duplicate tensor name " + name);
        const std::size_t len = t.size() * sizeof(Real);
        index[name] = json{{"dtype", "f64"}, {"shape", t.shape()}, {"byte_offset", offset}, {"byte_len", len}};
        offset += len;
    }
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["tensors"] = std::move(index);
    const std::string text = manifest.dump();

    std::string out;
    out.reserve(16 + text.size() + offset);
    out.append(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint64_t n = text.size();
    out.append(reinterpret_cast<const char*>(&n), sizeof n);
    out += text;
    for (const auto& [name, t] : tensors) {
        out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(Real));
    }
    return out;
}

DecodedContainer decode_container(const std::string& bytes) {
    require(bytes.size() >= 16, ErrorKind::CorruptCheckpoint, "file too short for a checkpoint header");
    require(std::memcmp(bytes.data(), kCheckpointMagic, 8) == 0, ErrorKind::CorruptCheckpoint, "bad magic");
    std::uint64_t manifest_len = 0;
    std::memcpy(&manifest_len, bytes.data() + 8, sizeof manifest_len);
    require(manifest_len <= bytes.size() - 16, ErrorKind::CorruptCheckpoint, "manifest extends past end of file");

    DecodedContainer out;
    try {
        out.manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
    } catch (const json::exception& e) {
        fail(ErrorKind::CorruptCheckpoint, std::string("manifest is not valid JSON: ") + e.what());
    }
    const json& m = out.manifest;
    require(m.is_object() && m.contains("format_version") && m["format_version"].is_number_integer(),
            ErrorKind::CorruptCheckpoint, "manifest lacks format_version");
    const int version = m["format_version"].get<int>();
    require(version == kCheckpointFormatVersion, ErrorKind::VersionMismatch,
            "checkpoint format_version " + std::to_string(version) + ", reader supports " +
                std::to_string(kCheckpointFormatVersion));
    require(m.contains("tensors") && m["tensors"].is_object(), ErrorKind::CorruptCheckpoint,
            "manifest lacks a tensor index");

    const std::size_t payload_begin = 16 + manifest_len;
    const std::size_t payload_len = bytes.size() - payload_begin;

    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset, len;
    };
    std::vector<Entry> entries;
    for (const auto& [name, e] : m["tensors"].items()) {
        const std::string where = "tensor " + name;
        require(e.is_object(), ErrorKind::CorruptCheckpoint, where + ": index entry is not an object");
        require(e.contains("dtype") && e["dtype"] == "f64", ErrorKind::CorruptCheckpoint,
                where + ": unsupported dtype");
        require(e.contains("shape") && e["shape"].is_array() && !e["shape"].empty(), ErrorKind::CorruptCheckpoint,
                where + ": invalid shape");
        Shape shape;
        for (const auto& d : e["shape"]) {
            require(d.is_number_unsigned() && d.get<std::size_t>() > 0, ErrorKind::CorruptCheckpoint,
                    where + ": invalid shape");
            shape.push_back(d.get<std::size_t>());
        }
        const std::size_t offset = read_size(e, "byte_offset", where);
        const std::size_t len = read_size(e, "byte_len", where);
        require(len == shape_numel(shape) * sizeof(Real), ErrorKind::CorruptCheckpoint,
                where + ": byte_len " + std::to_string(len) + " does not match shape " + shape_str(shape));
        require(offset <= payload_len && len <= payload_len - offset, ErrorKind::CorruptCheckpoint,
                where + ": bytes lie outside the payload");
        entries.push_back({name, std::move(shape), offset, len});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
    for (std::size_t i = 1; i < entries.size(); ++i) {
        require(entries[i - 1].offset + entries[i - 1].len <= entries[i].offset, ErrorKind::CorruptCheckpoint,
                "tensor " + entries[i].name + ": overlaps tensor " + entries[i - 1].name);
    }
    for (const Entry& e : entries) {
        Tensor t(e.shape);
        std::memcpy(t.ptr(), bytes.data() + payload_begin + e.offset, e.len);
        out.tensors.emplace_back(e.name, std::move(t));
    }
    return out;
}

void save_checkpoint(const std::string& path, const TSMambaModel& model, const std::string& stage) {
    NamedTensors tensors;
    for (const Parameter& p : model.params().all()) tensors.emplace_back(p.name, p.value);
    json manifest{{"model_config", model_config_to_json(model.config())}, {"stage", stage}};
    write_atomic(path, encode_container(std::move(manifest), tensors));
}

json read_checkpoint_manifest(const std::string& path) { return decode_container(read_file(path)).manifest; }

Checkpoint load_checkpoint(const std::string& path) {
    DecodedContainer dc = decode_container(read_file(path));
    require(dc.manifest.contains("model_config"), ErrorKind::CorruptCheckpoint, path + ": manifest lacks model_config");
    require(dc.manifest.contains("stage") && dc.manifest["stage"].is_string(), ErrorKind::CorruptCheckpoint,
            path + ": manifest lacks stage");
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(dc.manifest["model_config"]);
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::CorruptCheckpoint, path + ": " + e.what());
    }
    ParameterStore store;
    for (auto& [name, t] : dc.tensors) store.add(name, std::move(t), group_for(name));
    TSMambaModel model(cfg, std::move(store));
    return Checkpoint{cfg, dc.manifest["stage"].get<std::string>(), std::move(model)};
}

void save_tensors(const std::string& path, const NamedTensors& tensors) {
    write_atomic(path, encode_container(json{{"stage", "tensors"}}, tensors));
}

std::map<std::string, Tensor> load_tensors(const std::string& path) {
    DecodedContainer dc = decode_container(read_file(path));
    std::map<std::string, Tensor> out;
    for (auto& [name, t] : dc.tensors) out.emplace(name, std::move(t));
    return out;
}

}  // namespace tsmamba
