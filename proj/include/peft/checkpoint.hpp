// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "peft/config_io.hpp"
#include "peft/errors.hpp"
#include "peft/model.hpp"
#include "peft/training.hpp"

// File layout:
//
//   PEFT-CHECKPOINT 1\n
//   manifest-bytes <N>\n
//   <N bytes of JSON manifest>
//   <payload: tensors in manifest order, IEEE-754 little-endian, no padding>
//
// Tensor offsets in the manifest are byte offsets from the start of the payload.

namespace peft {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "PEFT-CHECKPOINT";

struct TensorEntry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    Precision precision = Precision::single;
    bool trainable = false;

    std::size_t bytes() const { return shape_numel(shape) * (precision == Precision::single ? 4 : 8); }
};

struct CheckpointManifest {
    int format_version = kCheckpointVersion;
    Precision precision = Precision::single;
    std::uint64_t seed = 0;
    ModelConfig model;
    AdapterPlacement placement;
    bool lora_merged = false;
    std::vector<TensorEntry> tensors;
    std::size_t payload_bytes = 0;
    json extra = json::object();  // free-form provenance (e.g. merge verification)
};

template <std::floating_point T>
constexpr Precision precision_of() {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8, "checkpoint payload supports 32- and 64-bit floats");
    return sizeof(T) == 4 ? Precision::single : Precision::double_;
}

namespace detail {

template <std::floating_point T>
void put_le(std::string& out, T v) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const auto bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

template <std::floating_point T>
T get_le(const unsigned char* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
    return std::bit_cast<T>(bits);
}

inline json manifest_to_json(const CheckpointManifest& m) {
    json tensors = json::array();
    for (const auto& t : m.tensors)
        tensors.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"offset", t.offset},
                           {"precision", std::string(precision_name(t.precision))},
                           {"trainable", t.trainable}});
    json j{{"format_version", m.format_version},
           {"precision", std::string(precision_name(m.precision))},
           {"seed", m.seed},
           {"model", to_json(m.model)},
           {"placement", to_json(m.placement)},
           {"lora_merged", m.lora_merged},
           {"tensors", tensors},
           {"payload_bytes", m.payload_bytes}};
    for (const auto& [k, v] : m.extra.items()) j[k] = v;
    return j;
}

inline const json& need(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw CheckpointError(std::string("manifest: missing field '") + key + "'");
    return j[key];
}

template <class F>
auto manifest_field(const char* key, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("manifest: field '") + key + "': " + e.what());
    }
}

inline CheckpointManifest manifest_from_json(const json& j) {
    CheckpointManifest m;
    m.format_version = manifest_field("format_version", [&] { return need(j, "format_version").get<int>(); });
    if (m.format_version != kCheckpointVersion)
        throw CheckpointError("manifest: unsupported format_version " + std::to_string(m.format_version));
    m.precision = manifest_field("precision", [&] { return parse_precision(need(j, "precision").get<std::string>()); });
    m.seed = manifest_field("seed", [&] { return need(j, "seed").get<std::uint64_t>(); });
    m.model = manifest_field("model", [&] { return model_from_json(need(j, "model"), "model"); });
    m.placement = manifest_field("placement", [&] { return placement_from_json(need(j, "placement"), "placement"); });
    m.lora_merged = manifest_field("lora_merged", [&] { return need(j, "lora_merged").get<bool>(); });
    m.payload_bytes = manifest_field("payload_bytes", [&] { return need(j, "payload_bytes").get<std::size_t>(); });
    const auto& tensors = need(j, "tensors");
    if (!tensors.is_array()) throw CheckpointError("manifest: field 'tensors' is not an array");
    std::size_t expected_offset = 0;
    for (const auto& t : tensors) {
        TensorEntry e;
        e.name = manifest_field("tensors.name", [&] { return need(t, "name").get<std::string>(); });
        const auto where = "tensors[" + e.name + "]";
        manifest_field(where.c_str(), [&] {
            e.shape = need(t, "shape").get<Shape>();
            e.offset = need(t, "offset").get<std::size_t>();
            e.precision = parse_precision(need(t, "precision").get<std::string>());
            e.trainable = need(t, "trainable").get<bool>();
            return 0;
        });
        if (e.precision != m.precision)
            throw CheckpointError("manifest: tensor '" + e.name + "' precision differs from checkpoint precision");
        if (e.offset != expected_offset) {
            throw CheckpointError("manifest: tensor '" + e.name + "' offset " + std::to_string(e.offset) +
                                  " != expected " + std::to_string(expected_offset));
        }
        expected_offset += e.bytes();
        m.tensors.push_back(std::move(e));
    }
    if (expected_offset != m.payload_bytes) {
        throw CheckpointError("manifest: shape products give " + std::to_string(expected_offset) +
                              " payload bytes but payload_bytes is " + std::to_string(m.payload_bytes));
    }
    for (const auto& [k, v] : j.items())
        if (k != "format_version" && k != "precision" && k != "seed" && k != "model" && k != "placement" &&
            k != "lora_merged" && k != "tensors" && k != "payload_bytes")
            m.extra[k] = v;
    return m;
}

struct RawCheckpoint {
    CheckpointManifest manifest;
    std::string payload;
};

inline RawCheckpoint read_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    std::string magic_line, size_line;
    if (!std::getline(in, magic_line) || magic_line != std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion))
        throw CheckpointError("header: bad magic line in '" + path + "'");
    if (!std::getline(in, size_line) || size_line.rfind("manifest-bytes ", 0) != 0)
        throw CheckpointError("header: missing manifest-bytes line");
    std::size_t n = 0;
    try {
        n = std::stoull(size_line.substr(15));
    } catch (const std::exception&) {
        throw CheckpointError("header: unreadable manifest-bytes value");
    }
    const auto here = in.tellg();
    in.seekg(0, std::ios::end);
    const auto remaining = static_cast<std::size_t>(in.tellg() - here);
    in.seekg(here);
    if (n > remaining)
        throw CheckpointError("manifest: truncated (expected " + std::to_string(n) + " bytes, file holds " +
                              std::to_string(remaining) + ")");
    std::string text(n, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(n)))
        throw CheckpointError("manifest: truncated (expected " + std::to_string(n) + " bytes)");
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw CheckpointError(std::string("manifest: not valid JSON: ") + e.what());
    }
    RawCheckpoint raw{manifest_from_json(j), {}};
    std::stringstream rest;
    rest << in.rdbuf();
    raw.payload = rest.str();
    if (raw.payload.size() != raw.manifest.payload_bytes) {
        throw CheckpointError("payload: manifest declares " + std::to_string(raw.manifest.payload_bytes) +
                              " bytes, file holds " + std::to_string(raw.payload.size()));
    }
    return raw;
}

}  // namespace detail

inline CheckpointManifest read_manifest(const std::string& path) { return detail::read_raw(path).manifest; }

/// `lora_folded` marks a model whose adapters were merged and then dropped.
template <std::floating_point T>
void save_checkpoint(const std::string& path, const AdaptedModel<T>& model, std::uint64_t seed,
                     const json& extra = json::object(), bool lora_folded = false) {
    CheckpointManifest m;
    m.precision = precision_of<T>();
    m.seed = seed;
    m.model = model.config();
    m.placement = model.placement();
    m.lora_merged = model.lora_merged() || lora_folded;
    m.extra = extra;
    std::string payload;
    for (const auto& nt : model.named_parameters()) {
        m.tensors.push_back({nt.name, nt.tensor.shape(), payload.size(), m.precision, nt.tensor.requires_grad()});
        for (auto v : nt.tensor.values()) detail::put_le(payload, v);
    }
    m.payload_bytes = payload.size();
    const auto text = detail::manifest_to_json(m).dump(2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n' << "manifest-bytes " << text.size() << '\n' << text;
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("short write to '" + path + "'");
}

/// Rebuilds the architecture from the manifest, then overwrites every tensor from the
/// payload. The manifest's tensor list must match the rebuilt model name for name.
template <std::floating_point T>
AdaptedModel<T> load_checkpoint(const std::string& path, CheckpointManifest* manifest_out = nullptr) {
    auto raw = detail::read_raw(path);
    const auto& m = raw.manifest;
    if (m.precision != precision_of<T>())
        throw CheckpointError("manifest: precision '" + std::string(precision_name(m.precision)) +
                              "' does not match the requested load type");
    if (m.lora_merged && !m.placement.lora_targets.empty())
        throw CheckpointError("manifest: merged checkpoint must not list lora_targets");
    auto model = [&] {
        try {
            return AdaptedModel<T>::build(m.model, m.placement, m.seed);
        } catch (const ConfigError& e) {
            throw CheckpointError(std::string("manifest: ") + e.what());
        }
    }();
    const auto params = model.named_parameters();
    if (params.size() != m.tensors.size()) {
        throw CheckpointError("manifest: lists " + std::to_string(m.tensors.size()) + " tensors, model has " +
                              std::to_string(params.size()));
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.payload.data());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = m.tensors[i];
        auto t = params[i].tensor;
        if (e.name != params[i].name)
            throw CheckpointError("manifest: tensor " + std::to_string(i) + " is '" + e.name + "', expected '" +
                                  params[i].name + "'");
        if (e.shape != t.shape())
            throw CheckpointError("manifest: tensor '" + e.name + "' shape " + shape_string(e.shape) +
                                  " != model shape " + shape_string(t.shape()));
        if (e.trainable != t.requires_grad())
            throw CheckpointError("manifest: tensor '" + e.name + "' trainable flag disagrees with placement");
        auto& vals = t.values();
        for (std::size_t k = 0; k < vals.size(); ++k) vals[k] = detail::get_le<T>(bytes + e.offset + k * sizeof(T));
    }
    if (manifest_out) *manifest_out = m;
    return model;
}

}  // namespace peft
