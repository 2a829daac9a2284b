// Checkpoint container: little-endian, bit-exact round trips.
//
//   magic "INFILLCK" | u32 version | u32 json_len | config JSON (UTF-8)
//   u32 n_tensors | per tensor: u32 name_len, name, u32 rank, u64 dims[rank],
//                               u64 byte_len, raw f32 payload
//
// All integers and floats are serialized byte-by-byte LSB first, so the file
// format does not depend on host endianness.

#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "infill/model.hpp"

namespace infill {

// ----------------------------- config <-> JSON -----------------------------

inline nlohmann::json config_to_json(const ModelConfig &cfg) {
    return nlohmann::json{{"n_layers", cfg.n_layers},
                          {"hidden", cfg.hidden},
                          {"n_heads", cfg.n_heads},
                          {"n_kv_groups", cfg.n_kv_groups},
                          {"vocab_size", cfg.vocab_size},
                          {"max_positions", cfg.max_positions},
                          {"rope_base", cfg.rope.base},
                          {"rope_scale", cfg.rope.scale},
                          {"tied_embeddings", cfg.tied_embeddings},
                          {"specials",
                           {{"mask", cfg.specials.mask},
                            {"sop", cfg.specials.sop},
                            {"eop", cfg.specials.eop},
                            {"pad", cfg.specials.pad}}}};
}

inline ModelConfig config_from_json(const nlohmann::json &j) {
    ModelConfig cfg = ModelConfig::make(
        j.at("n_layers").get<int64_t>(), j.at("hidden").get<int64_t>(),
        j.at("n_heads").get<int64_t>(), j.at("n_kv_groups").get<int64_t>(),
        j.at("vocab_size").get<int64_t>(), j.at("max_positions").get<int64_t>(),
        j.at("rope_base").get<double>(), j.at("rope_scale").get<double>());
    cfg.tied_embeddings = j.value("tied_embeddings", true);
    if (j.contains("specials")) {
        const auto &s = j.at("specials");
        cfg.specials.mask = s.at("mask").get<int32_t>();
        cfg.specials.sop = s.at("sop").get<int32_t>();
        cfg.specials.eop = s.at("eop").get<int32_t>();
        cfg.specials.pad = s.at("pad").get<int32_t>();
    }
    return cfg;
}

// ----------------------------- wire helpers -----------------------------

namespace detail {

constexpr char kCheckpointMagic[8] = {'I', 'N', 'F', 'I', 'L', 'L', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string &out, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_u64(std::string &out, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

struct Reader {
    const std::string &buf;
    size_t pos = 0;

    void need(size_t n) const {
        INFILL_CHECK_DATA(pos + n <= buf.size(), "checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)]))
                 << (8 * i);
        }
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)]))
                 << (8 * i);
        }
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail

// ----------------------------- save / load -----------------------------

inline void save_checkpoint(const std::string &path, const ModelConfig &cfg,
                            ModelParams<float> &params) {
    std::string out;
    out.append(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::put_u32(out, detail::kCheckpointVersion);
    const std::string cfg_json = config_to_json(cfg).dump();
    detail::put_u32(out, static_cast<uint32_t>(cfg_json.size()));
    out += cfg_json;

    auto named = params.named_tensors();
    detail::put_u32(out, static_cast<uint32_t>(named.size()));
    for (auto &[name, tensor] : named) {
        detail::put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<uint32_t>(tensor->rank()));
        for (const int64_t d : tensor->shape) {
            detail::put_u64(out, static_cast<uint64_t>(d));
        }
        detail::put_u64(out, static_cast<uint64_t>(tensor->data.size()) * 4);
        for (const float f : tensor->data) {
            const uint32_t bits = std::bit_cast<uint32_t>(f);
            for (int i = 0; i < 4; ++i) {
                out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
            }
        }
    }

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    INFILL_CHECK_DATA(file.good(), "checkpoint: cannot open ", path, " for writing");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    INFILL_CHECK_DATA(file.good(), "checkpoint: write failed for ", path);
}

inline std::pair<ModelConfig, ModelParams<float>> load_checkpoint(const std::string &path) {
    std::ifstream file(path, std::ios::binary);
    INFILL_CHECK_DATA(file.good(), "checkpoint: cannot open ", path);
    std::string buf((std::istreambuf_iterator<char>(file)),
                    std::istreambuf_iterator<char>());
    detail::Reader r{buf};

    const std::string magic = r.bytes(sizeof(detail::kCheckpointMagic));
    INFILL_CHECK_DATA(magic == std::string(detail::kCheckpointMagic,
                                           sizeof(detail::kCheckpointMagic)),
                      "checkpoint: bad magic in ", path);
    const uint32_t version = r.u32();
    INFILL_CHECK_DATA(version == detail::kCheckpointVersion,
                      "checkpoint: unsupported version ", version);
    const uint32_t json_len = r.u32();
    nlohmann::json j = nlohmann::json::parse(r.bytes(json_len), nullptr, false);
    INFILL_CHECK_DATA(!j.is_discarded(), "checkpoint: malformed config JSON");
    const ModelConfig cfg = config_from_json(j);

    ModelParams<float> params = ModelParams<float>::zeros_like(cfg);
    auto named = params.named_tensors();
    const uint32_t n_tensors = r.u32();
    INFILL_CHECK_DATA(n_tensors == named.size(), "checkpoint: expected ", named.size(),
                      " tensors, found ", n_tensors);
    for (uint32_t t = 0; t < n_tensors; ++t) {
        const uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        INFILL_CHECK_DATA(name == named[t].first, "checkpoint: tensor ", t, " is '",
                          name, "', expected '", named[t].first, "'");
        Tensor<float> &dst = *named[t].second;
        const uint32_t rank = r.u32();
        INFILL_CHECK_DATA(rank == static_cast<uint32_t>(dst.rank()),
                          "checkpoint: rank mismatch for ", name);
        for (uint32_t d = 0; d < rank; ++d) {
            INFILL_CHECK_DATA(r.u64() == static_cast<uint64_t>(dst.shape[d]),
                              "checkpoint: shape mismatch for ", name);
        }
        const uint64_t byte_len = r.u64();
        INFILL_CHECK_DATA(byte_len == dst.data.size() * 4,
                          "checkpoint: payload size mismatch for ", name);
        const std::string payload = r.bytes(byte_len);
        for (size_t i = 0; i < dst.data.size(); ++i) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<uint32_t>(
                            static_cast<uint8_t>(payload[4 * i + static_cast<size_t>(b)]))
                        << (8 * b);
            }
            dst.data[i] = std::bit_cast<float>(bits);
        }
    }
    INFILL_CHECK_DATA(r.pos == buf.size(), "checkpoint: trailing bytes in ", path);
    return {cfg, std::move(params)};
}

} // namespace infill
