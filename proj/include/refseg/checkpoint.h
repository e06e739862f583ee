// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_CHECKPOINT_H
#define REFSEG_CHECKPOINT_H

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "refseg/autodiff.h"
#include "refseg/optimizer.h"

namespace refseg::train {

// Single-file checkpoint: 8-byte magic, little-endian u64 header length, a
// JSON header naming every tensor (shape, dtype, byte offset), then the
// concatenated float32 payload. Optimizer moments ride along under their own
// header section so a resumed run continues bit-exactly.
constexpr char kCkptMagic[8] = {'R', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

namespace detail {

inline void put_u64_le(std::ostream& out, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; i++) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64_le(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; i++) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

template <typename T>
void put_f32_blob(std::ostream& out, const Tensor<T>& t) {
    for (int64_t i = 0; i < t.numel(); i++) {
        const float f = static_cast<float>(t.data[static_cast<size_t>(i)]);
        uint32_t u = 0;
        std::memcpy(&u, &f, 4);
        unsigned char b[4] = {static_cast<unsigned char>(u & 0xff),
                              static_cast<unsigned char>((u >> 8) & 0xff),
                              static_cast<unsigned char>((u >> 16) & 0xff),
                              static_cast<unsigned char>((u >> 24) & 0xff)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
}

inline std::vector<float> get_f32_blob(const std::vector<unsigned char>& payload, size_t offset,
                                       size_t count) {
    std::vector<float> out(count);
    for (size_t i = 0; i < count; i++) {
        const size_t o = offset + 4 * i;
        uint32_t u = static_cast<uint32_t>(payload[o]) |
                     (static_cast<uint32_t>(payload[o + 1]) << 8) |
                     (static_cast<uint32_t>(payload[o + 2]) << 16) |
                     (static_cast<uint32_t>(payload[o + 3]) << 24);
        std::memcpy(&out[i], &u, 4);
    }
    return out;
}

} // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ad::ParamStore<T>& store,
                     AdamW<T>* opt, const nlohmann::json& config_snapshot, int64_t step,
                     uint64_t seed) {
    nlohmann::json params = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto& p : store.params) {
        params[p.name] = {{"shape", p.value.shape}, {"dtype", "f32"}, {"offset", offset}};
        offset += static_cast<uint64_t>(p.value.numel()) * 4;
    }
    nlohmann::json header;
    header["format"] = 1;
    header["step"] = step;
    header["config"] = config_snapshot;
    header["rng"] = {{"scheme", "counter"}, {"seed", std::to_string(seed)}};
    header["params"] = params;
    if (opt && opt->initialized()) {
        nlohmann::json om = nlohmann::json::object(), ov = nlohmann::json::object();
        int idx = 0;
        for (const auto& p : store.params) {
            om[p.name] = offset;
            offset += static_cast<uint64_t>(p.value.numel()) * 4;
            ov[p.name] = offset;
            offset += static_cast<uint64_t>(p.value.numel()) * 4;
            idx++;
        }
        header["opt_m"] = om;
        header["opt_v"] = ov;
        header["adam_steps"] = opt->steps_taken;
    }
    header["payload_bytes"] = offset;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kCkptMagic, 8);
    const std::string hj = header.dump();
    detail::put_u64_le(out, hj.size());
    out.write(hj.data(), static_cast<std::streamsize>(hj.size()));
    for (const auto& p : store.params) detail::put_f32_blob(out, p.value);
    if (opt && opt->initialized()) {
        int idx = 0;
        for (const auto& p : store.params) {
            (void)p;
            detail::put_f32_blob(out, opt->first_moments()[static_cast<size_t>(idx)]);
            detail::put_f32_blob(out, opt->second_moments()[static_cast<size_t>(idx)]);
            idx++;
        }
    }
}

struct LoadedCheckpoint {
    nlohmann::json header;
    std::vector<unsigned char> payload;

    int64_t step() const { return header.at("step").get<int64_t>(); }
    uint64_t seed() const { return std::stoull(header.at("rng").at("seed").get<std::string>()); }
    bool has_optimizer() const { return header.contains("opt_m"); }

    std::vector<float> tensor_at(uint64_t offset, size_t count) const {
        if (offset + count * 4 > payload.size())
            throw std::runtime_error("checkpoint payload truncated");
        return detail::get_f32_blob(payload, offset, count);
    }
};

inline LoadedCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    const uint64_t hlen = detail::get_u64_le(in);
    std::string hj(hlen, '\0');
    in.read(hj.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("checkpoint header truncated: " + path);
    LoadedCheckpoint ckpt;
    ckpt.header = nlohmann::json::parse(hj);
    const uint64_t expected = ckpt.header.at("payload_bytes").get<uint64_t>();
    ckpt.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (ckpt.payload.size() != expected)
        throw std::runtime_error("checkpoint payload truncated: " + path);
    return ckpt;
}

// Restores parameters (and moments when present and requested) into the
// store. Every stored name must match an existing parameter with the same
// shape; mismatches are rejected with the offending name.
template <typename T>
void restore_checkpoint(const LoadedCheckpoint& ckpt, ad::ParamStore<T>& store,
                        AdamW<T>* opt) {
    const auto& params = ckpt.header.at("params");
    size_t matched = 0;
    for (auto& p : store.params) {
        if (!params.contains(p.name))
            throw std::runtime_error("checkpoint missing parameter: " + p.name);
        const auto& entry = params.at(p.name);
        const auto shape = entry.at("shape").template get<std::vector<int>>();
        if (shape != p.value.shape)
            throw std::runtime_error("checkpoint shape mismatch for parameter: " + p.name);
        const auto blob = ckpt.tensor_at(entry.at("offset").template get<uint64_t>(),
                                         static_cast<size_t>(p.value.numel()));
        for (int64_t i = 0; i < p.value.numel(); i++)
            p.value.data[static_cast<size_t>(i)] = static_cast<T>(blob[static_cast<size_t>(i)]);
        matched++;
    }
    if (matched != params.size()) {
        for (auto it = params.begin(); it != params.end(); ++it)
            if (!store.find(it.key()))
                throw std::runtime_error("checkpoint has unknown parameter: " + it.key());
    }
    if (opt) {
        if (!ckpt.has_optimizer())
            throw std::runtime_error("checkpoint has no optimizer state to resume from");
        opt->init(store);
        opt->steps_taken = ckpt.header.at("adam_steps").template get<int64_t>();
        int idx = 0;
        for (auto& p : store.params) {
            const uint64_t om = ckpt.header.at("opt_m").at(p.name).template get<uint64_t>();
            const uint64_t ov = ckpt.header.at("opt_v").at(p.name).template get<uint64_t>();
            auto mb = ckpt.tensor_at(om, static_cast<size_t>(p.value.numel()));
            auto vb = ckpt.tensor_at(ov, static_cast<size_t>(p.value.numel()));
            auto& m = opt->first_moments()[static_cast<size_t>(idx)];
            auto& v = opt->second_moments()[static_cast<size_t>(idx)];
            for (int64_t i = 0; i < p.value.numel(); i++) {
                m.data[static_cast<size_t>(i)] = static_cast<T>(mb[static_cast<size_t>(i)]);
                v.data[static_cast<size_t>(i)] = static_cast<T>(vb[static_cast<size_t>(i)]);
            }
            idx++;
        }
    }
}

} // namespace refseg::train

#endif // REFSEG_CHECKPOINT_H
