#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdiff/errors.hpp"
#include "sgdiff/nn.hpp"

namespace sgdiff {

/// Versioned binary checkpoint: magic, JSON config header, raw parameter
/// doubles in registry order.
inline void save_checkpoint(const std::string& path, const nlohmann::json& config,
                            const nn::ParamRefs& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    const char magic[8] = {'S', 'G', 'C', 'K', 'P', 'T', '0', '1'};
    f.write(magic, 8);
    std::string header = config.dump();
    std::uint64_t hlen = header.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(header.data(), static_cast<std::streamsize>(hlen));
    std::uint64_t total = params.total_size();
    f.write(reinterpret_cast<const char*>(&total), 8);
    for (const Tensor* w : params.weights)
        f.write(reinterpret_cast<const char*>(w->data.data()),
                static_cast<std::streamsize>(w->size() * sizeof(double)));
    for (const Tensor* b : params.buffers)
        f.write(reinterpret_cast<const char*>(b->data.data()),
                static_cast<std::streamsize>(b->size() * sizeof(double)));
    if (!f) throw IoError("save_checkpoint: write failed " + path);
}

/// Reads the JSON header without loading parameters.
inline nlohmann::json peek_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointMissingError("checkpoint not found: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "SGCKPT01", 8) != 0)
        throw SchemaError("checkpoint: bad magic in " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string header(hlen, '\0');
    f.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw SchemaError("checkpoint: truncated header in " + path);
    try {
        return nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint: header json: ") + e.what());
    }
}

/// Loads parameters into an already-constructed model's registry; the
/// registry shapes must match what was saved.
inline nlohmann::json load_checkpoint(const std::string& path, nn::ParamRefs& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointMissingError("checkpoint not found: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "SGCKPT01", 8) != 0)
        throw SchemaError("checkpoint: bad magic in " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string header(hlen, '\0');
    f.read(header.data(), static_cast<std::streamsize>(hlen));
    std::uint64_t total = 0;
    f.read(reinterpret_cast<char*>(&total), 8);
    if (total != params.total_size())
        throw SchemaError("checkpoint: parameter count mismatch in " + path);
    for (Tensor* w : params.weights)
        f.read(reinterpret_cast<char*>(w->data.data()),
               static_cast<std::streamsize>(w->size() * sizeof(double)));
    for (Tensor* b : params.buffers)
        f.read(reinterpret_cast<char*>(b->data.data()),
               static_cast<std::streamsize>(b->size() * sizeof(double)));
    if (!f) throw SchemaError("checkpoint: truncated parameters in " + path);
    try {
        return nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint: header json: ") + e.what());
    }
}

}  // namespace sgdiff
