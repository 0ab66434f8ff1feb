#pragma once

// Checkpoint / latent-file container: one line of JSON (format version,
// config echo, named-array manifest with shapes and byte offsets) terminated
// by '\n', followed by the raw little-endian float32 payload. Offsets are
// relative to the payload start. save(load(x)) is byte-identical.

#include <string>
#include <vector>

#include <json.hpp>

#include "losatok/common.hpp"

namespace losatok::ckpt {

constexpr int kFormatVersion = 1;

struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct Container {
    nlohmann::ordered_json header; // without the "arrays" manifest
    std::vector<NamedArray> arrays;

    const NamedArray& at(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return a;
        fail(Errc::format, "container: missing array '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return true;
        return false;
    }
};

void save(const std::string& path, const Container& c);
Container load(const std::string& path);

} // namespace losatok::ckpt
