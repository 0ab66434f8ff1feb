#include "losatok/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <memory>

namespace losatok::ckpt {

static_assert(std::endian::native == std::endian::little, "container payload is little-endian");

namespace {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
} // namespace

void save(const std::string& path, const Container& c) {
    nlohmann::ordered_json header = c.header;
    header["format_version"] = kFormatVersion;
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& a : c.arrays) {
        std::size_t numel = 1;
        for (int d : a.shape) numel *= std::size_t(d);
        require(numel == a.data.size(), Errc::format,
                "container: shape/payload mismatch for '" + a.name + "'");
        nlohmann::ordered_json entry;
        entry["name"] = a.name;
        entry["shape"] = a.shape;
        entry["offset"] = offset;
        entry["bytes"] = std::uint64_t(a.data.size() * sizeof(float));
        manifest.push_back(std::move(entry));
        offset += a.data.size() * sizeof(float);
    }
    header["arrays"] = std::move(manifest);

    FilePtr f(std::fopen(path.c_str(), "wb"));
    require(f != nullptr, Errc::io, "container: cannot write '" + path + "'");
    const std::string line = header.dump() + "\n";
    require(std::fwrite(line.data(), 1, line.size(), f.get()) == line.size(), Errc::io,
            "container: write failed: '" + path + "'");
    for (const auto& a : c.arrays)
        require(std::fwrite(a.data.data(), sizeof(float), a.data.size(), f.get()) == a.data.size(),
                Errc::io, "container: write failed: '" + path + "'");
}

Container load(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    require(f != nullptr, Errc::io, "container: cannot open '" + path + "'");

    std::string line;
    for (int ch = std::fgetc(f.get()); ch != EOF && ch != '\n'; ch = std::fgetc(f.get()))
        line.push_back(char(ch));
    require(!line.empty(), Errc::format, "container: empty header: '" + path + "'");

    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(line);
    } catch (const std::exception& e) {
        fail(Errc::format, "container: bad header JSON in '" + path + "': " + e.what());
    }
    require(header.contains("format_version") && header["format_version"].is_number_integer(),
            Errc::format, "container: missing format_version: '" + path + "'");
    require(int(header["format_version"]) == kFormatVersion, Errc::format,
            "container: unsupported format_version in '" + path + "'");
    require(header.contains("arrays") && header["arrays"].is_array(), Errc::format,
            "container: missing array manifest: '" + path + "'");

    const long payload_start = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_END);
    const long end = std::ftell(f.get());
    const std::uint64_t payload_bytes = std::uint64_t(end - payload_start);

    Container c;
    for (const auto& entry : header["arrays"]) {
        NamedArray a;
        a.name = entry.at("name").get<std::string>();
        a.shape = entry.at("shape").get<std::vector<int>>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto bytes = entry.at("bytes").get<std::uint64_t>();
        std::size_t numel = 1;
        for (int d : a.shape) numel *= std::size_t(d);
        require(bytes == numel * sizeof(float) && offset + bytes <= payload_bytes, Errc::format,
                "container: manifest/payload mismatch for '" + a.name + "' in '" + path + "'");
        a.data.resize(numel);
        std::fseek(f.get(), payload_start + long(offset), SEEK_SET);
        require(std::fread(a.data.data(), sizeof(float), numel, f.get()) == numel, Errc::io,
                "container: short read for '" + a.name + "' in '" + path + "'");
        c.arrays.push_back(std::move(a));
    }
    header.erase("arrays");
    c.header = std::move(header);
    return c;
}

} // namespace losatok::ckpt
