#include "usis/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "usis/config.hpp"
#include "usis/error.hpp"

namespace usis {

namespace {

constexpr char kMagic[8] = {'U', 'S', 'I', 'S', 'C', 'K', 'P', 'T'};

template <typename T>
void write_le(std::ofstream& out, T v)
{
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(b), sizeof b);
}

template <typename T>
T read_le(std::ifstream& in)
{
    unsigned char b[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof b)) {
        throw ParseError("checkpoint: truncated header");
    }
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<T>(b[i]) << (8 * i);
    }
    return v;
}

} // namespace

void save_checkpoint(const UsisSam& model, const std::filesystem::path& path)
{
    const auto params = model.trainable_parameters();
    nlohmann::json manifest;
    manifest["schema_version"] = 1;
    manifest["model"] = model_config_to_json(model.config());
    manifest["backbone_hash"] = backbone_config_hash(model.config().encoder);
    manifest["params"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : params) {
        manifest["params"].push_back({{"name", p.name},
                                      {"group", nn::to_string(p.group)},
                                      {"shape", p.tensor.shape()},
                                      {"offset", offset}});
        offset += static_cast<std::uint64_t>(p.tensor.numel());
    }
    manifest["total_values"] = offset;
    const auto text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    out.write(kMagic, sizeof kMagic);
    write_le<std::uint32_t>(out, kCheckpointVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params) {
        for (double v : p.tensor.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof v);
            write_le<std::uint64_t>(out, bits);
        }
    }
    if (!out) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

UsisSam load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read checkpoint " + path.string());
    }
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw ParseError("checkpoint: bad magic in " + path.string());
    }
    const auto version = read_le<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
        throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto length = read_le<std::uint64_t>(in);
    if (length > (std::uint64_t{1} << 30)) {
        throw ParseError("checkpoint: manifest length is implausible");
    }
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
        throw ParseError("checkpoint: truncated manifest");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: manifest is not JSON: ") + e.what());
    }
    UsisSam model(model_config_from_json(manifest.at("model")));
    if (manifest.at("backbone_hash").get<std::uint64_t>() != backbone_config_hash(model.config().encoder)) {
        throw IntegrityError("checkpoint: backbone hash does not match its config");
    }
    std::map<std::string, Tensor> by_name;
    for (const auto& p : model.trainable_parameters()) {
        by_name[p.name] = p.tensor;
    }
    const auto& entries = manifest.at("params");
    if (entries.size() != by_name.size()) {
        throw IntegrityError("checkpoint: parameter count differs from the model");
    }
    const auto total = manifest.at("total_values").get<std::uint64_t>();
    std::vector<double> values(total);
    for (auto& v : values) {
        const auto bits = read_le<std::uint64_t>(in);
        std::memcpy(&v, &bits, sizeof v);
    }
    for (const auto& e : entries) {
        const auto name = e.at("name").get<std::string>();
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw IntegrityError("checkpoint: unknown parameter " + name);
        }
        auto& t = it->second;
        if (e.at("shape").get<Shape>() != t.shape()) {
            throw IntegrityError("checkpoint: shape mismatch for " + name);
        }
        const auto offset = e.at("offset").get<std::uint64_t>();
        const auto n = static_cast<std::uint64_t>(t.numel());
        if (offset + n > total) {
            throw IntegrityError("checkpoint: parameter " + name + " runs past the data");
        }
        auto dst = t.mutable_values();
        std::copy(values.begin() + static_cast<std::ptrdiff_t>(offset),
                  values.begin() + static_cast<std::ptrdiff_t>(offset + n), dst.begin());
    }
    return model;
}

} // namespace usis
