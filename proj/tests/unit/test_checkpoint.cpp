#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "tiny_model.hpp"
#include "usis/checkpoint.hpp"
#include "usis/config.hpp"
#include "usis/error.hpp"

using namespace usis;
namespace fs = std::filesystem;

namespace {

std::string read_all(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Rewrites the manifest of a checkpoint file through `edit`.
void edit_manifest(const fs::path& p, const std::function<void(nlohmann::json&)>& edit)
{
    auto bytes = read_all(p);
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 12, 8);
    auto manifest = nlohmann::json::parse(bytes.substr(20, len));
    edit(manifest);
    const auto text = manifest.dump();
    const std::uint64_t new_len = text.size();
    std::string out = bytes.substr(0, 12);
    out.append(reinterpret_cast<const char*>(&new_len), 8);
    out += text;
    out += bytes.substr(20 + len);
    std::ofstream(p, std::ios::binary) << out;
}

} // namespace

TEST_SUITE("checkpoint")
{
    TEST_CASE("round trip restores every parameter")
    {
        UsisSam model(oracle::tiny_model_config(4));
        Rng rng(9);
        for (const auto& p : model.trainable_parameters()) oracle::randomize({p.tensor}, rng, 0.05);
        const auto path = fs::temp_directory_path() / "usis_ckpt_roundtrip.ckpt";
        save_checkpoint(model, path);
        CHECK(read_all(path).substr(0, 8) == "USISCKPT");
        const auto back = load_checkpoint(path);
        const auto a = model.parameters();
        const auto b = back.parameters();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].name == b[i].name);
            CHECK(std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(), b[i].tensor.values().begin()));
        }
        CHECK(model_config_to_json(back.config()) == model_config_to_json(model.config()));
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 1, 3);
        const auto d1 = infer_image(model, corpus.images[0]);
        const auto d2 = infer_image(back, corpus.images[0]);
        REQUIRE(d1.size() == d2.size());
        for (std::size_t i = 0; i < d1.size(); ++i) CHECK(d1[i].score == d2[i].score);
        fs::remove(path);
    }

    TEST_CASE("damaged files are reported")
    {
        UsisSam model(oracle::tiny_model_config());
        const auto path = fs::temp_directory_path() / "usis_ckpt_damaged.ckpt";

        CHECK_THROWS_AS(load_checkpoint("/nonexistent/usis.ckpt"), IoError);

        save_checkpoint(model, path);
        {
            auto bytes = read_all(path);
            bytes[0] = 'X';
            std::ofstream(path, std::ios::binary) << bytes;
        }
        CHECK_THROWS_AS(load_checkpoint(path), ParseError);

        save_checkpoint(model, path);
        {
            const auto bytes = read_all(path);
            std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 100);
        }
        CHECK_THROWS_AS(load_checkpoint(path), ParseError);

        save_checkpoint(model, path);
        edit_manifest(path, [](nlohmann::json& m) { m["backbone_hash"] = m["backbone_hash"].get<std::uint64_t>() + 1; });
        CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);

        save_checkpoint(model, path);
        edit_manifest(path, [](nlohmann::json& m) { m["params"][0]["shape"] = {1}; });
        CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);

        save_checkpoint(model, path);
        edit_manifest(path, [](nlohmann::json& m) { m["params"][0]["name"] = "encoder.block99.bogus"; });
        CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);

        save_checkpoint(model, path);
        edit_manifest(path, [](nlohmann::json& m) { m["params"].erase(0); });
        CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
        fs::remove(path);
    }
}
