#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "usis/config.hpp"
#include "usis/error.hpp"

using namespace usis;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text)
{
    const auto p = std::filesystem::temp_directory_path() / name;
    std::ofstream(p) << text;
    return p;
}

const std::filesystem::path kConfigs = std::filesystem::path(USIS_SOURCE_DIR) / "configs";

} // namespace

TEST_SUITE("config")
{
    TEST_CASE("shipped configs load")
    {
        const auto smoke = load_run_config(kConfigs / "smoke.yaml");
        CHECK(smoke.model.encoder.dim == 192);
        CHECK(smoke.model.encoder.depth == 12);
        CHECK(plan_replacement(smoke.model.encoder) == std::vector<int>{8, 10, 12});
        CHECK(smoke.train.epochs == 5);
        CHECK(smoke.train.learning_rate == 1e-4);
        CHECK(smoke.data.synthetic_count == 200);
        CHECK(smoke.model.sfpg.lambda == 0.8);
        CHECK(smoke.data.synth.attenuation[0] == 0.55);

        const auto tiny = load_run_config(kConfigs / "tiny.yaml");
        CHECK(tiny.seed == 3);
        CHECK(tiny.model.seed == 3);
        CHECK(tiny.train.seed == 3);
        CHECK(tiny.train.max_steps == 6);
    }

    TEST_CASE("JSON round trip")
    {
        auto c = load_run_config(kConfigs / "tiny.yaml");
        c.model.rpn.ratios = {0.5, 1.0, 2.0};
        c.model.encoder.adapter_activation = nn::Activation::Relu;
        const auto j = run_config_to_json(c);
        const auto back = run_config_from_json(j);
        CHECK(run_config_to_json(back) == j);
        CHECK(model_config_to_json(model_config_from_json(model_config_to_json(c.model))) ==
              model_config_to_json(c.model));
    }

    TEST_CASE("defaults when sections are missing")
    {
        const auto c = run_config_from_json(yaml_to_json("seed: 4\n"));
        CHECK(c.model.encoder.dim == EncoderConfig{}.dim);
        CHECK(c.train.seed == 4);
        CHECK(run_config_from_json(nlohmann::json{}).seed == 0);
    }

    TEST_CASE("YAML scalars")
    {
        const auto j = yaml_to_json("a: 3\nb: 2.5\nc: true\nd: \"7\"\ne: gelu\nf: [1, 2]\n");
        CHECK(j["a"] == 3);
        CHECK(j["b"] == 2.5);
        CHECK(j["c"] == true);
        CHECK(j["d"] == "7");
        CHECK(j["e"] == "gelu");
        CHECK(j["f"].size() == 2);
    }

    TEST_CASE("bad configs are rejected")
    {
        CHECK_THROWS_AS(run_config_from_json(yaml_to_json("model:\n  encoder:\n    dimm: 3\n")), ParseError);
        CHECK_THROWS_AS(run_config_from_json(yaml_to_json("train:\n  epochs: many\n")), ParseError);
        CHECK_THROWS_AS(run_config_from_json(yaml_to_json("train:\n  epochs: -1\n")), ParseError);
        CHECK_THROWS_AS(run_config_from_json(yaml_to_json("model:\n  sfpg:\n    lambda: 2\n")), ParseError);
        CHECK_THROWS_AS(run_config_from_json(yaml_to_json("train: 3\n")), ParseError);
        CHECK_THROWS_AS(run_config_from_json(yaml_to_json("model:\n  encoder:\n    adapter_activation: tanh\n")),
                        ParseError);
        CHECK_THROWS_AS(yaml_to_json("a: [1, 2\n"), ParseError);
        const auto p = write_temp("usis_bad_config.yaml", "seed: -\n  x: [\n");
        CHECK_THROWS_AS(load_run_config(p), ParseError);
        std::filesystem::remove(p);
        CHECK_THROWS_AS(load_run_config("/nonexistent/usis.yaml"), IoError);
    }

    TEST_CASE("backbone hash tracks frozen fields only")
    {
        EncoderConfig a;
        EncoderConfig b = a;
        b.adapter_bottleneck = 16;
        b.channel_reduction = 8;
        CHECK(backbone_config_hash(a) == backbone_config_hash(b));
        b.backbone_seed = 8;
        CHECK(backbone_config_hash(a) != backbone_config_hash(b));
        b = a;
        b.depth = 11;
        CHECK(backbone_config_hash(a) != backbone_config_hash(b));
    }
}
