#include <doctest.h>

#include <cmath>
#include <map>

#include "oracles.hpp"
#include "tiny_model.hpp"
#include "usis/error.hpp"
#include "usis/train.hpp"

using namespace usis;

namespace {

std::map<std::string, std::vector<double>> snapshot(const UsisSam& m)
{
    std::map<std::string, std::vector<double>> out;
    for (const auto& p : m.parameters()) out[p.name].assign(p.tensor.values().begin(), p.tensor.values().end());
    return out;
}

} // namespace

TEST_SUITE("train")
{
    TEST_CASE("AdamW matches a hand-rolled update")
    {
        auto w = Tensor::parameter({2}, {1.0, -2.0});
        TrainConfig cfg;
        cfg.learning_rate = 0.1;
        cfg.weight_decay = 0.01;
        AdamW opt({{"w", nn::ParamGroup::Adapter, w}}, cfg);
        double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
        for (int t = 1; t <= 3; ++t) {
            opt.zero_grad();
            ops::sum(ops::mul(w, w)).backward(); // grad 2w
            opt.step();
            for (int i = 0; i < 2; ++i) {
                const double g = 2 * x[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                const double mh = m[i] / (1 - std::pow(0.9, t));
                const double vh = v[i] / (1 - std::pow(0.999, t));
                x[i] -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * x[i]);
            }
            CHECK(w.at(0) == doctest::Approx(x[0]).epsilon(1e-12));
            CHECK(w.at(1) == doctest::Approx(x[1]).epsilon(1e-12));
        }
        CHECK(opt.steps() == 3);
    }

    TEST_CASE("frozen weights stay bit-identical and every trainable group moves")
    {
        UsisSam model(oracle::tiny_model_config());
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 3, 2);
        const auto samples = prepare_samples(model, corpus.dataset, corpus.images);
        const auto before = snapshot(model);
        const auto hash = frozen_hash(model);
        TrainConfig cfg;
        cfg.max_steps = 4;
        cfg.learning_rate = 1e-3;
        train(model, samples, cfg);
        CHECK(frozen_hash(model) == hash);
        const auto after = snapshot(model);
        std::map<nn::ParamGroup, bool> moved;
        for (const auto& p : model.parameters()) {
            const bool changed = before.at(p.name) != after.at(p.name);
            if (p.group == nn::ParamGroup::Backbone) {
                CHECK_MESSAGE(!changed, p.name);
            } else {
                moved[p.group] = moved[p.group] || changed;
            }
        }
        for (auto g : {nn::ParamGroup::Adapter, nn::ParamGroup::ChannelAdapter, nn::ParamGroup::Sfpg,
                       nn::ParamGroup::Rpn, nn::ParamGroup::Decoder}) {
            CHECK_MESSAGE(moved[g], nn::to_string(g));
        }
    }

    TEST_CASE("same seed and data give the same history")
    {
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 3, 6);
        TrainConfig cfg;
        cfg.max_steps = 3;
        cfg.seed = 5;
        std::vector<double> runs[2];
        for (auto& r : runs) {
            UsisSam model(oracle::tiny_model_config());
            const auto samples = prepare_samples(model, corpus.dataset, corpus.images);
            for (const auto& s : train(model, samples, cfg).history) r.push_back(s.loss.total);
        }
        CHECK(runs[0].size() == 3);
        CHECK(runs[0] == runs[1]);
    }

    TEST_CASE("step callback and epochs")
    {
        UsisSam model(oracle::tiny_model_config());
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 3, 1);
        const auto samples = prepare_samples(model, corpus.dataset, corpus.images);
        TrainConfig cfg;
        cfg.epochs = 2;
        cfg.batch_size = 2;
        std::vector<int> epochs;
        const auto r = train(model, samples, cfg, [&](const StepLog& s) { epochs.push_back(s.epoch); });
        // Two batches per epoch (2 + 1 samples).
        CHECK(epochs == std::vector<int>{1, 1, 2, 2});
        CHECK(r.history.size() == 4);
        const auto j = step_log_json(r.history.back());
        CHECK(j["step"] == 4);
        CHECK(j.contains("seg_loss"));
    }

    TEST_CASE("a non-finite loss aborts training")
    {
        UsisSam model(oracle::tiny_model_config());
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 1, 1);
        const auto samples = prepare_samples(model, corpus.dataset, corpus.images);
        model.rpn.objectness.bias.mutable_values()[0] = std::nan("");
        TrainConfig cfg;
        cfg.max_steps = 2;
        CHECK_THROWS_AS(train(model, samples, cfg), DivergenceError);
    }

    TEST_CASE("overfitting one repeated sample")
    {
        UsisSam model(oracle::tiny_model_config(2));
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 1, 12);
        const auto samples = prepare_samples(model, corpus.dataset, corpus.images);
        TrainConfig cfg;
        cfg.epochs = 50;
        cfg.learning_rate = 1e-3;
        const auto h = train(model, samples, cfg).history;
        REQUIRE(h.size() == 50);
        CHECK(h.back().loss.total <= 0.5 * h.front().loss.total);
    }

    TEST_CASE("config validation")
    {
        TrainConfig cfg;
        cfg.optimizer = "sgd";
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
        cfg = {};
        cfg.learning_rate = -1;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
}
