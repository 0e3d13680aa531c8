// train.hpp
//
// AdamW over the trainable parameters and the training loop with a
// deterministic data order.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "usis/model.hpp"

namespace usis {

struct TrainConfig {
    int epochs = 5;
    double learning_rate = 1e-4;
    double weight_decay = 1e-3;
    int batch_size = 1;
    std::uint64_t seed = 0;
    std::string optimizer = "adamw";
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Stop after this many steps when > 0.
    int max_steps = 0;
    /// Keep the data order fixed instead of reshuffling each epoch.
    bool shuffle = true;

    void validate() const;
};

/// Decoupled weight decay Adam.
class AdamW {
public:
    AdamW(nn::ParamList params, const TrainConfig& cfg);

    void zero_grad();
    void step();
    std::int64_t steps() const { return t_; }

private:
    nn::ParamList params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_;
    double wd_;
    double beta1_;
    double beta2_;
    double eps_;
    std::int64_t t_ = 0;
};

struct StepLog {
    int step = 0;
    int epoch = 0;
    LossBreakdown loss;
};

nlohmann::json step_log_json(const StepLog& s);

using StepCallback = std::function<void(const StepLog&)>;

struct TrainResult {
    std::vector<StepLog> history;
};

/// Updates only the model's trainable parameters. Throws DivergenceError on
/// a non-finite loss.
TrainResult train(UsisSam& model, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

/// FNV-1a over the values of every frozen parameter.
std::uint64_t frozen_hash(const UsisSam& model);

} // namespace usis
