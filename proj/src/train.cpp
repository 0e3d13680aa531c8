#include "usis/train.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "usis/error.hpp"

namespace usis {

void TrainConfig::validate() const
{
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("train config: learning rate must be positive");
    }
    if (weight_decay < 0.0 || epochs < 0 || batch_size < 1 || max_steps < 0) {
        throw std::invalid_argument("train config: weight decay, epochs, batch size and max steps must be valid");
    }
    if (optimizer != "adamw") {
        throw std::invalid_argument("train config: unsupported optimizer '" + optimizer + "'");
    }
}

AdamW::AdamW(nn::ParamList params, const TrainConfig& cfg)
    : params_(std::move(params)), lr_(cfg.learning_rate), wd_(cfg.weight_decay), beta1_(cfg.beta1),
      beta2_(cfg.beta2), eps_(cfg.eps)
{
    for (const auto& p : params_) {
        if (!p.tensor.requires_grad()) {
            throw std::invalid_argument("optimizer given frozen parameter " + p.name);
        }
        m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    }
}

void AdamW::zero_grad()
{
    for (auto& p : params_) {
        p.tensor.zero_grad();
    }
}

void AdamW::step()
{
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& t = params_[k].tensor;
        const auto g = t.grad();
        if (g.empty()) {
            continue; // parameter unused this step
        }
        auto w = t.mutable_values();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            w[i] -= lr_ * (update + wd_ * w[i]);
        }
    }
}

nlohmann::json step_log_json(const StepLog& s)
{
    return {{"schema_version", 1},     {"step", s.step},
            {"epoch", s.epoch},        {"rpn_loss", s.loss.rpn_loss},
            {"cls_loss", s.loss.cls_loss}, {"reg_loss", s.loss.reg_loss},
            {"seg_loss", s.loss.seg_loss}, {"total", s.loss.total}};
}

TrainResult train(UsisSam& model, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                  const StepCallback& on_step)
{
    cfg.validate();
    if (data.empty()) {
        throw std::invalid_argument("train: dataset is empty");
    }
    AdamW opt(model.trainable_parameters(), cfg);
    TrainResult result;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(mix_seed(cfg.seed, 0x5eed));
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) {
            order_rng.shuffle(order.begin(), order.end());
        }
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            if (cfg.max_steps > 0 && step >= cfg.max_steps) {
                return result;
            }
            std::vector<TrainSample> batch;
            for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j) {
                batch.push_back(data[order[j]]);
            }
            Rng sample_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step) + 1));
            opt.zero_grad();
            auto loss = batch_loss(model, batch, sample_rng);
            if (!std::isfinite(loss.total)) {
                throw DivergenceError("non-finite loss at step " + std::to_string(step + 1) + " (rpn " +
                                      std::to_string(loss.rpn_loss) + ", cls " + std::to_string(loss.cls_loss) +
                                      ", reg " + std::to_string(loss.reg_loss) + ", seg " +
                                      std::to_string(loss.seg_loss) + ")");
            }
            loss.total_tensor.backward();
            opt.step();
            loss.total_tensor = Tensor();
            ++step;
            StepLog log{step, epoch + 1, loss};
            if (on_step) {
                on_step(log);
            }
            result.history.push_back(std::move(log));
        }
    }
    return result;
}

std::uint64_t frozen_hash(const UsisSam& model)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : model.parameters()) {
        if (p.tensor.requires_grad()) {
            continue;
        }
        for (double v : p.tensor.values()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof v);
            for (unsigned char b : bytes) {
                h = (h ^ b) * 0x100000001b3ULL;
            }
        }
    }
    return h;
}

} // namespace usis
