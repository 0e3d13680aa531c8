#include "usis/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "usis/error.hpp"

namespace usis::nn {

std::string to_string(ParamGroup g)
{
    switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Adapter: return "adapter";
    case ParamGroup::ChannelAdapter: return "channel_adapter";
    case ParamGroup::Sfpg: return "sfpg";
    case ParamGroup::Rpn: return "rpn";
    case ParamGroup::Decoder: return "decoder";
    }
    return "unknown";
}

Activation parse_activation(const std::string& name)
{
    if (name == "gelu") {
        return Activation::Gelu;
    }
    if (name == "relu") {
        return Activation::Relu;
    }
    throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a)
{
    return a == Activation::Gelu ? "gelu" : "relu";
}

Tensor activate(const Tensor& x, Activation a)
{
    return a == Activation::Gelu ? ops::gelu(x) : ops::relu(x);
}

Tensor random_tensor(Rng& rng, Shape shape, double stddev, bool trainable)
{
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) {
        x = rng.normal(0.0, stddev);
    }
    auto t = Tensor::from_vector(std::move(shape), std::move(v));
    t.set_requires_grad(trainable);
    return t;
}

Tensor constant_tensor(Shape shape, double value, bool trainable)
{
    auto t = Tensor::full(std::move(shape), value);
    t.set_requires_grad(trainable);
    return t;
}

namespace {

void push(ParamList& out, const std::string& name, ParamGroup group, const Tensor& t)
{
    if (t.defined()) {
        out.push_back({name, group, t});
    }
}

} // namespace

void Linear::collect(ParamList& out, const std::string& prefix, ParamGroup group) const
{
    push(out, prefix + ".weight", group, weight);
    push(out, prefix + ".bias", group, bias);
}

Linear make_linear(Rng& rng, int in, int out, bool trainable, double stddev)
{
    const double s = stddev > 0.0 ? stddev : 1.0 / std::sqrt(static_cast<double>(in));
    return {random_tensor(rng, {in, out}, s, trainable), constant_tensor({out}, 0.0, trainable)};
}

void LayerNorm::collect(ParamList& out, const std::string& prefix, ParamGroup group) const
{
    push(out, prefix + ".gamma", group, gamma);
    push(out, prefix + ".beta", group, beta);
}

LayerNorm make_layer_norm(int dim, bool trainable)
{
    return {constant_tensor({dim}, 1.0, trainable), constant_tensor({dim}, 0.0, trainable)};
}

void Conv2d::collect(ParamList& out, const std::string& prefix, ParamGroup group) const
{
    push(out, prefix + ".weight", group, weight);
    push(out, prefix + ".bias", group, bias);
}

Conv2d make_conv(Rng& rng, int in, int out, int kernel, bool trainable, double stddev)
{
    const double s = stddev > 0.0 ? stddev : 1.0 / std::sqrt(static_cast<double>(in) * kernel * kernel);
    return {random_tensor(rng, {out, in, kernel, kernel}, s, trainable), constant_tensor({out}, 0.0, trainable),
            kernel / 2};
}

void Upsample::collect(ParamList& out, const std::string& prefix, ParamGroup group) const
{
    push(out, prefix + ".weight", group, weight);
    push(out, prefix + ".bias", group, bias);
}

Upsample make_upsample(Rng& rng, int in, int out, int factor, bool trainable)
{
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    return {random_tensor(rng, {in, out, factor, factor}, s, trainable), constant_tensor({out}, 0.0, trainable),
            factor};
}

Tensor Attention::operator()(const Tensor& query, const Tensor& key, const Tensor& value) const
{
    if (query.rank() != 3 || key.rank() != 3 || value.rank() != 3) {
        throw ShapeError("attention: expects [batch, tokens, dim] inputs");
    }
    const auto b = query.dim(0);
    const auto tq = query.dim(1);
    const auto tk = key.dim(1);
    const auto d = q.weight.dim(1);
    const auto dh = d / heads;
    auto split = [&](const Tensor& x, std::int64_t t) {
        return ops::reshape(ops::permute(ops::reshape(x, {b, t, heads, dh}), {0, 2, 1, 3}), {b * heads, t, dh});
    };
    const auto qh = split(q(query), tq);
    const auto kh = split(k(key), tk);
    const auto vh = split(v(value), tk);
    const auto scores = ops::scale(ops::bmm(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    const auto mixed = ops::bmm(ops::softmax_lastdim(scores), vh);
    const auto merged = ops::reshape(ops::permute(ops::reshape(mixed, {b, heads, tq, dh}), {0, 2, 1, 3}), {b, tq, d});
    return out(merged);
}

void Attention::collect(ParamList& out_list, const std::string& prefix, ParamGroup group) const
{
    q.collect(out_list, prefix + ".q", group);
    k.collect(out_list, prefix + ".k", group);
    v.collect(out_list, prefix + ".v", group);
    out.collect(out_list, prefix + ".out", group);
}

Attention make_attention(Rng& rng, int dim, int heads, bool trainable)
{
    if (heads < 1 || dim % heads != 0) {
        throw std::invalid_argument("attention: dim must be divisible by heads");
    }
    Attention a;
    a.q = make_linear(rng, dim, dim, trainable);
    a.k = make_linear(rng, dim, dim, trainable);
    a.v = make_linear(rng, dim, dim, trainable);
    a.out = make_linear(rng, dim, dim, trainable);
    a.heads = heads;
    return a;
}

PositionEncoding::PositionEncoding(Rng& rng, int dim, double scale) : dim_(dim)
{
    if (dim < 2 || dim % 2 != 0) {
        throw std::invalid_argument("position encoding dim must be even");
    }
    gaussian_.resize(static_cast<std::size_t>(dim));
    for (auto& g : gaussian_) {
        g = scale * rng.normal();
    }
}

std::vector<double> PositionEncoding::encode(double x, double y) const
{
    const int half = dim_ / 2;
    std::vector<double> out(static_cast<std::size_t>(dim_));
    const double cx = 2.0 * x - 1.0;
    const double cy = 2.0 * y - 1.0;
    for (int i = 0; i < half; ++i) {
        const double proj = 2.0 * std::numbers::pi * (cx * gaussian_[i] + cy * gaussian_[half + i]);
        out[i] = std::sin(proj);
        out[half + i] = std::cos(proj);
    }
    return out;
}

std::vector<double> PositionEncoding::grid(int h, int w) const
{
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(h) * w * dim_);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const auto e = encode((c + 0.5) / w, (r + 0.5) / h);
            out.insert(out.end(), e.begin(), e.end());
        }
    }
    return out;
}

std::int64_t count_params(const ParamList& params)
{
    std::int64_t n = 0;
    for (const auto& p : params) {
        n += p.tensor.numel();
    }
    return n;
}

} // namespace usis::nn
