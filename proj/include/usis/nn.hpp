// nn.hpp
//
// Parameterized layers on top of ops.hpp plus the named-parameter registry
// used by the optimizer, freezing checks and checkpoints.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usis/ops.hpp"
#include "usis/random.hpp"
#include "usis/tensor.hpp"

namespace usis::nn {

enum class ParamGroup { Backbone, Adapter, ChannelAdapter, Sfpg, Rpn, Decoder };

std::string to_string(ParamGroup g);

struct NamedParam {
    std::string name;
    ParamGroup group;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

enum class Activation { Gelu, Relu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
Tensor activate(const Tensor& x, Activation a);

/// Weight tensor filled with N(0, std^2).
Tensor random_tensor(Rng& rng, Shape shape, double stddev, bool trainable);
Tensor constant_tensor(Shape shape, double value, bool trainable);

struct Linear {
    Tensor weight; // [in, out]
    Tensor bias;   // [out]

    Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

/// Weights N(0, 1/in) unless `stddev` > 0; zero bias.
Linear make_linear(Rng& rng, int in, int out, bool trainable, double stddev = 0.0);

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

LayerNorm make_layer_norm(int dim, bool trainable);

struct Conv2d {
    Tensor weight; // [out, in, k, k]
    Tensor bias;   // [out]
    int pad = 0;

    Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, pad); }
    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

/// Padding k/2; weights N(0, 1/(in*k*k)) unless `stddev` > 0.
Conv2d make_conv(Rng& rng, int in, int out, int kernel, bool trainable, double stddev = 0.0);

/// Transposed convolution with kernel == stride == factor.
struct Upsample {
    Tensor weight; // [in, out, f, f]
    Tensor bias;   // [out]
    int factor = 2;

    Tensor operator()(const Tensor& x) const { return ops::upsample_conv(x, weight, bias, factor); }
    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

Upsample make_upsample(Rng& rng, int in, int out, int factor, bool trainable);

/// Multi-head attention with separate q/k/v/out projections.
struct Attention {
    Linear q, k, v, out;
    int heads = 1;

    /// query [B, Tq, D], key/value [B, Tk, D] -> [B, Tq, D].
    Tensor operator()(const Tensor& query, const Tensor& key, const Tensor& value) const;
    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

Attention make_attention(Rng& rng, int dim, int heads, bool trainable);

/// Random Fourier features of normalized 2-D coordinates, as in promptable
/// segmenters. The gaussian matrix is fixed at construction.
class PositionEncoding {
public:
    PositionEncoding() = default;
    PositionEncoding(Rng& rng, int dim, double scale = 1.0);

    int dim() const { return dim_; }
    /// (x, y) in [0, 1] -> dim values.
    std::vector<double> encode(double x, double y) const;
    /// Cell-center encodings of an h x w grid, [h*w, dim] row-major.
    std::vector<double> grid(int h, int w) const;

private:
    int dim_ = 0;
    std::vector<double> gaussian_; // [2, dim/2]
};

std::int64_t count_params(const ParamList& params);

} // namespace usis::nn
