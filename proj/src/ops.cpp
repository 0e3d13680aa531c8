#include "usis/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "usis/error.hpp"
#include "usis/kernels.hpp"

namespace usis::ops {

using detail::Node;
using kernels::Trans;

namespace {

std::vector<double>* grad_slot(Node& self, std::size_t i)
{
    auto& in = self.inputs[i];
    return (in && in->requires_grad) ? &in->ensure_grad() : nullptr;
}

const std::vector<double>& input_value(const Node& self, std::size_t i)
{
    return self.inputs[i]->value;
}

void require(bool cond, const std::string& what)
{
    if (!cond) {
        throw ShapeError(what);
    }
}

// b broadcasts onto a when b's shape (minus leading ones) is a suffix of a's.
void check_broadcast(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.shape() == b.shape()) {
        return;
    }
    Shape bs = b.shape();
    while (!bs.empty() && bs.front() == 1) {
        bs.erase(bs.begin());
    }
    const auto& as = a.shape();
    bool ok = bs.size() <= as.size() && b.numel() > 0;
    for (std::size_t i = 0; ok && i < bs.size(); ++i) {
        ok = as[as.size() - bs.size() + i] == bs[i];
    }
    require(ok, std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd dfdx)
{
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = fwd(xv[i]);
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
        auto* gx = grad_slot(self, 0);
        if (!gx) {
            return;
        }
        const auto& xv = input_value(self, 0);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            (*gx)[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
        }
    });
}

double normal_cdf(double x)
{
    return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double normal_pdf(double x)
{
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b)
{
    check_broadcast(a, b, "add");
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t nb = bv.size();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = av[i] + bv[i % nb];
    }
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [nb](Node& self) {
        if (auto* ga = grad_slot(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*ga)[i] += self.grad[i];
            }
        }
        if (auto* gb = grad_slot(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*gb)[i % nb] += self.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    return add(a, scale(b, -1.0));
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    check_broadcast(a, b, "mul");
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t nb = bv.size();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = av[i] * bv[i % nb];
    }
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [nb](Node& self) {
        const auto& av = input_value(self, 0);
        const auto& bv = input_value(self, 1);
        if (auto* ga = grad_slot(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*ga)[i] += self.grad[i] * bv[i % nb];
            }
        }
        if (auto* gb = grad_slot(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*gb)[i % nb] += self.grad[i] * av[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double s)
{
    return unary(
        a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s)
{
    return unary(
        a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x)
{
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x)
{
    return unary(
        x, [](double v) { return v * normal_cdf(v); },
        [](double v, double) { return normal_cdf(v) + v * normal_pdf(v); });
}

Tensor sigmoid(const Tensor& x)
{
    return unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor reshape(const Tensor& x, Shape shape)
{
    require(shape_numel(shape) == x.numel(),
            "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.values().begin(), x.values().end());
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*gx)[i] += self.grad[i];
            }
        }
    });
}

Tensor permute(const Tensor& x, const std::vector<int>& axes)
{
    const int r = x.rank();
    require(static_cast<int>(axes.size()) == r, "permute: axis count mismatch");
    std::vector<int> seen(static_cast<std::size_t>(r), 0);
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        require(axes[i] >= 0 && axes[i] < r && !seen[axes[i]], "permute: invalid axes");
        seen[axes[i]] = 1;
        out_shape[i] = x.shape()[axes[i]];
    }
    std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) {
        in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
    }
    // For each output flat index, the matching input flat index.
    const auto n = static_cast<std::size_t>(x.numel());
    auto src = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::int64_t off = 0;
        for (int i = 0; i < r; ++i) {
            off += idx[i] * in_strides[axes[i]];
        }
        (*src)[o] = static_cast<std::size_t>(off);
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) {
                break;
            }
            idx[i] = 0;
        }
    }
    const auto xv = x.values();
    std::vector<double> out(n);
    for (std::size_t o = 0; o < n; ++o) {
        out[o] = xv[(*src)[o]];
    }
    return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [src](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            for (std::size_t o = 0; o < self.grad.size(); ++o) {
                (*gx)[(*src)[o]] += self.grad[o];
            }
        }
    });
}

Tensor index_rows(const Tensor& x, std::span<const std::int64_t> rows)
{
    require(x.rank() >= 1, "index_rows: scalar input");
    const std::int64_t n = x.dim(0);
    const std::size_t row = n == 0 ? 0 : static_cast<std::size_t>(x.numel() / n);
    std::vector<std::int64_t> idx(rows.begin(), rows.end());
    Shape shape = x.shape();
    shape[0] = static_cast<std::int64_t>(idx.size());
    std::vector<double> out(idx.size() * row);
    const auto xv = x.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < n, "index_rows: row " + std::to_string(idx[i]) + " out of range");
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                    out.begin() + static_cast<std::ptrdiff_t>(i * row));
    }
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [idx, row](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                for (std::size_t k = 0; k < row; ++k) {
                    (*gx)[static_cast<std::size_t>(idx[i]) * row + k] += self.grad[i * row + k];
                }
            }
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts)
{
    require(!parts.empty(), "concat_rows: no inputs");
    Shape shape = parts.front().shape();
    require(!shape.empty(), "concat_rows: scalar input");
    std::int64_t rows = 0;
    std::vector<double> out;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        require(p.rank() == static_cast<int>(shape.size()) &&
                    std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
                "concat_rows: trailing shapes differ");
        offsets.push_back(out.size());
        rows += p.dim(0);
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    shape[0] = rows;
    return Tensor::make_result(std::move(shape), std::move(out), parts, [offsets](Node& self) {
        for (std::size_t i = 0; i < offsets.size(); ++i) {
            if (auto* g = grad_slot(self, i)) {
                for (std::size_t k = 0; k < g->size(); ++k) {
                    (*g)[k] += self.grad[offsets[i] + k];
                }
            }
        }
    });
}

Tensor repeat_rows(const Tensor& x, std::int64_t n)
{
    require(x.rank() >= 1 && x.dim(0) == 1, "repeat_rows: leading dim must be 1");
    Shape shape = x.shape();
    shape[0] = n;
    const auto xv = x.values();
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n) * xv.size());
    for (std::int64_t i = 0; i < n; ++i) {
        out.insert(out.end(), xv.begin(), xv.end());
    }
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            const std::size_t m = gx->size();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*gx)[i % m] += self.grad[i];
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias)
{
    require(w.rank() == 2, "linear: weight must be [in, out]");
    const int in = static_cast<int>(w.dim(0));
    const int out_dim = static_cast<int>(w.dim(1));
    require(x.rank() >= 1 && x.dim(-1) == in,
            "linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
    const bool has_bias = bias.defined();
    require(!has_bias || bias.numel() == out_dim, "linear: bias size mismatch");
    const int m = static_cast<int>(x.numel() / in);
    Shape shape = x.shape();
    shape.back() = out_dim;
    std::vector<double> out(static_cast<std::size_t>(m) * out_dim);
    if (has_bias) {
        const auto bv = bias.values();
        for (int i = 0; i < m; ++i) {
            std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(i) * out_dim);
        }
    }
    kernels::gemm(Trans::No, Trans::No, m, out_dim, in, x.values(), w.values(), out, has_bias);
    return Tensor::make_result(std::move(shape), std::move(out), {x, w, bias}, [m, in, out_dim](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            kernels::gemm(Trans::No, Trans::Yes, m, in, out_dim, self.grad, input_value(self, 1), *gx, true);
        }
        if (auto* gw = grad_slot(self, 1)) {
            kernels::gemm(Trans::Yes, Trans::No, in, out_dim, m, input_value(self, 0), self.grad, *gw, true);
        }
        if (auto* gb = grad_slot(self, 2)) {
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < out_dim; ++j) {
                    (*gb)[j] += self.grad[static_cast<std::size_t>(i) * out_dim + j];
                }
            }
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b)
{
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    return linear(a, b, Tensor());
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b)
{
    require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "bmm: expects two rank-3 tensors with equal batch");
    const int batch = static_cast<int>(a.dim(0));
    const int m = static_cast<int>(a.dim(1));
    const int k = static_cast<int>(a.dim(2));
    const int n = static_cast<int>(transpose_b ? b.dim(1) : b.dim(2));
    require((transpose_b ? b.dim(2) : b.dim(1)) == k,
            "bmm: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(batch) * m * n);
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t sa = static_cast<std::size_t>(m) * k;
    const std::size_t sb = static_cast<std::size_t>(k) * n;
    const std::size_t sc = static_cast<std::size_t>(m) * n;
    const Trans tb = transpose_b ? Trans::Yes : Trans::No;
    for (int i = 0; i < batch; ++i) {
        kernels::gemm(Trans::No, tb, m, n, k, av.subspan(i * sa, sa), bv.subspan(i * sb, sb),
                      std::span<double>(out).subspan(i * sc, sc));
    }
    return Tensor::make_result({batch, m, n}, std::move(out), {a, b},
                               [=](Node& self) {
                                   const auto& av = input_value(self, 0);
                                   const auto& bv = input_value(self, 1);
                                   std::span<const double> g(self.grad);
                                   auto* ga = grad_slot(self, 0);
                                   auto* gb = grad_slot(self, 1);
                                   for (int i = 0; i < batch; ++i) {
                                       const auto gi = g.subspan(i * sc, sc);
                                       if (ga) {
                                           // dA = dC * op(B)^T
                                           kernels::gemm(Trans::No, transpose_b ? Trans::No : Trans::Yes, m, k, n, gi,
                                                         std::span<const double>(bv).subspan(i * sb, sb),
                                                         std::span<double>(*ga).subspan(i * sa, sa), true);
                                       }
                                       if (gb) {
                                           auto gbi = std::span<double>(*gb).subspan(i * sb, sb);
                                           const auto ai = std::span<const double>(av).subspan(i * sa, sa);
                                           if (transpose_b) {
                                               // B is [n, k]: dB = dC^T * A
                                               kernels::gemm(Trans::Yes, Trans::No, n, k, m, gi, ai, gbi, true);
                                           } else {
                                               kernels::gemm(Trans::Yes, Trans::No, k, n, m, ai, gi, gbi, true);
                                           }
                                       }
                                   }
                               });
}

Tensor softmax_lastdim(const Tensor& x)
{
    require(x.rank() >= 1, "softmax: scalar input");
    const auto d = static_cast<std::size_t>(x.dim(-1));
    const std::size_t rows = d == 0 ? 0 : static_cast<std::size_t>(x.numel()) / d;
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * d;
        double* o = out.data() + r * d;
        const double mx = *std::max_element(in, in + d);
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            total += o[j];
        }
        for (std::size_t j = 0; j < d; ++j) {
            o[j] /= total;
        }
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, d](Node& self) {
        auto* gx = grad_slot(self, 0);
        if (!gx) {
            return;
        }
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * d;
            const double* g = self.grad.data() + r * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dot += g[j] * y[j];
            }
            for (std::size_t j = 0; j < d; ++j) {
                (*gx)[r * d + j] += y[j] * (g[j] - dot);
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps)
{
    const auto d = static_cast<std::size_t>(x.dim(-1));
    require(gamma.numel() == static_cast<std::int64_t>(d) && beta.numel() == static_cast<std::int64_t>(d),
            "layer_norm: affine size mismatch");
    const std::size_t rows = static_cast<std::size_t>(x.numel()) / d;
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += in[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += (in[j] - mu) * (in[j] - mu);
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (in[j] - mu) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return Tensor::make_result(x.shape(), std::move(out), {x, gamma, beta}, [=](Node& self) {
        const auto& gv = input_value(self, 1);
        auto* gx = grad_slot(self, 0);
        auto* gg = grad_slot(self, 1);
        auto* gb = grad_slot(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * d;
            const double* h = xhat->data() + r * d;
            if (gg || gb) {
                for (std::size_t j = 0; j < d; ++j) {
                    if (gg) {
                        (*gg)[j] += g[j] * h[j];
                    }
                    if (gb) {
                        (*gb)[j] += g[j];
                    }
                }
            }
            if (gx) {
                double mean_dh = 0.0;
                double mean_dh_h = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dh = g[j] * gv[j];
                    mean_dh += dh;
                    mean_dh_h += dh * h[j];
                }
                mean_dh /= static_cast<double>(d);
                mean_dh_h /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dh = g[j] * gv[j];
                    (*gx)[r * d + j] += (*inv_std)[r] * (dh - mean_dh - h[j] * mean_dh_h);
                }
            }
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad)
{
    require(x.rank() == 4 && w.rank() == 4 && w.dim(2) == w.dim(3),
            "conv2d: expects NCHW input and square [Cout, Cin, k, k] weight");
    require(x.dim(1) == w.dim(1), "conv2d: channel mismatch, input " + shape_str(x.shape()) + " weight " +
                                      shape_str(w.shape()));
    kernels::ConvShape s;
    s.batch = static_cast<int>(x.dim(0));
    s.in_channels = static_cast<int>(x.dim(1));
    s.height = static_cast<int>(x.dim(2));
    s.width = static_cast<int>(x.dim(3));
    s.out_channels = static_cast<int>(w.dim(0));
    s.kernel = static_cast<int>(w.dim(2));
    s.pad = pad;
    require(s.out_height() >= 1 && s.out_width() >= 1, "conv2d: input smaller than kernel");
    require(!bias.defined() || bias.numel() == s.out_channels, "conv2d: bias size mismatch");
    std::vector<double> out(static_cast<std::size_t>(s.batch) * s.out_channels * s.out_height() * s.out_width());
    kernels::conv2d_forward(s, x.values(), w.values(),
                            bias.defined() ? bias.values() : std::span<const double>(), out);
    return Tensor::make_result({s.batch, s.out_channels, s.out_height(), s.out_width()}, std::move(out), {x, w, bias},
                               [s](Node& self) {
                                   if (auto* gx = grad_slot(self, 0)) {
                                       kernels::conv2d_backward_input(s, self.grad, input_value(self, 1), *gx);
                                   }
                                   auto* gw = grad_slot(self, 1);
                                   auto* gb = grad_slot(self, 2);
                                   if (gw) {
                                       kernels::conv2d_backward_weight(
                                           s, input_value(self, 0), self.grad, *gw,
                                           gb ? std::span<double>(*gb) : std::span<double>());
                                   } else if (gb) {
                                       const std::size_t plane = static_cast<std::size_t>(s.out_height()) * s.out_width();
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                           (*gb)[(i / plane) % s.out_channels] += self.grad[i];
                                       }
                                   }
                               });
}

Tensor upsample_conv(const Tensor& x, const Tensor& w, const Tensor& bias, int factor)
{
    require(x.rank() == 4 && w.rank() == 4 && w.dim(2) == factor && w.dim(3) == factor,
            "upsample_conv: expects NCHW input and [Cin, Cout, f, f] weight");
    require(x.dim(1) == w.dim(0), "upsample_conv: channel mismatch");
    kernels::UpsampleShape s;
    s.batch = static_cast<int>(x.dim(0));
    s.in_channels = static_cast<int>(x.dim(1));
    s.height = static_cast<int>(x.dim(2));
    s.width = static_cast<int>(x.dim(3));
    s.out_channels = static_cast<int>(w.dim(1));
    s.factor = factor;
    require(!bias.defined() || bias.numel() == s.out_channels, "upsample_conv: bias size mismatch");
    std::vector<double> out(static_cast<std::size_t>(s.batch) * s.out_channels * s.height * factor * s.width * factor);
    kernels::upsample_forward(s, x.values(), w.values(), bias.defined() ? bias.values() : std::span<const double>(),
                              out);
    return Tensor::make_result({s.batch, s.out_channels, s.height * factor, s.width * factor}, std::move(out),
                               {x, w, bias}, [s](Node& self) {
                                   if (auto* gx = grad_slot(self, 0)) {
                                       kernels::upsample_backward_input(s, self.grad, input_value(self, 1), *gx);
                                   }
                                   auto* gw = grad_slot(self, 1);
                                   auto* gb = grad_slot(self, 2);
                                   if (gw) {
                                       kernels::upsample_backward_weight(
                                           s, input_value(self, 0), self.grad, *gw,
                                           gb ? std::span<double>(*gb) : std::span<double>());
                                   } else if (gb) {
                                       const std::size_t plane =
                                           static_cast<std::size_t>(s.height) * s.factor * s.width * s.factor;
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                           (*gb)[(i / plane) % s.out_channels] += self.grad[i];
                                       }
                                   }
                               });
}

Tensor patchify(const Tensor& x, int patch)
{
    require(x.rank() == 4, "patchify: expects NCHW input");
    const auto b = x.dim(0);
    const auto c = x.dim(1);
    const auto h = x.dim(2);
    const auto w = x.dim(3);
    require(patch > 0 && h % patch == 0 && w % patch == 0,
            "patchify: image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                std::to_string(patch));
    // [B, C, gh, p, gw, p] -> [B, gh, gw, C, p, p]
    const auto gh = h / patch;
    const auto gw = w / patch;
    auto t = reshape(x, {b, c, gh, patch, gw, patch});
    t = permute(t, {0, 2, 4, 1, 3, 5});
    return reshape(t, {b, gh * gw, c * patch * patch});
}

Tensor tokens_to_grid(const Tensor& tokens, int h, int w)
{
    require(tokens.rank() == 3 && tokens.dim(1) == static_cast<std::int64_t>(h) * w,
            "tokens_to_grid: token count does not match grid");
    auto t = reshape(tokens, {tokens.dim(0), h, w, tokens.dim(2)});
    return permute(t, {0, 3, 1, 2});
}

Tensor grid_to_tokens(const Tensor& grid)
{
    require(grid.rank() == 4, "grid_to_tokens: expects NCHW");
    auto t = permute(grid, {0, 2, 3, 1});
    return reshape(t, {grid.dim(0), grid.dim(2) * grid.dim(3), grid.dim(1)});
}

Tensor channel_mean(const Tensor& x)
{
    require(x.rank() == 4, "channel_mean: expects NCHW");
    const auto bc = static_cast<std::size_t>(x.dim(0) * x.dim(1));
    const auto plane = static_cast<std::size_t>(x.dim(2) * x.dim(3));
    require(plane > 0, "channel_mean: empty spatial extent");
    const auto xv = x.values();
    std::vector<double> out(bc, 0.0);
    for (std::size_t i = 0; i < bc; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < plane; ++k) {
            acc += xv[i * plane + k];
        }
        out[i] = acc / static_cast<double>(plane);
    }
    return Tensor::make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [bc, plane](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            for (std::size_t i = 0; i < bc; ++i) {
                const double g = self.grad[i] / static_cast<double>(plane);
                for (std::size_t k = 0; k < plane; ++k) {
                    (*gx)[i * plane + k] += g;
                }
            }
        }
    });
}

Tensor channel_scale(const Tensor& x, const Tensor& g)
{
    require(x.rank() == 4 && g.rank() == 2 && g.dim(0) == x.dim(0) && g.dim(1) == x.dim(1),
            "channel_scale: gate " + shape_str(g.shape()) + " does not match " + shape_str(x.shape()));
    const auto bc = static_cast<std::size_t>(x.dim(0) * x.dim(1));
    const auto plane = static_cast<std::size_t>(x.dim(2) * x.dim(3));
    const auto xv = x.values();
    const auto gv = g.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < bc; ++i) {
        for (std::size_t k = 0; k < plane; ++k) {
            out[i * plane + k] = xv[i * plane + k] * gv[i];
        }
    }
    return Tensor::make_result(x.shape(), std::move(out), {x, g}, [bc, plane](Node& self) {
        const auto& xv = input_value(self, 0);
        const auto& gv = input_value(self, 1);
        auto* gx = grad_slot(self, 0);
        auto* gg = grad_slot(self, 1);
        for (std::size_t i = 0; i < bc; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < plane; ++k) {
                const double d = self.grad[i * plane + k];
                if (gx) {
                    (*gx)[i * plane + k] += d * gv[i];
                }
                acc += d * xv[i * plane + k];
            }
            if (gg) {
                (*gg)[i] += acc;
            }
        }
    });
}

Tensor channel_add(const Tensor& x, const Tensor& g)
{
    require(x.rank() == 4 && g.rank() == 2 && g.dim(0) == x.dim(0) && g.dim(1) == x.dim(1),
            "channel_add: shape mismatch");
    const auto bc = static_cast<std::size_t>(x.dim(0) * x.dim(1));
    const auto plane = static_cast<std::size_t>(x.dim(2) * x.dim(3));
    const auto xv = x.values();
    const auto gv = g.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < bc; ++i) {
        for (std::size_t k = 0; k < plane; ++k) {
            out[i * plane + k] = xv[i * plane + k] + gv[i];
        }
    }
    return Tensor::make_result(x.shape(), std::move(out), {x, g}, [bc, plane](Node& self) {
        auto* gx = grad_slot(self, 0);
        auto* gg = grad_slot(self, 1);
        for (std::size_t i = 0; i < bc; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < plane; ++k) {
                const double d = self.grad[i * plane + k];
                if (gx) {
                    (*gx)[i * plane + k] += d;
                }
                acc += d;
            }
            if (gg) {
                (*gg)[i] += acc;
            }
        }
    });
}

namespace {

struct BilinearTap {
    std::size_t index[4];
    double weight[4];
};

BilinearTap bilinear_tap(double y, double x, int h, int w)
{
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const int y1 = std::min(y0 + 1, h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const double ly = y - y0;
    const double lx = x - x0;
    BilinearTap t{};
    t.index[0] = static_cast<std::size_t>(y0) * w + x0;
    t.index[1] = static_cast<std::size_t>(y0) * w + x1;
    t.index[2] = static_cast<std::size_t>(y1) * w + x0;
    t.index[3] = static_cast<std::size_t>(y1) * w + x1;
    t.weight[0] = (1 - ly) * (1 - lx);
    t.weight[1] = (1 - ly) * lx;
    t.weight[2] = ly * (1 - lx);
    t.weight[3] = ly * lx;
    return t;
}

} // namespace

Tensor roi_align(const Tensor& feature, std::span<const RoiBox> boxes, int out_size)
{
    require(feature.rank() == 4 && feature.dim(0) == 1, "roi_align: expects a single-image NCHW map");
    require(out_size > 0, "roi_align: output size must be positive");
    const int c = static_cast<int>(feature.dim(1));
    const int h = static_cast<int>(feature.dim(2));
    const int w = static_cast<int>(feature.dim(3));
    const std::size_t bins = static_cast<std::size_t>(out_size) * out_size;
    // Taps depend only on geometry; shared by forward and backward.
    auto taps = std::make_shared<std::vector<BilinearTap>>();
    taps->reserve(boxes.size() * bins);
    for (const auto& b : boxes) {
        const double bh = (b.y1 - b.y0) / out_size;
        const double bw = (b.x1 - b.x0) / out_size;
        for (int i = 0; i < out_size; ++i) {
            for (int j = 0; j < out_size; ++j) {
                // Continuous coordinate u maps to pixel index u - 0.5.
                taps->push_back(bilinear_tap(b.y0 + (i + 0.5) * bh - 0.5, b.x0 + (j + 0.5) * bw - 0.5, h, w));
            }
        }
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const auto fv = feature.values();
    const std::size_t p_count = boxes.size();
    std::vector<double> out(p_count * c * bins);
    for (std::size_t p = 0; p < p_count; ++p) {
        for (int ch = 0; ch < c; ++ch) {
            const double* src = fv.data() + ch * plane;
            double* dst = out.data() + (p * c + ch) * bins;
            for (std::size_t k = 0; k < bins; ++k) {
                const auto& t = (*taps)[p * bins + k];
                dst[k] = t.weight[0] * src[t.index[0]] + t.weight[1] * src[t.index[1]] +
                         t.weight[2] * src[t.index[2]] + t.weight[3] * src[t.index[3]];
            }
        }
    }
    return Tensor::make_result({static_cast<std::int64_t>(p_count), c, out_size, out_size}, std::move(out), {feature},
                               [=](Node& self) {
                                   auto* gf = grad_slot(self, 0);
                                   if (!gf) {
                                       return;
                                   }
                                   for (std::size_t p = 0; p < p_count; ++p) {
                                       for (int ch = 0; ch < c; ++ch) {
                                           double* dst = gf->data() + ch * plane;
                                           const double* g = self.grad.data() + (p * c + ch) * bins;
                                           for (std::size_t k = 0; k < bins; ++k) {
                                               const auto& t = (*taps)[p * bins + k];
                                               for (int q = 0; q < 4; ++q) {
                                                   dst[t.index[q]] += t.weight[q] * g[k];
                                               }
                                           }
                                       }
                                   }
                               });
}

Tensor sum(const Tensor& x)
{
    double acc = 0.0;
    for (double v : x.values()) {
        acc += v;
    }
    return Tensor::make_result({}, {acc}, {x}, [](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            for (auto& g : *gx) {
                g += self.grad[0];
            }
        }
    });
}

Tensor mean(const Tensor& x)
{
    require(x.numel() > 0, "mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor weighted_sum(const Tensor& x, std::span<const double> w)
{
    require(static_cast<std::int64_t>(w.size()) == x.numel(), "weighted_sum: weight count mismatch");
    std::vector<double> weights(w.begin(), w.end());
    double acc = 0.0;
    const auto xv = x.values();
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += xv[i] * weights[i];
    }
    return Tensor::make_result({}, {acc}, {x}, [weights = std::move(weights)](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            for (std::size_t i = 0; i < weights.size(); ++i) {
                (*gx)[i] += self.grad[0] * weights[i];
            }
        }
    });
}

Tensor row_mean(const Tensor& x)
{
    require(x.rank() >= 1, "row_mean: scalar input");
    const auto rows = static_cast<std::size_t>(x.dim(0));
    const std::size_t width = rows == 0 ? 0 : static_cast<std::size_t>(x.numel()) / rows;
    require(rows == 0 || width > 0, "row_mean: empty rows");
    const auto xv = x.values();
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < width; ++k) {
            acc += xv[r * width + k];
        }
        out[r] = acc / static_cast<double>(width);
    }
    return Tensor::make_result({static_cast<std::int64_t>(rows)}, std::move(out), {x}, [rows, width](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            for (std::size_t r = 0; r < rows; ++r) {
                const double g = self.grad[r] / static_cast<double>(width);
                for (std::size_t k = 0; k < width; ++k) {
                    (*gx)[r * width + k] += g;
                }
            }
        }
    });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets)
{
    require(static_cast<std::int64_t>(targets.size()) == logits.numel(), "bce_with_logits: target count mismatch");
    std::vector<double> t(targets.begin(), targets.end());
    const auto xv = logits.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double x = xv[i];
        out[i] = std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return Tensor::make_result(logits.shape(), std::move(out), {logits}, [t = std::move(t)](Node& self) {
        if (auto* gx = grad_slot(self, 0)) {
            const auto& xv = input_value(self, 0);
            for (std::size_t i = 0; i < xv.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-xv[i]));
                (*gx)[i] += self.grad[i] * (s - t[i]);
            }
        }
    });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets)
{
    require(logits.rank() == 2 && logits.dim(0) == static_cast<std::int64_t>(targets.size()),
            "cross_entropy_rows: expects [P, K] logits with P targets");
    const auto p_count = static_cast<std::size_t>(logits.dim(0));
    const auto k = static_cast<std::size_t>(logits.dim(1));
    std::vector<int> tgt(targets.begin(), targets.end());
    const auto xv = logits.values();
    auto probs = std::make_shared<std::vector<double>>(xv.size());
    std::vector<double> out(p_count);
    for (std::size_t r = 0; r < p_count; ++r) {
        require(tgt[r] >= 0 && static_cast<std::size_t>(tgt[r]) < k, "cross_entropy_rows: target out of range");
        const double* in = xv.data() + r * k;
        const double mx = *std::max_element(in, in + k);
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            total += std::exp(in[j] - mx);
        }
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < k; ++j) {
            (*probs)[r * k + j] = std::exp(in[j] - lse);
        }
        out[r] = lse - in[tgt[r]];
    }
    return Tensor::make_result({static_cast<std::int64_t>(p_count)}, std::move(out), {logits},
                               [probs, tgt = std::move(tgt), k](Node& self) {
                                   if (auto* gx = grad_slot(self, 0)) {
                                       for (std::size_t r = 0; r < tgt.size(); ++r) {
                                           for (std::size_t j = 0; j < k; ++j) {
                                               const double onehot = static_cast<int>(j) == tgt[r] ? 1.0 : 0.0;
                                               (*gx)[r * k + j] += self.grad[r] * ((*probs)[r * k + j] - onehot);
                                           }
                                       }
                                   }
                               });
}

Tensor smooth_l1_rows(const Tensor& pred, std::span<const double> target, double beta)
{
    require(pred.rank() == 2 && static_cast<std::int64_t>(target.size()) == pred.numel(),
            "smooth_l1_rows: expects [P, D] prediction with matching target");
    require(beta > 0.0, "smooth_l1_rows: beta must be positive");
    const auto p_count = static_cast<std::size_t>(pred.dim(0));
    const auto d = static_cast<std::size_t>(pred.dim(1));
    std::vector<double> t(target.begin(), target.end());
    const auto xv = pred.values();
    std::vector<double> out(p_count, 0.0);
    for (std::size_t r = 0; r < p_count; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = std::abs(xv[r * d + j] - t[r * d + j]);
            out[r] += diff < beta ? 0.5 * diff * diff / beta : diff - 0.5 * beta;
        }
    }
    return Tensor::make_result({static_cast<std::int64_t>(p_count)}, std::move(out), {pred},
                               [t = std::move(t), d, beta](Node& self) {
                                   if (auto* gx = grad_slot(self, 0)) {
                                       const auto& xv = input_value(self, 0);
                                       for (std::size_t i = 0; i < xv.size(); ++i) {
                                           const double diff = xv[i] - t[i];
                                           const double g = std::abs(diff) < beta ? diff / beta
                                                                                  : (diff > 0 ? 1.0 : -1.0);
                                           (*gx)[i] += self.grad[i / d] * g;
                                       }
                                   }
                               });
}

} // namespace usis::ops
