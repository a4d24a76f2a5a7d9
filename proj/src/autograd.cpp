// SPDX-License-Identifier: Apache-2.0

#include "flocora/autograd.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "flocora/error.hpp"

namespace flocora {

const Tensor& Var::value() const {
    return tape->value(id);
}

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
}

Var Tape::constant_ref(const Tensor& value) {
    Node n;
    n.borrowed = &value;
    return push(std::move(n));
}

Var Tape::parameter(Tensor& param) {
    Node n;
    n.borrowed = &param;
    if (grad_enabled_ && param.requires_grad()) {
        n.sink = &param;
        n.needs_grad = true;
    }
    return push(std::move(n));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    if (grad_enabled_) {
        for (const Var& in : inputs) {
            if (in.tape != this) {
                throw Error("op input recorded on a different tape");
            }
            n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
        }
        if (n.needs_grad) {
            n.backward = std::move(backward);
        }
    }
    return push(std::move(n));
}

const Tensor& Tape::value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.borrowed ? *n.borrowed : n.owned;
}

std::span<float> Tape::grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) {
        n.grad.assign(value(id).size(), 0.0f);
    }
    return n.grad;
}

std::span<const float> Tape::grad(Var v) const {
    return nodes_.at(v.id).grad;
}

void Tape::backward(Var loss) {
    if (loss.tape != this) {
        throw Error("loss was not recorded on this tape");
    }
    if (value(loss.id).size() != 1) {
        throw ShapeError("backward needs a scalar loss, got shape " + to_string(value(loss.id).shape()));
    }
    for (Node& n : nodes_) {
        n.grad.clear();
    }
    if (!nodes_[loss.id].needs_grad) {
        return;
    }
    grad(loss.id)[0] = 1.0f;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.backward && !n.grad.empty()) {
            n.backward(*this, id);
        }
    }
    for (Node& n : nodes_) {
        if (n.sink) {
            n.sink->zero_grad();
        }
    }
    for (Node& n : nodes_) {
        if (n.sink && !n.grad.empty()) {
            std::span<float> dst = n.sink->grad();
            for (std::size_t i = 0; i < dst.size(); ++i) {
                dst[i] += n.grad[i];
            }
        }
    }
}

namespace {

// Row-major GEMM kernels accumulating into C. BLAS runs single-threaded so
// results do not depend on the host's core count; parallelism lives at the
// client level instead.

void single_threaded_blas() {
    static const bool once = (openblas_set_num_threads(1), true);
    (void)once;
}

// C[MxN] += A[MxK] * B[KxN]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    single_threaded_blas();
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(m), int(n), int(k), 1.0f, a, int(k), b, int(n), 1.0f, c,
                int(n));
}

// C[MxN] += A^T * B with A stored [KxM], B [KxN]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    single_threaded_blas();
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(m), int(n), int(k), 1.0f, a, int(m), b, int(n), 1.0f, c,
                int(n));
}

// C[MxN] += A * B^T with A [MxK], B stored [NxK]
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    single_threaded_blas();
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(m), int(n), int(k), 1.0f, a, int(k), b, int(k), 1.0f, c,
                int(n));
}

struct ConvGeometry {
    std::size_t n, in_c, h, w, out_c, k, stride, pad, out_h, out_w;

    std::size_t patch() const { return in_c * k * k; }
    std::size_t pixels() const { return out_h * out_w; }
    bool is_pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& kernel, std::size_t stride, std::size_t padding) {
    if (x.size() != 4 || kernel.size() != 4) {
        throw ShapeError("conv2d expects input [N,I,H,W] and kernel [O,I,K,K], got " + to_string(x) + " and " +
                         to_string(kernel));
    }
    if (x[1] != kernel[1]) {
        throw ShapeError("conv2d channel mismatch: input " + to_string(x) + " has I=" + std::to_string(x[1]) +
                         " but kernel " + to_string(kernel) + " has I=" + std::to_string(kernel[1]));
    }
    if (kernel[2] != kernel[3]) {
        throw ShapeError("conv2d expects a square kernel, got " + to_string(kernel));
    }
    if (stride == 0) {
        throw ShapeError("conv2d stride must be >= 1");
    }
    const std::size_t k = kernel[2];
    if (k > x[2] + 2 * padding || k > x[3] + 2 * padding) {
        throw ShapeError("conv2d kernel " + to_string(kernel) + " larger than padded input " + to_string(x));
    }
    ConvGeometry g{x[0], x[1], x[2], x[3], kernel[0], k, stride, padding, 0, 0};
    g.out_h = (g.h + 2 * padding - k) / stride + 1;
    g.out_w = (g.w + 2 * padding - k) / stride + 1;
    return g;
}

void im2col(const ConvGeometry& g, const float* x, float* col) {
    const std::size_t pixels = g.pixels();
    for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t u = 0; u < g.k; ++u) {
            for (std::size_t v = 0; v < g.k; ++v) {
                float* dst = col + ((c * g.k + u) * g.k + v) * pixels;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + u) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + v) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.h) &&
                                            iw < static_cast<std::ptrdiff_t>(g.w);
                        dst[oh * g.out_w + ow] = inside ? x[(c * g.h + ih) * g.w + iw] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im(const ConvGeometry& g, const float* col, float* dx) {
    const std::size_t pixels = g.pixels();
    for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t u = 0; u < g.k; ++u) {
            for (std::size_t v = 0; v < g.k; ++v) {
                const float* src = col + ((c * g.k + u) * g.k + v) * pixels;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + u) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
                        continue;
                    }
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + v) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) {
                            dx[(c * g.h + ih) * g.w + iw] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
    }
}

}  // namespace

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding) {
    const Tensor& x = input.value();
    const Tensor& w = kernel.value();
    const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, padding);

    Tensor out({g.n, g.out_c, g.out_h, g.out_w});
    std::vector<float> col(g.is_pointwise() ? 0 : g.patch() * g.pixels());
    const std::size_t in_stride = g.in_c * g.h * g.w;
    const std::size_t out_stride = g.out_c * g.pixels();
    for (std::size_t s = 0; s < g.n; ++s) {
        const float* xs = x.data().data() + s * in_stride;
        const float* cols = xs;
        if (!g.is_pointwise()) {
            im2col(g, xs, col.data());
            cols = col.data();
        }
        gemm_nn(g.out_c, g.pixels(), g.patch(), w.data().data(), cols, out.data().data() + s * out_stride);
    }

    const Var inputs[] = {input, kernel};
    return input.tape->record(std::move(out), inputs, [input, kernel, g](Tape& tape, std::size_t self) {
        const float* dy = tape.grad(self).data();
        const float* xd = tape.value(input.id).data().data();
        const float* wd = tape.value(kernel.id).data().data();
        const bool want_dx = tape.needs_grad(input.id);
        const bool want_dw = tape.needs_grad(kernel.id);
        float* dx = want_dx ? tape.grad(input.id).data() : nullptr;
        float* dw = want_dw ? tape.grad(kernel.id).data() : nullptr;
        const std::size_t in_stride = g.in_c * g.h * g.w;
        const std::size_t out_stride = g.out_c * g.pixels();
        std::vector<float> col(g.patch() * g.pixels());
        for (std::size_t s = 0; s < g.n; ++s) {
            const float* dys = dy + s * out_stride;
            if (want_dw) {
                const float* cols = xd + s * in_stride;
                if (!g.is_pointwise()) {
                    im2col(g, cols, col.data());
                    cols = col.data();
                }
                gemm_nt(g.out_c, g.patch(), g.pixels(), dys, cols, dw);
            }
            if (want_dx) {
                if (g.is_pointwise()) {
                    gemm_tn(g.patch(), g.pixels(), g.out_c, wd, dys, dx + s * in_stride);
                } else {
                    std::fill(col.begin(), col.end(), 0.0f);
                    gemm_tn(g.patch(), g.pixels(), g.out_c, wd, dys, col.data());
                    col2im(g, col.data(), dx + s * in_stride);
                }
            }
        }
    });
}

Var group_norm(Var input, std::size_t groups, Var gamma, Var beta, float eps) {
    const Tensor& x = input.value();
    if (x.rank() != 4) {
        throw ShapeError("group_norm expects [N,C,H,W], got " + to_string(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (groups == 0 || c % groups != 0) {
        throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
    }
    if (!(eps > 0.0f)) {
        throw ConfigError("group_norm: eps must be positive");
    }
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        throw ShapeError("group_norm: gamma/beta must be [" + std::to_string(c) + "], got " +
                         to_string(gamma.shape()) + " and " + to_string(beta.shape()));
    }
    const std::size_t cpg = c / groups;
    const std::size_t m = cpg * hw;
    const float* g = gamma.value().data().data();
    const float* b = beta.value().data().data();

    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<float>>(x.size());
    auto rstd = std::make_shared<std::vector<float>>(n * groups);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t grp = 0; grp < groups; ++grp) {
            const std::size_t base = (s * c + grp * cpg) * hw;
            const float* xs = x.data().data() + base;
            float mean = 0.0f;
            for (std::size_t i = 0; i < m; ++i) {
                mean += xs[i];
            }
            mean /= static_cast<float>(m);
            float var = 0.0f;
            for (std::size_t i = 0; i < m; ++i) {
                const float d = xs[i] - mean;
                var += d * d;
            }
            var /= static_cast<float>(m);
            const float r = 1.0f / std::sqrt(var + eps);
            (*rstd)[s * groups + grp] = r;
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t ch = grp * cpg + i / hw;
                const float xh = (xs[i] - mean) * r;
                (*xhat)[base + i] = xh;
                out[base + i] = g[ch] * xh + b[ch];
            }
        }
    }

    const Var inputs[] = {input, gamma, beta};
    return input.tape->record(
        std::move(out), inputs, [input, gamma, beta, groups, n, c, hw, cpg, m, xhat, rstd](Tape& tape, std::size_t self) {
            const float* dy = tape.grad(self).data();
            const float* g = tape.value(gamma.id).data().data();
            float* dgamma = tape.needs_grad(gamma.id) ? tape.grad(gamma.id).data() : nullptr;
            float* dbeta = tape.needs_grad(beta.id) ? tape.grad(beta.id).data() : nullptr;
            float* dx = tape.needs_grad(input.id) ? tape.grad(input.id).data() : nullptr;
            const std::vector<float>& xh = *xhat;
            std::vector<float> dxhat(m);
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t grp = 0; grp < groups; ++grp) {
                    const std::size_t base = (s * c + grp * cpg) * hw;
                    float sum_dxhat = 0.0f;
                    float sum_dxhat_xhat = 0.0f;
                    for (std::size_t i = 0; i < m; ++i) {
                        const std::size_t ch = grp * cpg + i / hw;
                        const float d = dy[base + i];
                        if (dgamma) {
                            dgamma[ch] += d * xh[base + i];
                        }
                        if (dbeta) {
                            dbeta[ch] += d;
                        }
                        dxhat[i] = d * g[ch];
                        sum_dxhat += dxhat[i];
                        sum_dxhat_xhat += dxhat[i] * xh[base + i];
                    }
                    if (dx) {
                        const float r = (*rstd)[s * groups + grp];
                        const float inv_m = 1.0f / static_cast<float>(m);
                        for (std::size_t i = 0; i < m; ++i) {
                            dx[base + i] += r * (dxhat[i] - inv_m * sum_dxhat - xh[base + i] * inv_m * sum_dxhat_xhat);
                        }
                    }
                }
            }
        });
}

Var matmul(Var input, Var weight) {
    const Tensor& x = input.value();
    const Tensor& w = weight.value();
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
        throw ShapeError("matmul: cannot multiply " + to_string(x.shape()) + " by " + to_string(w.shape()));
    }
    const std::size_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
    Tensor out({n, m});
    gemm_nn(n, m, d, x.data().data(), w.data().data(), out.data().data());

    const Var inputs[] = {input, weight};
    return input.tape->record(std::move(out), inputs, [input, weight, n, d, m](Tape& tape, std::size_t self) {
        const float* dy = tape.grad(self).data();
        if (tape.needs_grad(input.id)) {
            gemm_nt(n, d, m, dy, tape.value(weight.id).data().data(), tape.grad(input.id).data());
        }
        if (tape.needs_grad(weight.id)) {
            gemm_tn(d, m, n, tape.value(input.id).data().data(), dy, tape.grad(weight.id).data());
        }
    });
}

Var linear(Var input, Var weight, Var bias) {
    const Tensor& w = weight.value();
    if (w.rank() != 2 || bias.shape() != Shape{w.dim(1)}) {
        throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(w.shape()));
    }
    const Var prod = matmul(input, weight);
    const std::size_t n = prod.shape()[0], m = prod.shape()[1];
    Tensor out = prod.value();
    const float* b = bias.value().data().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] += b[j];
        }
    }
    const Var inputs[] = {prod, bias};
    return input.tape->record(std::move(out), inputs, [prod, bias, n, m](Tape& tape, std::size_t self) {
        const std::span<const float> dy = tape.grad(self);
        if (tape.needs_grad(prod.id)) {
            std::span<float> dp = tape.grad(prod.id);
            for (std::size_t i = 0; i < dy.size(); ++i) {
                dp[i] += dy[i];
            }
        }
        if (tape.needs_grad(bias.id)) {
            std::span<float> db = tape.grad(bias.id);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    db[j] += dy[i * m + j];
                }
            }
        }
    });
}

Var relu(Var input) {
    Tensor out = input.value();
    for (float& v : out.data()) {
        v = v > 0.0f ? v : 0.0f;
    }
    const Var inputs[] = {input};
    return input.tape->record(std::move(out), inputs, [input](Tape& tape, std::size_t self) {
        const std::span<const float> dy = tape.grad(self);
        const std::span<const float> x = tape.value(input.id).data();
        std::span<float> dx = tape.grad(input.id);
        for (std::size_t i = 0; i < dx.size(); ++i) {
            if (x[i] > 0.0f) {
                dx[i] += dy[i];
            }
        }
    });
}

Var avg_pool(Var input) {
    const Tensor& x = input.value();
    if (x.rank() != 4) {
        throw ShapeError("avg_pool expects [N,C,H,W], got " + to_string(x.shape()));
    }
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < nc; ++i) {
        float acc = 0.0f;
        for (std::size_t p = 0; p < hw; ++p) {
            acc += x[i * hw + p];
        }
        out[i] = acc / static_cast<float>(hw);
    }
    const Var inputs[] = {input};
    return input.tape->record(std::move(out), inputs, [input, nc, hw](Tape& tape, std::size_t self) {
        const std::span<const float> dy = tape.grad(self);
        std::span<float> dx = tape.grad(input.id);
        const float inv = 1.0f / static_cast<float>(hw);
        for (std::size_t i = 0; i < nc; ++i) {
            for (std::size_t p = 0; p < hw; ++p) {
                dx[i * hw + p] += dy[i] * inv;
            }
        }
    });
}

Var add(Var a, Var b) {
    require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    const std::span<const float> bd = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bd[i];
    }
    const Var inputs[] = {a, b};
    return a.tape->record(std::move(out), inputs, [a, b](Tape& tape, std::size_t self) {
        const std::span<const float> dy = tape.grad(self);
        for (const Var v : {a, b}) {
            if (tape.needs_grad(v.id)) {
                std::span<float> dv = tape.grad(v.id);
                for (std::size_t i = 0; i < dv.size(); ++i) {
                    dv[i] += dy[i];
                }
            }
        }
    });
}

Var mul(Var a, Var b) {
    require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    const std::span<const float> bd = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= bd[i];
    }
    const Var inputs[] = {a, b};
    return a.tape->record(std::move(out), inputs, [a, b](Tape& tape, std::size_t self) {
        const std::span<const float> dy = tape.grad(self);
        const std::span<const float> av = tape.value(a.id).data();
        const std::span<const float> bv = tape.value(b.id).data();
        if (tape.needs_grad(a.id)) {
            std::span<float> da = tape.grad(a.id);
            for (std::size_t i = 0; i < da.size(); ++i) {
                da[i] += dy[i] * bv[i];
            }
        }
        if (tape.needs_grad(b.id)) {
            std::span<float> db = tape.grad(b.id);
            for (std::size_t i = 0; i < db.size(); ++i) {
                db[i] += dy[i] * av[i];
            }
        }
    });
}

Var scale(Var a, float factor) {
    Tensor out = a.value();
    for (float& v : out.data()) {
        v *= factor;
    }
    const Var inputs[] = {a};
    return a.tape->record(std::move(out), inputs, [a, factor](Tape& tape, std::size_t self) {
        const std::span<const float> dy = tape.grad(self);
        std::span<float> da = tape.grad(a.id);
        for (std::size_t i = 0; i < da.size(); ++i) {
            da[i] += dy[i] * factor;
        }
    });
}

Var sum(Var a) {
    float acc = 0.0f;
    for (float v : a.value().data()) {
        acc += v;
    }
    const Var inputs[] = {a};
    return a.tape->record(Tensor({1}, acc), inputs, [a](Tape& tape, std::size_t self) {
        const float dy = tape.grad(self)[0];
        for (float& d : tape.grad(a.id)) {
            d += dy;
        }
    });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
    const Tensor& z = logits.value();
    if (z.rank() != 2 || z.dim(0) != labels.size()) {
        throw ShapeError("softmax_cross_entropy: logits " + to_string(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = z.dim(0), k = z.dim(1);
    auto probs = std::make_shared<std::vector<float>>(z.size());
    std::vector<int> y(labels.begin(), labels.end());
    float total = 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
        if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= k) {
            throw Error("softmax_cross_entropy: label " + std::to_string(y[i]) + " outside [0," +
                        std::to_string(k) + ")");
        }
        const float* row = z.data().data() + i * k;
        const float peak = *std::max_element(row, row + k);
        float denom = 0.0f;
        for (std::size_t j = 0; j < k; ++j) {
            denom += std::exp(row[j] - peak);
        }
        const float lse = peak + std::log(denom);
        for (std::size_t j = 0; j < k; ++j) {
            (*probs)[i * k + j] = std::exp(row[j] - lse);
        }
        total += lse - row[y[i]];
    }
    const Var inputs[] = {logits};
    return logits.tape->record(Tensor({1}, total / static_cast<float>(n)), inputs,
                               [logits, probs, y = std::move(y), n, k](Tape& tape, std::size_t self) {
                                   const float g = tape.grad(self)[0] / static_cast<float>(n);
                                   std::span<float> dz = tape.grad(logits.id);
                                   for (std::size_t i = 0; i < n; ++i) {
                                       for (std::size_t j = 0; j < k; ++j) {
                                           const float target = static_cast<int>(j) == y[i] ? 1.0f : 0.0f;
                                           dz[i * k + j] += g * ((*probs)[i * k + j] - target);
                                       }
                                   }
                               });
}

}  // namespace flocora
