#pragma once

// Differentiable operations recorded on a Tape.
//
// 4-rank data is laid out (batch, channel, height, width). No broadcasting
// exists beyond per-channel bias and per-channel affine modulation.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "filmseg/autodiff.hpp"
#include "filmseg/errors.hpp"
#include "filmseg/tensor.hpp"

namespace filmseg {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

enum class NormMode { Train, Infer };

namespace detail {

struct ConvGeometry {
    std::size_t n, cin, h, w;
    std::size_t cout, kh, kw;
    std::size_t stride, pad;
    std::size_t ho, wo;
    std::size_t patch() const { return cin * kh * kw; }
    std::size_t pixels() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& kernel, const Shape& bias, Conv2dOptions opt) {
    require_rank(in, 4, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    if (kernel[1] != in[1]) {
        throw DimensionError("conv2d: kernel expects " + std::to_string(kernel[1]) + " input channels, input " +
                             shape_str(in) + " has " + std::to_string(in[1]));
    }
    require_shape(bias, Shape{kernel[0]}, "conv2d bias");
    if (opt.stride == 0) throw ConfigError("conv2d: stride must be positive");
    ConvGeometry g{in[0], in[1], in[2], in[3], kernel[0], kernel[2], kernel[3], opt.stride, opt.padding, 0, 0};
    const auto extent = [&](std::size_t size, std::size_t k, const char* axis) {
        const std::size_t padded = size + 2 * opt.padding;
        if (padded < k || (padded - k) % opt.stride != 0) {
            throw ConfigError(std::string("conv2d: ") + axis + " extent " + std::to_string(size) + " with kernel " +
                              std::to_string(k) + ", padding " + std::to_string(opt.padding) + ", stride " +
                              std::to_string(opt.stride) + " does not give an integer output extent");
        }
        return (padded - k) / opt.stride + 1;
    };
    g.ho = extent(g.h, g.kh, "height");
    g.wo = extent(g.w, g.kw, "width");
    return g;
}

// Unfolds one image [cin, h, w] into a [cin*kh*kw, ho*wo] patch matrix.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.cin; ++c) {
        const T* plane = img + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = cols + ((c * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    T* dst = row + oy * g.wo;
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, T{0});
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters (accumulates) a patch matrix back into an image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.cin; ++c) {
        T* plane = img + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.w;
                    const T* src = row + oy * g.wo;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

inline bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

inline void require_same(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

} // namespace detail

// Cross-correlation with zero padding.
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, Conv2dOptions opt = {}) {
    const auto& x = tape.value(input);
    const auto& k = tape.value(kernel);
    const auto& b = tape.value(bias);
    const auto g = detail::conv_geometry(x.shape(), k.shape(), b.shape(), opt);

    Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
    const ConstMatrixMap<T> wm(k.data(), g.cout, g.patch());
    const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(b.data(), g.cout);
    AlignedVector<T> cols(detail::is_pointwise(g) ? 0 : g.patch() * g.pixels());
    for (std::size_t n = 0; n < g.n; ++n) {
        const T* img = x.data() + n * g.cin * g.h * g.w;
        const T* colp = img;
        if (!cols.empty()) {
            detail::im2col(img, g, cols.data());
            colp = cols.data();
        }
        MatrixMap<T> om(out.data() + n * g.cout * g.pixels(), g.cout, g.pixels());
        om.noalias() = wm * ConstMatrixMap<T>(colp, g.patch(), g.pixels());
        om.colwise() += bv;
    }

    return tape.record("conv2d", std::move(out), {input, kernel, bias}, [input, kernel, bias, g](Tape<T>& t, Var o) {
        const auto& x = t.value(input);
        const auto& k = t.value(kernel);
        const Tensor<T>& gout = t.grad(o);
        const bool need_x = t.requires_grad(input);
        const bool need_k = t.requires_grad(kernel);
        const bool need_b = t.requires_grad(bias);
        const ConstMatrixMap<T> wm(k.data(), g.cout, g.patch());
        AlignedVector<T> cols(detail::is_pointwise(g) ? 0 : g.patch() * g.pixels());
        AlignedVector<T> dcols(cols.size());
        for (std::size_t n = 0; n < g.n; ++n) {
            const ConstMatrixMap<T> gm(gout.data() + n * g.cout * g.pixels(), g.cout, g.pixels());
            const T* img = x.data() + n * g.cin * g.h * g.w;
            if (need_k) {
                const T* colp = img;
                if (!cols.empty()) {
                    detail::im2col(img, g, cols.data());
                    colp = cols.data();
                }
                MatrixMap<T> dk(t.grad_buffer(kernel).data(), g.cout, g.patch());
                dk.noalias() += gm * ConstMatrixMap<T>(colp, g.patch(), g.pixels()).transpose();
            }
            if (need_b) {
                Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(t.grad_buffer(bias).data(), g.cout);
                db += gm.rowwise().sum();
            }
            if (need_x) {
                T* dimg = t.grad_buffer(input).data() + n * g.cin * g.h * g.w;
                if (dcols.empty()) {
                    MatrixMap<T> dx(dimg, g.cin, g.pixels());
                    dx.noalias() += wm.transpose() * gm;
                } else {
                    MatrixMap<T> dc(dcols.data(), g.patch(), g.pixels());
                    dc.noalias() = wm.transpose() * gm;
                    detail::col2im(dcols.data(), g, dimg);
                }
            }
        }
    });
}

// 2x2 non-overlapping max pooling. Ties route the gradient to the first
// element in raster order.
template <typename T>
Var maxpool2(Tape<T>& tape, Var input) {
    const auto& x = tape.value(input);
    require_rank(x.shape(), 4, "maxpool2");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw ConfigError("maxpool2: spatial extents must be even, got " + shape_str(x.shape()));
    }
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor<T> out(Shape{N, C, Ho, Wo});
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t p = 0; p < N * C; ++p) {
        const T* plane = x.data() + p * H * W;
        for (std::size_t i = 0; i < Ho; ++i) {
            for (std::size_t j = 0; j < Wo; ++j) {
                std::size_t best = (2 * i) * W + 2 * j;
                for (std::size_t cand : {best + 1, best + W, best + W + 1}) {
                    if (plane[cand] > plane[best]) best = cand;
                }
                const std::size_t o = (p * Ho + i) * Wo + j;
                out[o] = plane[best];
                argmax[o] = p * H * W + best;
            }
        }
    }
    return tape.record("maxpool2", std::move(out), {input}, [input, argmax = std::move(argmax)](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        auto& gx = t.grad_buffer(input);
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
    });
}

// Nearest-neighbour x2 upsampling.
template <typename T>
Var upsample_nearest2(Tape<T>& tape, Var input) {
    const auto& x = tape.value(input);
    require_rank(x.shape(), 4, "upsample_nearest2");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> out(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W});
    for (std::size_t p = 0; p < NC; ++p) {
        for (std::size_t i = 0; i < 2 * H; ++i) {
            for (std::size_t j = 0; j < 2 * W; ++j) {
                out[(p * 2 * H + i) * 2 * W + j] = x[(p * H + i / 2) * W + j / 2];
            }
        }
    }
    return tape.record("upsample_nearest2", std::move(out), {input}, [input, NC, H, W](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        auto& gx = t.grad_buffer(input);
        for (std::size_t p = 0; p < NC; ++p) {
            for (std::size_t i = 0; i < 2 * H; ++i) {
                for (std::size_t j = 0; j < 2 * W; ++j) {
                    gx[(p * H + i / 2) * W + j / 2] += g[(p * 2 * H + i) * 2 * W + j];
                }
            }
        }
    });
}

// Per-channel normalization without a learned affine.
//
// Train mode normalizes with batch statistics over (N, H, W) (biased
// variance) and, when running buffers are given, folds the batch mean and
// unbiased variance into them: r <- (1 - momentum) r + momentum batch.
// Infer mode uses the running buffers; they start at mean 0, var 1.
template <typename T>
Var channel_norm_train(Tape<T>& tape, Var input, T momentum = T(0.1), T eps = T(1e-5),
                       Tensor<T>* running_mean = nullptr, Tensor<T>* running_var = nullptr) {
    const auto& x = tape.value(input);
    require_rank(x.shape(), 4, "channel_norm");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const std::size_t count = N * HW;
    if (count < 2) throw UsageError("channel_norm: train mode needs at least 2 values per channel");
    if (running_mean) require_shape(running_mean->shape(), Shape{C}, "channel_norm running mean");
    if (running_var) require_shape(running_var->shape(), Shape{C}, "channel_norm running var");

    std::vector<T> mean(C), inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* p = x.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) s += p[i];
        }
        const double mu = s / static_cast<double>(count);
        double ss = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* p = x.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                const double d = static_cast<double>(p[i]) - mu;
                ss += d * d;
            }
        }
        const double var = ss / static_cast<double>(count);
        mean[c] = static_cast<T>(mu);
        inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        const double m = static_cast<double>(momentum);
        if (running_mean) (*running_mean)[c] = static_cast<T>((1.0 - m) * (*running_mean)[c] + m * mu);
        if (running_var) {
            const double unbiased = ss / static_cast<double>(count - 1);
            (*running_var)[c] = static_cast<T>((1.0 - m) * (*running_var)[c] + m * unbiased);
        }
    }

    Tensor<T> out(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[off + i] = (x[off + i] - mean[c]) * inv_std[c];
        }
    }

    return tape.record(
        "channel_norm", std::move(out), {input},
        [input, mean = std::move(mean), inv_std = std::move(inv_std), N, C, HW](Tape<T>& t, Var o) {
            const Tensor<T>& g = t.grad(o);
            const auto& x = t.value(input);
            auto& gx = t.grad_buffer(input);
            const double count = static_cast<double>(N * HW);
            for (std::size_t c = 0; c < C; ++c) {
                // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
                double sg = 0, sgx = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        const double xh = (static_cast<double>(x[off + i]) - mean[c]) * inv_std[c];
                        sg += g[off + i];
                        sgx += g[off + i] * xh;
                    }
                }
                const double mg = sg / count, mgx = sgx / count;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        const double xh = (static_cast<double>(x[off + i]) - mean[c]) * inv_std[c];
                        gx[off + i] += static_cast<T>(inv_std[c] * (g[off + i] - mg - xh * mgx));
                    }
                }
            }
        });
}

template <typename T>
Var channel_norm_infer(Tape<T>& tape, Var input, const Tensor<T>& running_mean, const Tensor<T>& running_var,
                       T eps = T(1e-5)) {
    const auto& x = tape.value(input);
    require_rank(x.shape(), 4, "channel_norm");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    require_shape(running_mean.shape(), Shape{C}, "channel_norm running mean");
    require_shape(running_var.shape(), Shape{C}, "channel_norm running var");
    std::vector<T> mean(running_mean.buffer()), inv_std(C);
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);

    Tensor<T> out(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[off + i] = (x[off + i] - mean[c]) * inv_std[c];
        }
    }
    return tape.record("channel_norm", std::move(out), {input},
                       [input, inv_std = std::move(inv_std), N, C, HW](Tape<T>& t, Var o) {
                           const Tensor<T>& g = t.grad(o);
                           auto& gx = t.grad_buffer(input);
                           for (std::size_t n = 0; n < N; ++n) {
                               for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t off = (n * C + c) * HW;
                                   for (std::size_t i = 0; i < HW; ++i) gx[off + i] += g[off + i] * inv_std[c];
                               }
                           }
                       });
}

template <typename T>
Var channel_norm(Tape<T>& tape, Var input, Tensor<T>& running_mean, Tensor<T>& running_var, NormMode mode,
                 T momentum = T(0.1), T eps = T(1e-5)) {
    if (mode == NormMode::Train) return channel_norm_train(tape, input, momentum, eps, &running_mean, &running_var);
    return channel_norm_infer(tape, input, running_mean, running_var, eps);
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
    Tensor<T> out = tape.value(input);
    for (auto& v : out.values()) v = v > T(0) ? v : T(0);
    return tape.record("relu", std::move(out), {input}, [input](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        const auto& x = t.value(input);
        auto& gx = t.grad_buffer(input);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] > T(0)) gx[i] += g[i];
        }
    });
}

// Logistic function, clamped so the output stays strictly inside (0, 1)
// even where the exact value rounds to an endpoint.
template <typename T>
Var sigmoid(Tape<T>& tape, Var input) {
    Tensor<T> out = tape.value(input);
    const T lo = std::numeric_limits<T>::min();
    const T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
    for (auto& v : out.values()) v = std::clamp(T(1) / (T(1) + std::exp(-v)), lo, hi);
    return tape.record("sigmoid", std::move(out), {input}, [input](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        const auto& s = t.value(o);
        auto& gx = t.grad_buffer(input);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (T(1) - s[i]);
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    detail::require_same(tape.value(a).shape(), tape.value(b).shape(), "add");
    Tensor<T> out = tape.value(a);
    const auto& bv = tape.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return tape.record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        for (Var v : {a, b}) {
            if (!t.requires_grad(v)) continue;
            auto& gv = t.grad_buffer(v);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
    detail::require_same(tape.value(a).shape(), tape.value(b).shape(), "mul");
    Tensor<T> out = tape.value(a);
    const auto& bv = tape.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return tape.record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        if (t.requires_grad(a)) {
            auto& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var scale(Tape<T>& tape, Var input, T alpha) {
    Tensor<T> out = tape.value(input);
    for (auto& v : out.values()) v *= alpha;
    return tape.record("scale", std::move(out), {input}, [input, alpha](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        auto& gx = t.grad_buffer(input);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += alpha * g[i];
    });
}

// Sum of all elements, as a [1] tensor.
template <typename T>
Var sum(Tape<T>& tape, Var input) {
    const auto& x = tape.value(input);
    double s = 0;
    for (T v : x.values()) s += v;
    return tape.record("sum", Tensor<T>::scalar(static_cast<T>(s)), {input}, [input](Tape<T>& t, Var o) {
        const T g = t.grad(o)[0];
        for (auto& v : t.grad_buffer(input).values()) v += g;
    });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    require_rank(av.shape(), 4, "concat_channels");
    require_rank(bv.shape(), 4, "concat_channels");
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
        throw DimensionError("concat_channels: " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                             " differ outside the channel axis");
    }
    const std::size_t N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), HW = av.dim(2) * av.dim(3);
    Tensor<T> out(Shape{N, Ca + Cb, av.dim(2), av.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(av.data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
        std::copy_n(bv.data() + n * Cb * HW, Cb * HW, out.data() + n * (Ca + Cb) * HW + Ca * HW);
    }
    return tape.record("concat_channels", std::move(out), {a, b}, [a, b, N, Ca, Cb, HW](Tape<T>& t, Var o) {
        const Tensor<T>& g = t.grad(o);
        if (t.requires_grad(a)) {
            auto& ga = t.grad_buffer(a);
            for (std::size_t n = 0; n < N; ++n) {
                const T* src = g.data() + n * (Ca + Cb) * HW;
                for (std::size_t i = 0; i < Ca * HW; ++i) ga[n * Ca * HW + i] += src[i];
            }
        }
        if (t.requires_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (std::size_t n = 0; n < N; ++n) {
                const T* src = g.data() + n * (Ca + Cb) * HW + Ca * HW;
                for (std::size_t i = 0; i < Cb * HW; ++i) gb[n * Cb * HW + i] += src[i];
            }
        }
    });
}

// Dense layer: y[N, out] = x[N, in] * W[out, in]^T + b[out].
template <typename T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias) {
    const auto& x = tape.value(input);
    const auto& w = tape.value(weight);
    require_rank(x.shape(), 2, "linear input");
    require_rank(w.shape(), 2, "linear weight");
    if (w.dim(1) != x.dim(1)) {
        throw DimensionError("linear: weight " + shape_str(w.shape()) + " does not accept input " +
                             shape_str(x.shape()));
    }
    require_shape(tape.value(bias).shape(), Shape{w.dim(0)}, "linear bias");
    const std::size_t N = x.dim(0), In = x.dim(1), Out = w.dim(0);
    Tensor<T> out(Shape{N, Out});
    const auto& b = tape.value(bias);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < Out; ++o) {
            T s = b[o];
            for (std::size_t i = 0; i < In; ++i) s += w[o * In + i] * x[n * In + i];
            out[n * Out + o] = s;
        }
    }
    return tape.record("linear", std::move(out), {input, weight, bias},
                       [input, weight, bias, N, In, Out](Tape<T>& t, Var o) {
                           const Tensor<T>& g = t.grad(o);
                           const auto& x = t.value(input);
                           const auto& w = t.value(weight);
                           if (t.requires_grad(input)) {
                               auto& gx = t.grad_buffer(input);
                               for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t j = 0; j < Out; ++j)
                                       for (std::size_t i = 0; i < In; ++i)
                                           gx[n * In + i] += g[n * Out + j] * w[j * In + i];
                           }
                           if (t.requires_grad(weight)) {
                               auto& gw = t.grad_buffer(weight);
                               for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t j = 0; j < Out; ++j)
                                       for (std::size_t i = 0; i < In; ++i)
                                           gw[j * In + i] += g[n * Out + j] * x[n * In + i];
                           }
                           if (t.requires_grad(bias)) {
                               auto& gb = t.grad_buffer(bias);
                               for (std::size_t n = 0; n < N; ++n)
                                   for (std::size_t j = 0; j < Out; ++j) gb[j] += g[n * Out + j];
                           }
                       });
}

// y[n,c,i,j] = gamma[c] * x[n,c,i,j] + beta[c]. gamma/beta are either [C]
// (shared across the batch) or [N, C] (one modulation per sample).
template <typename T>
Var channel_affine(Tape<T>& tape, Var input, Var gamma, Var beta) {
    const auto& x = tape.value(input);
    const auto& gm = tape.value(gamma);
    const auto& bt = tape.value(beta);
    require_rank(x.shape(), 4, "channel_affine input");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const bool per_sample = gm.rank() == 2;
    if (!(gm.shape() == Shape{C} || gm.shape() == Shape{N, C})) {
        throw DimensionError("channel_affine: gamma " + shape_str(gm.shape()) + " does not match " +
                             std::to_string(C) + " channels of input " + shape_str(x.shape()));
    }
    detail::require_same(gm.shape(), bt.shape(), "channel_affine gamma/beta");

    Tensor<T> out(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t pi = per_sample ? n * C + c : c;
            const T g = gm[pi], b = bt[pi];
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[off + i] = g * x[off + i] + b;
        }
    }
    return tape.record("channel_affine", std::move(out), {input, gamma, beta},
                       [input, gamma, beta, N, C, HW, per_sample](Tape<T>& t, Var o) {
                           const Tensor<T>& g = t.grad(o);
                           const auto& x = t.value(input);
                           const auto& gm = t.value(gamma);
                           const bool need_x = t.requires_grad(input);
                           const bool need_g = t.requires_grad(gamma);
                           const bool need_b = t.requires_grad(beta);
                           for (std::size_t n = 0; n < N; ++n) {
                               for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t pi = per_sample ? n * C + c : c;
                                   const std::size_t off = (n * C + c) * HW;
                                   T sgx{0}, sg{0};
                                   for (std::size_t i = 0; i < HW; ++i) {
                                       sgx += g[off + i] * x[off + i];
                                       sg += g[off + i];
                                   }
                                   if (need_g) t.grad_buffer(gamma)[pi] += sgx;
                                   if (need_b) t.grad_buffer(beta)[pi] += sg;
                                   if (need_x) {
                                       auto& gx = t.grad_buffer(input);
                                       for (std::size_t i = 0; i < HW; ++i) gx[off + i] += gm[pi] * g[off + i];
                                   }
                               }
                           }
                       });
}

// 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps), over all elements.
template <typename T>
Var soft_dice_loss(Tape<T>& tape, Var pred, Var target, T eps = T(1e-5)) {
    const auto& p = tape.value(pred);
    const auto& g = tape.value(target);
    detail::require_same(p.shape(), g.shape(), "soft_dice_loss");
    double spg = 0, spp = 0, sgg = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        spg += static_cast<double>(p[i]) * g[i];
        spp += static_cast<double>(p[i]) * p[i];
        sgg += static_cast<double>(g[i]) * g[i];
    }
    const double num = 2 * spg + eps, den = spp + sgg + eps;
    const double loss = 1.0 - num / den;
    return tape.record("soft_dice_loss", Tensor<T>::scalar(static_cast<T>(loss)), {pred, target},
                       [pred, target, num, den](Tape<T>& t, Var o) {
                           const double go = t.grad(o)[0];
                           const auto& p = t.value(pred);
                           const auto& g = t.value(target);
                           const double den2 = den * den;
                           if (t.requires_grad(pred)) {
                               auto& gp = t.grad_buffer(pred);
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                   gp[i] += static_cast<T>(-go * (2.0 * g[i] * den - 2.0 * p[i] * num) / den2);
                               }
                           }
                           if (t.requires_grad(target)) {
                               auto& gg = t.grad_buffer(target);
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                   gg[i] += static_cast<T>(-go * (2.0 * p[i] * den - 2.0 * g[i] * num) / den2);
                               }
                           }
                       });
}

} // namespace filmseg
