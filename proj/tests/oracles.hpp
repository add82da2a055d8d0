#pragma once

// Reference implementations used only by tests. Each one follows the
// textbook definition directly and shares no code with the library path it
// checks.

#include <cmath>
#include <cstddef>
#include <set>
#include <utility>
#include <vector>

#include "filmseg/tensor.hpp"

namespace oracle {

// Direct (batch, cout, y, x, cin, ky, kx) loop with zero padding.
template <typename T>
filmseg::Tensor<T> conv2d_naive(const filmseg::Tensor<T>& x, const filmseg::Tensor<T>& k, const filmseg::Tensor<T>& b,
                                std::size_t stride, std::size_t pad) {
    const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
    filmseg::Tensor<T> out(filmseg::Shape{N, Cout, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    T acc = b[co];
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                    continue;
                                acc += x.at(n, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                                       k.at(co, ci, ky, kx);
                            }
                    out.at(n, co, oy, ox) = acc;
                }
    return out;
}

// Dice by explicit set construction.
inline double dice_by_sets(const std::vector<int>& a, const std::vector<int>& b) {
    std::set<std::size_t> sa, sb, inter;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i]) sa.insert(i);
        if (b[i]) sb.insert(i);
    }
    for (auto i : sa) {
        if (sb.count(i)) inter.insert(i);
    }
    if (sa.empty() && sb.empty()) return 1.0;
    return 2.0 * static_cast<double>(inter.size()) / static_cast<double>(sa.size() + sb.size());
}

// Scalar Adam, written from the recurrence.
struct ScalarAdam {
    double m = 0, v = 0;
    int t = 0;
    double step(double theta, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        return theta - lr * mh / (std::sqrt(vh) + eps);
    }
};

// Central difference of a scalar function of one coordinate.
template <typename F>
double central_difference(F&& f, double x, double h = 1e-4) {
    return (f(x + h) - f(x - h)) / (2 * h);
}

} // namespace oracle
