#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "pyrafeat/tensor.hpp"

namespace testutil {

template <typename T = double>
pyrafeat::Tensor<T> random_tensor(pyrafeat::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    pyrafeat::Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
double max_abs_diff(const pyrafeat::Tensor<T>& a, const pyrafeat::Tensor<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

// Direct align-corners=false bilinear resize, evaluated per output pixel.
inline pyrafeat::Tensor<double> resize_oracle(const pyrafeat::Tensor<double>& src, std::size_t dh, std::size_t dw) {
    const long h = long(src.dim(0)), w = long(src.dim(1));
    const std::size_t c = src.dim(2);
    pyrafeat::Tensor<double> out({dh, dw, c});
    for (std::size_t y = 0; y < dh; ++y)
        for (std::size_t x = 0; x < dw; ++x) {
            double sy = (y + 0.5) * double(h) / double(dh) - 0.5;
            double sx = (x + 0.5) * double(w) / double(dw) - 0.5;
            sy = std::clamp(sy, 0.0, double(h - 1));
            sx = std::clamp(sx, 0.0, double(w - 1));
            const long y0 = long(std::floor(sy)), x0 = long(std::floor(sx));
            const long y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double fy = sy - y0, fx = sx - x0;
            for (std::size_t k = 0; k < c; ++k)
                out.at(y, x, k) = (1 - fy) * (1 - fx) * src.at(y0, x0, k) + (1 - fy) * fx * src.at(y0, x1, k) +
                                  fy * (1 - fx) * src.at(y1, x0, k) + fy * fx * src.at(y1, x1, k);
        }
    return out;
}

// Cyclic Jacobi eigenvalue iteration on a small symmetric matrix. Returns
// eigenpairs sorted by decreasing eigenvalue; vectors are columns of `vecs`.
inline void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& vals,
                  std::vector<std::vector<double>>& vecs) {
    const std::size_t n = a.size();
    std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return a[i][i] > a[j][j]; });
    vals.clear();
    vecs.assign(n, std::vector<double>(n));
    for (std::size_t k = 0; k < n; ++k) {
        vals.push_back(a[order[k]][order[k]]);
        for (std::size_t i = 0; i < n; ++i) vecs[i][k] = v[i][order[k]];
    }
}

inline std::vector<std::vector<double>> covariance(const pyrafeat::Tensor<double>& rows) {
    const std::size_t n = rows.dim(0), c = rows.dim(1);
    std::vector<double> mean(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) mean[j] += rows[i * c + j] / double(n);
    std::vector<std::vector<double>> cov(c, std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < c; ++p)
            for (std::size_t q = 0; q < c; ++q)
                cov[p][q] += (rows[i * c + p] - mean[p]) * (rows[i * c + q] - mean[q]) / double(n);
    return cov;
}

}  // namespace testutil
