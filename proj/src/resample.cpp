#include "pyrafeat/resample.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <string>

namespace pyrafeat {

template <typename T>
void RowMap::apply(const T* in, T* out, std::size_t channels) const {
    if (taps == 4) {
        // Row pairs are summed first so that mirrored sampling positions
        // round identically.
        for (std::size_t r = 0; r < out_rows; ++r) {
            const std::size_t k = r * 4;
            const T w0 = T(weight[k]), w1 = T(weight[k + 1]), w2 = T(weight[k + 2]), w3 = T(weight[k + 3]);
            const T* s0 = in + std::size_t(index[k]) * channels;
            const T* s1 = in + std::size_t(index[k + 1]) * channels;
            const T* s2 = in + std::size_t(index[k + 2]) * channels;
            const T* s3 = in + std::size_t(index[k + 3]) * channels;
            T* dst = out + r * channels;
            for (std::size_t c = 0; c < channels; ++c) dst[c] = (w0 * s0[c] + w1 * s1[c]) + (w2 * s2[c] + w3 * s3[c]);
        }
        return;
    }
    for (std::size_t r = 0; r < out_rows; ++r) {
        T* dst = out + r * channels;
        std::fill(dst, dst + channels, T(0));
        for (std::size_t t = 0; t < taps; ++t) {
            const std::size_t k = r * taps + t;
            const T w = static_cast<T>(weight[k]);
            if (w == T(0)) continue;
            const T* src = in + std::size_t(index[k]) * channels;
            for (std::size_t c = 0; c < channels; ++c) dst[c] += w * src[c];
        }
    }
}

template <typename T>
void RowMap::apply_transpose(const T* out_grad, T* in_grad, std::size_t channels) const {
    for (std::size_t r = 0; r < out_rows; ++r) {
        const T* g = out_grad + r * channels;
        for (std::size_t t = 0; t < taps; ++t) {
            const std::size_t k = r * taps + t;
            const T w = static_cast<T>(weight[k]);
            if (w == T(0)) continue;
            T* dst = in_grad + std::size_t(index[k]) * channels;
            for (std::size_t c = 0; c < channels; ++c) dst[c] += w * g[c];
        }
    }
}

template void RowMap::apply<float>(const float*, float*, std::size_t) const;
template void RowMap::apply<double>(const double*, double*, std::size_t) const;
template void RowMap::apply_transpose<float>(const float*, float*, std::size_t) const;
template void RowMap::apply_transpose<double>(const double*, double*, std::size_t) const;

RowMap compose(const RowMap& outer, const RowMap& inner) {
    if (outer.in_rows != inner.out_rows) {
        throw ShapeError("compose: outer expects " + std::to_string(outer.in_rows) +
                         " rows, inner produces " + std::to_string(inner.out_rows));
    }
    RowMap m;
    m.in_rows = inner.in_rows;
    m.out_rows = outer.out_rows;
    m.taps = outer.taps * inner.taps;
    m.index.resize(m.out_rows * m.taps);
    m.weight.resize(m.out_rows * m.taps);
    for (std::size_t r = 0; r < outer.out_rows; ++r) {
        std::size_t k = r * m.taps;
        for (std::size_t a = 0; a < outer.taps; ++a) {
            const std::size_t mid = outer.index[r * outer.taps + a];
            const double wa = outer.weight[r * outer.taps + a];
            for (std::size_t b = 0; b < inner.taps; ++b, ++k) {
                m.index[k] = inner.index[mid * inner.taps + b];
                m.weight[k] = wa * inner.weight[mid * inner.taps + b];
            }
        }
    }
    return m;
}

BilinearTaps bilinear_taps(std::size_t h, std::size_t w, double sy, double sx) {
    auto axis = [](double s, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
        s = std::clamp(s, 0.0, double(n - 1));
        const double fl = std::floor(s);
        i0 = static_cast<std::size_t>(fl);
        i1 = std::min(i0 + 1, n - 1);
        f = s - fl;
    };
    std::size_t y0, y1, x0, x1;
    double fy, fx;
    axis(sy, h, y0, y1, fy);
    axis(sx, w, x0, x1, fx);
    BilinearTaps t{};
    t.index[0] = static_cast<std::uint32_t>(y0 * w + x0);
    t.index[1] = static_cast<std::uint32_t>(y0 * w + x1);
    t.index[2] = static_cast<std::uint32_t>(y1 * w + x0);
    t.index[3] = static_cast<std::uint32_t>(y1 * w + x1);
    t.weight[0] = (1 - fy) * (1 - fx);
    t.weight[1] = (1 - fy) * fx;
    t.weight[2] = fy * (1 - fx);
    t.weight[3] = fy * fx;
    return t;
}

RowMap bilinear_map(std::size_t h, std::size_t w, std::size_t dst_h, std::size_t dst_w) {
    if (h == 0 || w == 0) throw ShapeError("bilinear_resample: empty source grid");
    if (dst_h == 0 || dst_w == 0) throw ShapeError("bilinear_resample: zero target extent");
    RowMap m;
    m.in_rows = h * w;
    m.out_rows = dst_h * dst_w;
    m.taps = 4;
    m.index.resize(m.out_rows * 4);
    m.weight.resize(m.out_rows * 4);
    const double scale_y = double(h) / double(dst_h);
    const double scale_x = double(w) / double(dst_w);
    for (std::size_t y = 0; y < dst_h; ++y) {
        const double sy = (double(y) + 0.5) * scale_y - 0.5;
        for (std::size_t x = 0; x < dst_w; ++x) {
            const double sx = (double(x) + 0.5) * scale_x - 0.5;
            const BilinearTaps t = bilinear_taps(h, w, sy, sx);
            const std::size_t r = y * dst_w + x;
            for (int k = 0; k < 4; ++k) {
                m.index[r * 4 + k] = t.index[k];
                m.weight[r * 4 + k] = t.weight[k];
            }
        }
    }
    return m;
}

RowMap window_map(std::size_t h, std::size_t w, std::size_t u) {
    if (u % 2 == 0) throw ShapeError("window size must be odd, got " + std::to_string(u));
    const long half = long(u / 2);
    RowMap m;
    m.in_rows = h * w;
    m.out_rows = h * w * u * u;
    m.taps = 1;
    m.index.reserve(m.out_rows);
    m.weight.assign(m.out_rows, 1.0);
    for (long y = 0; y < long(h); ++y) {
        for (long x = 0; x < long(w); ++x) {
            for (long dy = -half; dy <= half; ++dy) {
                const long ny = std::clamp(y + dy, 0L, long(h) - 1);
                for (long dx = -half; dx <= half; ++dx) {
                    const long nx = std::clamp(x + dx, 0L, long(w) - 1);
                    m.index.push_back(static_cast<std::uint32_t>(ny * long(w) + nx));
                }
            }
        }
    }
    return m;
}

RowMap block_map(std::size_t h, std::size_t w, std::size_t v) {
    if (v == 0 || h % v != 0 || w % v != 0) {
        throw ShapeError("grid " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by window " + std::to_string(v));
    }
    RowMap m;
    m.in_rows = h * w;
    m.out_rows = h * w;
    m.taps = 1;
    m.index.reserve(m.out_rows);
    m.weight.assign(m.out_rows, 1.0);
    for (std::size_t by = 0; by < h / v; ++by) {
        for (std::size_t bx = 0; bx < w / v; ++bx) {
            for (std::size_t py = 0; py < v; ++py) {
                for (std::size_t px = 0; px < v; ++px) {
                    m.index.push_back(static_cast<std::uint32_t>((by * v + py) * w + bx * v + px));
                }
            }
        }
    }
    return m;
}

RowMap hflip_map(std::size_t h, std::size_t w) {
    RowMap m;
    m.in_rows = h * w;
    m.out_rows = h * w;
    m.taps = 1;
    m.index.reserve(m.out_rows);
    m.weight.assign(m.out_rows, 1.0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            m.index.push_back(static_cast<std::uint32_t>(y * w + (w - 1 - x)));
        }
    }
    return m;
}

template <typename T>
Tensor<T> remap(const Tensor<T>& src, const RowMap& map, Shape out_prefix) {
    if (src.rank() == 0) throw ShapeError("remap: scalar input");
    const std::size_t channels = src.shape().back();
    if (src.size() != map.in_rows * channels) {
        throw ShapeError("remap: input " + shape_str(src.shape()) + " does not have " +
                         std::to_string(map.in_rows) + " rows");
    }
    if (shape_numel(out_prefix) != map.out_rows) {
        throw ShapeError("remap: output prefix " + shape_str(out_prefix) + " does not have " +
                         std::to_string(map.out_rows) + " rows");
    }
    out_prefix.push_back(channels);
    Tensor<T> out(std::move(out_prefix));
    map.apply(src.data(), out.data(), channels);
    return out;
}

template <typename T>
Tensor<T> bilinear_resample(const Tensor<T>& src, std::size_t dst_h, std::size_t dst_w) {
    require_hwc(src, "bilinear_resample");
    return remap(src, bilinear_map(src.dim(0), src.dim(1), dst_h, dst_w), Shape{dst_h, dst_w});
}

template Tensor<float> remap(const Tensor<float>&, const RowMap&, Shape);
template Tensor<double> remap(const Tensor<double>&, const RowMap&, Shape);
template Tensor<float> bilinear_resample(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> bilinear_resample(const Tensor<double>&, std::size_t, std::size_t);

namespace {

using MapKey = std::array<std::size_t, 6>;

std::shared_ptr<const RowMap> memoised(const MapKey& key, const std::function<RowMap()>& build) {
    static std::mutex mu;
    static std::map<MapKey, std::shared_ptr<const RowMap>> cache;
    {
        std::lock_guard<std::mutex> lock(mu);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
    }
    auto map = std::make_shared<const RowMap>(build());
    std::lock_guard<std::mutex> lock(mu);
    return cache.emplace(key, std::move(map)).first->second;
}

}  // namespace

std::shared_ptr<const RowMap> window_sample_map(std::size_t h, std::size_t w, std::size_t dst_h, std::size_t dst_w,
                                                std::size_t u) {
    return memoised({0, h, w, dst_h, dst_w, u},
                    [&] { return compose(window_map(dst_h, dst_w, u), bilinear_map(h, w, dst_h, dst_w)); });
}

std::shared_ptr<const RowMap> window_gather_map(std::size_t h, std::size_t w, std::size_t u) {
    return memoised({2, h, w, u, 0, 0}, [&] { return window_map(h, w, u); });
}

std::shared_ptr<const RowMap> block_sample_map(std::size_t h, std::size_t w, std::size_t dst_h, std::size_t dst_w,
                                               std::size_t v) {
    return memoised({1, h, w, dst_h, dst_w, v},
                    [&] { return compose(block_map(dst_h, dst_w, v), bilinear_map(h, w, dst_h, dst_w)); });
}

}  // namespace pyrafeat
