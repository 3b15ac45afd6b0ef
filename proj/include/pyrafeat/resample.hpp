#pragma once

#include <cstddef>
#include <memory>
#include <cstdint>
#include <vector>

#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

/// Fixed sparse linear operator over the rows of a (rows x channels) view.
///
/// Row r of the output is sum_t weight[r*taps+t] * input[index[r*taps+t]].
/// Pads, crops, flips, window gathers and bilinear interpolation are all
/// instances, which lets them share one adjoint (the transpose scatter).
struct RowMap {
    std::size_t in_rows = 0;
    std::size_t out_rows = 0;
    std::size_t taps = 1;
    std::vector<std::uint32_t> index;
    std::vector<double> weight;

    template <typename T>
    void apply(const T* in, T* out, std::size_t channels) const;

    /// out_grad (out_rows x channels) scattered into in_grad (in_rows x channels).
    template <typename T>
    void apply_transpose(const T* out_grad, T* in_grad, std::size_t channels) const;
};

/// Result of `outer` applied after `inner`; taps multiply.
RowMap compose(const RowMap& outer, const RowMap& inner);

/// Up to four (row, weight) pairs sampling an H x W grid at a continuous
/// position given in pixel-centre coordinates (pixel k covers [k, k+1) and
/// its centre sits at k). Out-of-range positions clamp to the border.
struct BilinearTaps {
    std::uint32_t index[4];
    double weight[4];
};
BilinearTaps bilinear_taps(std::size_t h, std::size_t w, double sy, double sx);

/// Align-corners=false resize of an h x w grid to dst_h x dst_w.
RowMap bilinear_map(std::size_t h, std::size_t w, std::size_t dst_h, std::size_t dst_w);

/// For each pixel of an h x w grid, the u x u neighbourhood centred on it
/// (edge-clamped). Output rows are ordered (y, x, dy, dx).
RowMap window_map(std::size_t h, std::size_t w, std::size_t u);

/// Non-overlapping v x v blocks of an h x w grid. Output rows are ordered
/// (block_y, block_x, py, px). Requires h and w divisible by v.
RowMap block_map(std::size_t h, std::size_t w, std::size_t v);

/// Horizontal mirror of an h x w grid.
RowMap hflip_map(std::size_t h, std::size_t w);

/// window_map(dst_h, dst_w, u) after bilinear_map(h, w, dst_h, dst_w):
/// bilinear samples of an h x w map at every window neighbour of a
/// dst_h x dst_w grid. Memoised; safe to call from several threads.
std::shared_ptr<const RowMap> window_sample_map(std::size_t h, std::size_t w, std::size_t dst_h, std::size_t dst_w,
                                                std::size_t u);

/// window_map(h, w, u), memoised.
std::shared_ptr<const RowMap> window_gather_map(std::size_t h, std::size_t w, std::size_t u);

/// block_map(dst_h, dst_w, v) after bilinear_map(h, w, dst_h, dst_w). Memoised.
std::shared_ptr<const RowMap> block_sample_map(std::size_t h, std::size_t w, std::size_t dst_h, std::size_t dst_w,
                                               std::size_t v);

/// Applies a RowMap to an (…, C) tensor and reshapes the result to
/// out_prefix + (C).
template <typename T>
Tensor<T> remap(const Tensor<T>& src, const RowMap& map, Shape out_prefix);

/// Bilinear resize of an (H, W, C) tensor, align-corners=false.
template <typename T>
Tensor<T> bilinear_resample(const Tensor<T>& src, std::size_t dst_h, std::size_t dst_w);

}  // namespace pyrafeat
