#pragma once

#include <cstddef>

#include "pyrafeat/autodiff.hpp"
#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

/// Learnable attention down-sampler of one supervised level.
///
/// Saliency is omega_w . f + omega_b per pixel; logits are
/// affine_scale * saliency + affine_shift.
template <typename T>
struct DownsamplerParams {
    Parameter<T> omega_w;       // (C, 1)
    Parameter<T> omega_b;       // (1)
    Parameter<T> affine_scale;  // (1)
    Parameter<T> affine_shift;  // (1)

    /// Uniform attention: omega = 0, scale = 1, shift = 0.
    static DownsamplerParams init(std::size_t channels, std::size_t level);
};

template <typename T>
struct DownsamplerVars {
    Var<T> omega_w;
    Var<T> omega_b;
    Var<T> affine_scale;
    Var<T> affine_shift;
};

template <typename T>
DownsamplerVars<T> bind(Tape<T>& tape, DownsamplerParams<T>& p);
template <typename T>
DownsamplerVars<T> bind_values(Tape<T>& tape, const DownsamplerParams<T>& p);

/// Resamples `feat_hr` to image_h x image_w, then pools every V x V block
/// with softmax attention over its V*V pixels. Output is
/// (image_h / V, image_w / V, C).
template <typename T>
Var<T> attention_downsample(Var<T> feat_hr, const DownsamplerVars<T>& omega, std::size_t image_h,
                            std::size_t image_w, std::size_t v);

template <typename T>
Tensor<T> attention_downsample(const Tensor<T>& feat_hr, const DownsamplerParams<T>& omega, std::size_t image_h,
                               std::size_t image_w, std::size_t v);

}  // namespace pyrafeat
