#include "pyrafeat/downsample.hpp"

#include <memory>
#include <string>

namespace pyrafeat {

template <typename T>
DownsamplerParams<T> DownsamplerParams<T>::init(std::size_t channels, std::size_t level) {
    const std::string prefix = "omega" + std::to_string(level) + ".";
    DownsamplerParams p;
    p.omega_w = Parameter<T>(prefix + "w", Tensor<T>({channels, 1}, T(0)));
    p.omega_b = Parameter<T>(prefix + "b", Tensor<T>({1}, T(0)));
    p.affine_scale = Parameter<T>(prefix + "scale", Tensor<T>({1}, T(1)));
    p.affine_shift = Parameter<T>(prefix + "shift", Tensor<T>({1}, T(0)));
    return p;
}

template <typename T>
DownsamplerVars<T> bind(Tape<T>& tape, DownsamplerParams<T>& p) {
    return {tape.param(p.omega_w), tape.param(p.omega_b), tape.param(p.affine_scale), tape.param(p.affine_shift)};
}

template <typename T>
DownsamplerVars<T> bind_values(Tape<T>& tape, const DownsamplerParams<T>& p) {
    return {tape.constant(p.omega_w.value), tape.constant(p.omega_b.value), tape.constant(p.affine_scale.value),
            tape.constant(p.affine_shift.value)};
}

template <typename T>
Var<T> attention_downsample(Var<T> feat_hr, const DownsamplerVars<T>& omega, std::size_t image_h,
                            std::size_t image_w, std::size_t v) {
    require_hwc(feat_hr.value(), "attention_downsample");
    if (v == 0 || image_h % v != 0 || image_w % v != 0) {
        throw ShapeError("attention_downsample: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                         " is not divisible by window " + std::to_string(v));
    }
    const std::size_t h = feat_hr.shape()[0], w = feat_hr.shape()[1];
    const std::size_t bh = image_h / v, bw = image_w / v, k = v * v;
    auto map = block_sample_map(h, w, image_h, image_w, v);

    // Saliency is affine in the features and bilinear weights sum to one, so
    // it is projected before resampling.
    const Shape unit{1, 1, 1, 1};
    auto saliency_lr = ad::channel_project(feat_hr, omega.omega_w);                    // (h, w, 1)
    auto saliency = ad::add(ad::remap(saliency_lr, map, Shape{bh, bw, k}), ad::reshape(omega.omega_b, unit));
    auto logits = ad::add(ad::mul(saliency, ad::reshape(omega.affine_scale, unit)),
                          ad::reshape(omega.affine_shift, unit));
    auto attn = ad::softmax(logits, 2);                                                 // (bh, bw, V*V, 1)
    return ad::gather_contract(feat_hr, std::move(map), attn, Shape{bh, bw});
}

template <typename T>
Tensor<T> attention_downsample(const Tensor<T>& feat_hr, const DownsamplerParams<T>& omega, std::size_t image_h,
                               std::size_t image_w, std::size_t v) {
    Tape<T> tape(Tape<T>::Mode::inference);
    return attention_downsample(tape.constant(feat_hr), bind_values(tape, omega), image_h, image_w, v).value();
}

#define PYRAFEAT_INSTANTIATE_DOWN(T)                                                                   \
    template struct DownsamplerParams<T>;                                                              \
    template DownsamplerVars<T> bind(Tape<T>&, DownsamplerParams<T>&);                                 \
    template DownsamplerVars<T> bind_values(Tape<T>&, const DownsamplerParams<T>&);                    \
    template Var<T> attention_downsample(Var<T>, const DownsamplerVars<T>&, std::size_t, std::size_t,  \
                                         std::size_t);                                                 \
    template Tensor<T> attention_downsample(const Tensor<T>&, const DownsamplerParams<T>&, std::size_t, \
                                            std::size_t, std::size_t);

PYRAFEAT_INSTANTIATE_DOWN(float)
PYRAFEAT_INSTANTIATE_DOWN(double)

}  // namespace pyrafeat
