#include "pyrafeat/loss.hpp"

#include <algorithm>
#include <sstream>

namespace pyrafeat {

template <typename T>
UncertaintyParams<T> UncertaintyParams<T>::init(std::size_t channels) {
    UncertaintyParams p;
    p.n_w = Parameter<T>("psi.w", Tensor<T>({channels, 1}, T(0)));
    p.n_b = Parameter<T>("psi.b", Tensor<T>({1}, T(0)));
    return p;
}

template <typename T>
UncertaintyVars<T> bind(Tape<T>& tape, UncertaintyParams<T>& p) {
    return {tape.param(p.n_w), tape.param(p.n_b)};
}

template <typename T>
UncertaintyVars<T> bind_values(Tape<T>& tape, const UncertaintyParams<T>& p) {
    return {tape.constant(p.n_w.value), tape.constant(p.n_b.value)};
}

void SupervisionSet::validate(std::size_t max_level) const {
    if (levels.empty()) throw ConfigError("supervision set is empty");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (levels[i] < 1 || levels[i] > max_level) {
            throw ConfigError("supervised level " + std::to_string(levels[i]) + " outside 1.." +
                              std::to_string(max_level));
        }
        if (std::count(levels.begin(), levels.end(), levels[i]) > 1) {
            throw ConfigError("supervised level " + std::to_string(levels[i]) + " listed twice");
        }
    }
}

SupervisionSet SupervisionSet::parse(const std::string& text) {
    SupervisionSet s;
    s.levels.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long v = std::stol(item, &used);
            if (used != item.size() || v < 0) throw std::invalid_argument(item);
            s.levels.push_back(std::size_t(v));
        } catch (const std::exception&) {
            throw ConfigError("bad supervision level '" + item + "'");
        }
    }
    return s;
}

std::string SupervisionSet::str() const {
    std::string out;
    for (std::size_t i = 0; i < levels.size(); ++i) out += (i ? "," : "") + std::to_string(levels[i]);
    return out;
}

template <typename T>
Var<T> log_uncertainty(Var<T> feat0_t, const UncertaintyVars<T>& psi) {
    require_hwc(feat0_t.value(), "uncertainty");
    return ad::add(ad::channel_project(feat0_t, psi.n_w), ad::reshape(psi.n_b, {1, 1, 1}));
}

template <typename T>
Tensor<T> uncertainty(const Tensor<T>& feat0_t, const UncertaintyParams<T>& psi) {
    Tape<T> tape(Tape<T>::Mode::inference);
    auto u = ad::exp(log_uncertainty(tape.constant(feat0_t), bind_values(tape, psi))).value();
    return u.reshaped({u.dim(0), u.dim(1)});
}

template <typename T>
Var<T> reconstruction_term(Var<T> target, Var<T> recon, Var<T> log_u) {
    if (target.shape() != recon.shape()) {
        throw ShapeError("reconstruction " + shape_str(recon.shape()) + " does not match target " +
                         shape_str(target.shape()));
    }
    auto inv_u2 = ad::exp(ad::mul(log_u, T(-2)));
    return ad::mean(ad::add(ad::mul(ad::square(ad::sub(target, recon)), inv_u2), log_u));
}

template <typename T>
Var<T> multiview_loss(const Tensor<T>& image, const Extractor<T>& extractor, std::span<const Var<T>> pyramid,
                      std::span<const DownsamplerVars<T>> omegas, const UncertaintyVars<T>& psi,
                      std::span<const TransformSpec> views, const SupervisionSet& supervision, std::size_t v) {
    require_hwc(image, "multiview_loss image");
    if (views.empty()) throw ConfigError("multiview_loss needs at least one view");
    if (pyramid.empty()) throw ShapeError("multiview_loss: empty pyramid");
    supervision.validate(pyramid.size() - 1);
    if (omegas.size() < pyramid.size() - 1) throw ShapeError("multiview_loss: missing down-sampler parameters");
    const std::size_t ih = image.dim(0), iw = image.dim(1);
    const Shape grid0 = pyramid[0].shape();
    if (grid0[0] * v != ih || grid0[1] * v != iw) {
        throw ShapeError("multiview_loss: level-0 grid " + shape_str(grid0) + " does not tile the " +
                         std::to_string(ih) + "x" + std::to_string(iw) + " image with window " + std::to_string(v));
    }
    Tape<T>& tape = pyramid[0].tape();

    Var<T> total;
    bool first = true;
    for (const TransformSpec& view : views) {
        TransformSpec t = view;
        t.ref_h = ih;
        t.ref_w = iw;
        Tensor<T> target = extractor(apply_to_image(image, t), t);
        if (target.shape() != grid0) {
            throw ShapeError("multiview_loss: extractor grid " + shape_str(target.shape()) +
                             " does not match level-0 features " + shape_str(grid0));
        }
        auto target_var = tape.constant(std::move(target));
        auto log_u = log_uncertainty(target_var, psi);
        for (std::size_t l : supervision.levels) {
            auto moved = apply_to_features(pyramid[l], t);
            auto recon = attention_downsample(moved, omegas[l - 1], ih, iw, v);
            auto term = reconstruction_term(target_var, recon, log_u);
            total = first ? term : ad::add(total, term);
            first = false;
        }
    }
    return ad::mul(total, T(1.0 / double(views.size() * supervision.levels.size())));
}

#define PYRAFEAT_INSTANTIATE_LOSS(T)                                                                   \
    template struct UncertaintyParams<T>;                                                              \
    template UncertaintyVars<T> bind(Tape<T>&, UncertaintyParams<T>&);                                 \
    template UncertaintyVars<T> bind_values(Tape<T>&, const UncertaintyParams<T>&);                    \
    template Var<T> log_uncertainty(Var<T>, const UncertaintyVars<T>&);                                \
    template Tensor<T> uncertainty(const Tensor<T>&, const UncertaintyParams<T>&);                     \
    template Var<T> reconstruction_term(Var<T>, Var<T>, Var<T>);                                       \
    template Var<T> multiview_loss(const Tensor<T>&, const Extractor<T>&, std::span<const Var<T>>,     \
                                   std::span<const DownsamplerVars<T>>, const UncertaintyVars<T>&,     \
                                   std::span<const TransformSpec>, const SupervisionSet&, std::size_t);

PYRAFEAT_INSTANTIATE_LOSS(float)
PYRAFEAT_INSTANTIATE_LOSS(double)

}  // namespace pyrafeat
