#include "pyrafeat/jitter.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace pyrafeat {

namespace {

// Removes rounding noise so that integer-aligned sampling positions hit the
// grid exactly (keeps pure crops and identities bit-exact).
double snap(double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
}

}  // namespace

bool TransformSpec::valid() const {
    constexpr double eps = 1e-12;
    return zoom >= 1.0 && pad >= 0 && crop.w > 0 && crop.h > 0 && crop.w <= 1.0 + eps && crop.h <= 1.0 + eps &&
           crop.cx - crop.w / 2 >= -eps && crop.cx + crop.w / 2 <= 1.0 + eps && crop.cy - crop.h / 2 >= -eps &&
           crop.cy + crop.h / 2 <= 1.0 + eps;
}

void JitterConfig::validate() const {
    if (max_pad < 0) throw ConfigError("jitter max_pad must be >= 0");
    if (!(max_zoom >= 1.0)) throw ConfigError("jitter max_zoom must be >= 1");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("jitter flip_prob must be in [0, 1]");
}

TransformSpec sample_transform(Rng& rng, const JitterConfig& cfg, std::size_t ref_h, std::size_t ref_w) {
    cfg.validate();
    TransformSpec s;
    s.ref_h = ref_h;
    s.ref_w = ref_w;
    s.pad = int(uniform_int(rng, 0, cfg.max_pad));
    s.zoom = uniform(rng, 1.0, cfg.max_zoom);
    s.crop.w = s.crop.h = 1.0 / s.zoom;
    const double ux = uniform01(rng), uy = uniform01(rng);
    s.crop.cx = s.crop.w / 2 + ux * (1.0 - s.crop.w);
    s.crop.cy = s.crop.h / 2 + uy * (1.0 - s.crop.h);
    s.hflip = uniform01(rng) < cfg.flip_prob;
    return s;
}

RowMap transform_map(const TransformSpec& spec, std::size_t h, std::size_t w) {
    if (!spec.valid()) throw ShapeError("transform crop window lies outside the canvas");
    const double ref_h = spec.ref_h ? double(spec.ref_h) : double(h);
    const double ref_w = spec.ref_w ? double(spec.ref_w) : double(w);
    const double pad_y = spec.pad * double(h) / ref_h;
    const double pad_x = spec.pad * double(w) / ref_w;
    const double canvas_h = double(h) + 2 * pad_y;
    const double canvas_w = double(w) + 2 * pad_x;
    const double y_origin = spec.crop.cy - spec.crop.h / 2;
    const double x_origin = spec.crop.cx - spec.crop.w / 2;

    RowMap m;
    m.in_rows = h * w;
    m.out_rows = h * w;
    m.taps = 4;
    m.index.resize(m.out_rows * 4);
    m.weight.resize(m.out_rows * 4);
    for (std::size_t y = 0; y < h; ++y) {
        const double vy = y_origin + (double(y) + 0.5) / double(h) * spec.crop.h;
        const double sy = snap(vy * canvas_h - pad_y - 0.5);
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t src_x = spec.hflip ? w - 1 - x : x;
            const double vx = x_origin + (double(src_x) + 0.5) / double(w) * spec.crop.w;
            const double sx = snap(vx * canvas_w - pad_x - 0.5);
            const BilinearTaps t = bilinear_taps(h, w, sy, sx);
            const std::size_t r = y * w + x;
            for (int k = 0; k < 4; ++k) {
                m.index[r * 4 + k] = t.index[k];
                m.weight[r * 4 + k] = t.weight[k];
            }
        }
    }
    return m;
}

namespace {

template <typename T>
Tensor<T> apply(const Tensor<T>& src, const TransformSpec& spec) {
    require_hwc(src, "jitter");
    if (spec.is_identity()) return src;
    if (spec.pad == 0 && spec.zoom == 1.0 && spec.crop.w == 1.0 && spec.crop.h == 1.0) return hflip(src);
    return remap(src, transform_map(spec, src.dim(0), src.dim(1)), Shape{src.dim(0), src.dim(1)});
}

}  // namespace

template <typename T>
Tensor<T> apply_to_image(const Tensor<T>& img, const TransformSpec& spec) {
    TransformSpec s = spec;
    s.ref_h = img.rank() == 3 ? img.dim(0) : 0;
    s.ref_w = img.rank() == 3 ? img.dim(1) : 0;
    return apply(img, s);
}

template <typename T>
Tensor<T> apply_to_features(const Tensor<T>& feat, const TransformSpec& spec) {
    return apply(feat, spec);
}

template <typename T>
Var<T> apply_to_features(Var<T> feat, const TransformSpec& spec) {
    require_hwc(feat.value(), "jitter");
    if (spec.is_identity()) return feat;
    const std::size_t h = feat.shape()[0], w = feat.shape()[1];
    auto map = std::make_shared<const RowMap>(transform_map(spec, h, w));
    return ad::remap(feat, std::move(map), Shape{h, w});
}

template Tensor<float> apply_to_image(const Tensor<float>&, const TransformSpec&);
template Tensor<double> apply_to_image(const Tensor<double>&, const TransformSpec&);
template Tensor<float> apply_to_features(const Tensor<float>&, const TransformSpec&);
template Tensor<double> apply_to_features(const Tensor<double>&, const TransformSpec&);
template Var<float> apply_to_features(Var<float>, const TransformSpec&);
template Var<double> apply_to_features(Var<double>, const TransformSpec&);

void to_json(nlohmann::json& j, const TransformSpec& s) {
    j = nlohmann::json{{"hflip", s.hflip},
                       {"pad", s.pad},
                       {"zoom", s.zoom},
                       {"crop", {s.crop.cx, s.crop.cy, s.crop.w, s.crop.h}},
                       {"reference", {s.ref_h, s.ref_w}}};
}

void from_json(const nlohmann::json& j, TransformSpec& s) {
    s.hflip = j.at("hflip").get<bool>();
    s.pad = j.at("pad").get<int>();
    s.zoom = j.at("zoom").get<double>();
    const auto& c = j.at("crop");
    s.crop = {c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(), c.at(3).get<double>()};
    if (j.contains("reference")) {
        s.ref_h = j["reference"].at(0).get<std::size_t>();
        s.ref_w = j["reference"].at(1).get<std::size_t>();
    }
}

void to_json(nlohmann::json& j, const JitterConfig& c) {
    j = nlohmann::json{{"max_pad", c.max_pad}, {"max_zoom", c.max_zoom}, {"flip_prob", c.flip_prob}};
}

void from_json(const nlohmann::json& j, JitterConfig& c) {
    c.max_pad = j.value("max_pad", c.max_pad);
    c.max_zoom = j.value("max_zoom", c.max_zoom);
    c.flip_prob = j.value("flip_prob", c.flip_prob);
}

}  // namespace pyrafeat
