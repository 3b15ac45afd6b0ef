#include "pyrafeat/jbu.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "pyrafeat/rng.hpp"

namespace pyrafeat {

void PyramidConfig::validate() const {
    if (levels > 3) throw ConfigError("pyramid levels must be in 0..3, got " + std::to_string(levels));
    if (window == 0 || window % 2 == 0) throw ConfigError("window must be odd, got " + std::to_string(window));
    if (proj_dim == 0) throw ConfigError("projection width must be >= 1");
}

template <typename T>
JbuLevelParams<T> JbuLevelParams<T>::init(std::size_t guidance_channels, std::size_t proj_dim, std::uint64_t seed,
                                          std::size_t level) {
    JbuLevelParams p;
    const std::string prefix = "jbu" + std::to_string(level) + ".";
    p.log_sigma_dist = Parameter<T>(prefix + "log_sigma_dist", Tensor<T>::scalar(T(std::log(2.0))));
    p.log_sigma_sim = Parameter<T>(prefix + "log_sigma_sim", Tensor<T>::scalar(T(0)));
    Rng rng(derive_seed(seed, {0x7e7a, level}));
    const double bound = 1.0 / std::sqrt(double(guidance_channels));
    Tensor<T> theta({guidance_channels, proj_dim});
    for (auto& v : theta.storage()) v = T(uniform(rng, -bound, bound));
    p.theta = Parameter<T>(prefix + "theta", std::move(theta));
    return p;
}

template struct JbuLevelParams<float>;
template struct JbuLevelParams<double>;

Tensor<double> spatial_weights(double sigma_dist, std::size_t u) {
    if (!(sigma_dist > 0)) throw ShapeError("sigma_dist must be positive");
    if (u % 2 == 0) throw ShapeError("window must be odd, got " + std::to_string(u));
    const long half = long(u / 2);
    Tensor<double> w({u, u});
    for (long dy = -half; dy <= half; ++dy) {
        for (long dx = -half; dx <= half; ++dx) {
            w.storage()[(dy + half) * long(u) + (dx + half)] =
                std::exp(-double(dx * dx + dy * dy) / (2 * sigma_dist * sigma_dist));
        }
    }
    return w;
}

template <typename T>
Tensor<T> project_guidance(const Tensor<T>& guidance, const Tensor<T>& theta) {
    require_hwc(guidance, "project_guidance");
    if (theta.rank() != 2 || theta.dim(0) != guidance.dim(2)) {
        throw ShapeError("project_guidance: guidance has " + std::to_string(guidance.dim(2)) +
                         " channels, theta is " + shape_str(theta.shape()));
    }
    Tape<T> tape(Tape<T>::Mode::inference);
    return ad::channel_project(tape.constant(guidance), tape.constant(theta)).value();
}

template <typename T>
Tensor<T> similarity_weights(const Tensor<T>& keys, const Tensor<T>& query, T sigma_sim) {
    if (!(sigma_sim > 0)) throw ShapeError("sigma_sim must be positive");
    if (keys.rank() < 2 || query.rank() != 1 || keys.shape().back() != query.size()) {
        throw ShapeError("similarity_weights: keys " + shape_str(keys.shape()) + " vs query " +
                         shape_str(query.shape()));
    }
    const std::size_t d = query.size();
    const std::size_t n = keys.size() / d;
    Tape<T> tape(Tape<T>::Mode::inference);
    auto k = tape.constant(keys.reshaped({n, d}));
    auto q = tape.constant(query.reshaped({d, 1}));
    auto logits = ad::mul(ad::reshape(ad::matmul(k, q), {n}), T(1) / (sigma_sim * sigma_sim));
    Shape out_shape(keys.shape().begin(), keys.shape().end() - 1);
    return ad::softmax(logits, 0).value().reshaped(out_shape);
}

template <typename T>
Tensor<T> jbu_kernel(const Tensor<T>& spatial, const Tensor<T>& similarity) {
    if (spatial.shape() != similarity.shape()) {
        throw ShapeError("jbu_kernel: " + shape_str(spatial.shape()) + " vs " + shape_str(similarity.shape()));
    }
    Tensor<T> k(spatial.shape());
    T total = 0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        if (spatial[i] < 0 || similarity[i] < 0) throw ShapeError("jbu_kernel: negative weight");
        total += (k[i] = spatial[i] * similarity[i]);
    }
    if (!(total > 0)) throw std::logic_error("jbu_kernel: all-zero weight product");
    for (auto& v : k.storage()) v /= total;
    return k;
}

template Tensor<float> project_guidance(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> project_guidance(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> similarity_weights(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> similarity_weights(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> jbu_kernel(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> jbu_kernel(const Tensor<double>&, const Tensor<double>&);

// ---------------------------------------------------------------------------

template <typename T>
JbuLevelVars<T> bind(Tape<T>& tape, JbuLevelParams<T>& p) {
    return {tape.param(p.log_sigma_dist), tape.param(p.log_sigma_sim), tape.param(p.theta)};
}

template <typename T>
JbuLevelVars<T> bind_values(Tape<T>& tape, const JbuLevelParams<T>& p) {
    return {tape.constant(p.log_sigma_dist.value), tape.constant(p.log_sigma_sim.value), tape.constant(p.theta.value)};
}

template <typename T>
Var<T> jbu_kernels(Var<T> projected, const JbuLevelVars<T>& p, std::size_t u) {
    require_hwc(projected.value(), "jbu_kernels");
    const std::size_t h = projected.shape()[0], w = projected.shape()[1];
    const std::size_t k = u * u;
    auto& tape = projected.tape();

    auto dots = ad::gather_dot(projected, window_gather_map(h, w, u), projected, Shape{h, w});  // (H, W, K)
    auto inv_sim2 = ad::reshape(ad::exp(ad::mul(p.log_sigma_sim, T(-2))), {1, 1, 1});

    // Normalised spatial x similarity equals a single softmax over the summed
    // logits: exp(-r^2 / 2 sigma^2) * softmax(s) / Z = softmax(s - r^2 / 2 sigma^2).
    Tensor<T> half_r2({1, 1, k});
    const long half = long(u / 2);
    for (long dy = -half; dy <= half; ++dy) {
        for (long dx = -half; dx <= half; ++dx) {
            half_r2[(dy + half) * long(u) + (dx + half)] = T(-0.5 * double(dx * dx + dy * dy));
        }
    }
    auto inv_dist2 = ad::reshape(ad::exp(ad::mul(p.log_sigma_dist, T(-2))), {1, 1, 1});
    auto spatial_logits = ad::mul(tape.constant(std::move(half_r2)), inv_dist2);

    return ad::softmax(ad::add(ad::mul(dots, inv_sim2), spatial_logits), 2);
}

template <typename T>
Var<T> jbu_upsample_2x(Var<T> feat, Var<T> guidance, const JbuLevelVars<T>& p, std::size_t u) {
    require_hwc(feat.value(), "jbu_upsample_2x features");
    require_hwc(guidance.value(), "jbu_upsample_2x guidance");
    const std::size_t h = feat.shape()[0], w = feat.shape()[1];
    const std::size_t gh = guidance.shape()[0], gw = guidance.shape()[1];
    if (gh != 2 * h || gw != 2 * w) {
        throw ShapeError("jbu_upsample_2x: guidance " + shape_str(guidance.shape()) +
                         " is not twice the feature grid " + shape_str(feat.shape()));
    }

    auto kernel = jbu_kernels(ad::channel_project(guidance, p.theta), p, u);  // (H, W, K)

    // Bilinear samples of the low-resolution map at every neighbour.
    return ad::gather_contract(feat, window_sample_map(h, w, gh, gw, u), kernel, Shape{gh, gw});
}

template <typename T>
std::vector<Tensor<T>> pyramid_guidance(const Tensor<T>& image, std::size_t h0, std::size_t w0, std::size_t levels) {
    require_hwc(image, "pyramid guidance image");
    if (image.dim(0) < (h0 << levels) || image.dim(1) < (w0 << levels)) {
        throw ShapeError("guidance image " + shape_str(image.shape()) + " is smaller than the level-" +
                         std::to_string(levels) + " grid " + std::to_string(h0 << levels) + "x" +
                         std::to_string(w0 << levels));
    }
    std::vector<Tensor<T>> out;
    for (std::size_t l = 1; l <= levels; ++l) out.push_back(bilinear_resample(image, h0 << l, w0 << l));
    return out;
}

template <typename T>
std::vector<Var<T>> build_pyramid(Var<T> feat0, const Tensor<T>& image, std::span<const JbuLevelVars<T>> params,
                                  const PyramidConfig& cfg) {
    cfg.validate();
    require_hwc(feat0.value(), "build_pyramid features");
    const std::size_t needed = cfg.levels == 0 ? 0 : (cfg.share_params ? 1 : cfg.levels);
    if (params.size() < needed) {
        throw ShapeError("build_pyramid: " + std::to_string(params.size()) + " parameter sets for " +
                         std::to_string(cfg.levels) + " levels");
    }
    const auto guides = pyramid_guidance(image, feat0.shape()[0], feat0.shape()[1], cfg.levels);
    std::vector<Var<T>> levels{feat0};
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        const auto& p = params[cfg.share_params ? 0 : l];
        levels.push_back(jbu_upsample_2x(levels.back(), feat0.tape().constant(guides[l]), p, cfg.window));
    }
    return levels;
}

template <typename T>
Tensor<T> jbu_upsample_2x(const Tensor<T>& feat, const Tensor<T>& guidance, const JbuLevelParams<T>& p,
                          std::size_t u) {
    Tape<T> tape(Tape<T>::Mode::inference);
    return jbu_upsample_2x(tape.constant(feat), tape.constant(guidance), bind_values(tape, p), u).value();
}

template <typename T>
std::vector<Tensor<T>> build_pyramid(const Tensor<T>& feat0, const Tensor<T>& image,
                                     std::span<const JbuLevelParams<T>> params, const PyramidConfig& cfg) {
    Tape<T> tape(Tape<T>::Mode::inference);
    std::vector<JbuLevelVars<T>> vars;
    for (const auto& p : params) vars.push_back(bind_values(tape, p));
    const auto levels = build_pyramid<T>(tape.constant(feat0), image, vars, cfg);
    std::vector<Tensor<T>> out;
    out.push_back(feat0);
    for (std::size_t l = 1; l < levels.size(); ++l) out.push_back(levels[l].value());
    return out;
}

#define PYRAFEAT_INSTANTIATE_JBU(T)                                                                   \
    template JbuLevelVars<T> bind(Tape<T>&, JbuLevelParams<T>&);                                      \
    template JbuLevelVars<T> bind_values(Tape<T>&, const JbuLevelParams<T>&);                         \
    template Var<T> jbu_kernels(Var<T>, const JbuLevelVars<T>&, std::size_t);                         \
    template Var<T> jbu_upsample_2x(Var<T>, Var<T>, const JbuLevelVars<T>&, std::size_t);             \
    template std::vector<Tensor<T>> pyramid_guidance(const Tensor<T>&, std::size_t, std::size_t,      \
                                                     std::size_t);                                    \
    template std::vector<Var<T>> build_pyramid(Var<T>, const Tensor<T>&, std::span<const JbuLevelVars<T>>, \
                                               const PyramidConfig&);                                 \
    template Tensor<T> jbu_upsample_2x(const Tensor<T>&, const Tensor<T>&, const JbuLevelParams<T>&,  \
                                       std::size_t);                                                  \
    template std::vector<Tensor<T>> build_pyramid(const Tensor<T>&, const Tensor<T>&,                 \
                                                  std::span<const JbuLevelParams<T>>, const PyramidConfig&);

PYRAFEAT_INSTANTIATE_JBU(float)
PYRAFEAT_INSTANTIATE_JBU(double)

}  // namespace pyrafeat
