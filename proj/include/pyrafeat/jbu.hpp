#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pyrafeat/autodiff.hpp"
#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

/// Learnables of one 2x joint bilateral up-sampling stage.
///
/// Widths are stored as logarithms so that sigma = exp(log_sigma) stays
/// positive under unconstrained updates. `theta` maps guidance channels to
/// the projection width d used for query/key dot products.
template <typename T>
struct JbuLevelParams {
    Parameter<T> log_sigma_dist;
    Parameter<T> log_sigma_sim;
    Parameter<T> theta;

    /// log sigma_dist = log 2, log sigma_sim = 0, theta ~ U(-1/sqrt(c), 1/sqrt(c)).
    static JbuLevelParams init(std::size_t guidance_channels, std::size_t proj_dim, std::uint64_t seed,
                               std::size_t level);

    T sigma_dist() const { return std::exp(log_sigma_dist.value.item()); }
    T sigma_sim() const { return std::exp(log_sigma_sim.value.item()); }
};

struct PyramidConfig {
    std::size_t levels = 2;  ///< number of 2x stages, 0..3
    std::size_t window = 7;  ///< neighbourhood U (odd)
    bool share_params = false;
    std::size_t proj_dim = 32;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Kernel pieces on plain tensors.

/// Unnormalised Gaussian over integer offsets of a u x u window, (u, u).
Tensor<double> spatial_weights(double sigma_dist, std::size_t u);

/// Per-pixel linear map (H, W, c) x (c, d) -> (H, W, d).
template <typename T>
Tensor<T> project_guidance(const Tensor<T>& guidance, const Tensor<T>& theta);

/// Softmax over the window of <query, key> / sigma_sim^2.
/// `keys` is (..., d) with the window flattened into the leading axes.
template <typename T>
Tensor<T> similarity_weights(const Tensor<T>& keys, const Tensor<T>& query, T sigma_sim);

/// Elementwise product renormalised to sum to one.
template <typename T>
Tensor<T> jbu_kernel(const Tensor<T>& spatial, const Tensor<T>& similarity);

// ---------------------------------------------------------------------------
// Differentiable stages.

template <typename T>
struct JbuLevelVars {
    Var<T> log_sigma_dist;
    Var<T> log_sigma_sim;
    Var<T> theta;
};

template <typename T>
JbuLevelVars<T> bind(Tape<T>& tape, JbuLevelParams<T>& p);

/// Binds current values as constants (no gradient).
template <typename T>
JbuLevelVars<T> bind_values(Tape<T>& tape, const JbuLevelParams<T>& p);

/// Kernels of every target pixel, (H, W, U*U), from projected guidance (H, W, d).
template <typename T>
Var<T> jbu_kernels(Var<T> projected, const JbuLevelVars<T>& p, std::size_t u);

/// 2x up-sampling of (h, w, C) features steered by (2h, 2w, c) guidance.
///
/// Each output pixel averages the bilinear samples of the low-resolution map
/// taken at the U x U target-grid neighbours around it (edge-clamped),
/// weighted by the joint kernel.
template <typename T>
Var<T> jbu_upsample_2x(Var<T> feat, Var<T> guidance, const JbuLevelVars<T>& p, std::size_t u);

/// Levels 0..L; level l+1 is guided by `image` resized to its grid.
template <typename T>
std::vector<Var<T>> build_pyramid(Var<T> feat0, const Tensor<T>& image, std::span<const JbuLevelVars<T>> params,
                                  const PyramidConfig& cfg);

/// Guidance image resized to each level's grid, levels 1..L.
template <typename T>
std::vector<Tensor<T>> pyramid_guidance(const Tensor<T>& image, std::size_t h0, std::size_t w0, std::size_t levels);

// Value-only conveniences.
template <typename T>
Tensor<T> jbu_upsample_2x(const Tensor<T>& feat, const Tensor<T>& guidance, const JbuLevelParams<T>& p,
                          std::size_t u);

template <typename T>
std::vector<Tensor<T>> build_pyramid(const Tensor<T>& feat0, const Tensor<T>& image,
                                     std::span<const JbuLevelParams<T>> params, const PyramidConfig& cfg);

}  // namespace pyrafeat
