#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pyrafeat/autodiff.hpp"
#include "pyrafeat/downsample.hpp"
#include "pyrafeat/jitter.hpp"
#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

/// Per-pixel semantic uncertainty u = exp(n_w . f + n_b).
template <typename T>
struct UncertaintyParams {
    Parameter<T> n_w;  // (C, 1)
    Parameter<T> n_b;  // (1)

    /// u = 1 everywhere.
    static UncertaintyParams init(std::size_t channels);
};

template <typename T>
struct UncertaintyVars {
    Var<T> n_w;
    Var<T> n_b;
};

template <typename T>
UncertaintyVars<T> bind(Tape<T>& tape, UncertaintyParams<T>& p);
template <typename T>
UncertaintyVars<T> bind_values(Tape<T>& tape, const UncertaintyParams<T>& p);

/// Levels whose reconstructions enter the loss.
struct SupervisionSet {
    std::vector<std::size_t> levels{1, 2};

    /// Nonempty, unique, each within 1..max_level.
    void validate(std::size_t max_level) const;
    /// Parses "1,2".
    static SupervisionSet parse(const std::string& text);
    std::string str() const;
};

/// log u, (H, W, 1).
template <typename T>
Var<T> log_uncertainty(Var<T> feat0_t, const UncertaintyVars<T>& psi);

/// u, (H, W).
template <typename T>
Tensor<T> uncertainty(const Tensor<T>& feat0_t, const UncertaintyParams<T>& psi);

/// mean over pixels and channels of e^2 / u^2 + log u with e = target - recon.
template <typename T>
Var<T> reconstruction_term(Var<T> target, Var<T> recon, Var<T> log_u);

/// Frozen feature extractor F^0 of a view: receives the transformed image
/// (H, W, 3) and the transform that produced it, returns (H / V, W / V, C).
template <typename T>
using Extractor = std::function<Tensor<T>(const Tensor<T>& view, const TransformSpec& t)>;

/// Multi-view hierarchical reconstruction loss of one image.
///
/// `pyramid` holds F^0..F^L computed from the untransformed image, `omegas[l-1]`
/// the down-sampler of level l. The result averages the reconstruction terms
/// over the supervised levels and the views.
template <typename T>
Var<T> multiview_loss(const Tensor<T>& image, const Extractor<T>& extractor, std::span<const Var<T>> pyramid,
                      std::span<const DownsamplerVars<T>> omegas, const UncertaintyVars<T>& psi,
                      std::span<const TransformSpec> views, const SupervisionSet& supervision, std::size_t v);

}  // namespace pyrafeat
