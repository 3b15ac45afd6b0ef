#pragma once

#include <cstddef>

#include "json.hpp"
#include "pyrafeat/autodiff.hpp"
#include "pyrafeat/resample.hpp"
#include "pyrafeat/rng.hpp"
#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

/// Normalised crop window inside the padded, zoomed canvas.
struct CropWindow {
    double cx = 0.5;
    double cy = 0.5;
    double w = 1.0;
    double h = 1.0;

    friend bool operator==(const CropWindow&, const CropWindow&) = default;
};

/// One geometric jitter: edge-replicated pad, zoom + crop back to the source
/// extents, then an optional horizontal flip.
///
/// `pad` is measured in pixels of the reference image (ref_h x ref_w) and is
/// rescaled fractionally when the transform is applied to a coarser grid, so
/// a single spec maps image and feature carriers onto the same geometry.
struct TransformSpec {
    bool hflip = false;
    int pad = 0;
    double zoom = 1.0;
    CropWindow crop;
    std::size_t ref_h = 0;
    std::size_t ref_w = 0;

    bool is_identity() const { return !hflip && pad == 0 && zoom == 1.0 && crop.w == 1.0 && crop.h == 1.0; }
    /// Crop window lies inside the canvas and zoom >= 1.
    bool valid() const;

    friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

struct JitterConfig {
    int max_pad = 4;
    double max_zoom = 1.25;
    double flip_prob = 0.5;

    void validate() const;
};

/// Draws pad, zoom, crop centre and flip, in that order, consuming the same
/// number of draws regardless of the configuration.
TransformSpec sample_transform(Rng& rng, const JitterConfig& cfg, std::size_t ref_h, std::size_t ref_w);

/// Sampling operator of `spec` on an h x w grid.
RowMap transform_map(const TransformSpec& spec, std::size_t h, std::size_t w);

/// Applies `spec` to an image whose extents are the spec's reference.
template <typename T>
Tensor<T> apply_to_image(const Tensor<T>& img, const TransformSpec& spec);

/// Applies `spec` to a feature grid of any resolution.
template <typename T>
Tensor<T> apply_to_features(const Tensor<T>& feat, const TransformSpec& spec);

template <typename T>
Var<T> apply_to_features(Var<T> feat, const TransformSpec& spec);

void to_json(nlohmann::json& j, const TransformSpec& s);
void from_json(const nlohmann::json& j, TransformSpec& s);
void to_json(nlohmann::json& j, const JitterConfig& c);
void from_json(const nlohmann::json& j, JitterConfig& c);

}  // namespace pyrafeat
