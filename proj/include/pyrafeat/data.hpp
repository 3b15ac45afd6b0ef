#pragma once

#include <cstddef>
#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "pyrafeat/io.hpp"
#include "pyrafeat/jitter.hpp"
#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

struct ToyBackboneSpec {
    std::size_t patch = 14;
    std::size_t channels = 16;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ToyBackboneSpec& s);
void from_json(const nlohmann::json& j, ToyBackboneSpec& s);

/// Frozen linear patch embedding standing in for a ViT: each p x p RGB patch
/// is flattened and multiplied by a fixed random (3 p^2, C) matrix.
///
/// Filters are mirror-symmetric across the patch's vertical axis, so
/// horizontally flipping an image whose width is a multiple of p flips the
/// feature grid exactly.
class ToyBackbone {
public:
    explicit ToyBackbone(ToyBackboneSpec spec = {});

    const ToyBackboneSpec& spec() const { return spec_; }
    /// (3 p^2, C), rows ordered (dy, dx, rgb).
    const Tensor<double>& weight() const { return weight_; }

    template <typename T>
    Tensor<T> features(const Tensor<T>& image) const;

private:
    ToyBackboneSpec spec_;
    Tensor<double> weight_;
};

template <typename T>
Tensor<T> toy_features(const Tensor<T>& image, const ToyBackboneSpec& spec) {
    return ToyBackbone(spec).features(image);
}

/// Synthetic segmentation set: coloured discs and polygons on a grey
/// texture. Class 0 is background; class c > 0 has its own hue, so labels
/// follow from pixel colours alone.
struct ShapesDataset {
    std::size_t classes = 4;
    std::size_t train_count = 0;  ///< items [0, train_count) train, the rest test
    std::vector<Tensor<float>> images;  // (H, W, 3) in [0, 1]
    std::vector<Tensor<float>> labels;  // (H, W, 1) class ids

    std::size_t size() const { return images.size(); }
};

/// Reproducible per seed; item i depends only on (seed, i). Shapes are added
/// to the least represented class of the image until background covers at
/// most 1/classes of it.
ShapesDataset gen_shapes(std::uint64_t seed, std::size_t n, std::size_t classes, std::size_t size = 112,
                         std::size_t train_count = 0, std::size_t threads = 1);

/// Pixel colour of class `c` before noise.
std::array<float, 3> class_color(std::size_t c, std::size_t classes);

/// Writes images as PNG, labels as PNG and an index JSON.
void save_dataset(const ShapesDataset& ds, const fs::path& dir);
ShapesDataset load_dataset(const fs::path& dir);

/// Guidance images together with the level-0 features F^0(t(I)) of any
/// transformed view of them.
template <typename T>
class FeatureSource {
public:
    virtual ~FeatureSource() = default;
    virtual std::size_t size() const = 0;
    virtual const Tensor<T>& image(std::size_t i) const = 0;
    virtual Tensor<T> features(std::size_t i, const TransformSpec& t) const = 0;
    /// False when only identity and pure flips are available.
    virtual bool arbitrary_transforms() const = 0;
    virtual std::size_t patch() const = 0;
    virtual std::size_t channels() const = 0;
};

template <typename T>
class ToyFeatureSource : public FeatureSource<T> {
public:
    ToyFeatureSource(std::vector<Tensor<T>> images, ToyBackboneSpec spec);

    std::size_t size() const override { return images_.size(); }
    const Tensor<T>& image(std::size_t i) const override { return images_.at(i); }
    Tensor<T> features(std::size_t i, const TransformSpec& t) const override;
    bool arbitrary_transforms() const override { return true; }
    std::size_t patch() const override { return backbone_.spec().patch; }
    std::size_t channels() const override { return backbone_.spec().channels; }
    const ToyBackbone& backbone() const { return backbone_; }

private:
    std::vector<Tensor<T>> images_;
    ToyBackbone backbone_;
};

/// Directory manifest of pre-extracted features:
/// {"model", "layer", "input_resolution": [h, w], "grid": [h, w], "patch",
///  "channels", "items": [{"image", "features", "features_hflip"?}]}
/// Paths are relative to the directory.
struct ExportManifest {
    std::string model;
    std::string layer = "second-to-last";
    std::size_t input_h = 0, input_w = 0;
    std::size_t grid_h = 0, grid_w = 0;
    std::size_t patch = 14;
    std::size_t channels = 0;
    struct Item {
        std::string image;
        std::string features;
        std::string features_hflip;
    };
    std::vector<Item> items;
};

void to_json(nlohmann::json& j, const ExportManifest& m);
void from_json(const nlohmann::json& j, ExportManifest& m);
ExportManifest load_export_manifest(const fs::path& dir);

/// Features read from an export manifest. Only identity and pure flips can
/// be served; images are resized to grid * patch.
template <typename T>
class ManifestFeatureSource : public FeatureSource<T> {
public:
    explicit ManifestFeatureSource(const fs::path& dir);

    std::size_t size() const override { return images_.size(); }
    const Tensor<T>& image(std::size_t i) const override { return images_.at(i); }
    Tensor<T> features(std::size_t i, const TransformSpec& t) const override;
    bool arbitrary_transforms() const override { return false; }
    std::size_t patch() const override { return manifest_.patch; }
    std::size_t channels() const override { return manifest_.channels; }

private:
    ExportManifest manifest_;
    std::vector<Tensor<T>> images_;
    std::vector<Tensor<T>> feats_;
    std::vector<Tensor<T>> flipped_;
};

}  // namespace pyrafeat
