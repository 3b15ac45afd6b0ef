#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pyrafeat/data.hpp"
#include "pyrafeat/io.hpp"
#include "pyrafeat/tensor.hpp"
#include "pyrafeat/train.hpp"

namespace pyrafeat {

/// Bilinear up-sampling of level-0 features by 2, 4 or 8.
template <typename T>
Tensor<T> bilinear_baseline(const Tensor<T>& feat0, std::size_t factor);

// ---------------------------------------------------------------------------
// Linear probing.

enum class ProbeAlignment {
    nearest,   ///< each label pixel reads the feature cell containing its centre
    upsample,  ///< features bilinearly resized to label resolution
};

/// Probe samples: one row of features per sample and a class histogram of
/// the label pixels it covers.
struct ProbeSet {
    Tensor<double> features;             // (N, C)
    std::vector<std::uint32_t> counts;   // (N * classes)
    std::size_t classes = 0;

    std::size_t samples() const { return features.rank() ? features.dim(0) : 0; }
    std::size_t pixels() const;
};

/// Pairs feature maps (h, w, C) with label maps (H, W, 1). Labels outside
/// 0..classes-1 raise ShapeError.
template <typename T>
ProbeSet make_probe_set(std::span<const Tensor<T>> features, std::span<const Tensor<float>> labels,
                        std::size_t classes, ProbeAlignment align = ProbeAlignment::nearest);

struct ProbeConfig {
    std::size_t steps = 360;
    double lr = 5e-3;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    std::string method;
    double pixel_accuracy = 0.0;
    /// Empty for classes absent from the training split or the test split.
    std::vector<std::optional<double>> per_class;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const ProbeResult& r);

/// Softmax regression C -> classes trained full-batch with Adam on the
/// pixel-weighted cross-entropy; accuracy is counted over every labelled
/// test pixel.
ProbeResult linear_probe(const ProbeSet& train, const ProbeSet& test, const ProbeConfig& cfg,
                         const std::string& method = "");

// ---------------------------------------------------------------------------
// Image classification.

struct HeadConfig {
    std::size_t hidden = 32;
    std::size_t steps = 360;
    double lr = 5e-3;
    std::uint64_t seed = 0;
};

/// Mean-pooled features -> linear -> relu -> linear, trained with softmax
/// cross-entropy on frozen features. Returns held-out accuracy.
template <typename T>
double classification_head(std::span<const Tensor<T>> train_maps, std::span<const std::size_t> train_labels,
                           std::span<const Tensor<T>> test_maps, std::span<const std::size_t> test_labels,
                           std::size_t classes, const HeadConfig& cfg);

/// Most frequent non-background class of a label map, or 0 when the map
/// holds only background.
std::size_t dominant_class(const Tensor<float>& labels, std::size_t classes);

// ---------------------------------------------------------------------------
// PCA visualisation.

struct PcaBasis {
    std::vector<double> mean;      // (C)
    Tensor<double> components;     // (k, C); rows past `rank` are zero
    std::vector<double> explained; // variance fraction per component
    std::size_t rank = 0;
};

/// Principal axes of the rows of `samples` (N, C). The largest-magnitude
/// coefficient of each component is positive. Missing components (rank
/// below k) are zero-filled with a warning on stderr.
PcaBasis pca_fit(const Tensor<double>& samples, std::size_t k = 3);

/// Rows of every pixel of (H, W, C) maps.
template <typename T>
Tensor<double> pixel_rows(std::span<const Tensor<T>> maps);

/// (H, W, k) coordinates of centred pixels.
template <typename T>
Tensor<double> pca_project(const Tensor<T>& feat, const PcaBasis& basis);

/// Each of the first three components min-max scaled to 0..255 on its own
/// and stored as v / 255; a constant component maps to 0.
template <typename T>
Tensor<float> pca_rgb(const Tensor<T>& feat, const PcaBasis& basis);

/// Writes pca_rgb as PPM or PNG by extension.
template <typename T>
void pca_export_rgb(const Tensor<T>& feat, const PcaBasis& basis, const fs::path& path);

// ---------------------------------------------------------------------------
// Held-out evaluation of a trained up-sampler.

/// Mean squared error between F^0(t(I)) and the level-l reconstruction, per
/// level 1..L, averaged over items and `views` jitters drawn from (seed, item).
template <typename T>
std::vector<double> reconstruction_mse(const Model<T>& model, const FeatureSource<T>& source,
                                       std::span<const std::size_t> items, const JitterConfig& jitter,
                                       std::size_t views, std::uint64_t seed);

/// Level-l pyramid features of the given items.
template <typename T>
std::vector<Tensor<T>> level_features(const Model<T>& model, const FeatureSource<T>& source,
                                      std::span<const std::size_t> items, std::size_t level);

/// bilinear_baseline of the items' level-0 features.
template <typename T>
std::vector<Tensor<T>> bilinear_features(const FeatureSource<T>& source, std::span<const std::size_t> items,
                                         std::size_t factor);

// ---------------------------------------------------------------------------
// Ablation over pyramid depth and hierarchical supervision.

struct AblationConfig {
    std::vector<std::size_t> levels{1, 2, 3};
    std::vector<bool> hs{true, false};
    std::vector<std::uint64_t> seeds{0};
    TrainConfig train;
    ToyBackboneSpec backbone;
    std::size_t train_images = 32;
    std::size_t test_images = 16;
    std::size_t classes = 4;
    std::size_t image_size = 112;
    ProbeConfig probe;
    std::size_t threads = 1;
};

struct AblationRow {
    std::size_t levels = 0;
    bool hs = false;
    std::uint64_t seed = 0;
    std::string supervision;
    std::size_t level = 0;
    bool supervised = false;
    double recon_mse = 0.0;
    double probe_accuracy = 0.0;
    double final_loss = 0.0;
    double tape_mib = 0.0;
};

struct AblationTiming {
    std::size_t levels = 0;
    bool hs = false;
    std::uint64_t seed = 0;
    double train_seconds = 0.0;
    double eval_seconds = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::vector<AblationTiming> timings;
};

/// Supervised levels of a run: 1..L with hierarchical supervision, {L} without.
SupervisionSet ablation_supervision(std::size_t levels, bool hs);

/// Trains every (L, hs, seed) configuration on the shapes dataset and
/// evaluates each level on the held-out split. `on_progress` runs after each
/// configuration.
AblationReport ablation_run(const AblationConfig& cfg,
                            const std::function<void(const AblationReport&)>& on_progress = {});

/// Rows without wall-clock, reproducible bit-for-bit per seed.
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string timing_csv(const std::vector<AblationTiming>& timings);

}  // namespace pyrafeat
