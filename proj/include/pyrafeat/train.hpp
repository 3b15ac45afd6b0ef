#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pyrafeat/autodiff.hpp"
#include "pyrafeat/data.hpp"
#include "pyrafeat/downsample.hpp"
#include "pyrafeat/io.hpp"
#include "pyrafeat/jbu.hpp"
#include "pyrafeat/jitter.hpp"
#include "pyrafeat/loss.hpp"

namespace pyrafeat {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::size_t steps = 300;
    std::size_t batch = 4;
    AdamConfig adam;
    PyramidConfig pyramid;
    JitterConfig jitter;
    SupervisionSet supervision;
    std::size_t views = 2;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  ///< 0: only at the end
    std::string precision = "f32";     ///< "f32" or "f64"
    bool freeze_theta = false;

    void validate() const;
};

/// Every learnable of the up-sampler and its training objective.
template <typename T>
struct Model {
    PyramidConfig pyramid;
    std::size_t channels = 0;
    std::size_t guidance_channels = 3;
    std::vector<JbuLevelParams<T>> jbu;           // one per level, or one when shared
    std::vector<DownsamplerParams<T>> omegas;     // level l at index l - 1
    UncertaintyParams<T> psi;

    static Model init(const PyramidConfig& pyramid, std::size_t channels, std::uint64_t seed);

    std::vector<Parameter<T>*> parameters();
    std::vector<const Parameter<T>*> parameters() const;
    /// Parameter groups: sigma_dist, sigma_sim, theta, omega, psi.
    std::vector<std::pair<std::string, std::vector<Parameter<T>*>>> groups();
    void zero_grad();

    /// F^0..F^L of one image with the current values (no gradient).
    std::vector<Tensor<T>> upsample(const Tensor<T>& feat0, const Tensor<T>& image) const;
};

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::size_t t = 0;

    static AdamState zeros(const std::vector<Parameter<T>*>& params);
};

/// One Adam update with bias correction from each Parameter's grad. Frozen
/// parameters are skipped. A non-finite gradient raises NumericError naming
/// the parameter before anything is modified.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, const AdamConfig& cfg);

template <typename T>
struct Checkpoint {
    Model<T> model;
    AdamState<T> adam;
    std::size_t step = 0;
    std::vector<double> losses;
    nlohmann::json config;
    std::string config_hash;
};

/// Directory of params/<name>.npy, adam/<name>.{m,v}.npy, state.json and
/// loss.csv.
template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const fs::path& dir);
template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& dir);
/// "f32" or "f64" as recorded in state.json.
std::string checkpoint_precision(const fs::path& dir);

/// Loss history as "step,loss" lines with round-trip precision.
std::string loss_csv(const std::vector<double>& losses);

template <typename T>
struct TrainOptions {
    fs::path out_dir;             ///< empty: nothing written
    nlohmann::json run_config;    ///< embedded in checkpoints
    const Checkpoint<T>* resume = nullptr;
    std::size_t threads = 1;
    std::function<void(std::size_t step, double loss)> on_step;
};

/// Stats gathered while training, independent of wall-clock.
struct TrainStats {
    std::size_t peak_tape_bytes = 0;
};

/// Adam on the multi-view loss. Step s draws its batch and views from
/// streams derived from (seed, s), so a resumed run replays exactly. Batch
/// items may run on several threads; their gradients are reduced in item
/// order. A non-finite loss writes the last good checkpoint to out_dir and
/// raises NumericError.
template <typename T>
Checkpoint<T> train(const TrainConfig& cfg, const FeatureSource<T>& source, const TrainOptions<T>& opts = {},
                    TrainStats* stats = nullptr);

/// Differentiable loss of one image under the model (used by train and the
/// gradient check).
template <typename T>
Var<T> image_loss(Tape<T>& tape, Model<T>& model, const FeatureSource<T>& source, std::size_t item,
                  std::span<const TransformSpec> views, const SupervisionSet& supervision);

struct GradCheckConfig {
    std::size_t seeds = 20;
    std::uint64_t first_seed = 0;
    std::size_t grid = 4;      ///< level-0 grid side
    std::size_t channels = 3;
    std::size_t window = 5;
    std::size_t patch = 4;
    std::size_t proj_dim = 4;
    std::size_t levels = 2;
    bool zero_psi = false;
    bool freeze_theta = false;
    double tolerance = 1e-4;
};

struct GradCheckReport {
    struct Group {
        std::string name;
        double max_rel_error = 0.0;
        double max_abs_analytic = 0.0;
    };
    std::vector<Group> groups;
    double max_rel_error = 0.0;
    bool passed = false;
};

GradCheckReport grad_check(const GradCheckConfig& cfg);

}  // namespace pyrafeat
