#include "pyrafeat/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

#include "pyrafeat/parallel.hpp"
#include "pyrafeat/rng.hpp"

namespace pyrafeat {

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("train.steps must be >= 1");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (!(adam.lr >= 0) || !std::isfinite(adam.lr)) throw ConfigError("train.lr must be finite and >= 0");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0)) throw ConfigError("Adam eps must be > 0");
    if (views < 1) throw ConfigError("train.views must be >= 1");
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64, got " + precision);
    pyramid.validate();
    jitter.validate();
    if (pyramid.levels == 0) throw ConfigError("training needs at least one pyramid level");
    supervision.validate(pyramid.levels);
}

// ---------------------------------------------------------------------------
// Model.

template <typename T>
Model<T> Model<T>::init(const PyramidConfig& pyramid, std::size_t channels, std::uint64_t seed) {
    pyramid.validate();
    Model m;
    m.pyramid = pyramid;
    m.channels = channels;
    const std::size_t sets = pyramid.levels == 0 ? 0 : (pyramid.share_params ? 1 : pyramid.levels);
    for (std::size_t l = 0; l < sets; ++l)
        m.jbu.push_back(JbuLevelParams<T>::init(m.guidance_channels, pyramid.proj_dim, seed, l));
    for (std::size_t l = 1; l <= pyramid.levels; ++l) m.omegas.push_back(DownsamplerParams<T>::init(channels, l));
    m.psi = UncertaintyParams<T>::init(channels);
    return m;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& j : jbu) out.insert(out.end(), {&j.log_sigma_dist, &j.log_sigma_sim, &j.theta});
    for (auto& o : omegas) out.insert(out.end(), {&o.omega_w, &o.omega_b, &o.affine_scale, &o.affine_shift});
    out.insert(out.end(), {&psi.n_w, &psi.n_b});
    return out;
}

template <typename T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
    auto mut = const_cast<Model*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

template <typename T>
std::vector<std::pair<std::string, std::vector<Parameter<T>*>>> Model<T>::groups() {
    std::vector<std::pair<std::string, std::vector<Parameter<T>*>>> g{
        {"sigma_dist", {}}, {"sigma_sim", {}}, {"theta", {}}, {"omega", {}}, {"psi", {}}};
    for (auto& j : jbu) {
        g[0].second.push_back(&j.log_sigma_dist);
        g[1].second.push_back(&j.log_sigma_sim);
        g[2].second.push_back(&j.theta);
    }
    for (auto& o : omegas) g[3].second.insert(g[3].second.end(), {&o.omega_w, &o.omega_b, &o.affine_scale, &o.affine_shift});
    g[4].second = {&psi.n_w, &psi.n_b};
    return g;
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
std::vector<Tensor<T>> Model<T>::upsample(const Tensor<T>& feat0, const Tensor<T>& image) const {
    return build_pyramid<T>(feat0, image, jbu, pyramid);
}

template <typename T>
AdamState<T> AdamState<T>::zeros(const std::vector<Parameter<T>*>& params) {
    AdamState s;
    for (auto* p : params) {
        s.m.emplace_back(p->value.shape(), T(0));
        s.v.emplace_back(p->value.shape(), T(0));
    }
    return s;
}

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, const AdamConfig& cfg) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state holds " + std::to_string(state.m.size()) + " entries for " +
                         std::to_string(params.size()) + " parameters");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto* p = params[k];
        if (p->grad.shape() != p->value.shape() || state.m[k].shape() != p->value.shape()) {
            throw ShapeError("adam_step: shape mismatch for parameter " + p->name);
        }
        if (!p->frozen && !p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto* p = params[k];
        if (p->frozen) continue;
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad[i];
            m[i] = T(cfg.beta1 * m[i] + (1 - cfg.beta1) * g);
            v[i] = T(cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g);
            const double mhat = m[i] / c1, vhat = v[i] / c2;
            p->value[i] = T(p->value[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

template <typename T>
const char* precision_tag() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string loss_csv(const std::vector<double>& losses) {
    std::string out = "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) out += std::to_string(i) + "," + format_double(losses[i]) + "\n";
    return out;
}

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const fs::path& dir) {
    fs::create_directories(dir / "params");
    fs::create_directories(dir / "adam");
    const auto params = ckpt.model.parameters();
    nlohmann::json names = nlohmann::json::array();
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& p = *params[k];
        names.push_back(p.name);
        save_npy(p.value, dir / "params" / (p.name + ".npy"));
        if (k < ckpt.adam.m.size()) {
            save_npy(ckpt.adam.m[k], dir / "adam" / (p.name + ".m.npy"));
            save_npy(ckpt.adam.v[k], dir / "adam" / (p.name + ".v.npy"));
        }
    }
    const auto& pc = ckpt.model.pyramid;
    nlohmann::json state{{"format", "pyrafeat-checkpoint"},
                         {"version", 1},
                         {"precision", precision_tag<T>()},
                         {"step", ckpt.step},
                         {"adam_t", ckpt.adam.t},
                         {"channels", ckpt.model.channels},
                         {"pyramid",
                          {{"levels", pc.levels},
                           {"window", pc.window},
                           {"share_params", pc.share_params},
                           {"proj_dim", pc.proj_dim}}},
                         {"params", names},
                         {"config_hash", ckpt.config_hash},
                         {"config", ckpt.config}};
    write_text(dir / "loss.csv", loss_csv(ckpt.losses));
    // state.json last: its presence marks a complete checkpoint.
    write_json(dir / "state.json", state);
}

std::string checkpoint_precision(const fs::path& dir) {
    return read_json(dir / "state.json").at("precision").get<std::string>();
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
    if (!fs::exists(dir / "state.json")) throw ConfigError("no checkpoint at " + dir.string() + " (state.json missing)");
    const auto state = read_json(dir / "state.json");
    try {
        if (state.at("format") != "pyrafeat-checkpoint") throw FormatError(dir.string() + ": not a checkpoint");
        if (state.at("precision") != precision_tag<T>()) {
            throw ConfigError(dir.string() + ": checkpoint precision " + state.at("precision").get<std::string>() +
                              " differs from requested " + precision_tag<T>());
        }
        Checkpoint<T> ck;
        const auto& pj = state.at("pyramid");
        PyramidConfig pc{pj.at("levels").get<std::size_t>(), pj.at("window").get<std::size_t>(),
                         pj.at("share_params").get<bool>(), pj.at("proj_dim").get<std::size_t>()};
        ck.model = Model<T>::init(pc, state.at("channels").get<std::size_t>(), 0);
        ck.step = state.at("step").get<std::size_t>();
        ck.config = state.at("config");
        ck.config_hash = state.at("config_hash").get<std::string>();
        const auto params = ck.model.parameters();
        const auto names = state.at("params");
        if (names.size() != params.size()) throw FormatError(dir.string() + ": parameter list does not match model");
        ck.adam.t = state.at("adam_t").get<std::size_t>();
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto* p = params[k];
            if (names[k].get<std::string>() != p->name) {
                throw FormatError(dir.string() + ": expected parameter " + p->name + ", found " +
                                  names[k].get<std::string>());
            }
            auto load = [&](const fs::path& path) {
                auto t = load_npy<T>(path);
                if (t.shape() != p->value.shape()) {
                    throw FormatError(path.string() + ": shape " + shape_str(t.shape()) + " but " + p->name +
                                      " needs " + shape_str(p->value.shape()));
                }
                return t;
            };
            p->value = load(dir / "params" / (p->name + ".npy"));
            ck.adam.m.push_back(load(dir / "adam" / (p->name + ".m.npy")));
            ck.adam.v.push_back(load(dir / "adam" / (p->name + ".v.npy")));
        }
        std::istringstream csv(read_text(dir / "loss.csv"));
        std::string line;
        std::getline(csv, line);
        while (std::getline(csv, line)) {
            if (line.empty()) continue;
            ck.losses.push_back(std::stod(line.substr(line.find(',') + 1)));
        }
        if (ck.losses.size() != ck.step) throw FormatError(dir.string() + ": loss history length differs from step");
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(dir.string() + ": bad state.json: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Training.

template <typename T>
Var<T> image_loss(Tape<T>& tape, Model<T>& model, const FeatureSource<T>& source, std::size_t item,
                  std::span<const TransformSpec> views, const SupervisionSet& supervision) {
    std::vector<JbuLevelVars<T>> jv;
    for (auto& j : model.jbu) jv.push_back(bind(tape, j));
    const Tensor<T>& image = source.image(item);
    auto pyramid = build_pyramid<T>(tape.constant(source.features(item, TransformSpec{})), image, jv, model.pyramid);
    std::vector<DownsamplerVars<T>> ov;
    for (auto& o : model.omegas) ov.push_back(bind(tape, o));
    Extractor<T> extractor = [&](const Tensor<T>&, const TransformSpec& t) { return source.features(item, t); };
    return multiview_loss<T>(image, extractor, pyramid, ov, bind(tape, model.psi), views, supervision, source.patch());
}

template <typename T>
Checkpoint<T> train(const TrainConfig& cfg, const FeatureSource<T>& source, const TrainOptions<T>& opts,
                    TrainStats* stats) {
    cfg.validate();
    if (source.size() == 0) throw ConfigError("training dataset is empty");
    JitterConfig jitter = cfg.jitter;
    if (!source.arbitrary_transforms()) jitter = JitterConfig{0, 1.0, cfg.jitter.flip_prob};

    Checkpoint<T> ck;
    if (opts.resume) {
        ck = *opts.resume;
        if (ck.model.channels != source.channels()) throw ConfigError("checkpoint channel count differs from features");
    } else {
        ck.model = Model<T>::init(cfg.pyramid, source.channels(), cfg.seed);
        ck.adam = AdamState<T>::zeros(ck.model.parameters());
    }
    ck.config = opts.run_config;
    ck.config_hash = json_hash(opts.run_config);
    for (auto& j : ck.model.jbu) j.theta.frozen = cfg.freeze_theta;
    auto params = ck.model.parameters();

    const std::size_t n = source.size();
    const std::size_t batch = std::min(cfg.batch, n);
    for (std::size_t step = ck.step; step < cfg.steps; ++step) {
        // Batch: partial Fisher-Yates over the item indices.
        Rng rng(derive_seed(cfg.seed, {0x57e9, step}));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t b = 0; b < batch; ++b) std::swap(order[b], order[std::size_t(uniform_int(rng, long(b), long(n - 1)))]);

        std::vector<double> losses(batch, 0.0);
        std::vector<std::vector<Tensor<T>>> grads(batch);
        std::vector<std::size_t> bytes(batch, 0);
        bool diverged = false;
        std::string why;
        try {
            parallel_for(batch, opts.threads, [&](std::size_t b) {
                const std::size_t item = order[b];
                Rng vr(derive_seed(cfg.seed, {0x71e4, step, b}));
                const auto& img = source.image(item);
                std::vector<TransformSpec> views;
                for (std::size_t v = 0; v < cfg.views; ++v)
                    views.push_back(sample_transform(vr, jitter, img.dim(0), img.dim(1)));
                Tape<T> tape;
                auto loss = image_loss(tape, ck.model, source, item, views, cfg.supervision);
                tape.backward(loss, false);
                losses[b] = double(loss.value().item());
                for (auto* p : params) grads[b].push_back(tape.grad_of(*p));
                bytes[b] = tape.bytes();
            });
        } catch (const NumericError& e) {
            diverged = true;
            why = e.what();
        }
        double total = 0.0;
        for (double l : losses) total += l;
        total /= double(batch);
        if (!diverged && !std::isfinite(total)) {
            diverged = true;
            why = "non-finite loss";
        }
        if (diverged) {
            std::string msg = "training diverged at step " + std::to_string(step) + " (" + why + ")";
            if (!opts.out_dir.empty()) {
                save_checkpoint(ck, opts.out_dir);
                msg += "; last good checkpoint (step " + std::to_string(ck.step) + ") written to " +
                       opts.out_dir.string();
            }
            throw NumericError(msg);
        }
        if (stats) stats->peak_tape_bytes = std::max(stats->peak_tape_bytes, *std::max_element(bytes.begin(), bytes.end()));

        const T scale = T(1.0 / double(batch));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& g = params[k]->grad;
            g.fill(T(0));
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += grads[b][k][i];
            for (auto& x : g.storage()) x *= scale;
        }
        adam_step(params, ck.adam, cfg.adam);
        ck.losses.push_back(total);
        ck.step = step + 1;
        if (opts.on_step) opts.on_step(step, total);
        if (!opts.out_dir.empty() && cfg.checkpoint_every && ck.step % cfg.checkpoint_every == 0 && ck.step < cfg.steps)
            save_checkpoint(ck, opts.out_dir);
    }
    if (!opts.out_dir.empty()) save_checkpoint(ck, opts.out_dir);
    return ck;
}

// ---------------------------------------------------------------------------
// Gradient check.

GradCheckReport grad_check(const GradCheckConfig& cfg) {
    if (cfg.grid == 0 || cfg.grid > 4 || cfg.channels == 0 || cfg.channels > 3) {
        throw ConfigError("grad_check runs on tiny instances: grid <= 4, channels <= 3");
    }
    if (cfg.levels == 0) throw ConfigError("grad_check needs at least one level");
    GradCheckReport report;
    const char* names[] = {"sigma_dist", "sigma_sim", "theta", "omega", "psi"};
    for (const char* n : names) report.groups.push_back({n, 0.0, 0.0});

    for (std::size_t s = 0; s < cfg.seeds; ++s) {
        const std::uint64_t seed = cfg.first_seed + s;
        Rng rng(derive_seed(seed, {0x6c4e}));
        const std::size_t side = cfg.grid * cfg.patch;
        Tensor<double> image({side, side, 3});
        for (auto& v : image.storage()) v = uniform01(rng);
        ToyFeatureSource<double> source({image}, ToyBackboneSpec{cfg.patch, cfg.channels, seed});

        PyramidConfig pc{cfg.levels, cfg.window, false, cfg.proj_dim};
        auto model = Model<double>::init(pc, cfg.channels, seed);
        for (auto& j : model.jbu) {
            j.log_sigma_dist.value[0] = uniform(rng, -0.5, 1.0);
            j.log_sigma_sim.value[0] = uniform(rng, -0.5, 0.5);
            j.theta.frozen = cfg.freeze_theta;
        }
        for (auto& o : model.omegas) {
            for (auto& v : o.omega_w.value.storage()) v = uniform(rng, -1, 1);
            o.omega_b.value[0] = uniform(rng, -0.5, 0.5);
            o.affine_scale.value[0] = uniform(rng, 0.5, 1.5);
            o.affine_shift.value[0] = uniform(rng, -0.5, 0.5);
        }
        if (!cfg.zero_psi) {
            for (auto& v : model.psi.n_w.value.storage()) v = uniform(rng, -0.5, 0.5);
            model.psi.n_b.value[0] = uniform(rng, -0.3, 0.3);
        }
        std::vector<TransformSpec> views;
        for (int v = 0; v < 2; ++v) views.push_back(sample_transform(rng, JitterConfig{1, 1.25, 0.5}, side, side));
        SupervisionSet sup;
        sup.levels.clear();
        for (std::size_t l = 1; l <= cfg.levels; ++l) sup.levels.push_back(l);

        auto fn = [&](Tape<double>& tape) { return image_loss(tape, model, source, 0, views, sup); };
        const auto r = finite_diff_check(fn, model.parameters());
        auto groups = model.groups();
        for (std::size_t g = 0; g < groups.size(); ++g)
            for (auto* p : groups[g].second)
                for (const auto& e : r.params)
                    if (e.name == p->name) {
                        report.groups[g].max_rel_error = std::max(report.groups[g].max_rel_error, e.max_rel_error);
                        report.groups[g].max_abs_analytic = std::max(report.groups[g].max_abs_analytic, e.max_abs_analytic);
                    }
    }
    for (const auto& g : report.groups) report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
    report.passed = report.max_rel_error <= cfg.tolerance;
    return report;
}

#define PYRAFEAT_INSTANTIATE_TRAIN(T)                                                                       \
    template struct Model<T>;                                                                               \
    template struct AdamState<T>;                                                                           \
    template void adam_step(const std::vector<Parameter<T>*>&, AdamState<T>&, const AdamConfig&);           \
    template void save_checkpoint(const Checkpoint<T>&, const fs::path&);                                   \
    template Checkpoint<T> load_checkpoint(const fs::path&);                                                \
    template Var<T> image_loss(Tape<T>&, Model<T>&, const FeatureSource<T>&, std::size_t,                   \
                               std::span<const TransformSpec>, const SupervisionSet&);                      \
    template Checkpoint<T> train(const TrainConfig&, const FeatureSource<T>&, const TrainOptions<T>&, TrainStats*);

PYRAFEAT_INSTANTIATE_TRAIN(float)
PYRAFEAT_INSTANTIATE_TRAIN(double)

}  // namespace pyrafeat
