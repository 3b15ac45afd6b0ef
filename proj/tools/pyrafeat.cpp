#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pyrafeat/config.hpp"
#include "pyrafeat/eval.hpp"
#include "pyrafeat/parallel.hpp"
#include "pyrafeat/train.hpp"

using namespace pyrafeat;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::vector<std::string> g_args;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Resolved config plus the invocation, stored next to every output.
void record_run(const fs::path& out, const std::string& command, const RunConfig& cfg,
                const nlohmann::json& extra = nlohmann::json::object()) {
    fs::create_directories(out);
    nlohmann::json j{{"command", command},
                     {"args", g_args},
                     {"config", cfg.to_json()},
                     {"config_hash", cfg.hash()},
                     {"options", extra}};
    write_json(out / "run.json", j);
}

RunConfig config_or_default(const std::string& path) {
    if (path.empty()) {
        RunConfig c;
        c.validate();
        return c;
    }
    return load_run_config(path);
}

struct Split {
    std::vector<Tensor<float>> train_images, test_images, train_labels, test_labels;
};

Split shapes_split(const RunConfig& cfg, std::uint64_t seed) {
    Split s;
    ShapesDataset ds;
    std::size_t n_train = cfg.eval.train_images;
    if (!cfg.data.dataset.empty()) {
        ds = load_dataset(cfg.data.dataset);
        n_train = ds.train_count;
        if (n_train == 0 || n_train >= ds.images.size()) {
            throw ConfigError(cfg.data.dataset.string() + ": dataset has no train/test split");
        }
    } else {
        ds = gen_shapes(seed, cfg.eval.train_images + cfg.eval.test_images, cfg.data.classes, cfg.data.size,
                        cfg.eval.train_images, worker_threads());
    }
    const long cut = long(n_train);
    s.train_images.assign(ds.images.begin(), ds.images.begin() + cut);
    s.test_images.assign(ds.images.begin() + cut, ds.images.end());
    s.train_labels.assign(ds.labels.begin(), ds.labels.begin() + cut);
    s.test_labels.assign(ds.labels.begin() + cut, ds.labels.end());
    return s;
}

template <typename T>
std::unique_ptr<FeatureSource<T>> training_source(const RunConfig& cfg) {
    if (cfg.data.source == "manifest") return std::make_unique<ManifestFeatureSource<T>>(cfg.data.manifest);
    std::vector<Tensor<float>> images;
    if (!cfg.data.dataset.empty()) {
        auto ds = load_dataset(cfg.data.dataset);
        const std::size_t n = ds.train_count ? ds.train_count : ds.images.size();
        images.assign(ds.images.begin(), ds.images.begin() + long(n));
    } else {
        images = gen_shapes(cfg.data.seed, cfg.data.images, cfg.data.classes, cfg.data.size, cfg.data.images,
                            worker_threads())
                     .images;
    }
    std::vector<Tensor<T>> cast;
    for (const auto& im : images) cast.push_back(im.template cast<T>());
    return std::make_unique<ToyFeatureSource<T>>(std::move(cast), cfg.backbone);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config;
    std::string out;
    std::string resume;
    std::optional<std::size_t> steps, batch, levels, views, checkpoint_every, images;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> supervision, precision;
    bool freeze_theta = false;
};

template <typename T>
int run_train(const RunConfig& cfg, const TrainArgs& a) {
    auto source = training_source<T>(cfg);
    TrainOptions<T> opts;
    opts.out_dir = a.out;
    opts.run_config = cfg.to_json();
    opts.threads = worker_threads();
    opts.on_step = [&](std::size_t step, double loss) {
        if (step % 10 == 0 || step + 1 == cfg.train.steps) std::cout << "step " << step << " loss " << fmt(loss) << "\n";
    };
    std::optional<Checkpoint<T>> resume;
    if (!a.resume.empty()) {
        resume = load_checkpoint<T>(a.resume);
        opts.resume = &*resume;
        std::cout << "resuming from step " << resume->step << "\n";
    }
    record_run(a.out, "train", cfg);
    const auto ck = train<T>(cfg.train, *source, opts);
    std::cout << "final loss " << fmt(ck.losses.back()) << "\ncheckpoint " << a.out << "\n";
    return 0;
}

int cmd_train(const TrainArgs& a) {
    RunConfig cfg = config_or_default(a.config);
    auto& t = cfg.train;
    if (a.steps) t.steps = *a.steps;
    if (a.batch) t.batch = *a.batch;
    if (a.levels) {
        t.pyramid.levels = *a.levels;
        if (!a.supervision) t.supervision = ablation_supervision(*a.levels, true);
    }
    if (a.views) t.views = *a.views;
    if (a.checkpoint_every) t.checkpoint_every = *a.checkpoint_every;
    if (a.lr) t.adam.lr = *a.lr;
    if (a.seed) t.seed = *a.seed;
    if (a.supervision) t.supervision = SupervisionSet::parse(*a.supervision);
    if (a.precision) t.precision = *a.precision;
    if (a.images) cfg.data.images = *a.images;
    if (a.freeze_theta) t.freeze_theta = true;
    cfg.validate();
    if (!a.resume.empty() && checkpoint_precision(a.resume) != t.precision) {
        throw ConfigError("--resume checkpoint precision differs from " + t.precision);
    }
    return t.precision == "f64" ? run_train<double>(cfg, a) : run_train<float>(cfg, a);
}

// ---------------------------------------------------------------------------
// upsample

struct UpsampleArgs {
    std::string features, image, ckpt, out;
    std::size_t level = 0;
};

template <typename T>
int run_upsample(const UpsampleArgs& a) {
    const auto ck = load_checkpoint<T>(a.ckpt);
    if (a.level > ck.model.pyramid.levels) {
        throw ConfigError("--level " + std::to_string(a.level) + " exceeds the checkpoint's " +
                          std::to_string(ck.model.pyramid.levels) + " levels");
    }
    const auto feat = load_npy_any<T>(a.features);
    require_hwc(feat, "--features");
    if (feat.dim(2) != ck.model.channels) {
        throw ConfigError("features have " + std::to_string(feat.dim(2)) + " channels, checkpoint expects " +
                          std::to_string(ck.model.channels));
    }
    const auto image = load_image(a.image).template cast<T>();
    const auto pyr = ck.model.upsample(feat, image);
    save_npy(pyr[a.level], a.out);
    std::cout << "wrote " << a.out << " " << shape_str(pyr[a.level].shape()) << "\n";
    return 0;
}

int cmd_upsample(const UpsampleArgs& a) {
    if (a.level == 0) {
        load_npy_any<float>(a.features);
        if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
        fs::copy_file(a.features, a.out, fs::copy_options::overwrite_existing);
        std::cout << "wrote " << a.out << " (level 0 copy)\n";
        return 0;
    }
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    return checkpoint_precision(a.ckpt) == "f64" ? run_upsample<double>(a) : run_upsample<float>(a);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string config, ckpt, out, mode = "probe";
    std::vector<std::string> methods{"bilinear", "jbu"};
    std::optional<std::size_t> level;
    std::optional<std::uint64_t> seed;
};

// Checkpoint config when no --config is given, so a run can be replayed
// from the checkpoint alone.
RunConfig eval_config(const std::string& config, const std::optional<Checkpoint<float>>& ck) {
    if (!config.empty() || !ck || ck->config.is_null() || ck->config.empty()) return config_or_default(config);
    return RunConfig::from_json(ck->config);
}

int cmd_eval(const EvalArgs& a) {
    if (a.mode != "probe" && a.mode != "classify") throw ConfigError("--mode must be probe or classify");
    bool need_jbu = false;
    for (const auto& m : a.methods) {
        if (m != "bilinear" && m != "jbu") throw ConfigError("--method must be bilinear or jbu, got " + m);
        need_jbu |= m == "jbu";
    }
    std::optional<Checkpoint<float>> ck;
    if (need_jbu) {
        if (a.ckpt.empty()) throw ConfigError("--method jbu needs --ckpt");
        if (checkpoint_precision(a.ckpt) != "f32") throw ConfigError("eval expects an f32 checkpoint");
        ck = load_checkpoint<float>(a.ckpt);
    }
    RunConfig cfg = eval_config(a.config, ck);
    if (a.seed) cfg.eval.seeds = {*a.seed};
    const std::size_t level = a.level ? *a.level : (ck ? ck->model.pyramid.levels : cfg.train.pyramid.levels);
    if (level < 1 || level > 3) throw ConfigError("--level must be 1..3");
    if (ck && level > ck->model.pyramid.levels) throw ConfigError("--level exceeds the checkpoint's levels");
    if (ck && ck->model.channels != cfg.backbone.channels) {
        throw ConfigError("checkpoint channels differ from the configured backbone");
    }
    const auto align = parse_alignment(cfg.eval.alignment);
    record_run(a.out, "eval", cfg, {{"mode", a.mode}, {"methods", a.methods}, {"level", level}, {"ckpt", a.ckpt}});

    nlohmann::json results = nlohmann::json::array();
    std::string csv = a.mode == "probe" ? "method,seed,level,pixel_accuracy,config_hash\n"
                                        : "method,seed,level,accuracy,config_hash\n";
    for (std::uint64_t seed : cfg.eval.seeds) {
        const auto split = shapes_split(cfg, seed);
        const ToyFeatureSource<float> tr(split.train_images, cfg.backbone), te(split.test_images, cfg.backbone);
        std::vector<std::size_t> tri(tr.size()), tei(te.size());
        for (std::size_t i = 0; i < tri.size(); ++i) tri[i] = i;
        for (std::size_t i = 0; i < tei.size(); ++i) tei[i] = i;
        for (const auto& method : a.methods) {
            std::vector<Tensor<float>> ftr, fte;
            if (method == "jbu") {
                ftr = level_features(ck->model, tr, tri, level);
                fte = level_features(ck->model, te, tei, level);
            } else {
                ftr = bilinear_features(tr, tri, std::size_t(1) << level);
                fte = bilinear_features(te, tei, std::size_t(1) << level);
            }
            if (a.mode == "probe") {
                ProbeConfig pc = cfg.eval.probe;
                pc.seed = seed;
                auto r = linear_probe(make_probe_set<float>(ftr, split.train_labels, cfg.data.classes, align),
                                      make_probe_set<float>(fte, split.test_labels, cfg.data.classes, align), pc,
                                      method);
                r.config_hash = cfg.hash();
                results.push_back(r);
                csv += method + "," + std::to_string(seed) + "," + std::to_string(level) + "," +
                       fmt(r.pixel_accuracy) + "," + r.config_hash + "\n";
                std::cout << method << " seed " << seed << " pixel accuracy " << fmt(r.pixel_accuracy) << "\n";
            } else {
                std::vector<std::size_t> ytr, yte;
                for (const auto& l : split.train_labels) ytr.push_back(dominant_class(l, cfg.data.classes));
                for (const auto& l : split.test_labels) yte.push_back(dominant_class(l, cfg.data.classes));
                HeadConfig hc = cfg.eval.head;
                hc.seed = seed;
                const double acc = classification_head<float>(ftr, ytr, fte, yte, cfg.data.classes, hc);
                results.push_back({{"method", method}, {"seed", seed}, {"accuracy", acc}, {"config_hash", cfg.hash()}});
                csv += method + "," + std::to_string(seed) + "," + std::to_string(level) + "," + fmt(acc) + "," +
                       cfg.hash() + "\n";
                std::cout << method << " seed " << seed << " accuracy " << fmt(acc) << "\n";
            }
        }
    }
    write_json(fs::path(a.out) / "results.json", results);
    write_text(fs::path(a.out) / "results.csv", csv);
    return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
    std::string config, out;
    std::vector<std::size_t> levels{1, 2, 3};
    std::vector<std::string> hs{"on", "off"};
    std::vector<std::uint64_t> seeds{0};
    std::optional<std::size_t> steps, train_images, test_images;
};

int cmd_ablate(const AblateArgs& a) {
    RunConfig cfg = config_or_default(a.config);
    AblationConfig ac;
    ac.levels = a.levels;
    ac.hs.clear();
    for (const auto& h : a.hs) {
        if (h != "on" && h != "off") throw ConfigError("--hs takes on/off, got " + h);
        ac.hs.push_back(h == "on");
    }
    ac.seeds = a.seeds;
    ac.train = cfg.train;
    if (a.steps) ac.train.steps = *a.steps;
    ac.backbone = cfg.backbone;
    ac.train_images = a.train_images ? *a.train_images : cfg.data.images;
    ac.test_images = a.test_images ? *a.test_images : cfg.eval.test_images;
    ac.classes = cfg.data.classes;
    ac.image_size = cfg.data.size;
    ac.probe = cfg.eval.probe;
    ac.threads = worker_threads();
    record_run(a.out, "ablate", cfg,
               {{"levels", ac.levels}, {"hs", a.hs}, {"seeds", ac.seeds}, {"steps", ac.train.steps},
                {"train_images", ac.train_images}, {"test_images", ac.test_images}});
    const fs::path out(a.out);
    const auto report = ablation_run(ac, [&](const AblationReport& r) {
        const auto& t = r.timings.back();
        std::cout << "L=" << t.levels << " hs=" << (t.hs ? "on" : "off") << " seed " << t.seed << " trained in "
                  << fmt(t.train_seconds) << " s\n";
        write_text(out / "ablation.csv", ablation_csv(r.rows));
        write_text(out / "timing.csv", timing_csv(r.timings));
    });
    std::cout << ablation_csv(report.rows);
    return 0;
}

// ---------------------------------------------------------------------------
// viz

struct VizArgs {
    std::string config, ckpt, out, image, features, format = "png";
    bool pca = false;
};

int cmd_viz(const VizArgs& a) {
    if (!a.pca) throw ConfigError("viz needs --pca");
    if (a.format != "png" && a.format != "ppm") throw ConfigError("--format must be png or ppm");
    if (checkpoint_precision(a.ckpt) != "f32") throw ConfigError("viz expects an f32 checkpoint");
    const auto ck = load_checkpoint<float>(a.ckpt);
    RunConfig cfg = eval_config(a.config, ck);
    Tensor<float> image, feat0;
    if (!a.image.empty() || !a.features.empty()) {
        if (a.image.empty() || a.features.empty()) throw ConfigError("--image and --features go together");
        image = load_image(a.image);
        feat0 = load_npy_any<float>(a.features);
    } else {
        image = gen_shapes(cfg.data.seed, 1, cfg.data.classes, cfg.data.size).images[0];
        feat0 = toy_features(image, cfg.backbone);
    }
    require_hwc(feat0, "--features");
    if (feat0.dim(2) != ck.model.channels) throw ConfigError("feature channels differ from the checkpoint");
    record_run(a.out, "viz", cfg, {{"ckpt", a.ckpt}, {"image", a.image}, {"features", a.features}});
    const auto levels = ck.model.upsample(feat0, image);
    const auto basis = pca_fit(pixel_rows<float>(levels), 3);
    const fs::path out(a.out);
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const auto path = out / ("pca_level" + std::to_string(l) + "." + a.format);
        pca_export_rgb(levels[l], basis, path);
        std::cout << "wrote " << path.string() << "\n";
    }
    save_image(image, out / ("guidance." + a.format));
    write_json(out / "pca.json", {{"mean", basis.mean},
                                  {"components", basis.components.storage()},
                                  {"explained", basis.explained},
                                  {"rank", basis.rank}});
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const GradCheckConfig& cfg, const std::string& out) {
    const auto r = grad_check(cfg);
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : r.groups) {
        std::cout << g.name << " max_rel_error " << fmt(g.max_rel_error) << "\n";
        groups.push_back({{"name", g.name}, {"max_rel_error", g.max_rel_error}, {"max_abs_grad", g.max_abs_analytic}});
    }
    std::cout << "max_rel_error " << fmt(r.max_rel_error) << " tolerance " << fmt(cfg.tolerance) << " "
              << (r.passed ? "PASS" : "FAIL") << "\n";
    if (!out.empty()) {
        fs::create_directories(out);
        write_json(fs::path(out) / "gradcheck.json",
                   {{"args", g_args},
                    {"seeds", cfg.seeds},
                    {"first_seed", cfg.first_seed},
                    {"tolerance", cfg.tolerance},
                    {"groups", groups},
                    {"max_rel_error", r.max_rel_error},
                    {"passed", r.passed}});
    }
    return r.passed ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    g_args.assign(argv + 1, argv + argc);
    CLI::App app{"Trainable joint bilateral feature up-sampling"};
    app.require_subcommand(1);
    std::function<int()> run;

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Train the up-sampler; --out becomes the checkpoint directory");
    train_cmd->add_option("--config", ta.config, "Run config JSON");
    train_cmd->add_option("--out", ta.out, "Checkpoint directory")->required();
    train_cmd->add_option("--resume", ta.resume, "Checkpoint to continue from");
    train_cmd->add_option("--steps", ta.steps);
    train_cmd->add_option("--batch", ta.batch);
    train_cmd->add_option("--lr", ta.lr);
    train_cmd->add_option("--seed", ta.seed);
    train_cmd->add_option("--levels", ta.levels);
    train_cmd->add_option("--supervision", ta.supervision, "Supervised levels, e.g. 1,2");
    train_cmd->add_option("--views", ta.views);
    train_cmd->add_option("--precision", ta.precision, "f32 or f64");
    train_cmd->add_option("--checkpoint-every", ta.checkpoint_every);
    train_cmd->add_option("--images", ta.images, "Number of generated training images");
    train_cmd->add_flag("--freeze-theta", ta.freeze_theta);
    train_cmd->callback([&] { run = [&] { return cmd_train(ta); }; });

    UpsampleArgs ua;
    auto* up_cmd = app.add_subcommand("upsample", "Up-sample one feature map with a checkpoint");
    up_cmd->add_option("--features", ua.features, "Level-0 features (.npy)")->required();
    up_cmd->add_option("--image", ua.image, "Guidance image (PPM/PNG)")->required();
    up_cmd->add_option("--ckpt", ua.ckpt, "Checkpoint directory")->required();
    up_cmd->add_option("--level", ua.level, "Pyramid level to write")->required();
    up_cmd->add_option("--out", ua.out, "Output .npy")->required();
    up_cmd->callback([&] { run = [&] { return cmd_upsample(ua); }; });

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "Linear probe or classification head on shapes");
    eval_cmd->add_option("--mode", ea.mode, "probe or classify");
    eval_cmd->add_option("--method", ea.methods, "bilinear and/or jbu")->delimiter(',');
    eval_cmd->add_option("--ckpt", ea.ckpt, "Checkpoint for --method jbu");
    eval_cmd->add_option("--level", ea.level, "Pyramid level (factor 2^level for bilinear)");
    eval_cmd->add_option("--seed", ea.seed, "Single evaluation seed");
    eval_cmd->add_option("--config", ea.config);
    eval_cmd->add_option("--out", ea.out)->required();
    eval_cmd->callback([&] { run = [&] { return cmd_eval(ea); }; });

    AblateArgs aa;
    auto* ablate_cmd = app.add_subcommand("ablate", "Pyramid depth and hierarchical supervision ablation");
    ablate_cmd->add_option("--levels", aa.levels)->delimiter(',');
    ablate_cmd->add_option("--hs", aa.hs, "on,off")->delimiter(',');
    ablate_cmd->add_option("--seeds", aa.seeds)->delimiter(',');
    ablate_cmd->add_option("--steps", aa.steps);
    ablate_cmd->add_option("--train-images", aa.train_images);
    ablate_cmd->add_option("--test-images", aa.test_images);
    ablate_cmd->add_option("--config", aa.config);
    ablate_cmd->add_option("--out", aa.out)->required();
    ablate_cmd->callback([&] { run = [&] { return cmd_ablate(aa); }; });

    VizArgs va;
    auto* viz_cmd = app.add_subcommand("viz", "PCA colour images of every pyramid level");
    viz_cmd->add_flag("--pca", va.pca);
    viz_cmd->add_option("--ckpt", va.ckpt)->required();
    viz_cmd->add_option("--image", va.image);
    viz_cmd->add_option("--features", va.features);
    viz_cmd->add_option("--format", va.format, "png or ppm");
    viz_cmd->add_option("--config", va.config);
    viz_cmd->add_option("--out", va.out)->required();
    viz_cmd->callback([&] { run = [&] { return cmd_viz(va); }; });

    GradCheckConfig gc;
    std::string gc_out;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter group");
    gc_cmd->add_option("--seeds", gc.seeds);
    gc_cmd->add_option("--first-seed", gc.first_seed);
    gc_cmd->add_option("--tolerance", gc.tolerance);
    gc_cmd->add_option("--grid", gc.grid);
    gc_cmd->add_option("--channels", gc.channels);
    gc_cmd->add_option("--window", gc.window);
    gc_cmd->add_option("--patch", gc.patch);
    gc_cmd->add_option("--levels", gc.levels);
    gc_cmd->add_flag("--zero-psi", gc.zero_psi);
    gc_cmd->add_flag("--freeze-theta", gc.freeze_theta);
    gc_cmd->add_option("--out", gc_out, "Directory for gradcheck.json");
    gc_cmd->callback([&] { run = [&] { return cmd_gradcheck(gc, gc_out); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }
    try {
        return run();
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const FormatError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
