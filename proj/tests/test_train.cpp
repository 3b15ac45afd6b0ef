#include <atomic>
#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "pyrafeat/train.hpp"

using namespace pyrafeat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::current_path() / "scratch" / "train" / name;
    fs::remove_all(dir);
    return dir;
}

template <typename T>
ToyFeatureSource<T> small_source(std::size_t n = 4) {
    const auto ds = gen_shapes(7, n, 3, 56);
    std::vector<Tensor<T>> images;
    for (const auto& im : ds.images) images.push_back(im.template cast<T>());
    return ToyFeatureSource<T>(std::move(images), ToyBackboneSpec{14, 6, 3});
}

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.steps = 4;
    cfg.batch = 2;
    cfg.adam.lr = 1e-2;
    cfg.pyramid = PyramidConfig{2, 5, false, 8};
    cfg.jitter = JitterConfig{4, 1.25, 0.5};
    return cfg;
}

template <typename T>
bool same_params(const Model<T>& a, const Model<T>& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t k = 0; k < pa.size(); ++k)
        if (!(pa[k]->value == pb[k]->value)) return false;
    return true;
}

// Level-0 features that are one constant vector for every view.
class ConstantSource : public FeatureSource<double> {
public:
    ConstantSource(std::size_t side, std::size_t patch, std::size_t channels)
        : image_({side, side, 3}, 0.4), patch_(patch), channels_(channels) {
        for (std::size_t i = 0; i < image_.size(); ++i) image_[i] = 0.1 + 0.8 * double((i * 7919) % 97) / 97.0;
    }
    std::size_t size() const override { return 1; }
    const Tensor<double>& image(std::size_t) const override { return image_; }
    Tensor<double> features(std::size_t, const TransformSpec&) const override {
        const std::size_t g = image_.dim(0) / patch_;
        Tensor<double> f({g, g, channels_});
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.3 - 0.1 * double(i % channels_);
        return f;
    }
    bool arbitrary_transforms() const override { return true; }
    std::size_t patch() const override { return patch_; }
    std::size_t channels() const override { return channels_; }

private:
    Tensor<double> image_;
    std::size_t patch_, channels_;
};

// Serves NaN features once `poison` is set.
class PoisonSource : public FeatureSource<float> {
public:
    PoisonSource(const FeatureSource<float>& inner, const std::atomic<bool>& poison)
        : inner_(inner), poison_(poison) {}
    std::size_t size() const override { return inner_.size(); }
    const Tensor<float>& image(std::size_t i) const override { return inner_.image(i); }
    Tensor<float> features(std::size_t i, const TransformSpec& t) const override {
        auto f = inner_.features(i, t);
        if (poison_) f.fill(std::numeric_limits<float>::quiet_NaN());
        return f;
    }
    bool arbitrary_transforms() const override { return true; }
    std::size_t patch() const override { return inner_.patch(); }
    std::size_t channels() const override { return inner_.channels(); }

private:
    const FeatureSource<float>& inner_;
    const std::atomic<bool>& poison_;
};

}  // namespace

TEST_CASE("adam: zero gradient") {
    Parameter<double> p("p", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}));
    std::vector<Parameter<double>*> params{&p};
    auto state = AdamState<double>::zeros(params);
    const auto before = p.value;
    adam_step(params, state, AdamConfig{});
    CHECK(p.value == before);
    CHECK(state.t == 1);
    for (double m : state.m[0].storage()) CHECK(m == 0.0);

    // Existing moments decay by beta1 / beta2.
    state.m[0].fill(0.2);
    state.v[0].fill(0.04);
    AdamConfig cfg;
    adam_step(params, state, cfg);
    const double c1 = 1 - std::pow(cfg.beta1, 2.0), c2 = 1 - std::pow(cfg.beta2, 2.0);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(state.m[0][i] == doctest::Approx(0.9 * 0.2).epsilon(1e-15));
        CHECK(state.v[0][i] == doctest::Approx(0.999 * 0.04).epsilon(1e-15));
        const double step = cfg.lr * (0.18 / c1) / (std::sqrt(0.03996 / c2) + cfg.eps);
        CHECK(p.value[i] == doctest::Approx(before[i] - step).epsilon(1e-14));
    }
}

TEST_CASE("adam: lr 0 leaves parameters unchanged") {
    Parameter<double> p("p", Tensor<double>({2}, std::vector<double>{0.3, -0.7}));
    p.grad = Tensor<double>({2}, std::vector<double>{5.0, -1.0});
    std::vector<Parameter<double>*> params{&p};
    auto state = AdamState<double>::zeros(params);
    AdamConfig cfg;
    cfg.lr = 0;
    for (int i = 0; i < 10; ++i) adam_step(params, state, cfg);
    CHECK(p.value[0] == 0.3);
    CHECK(p.value[1] == -0.7);
}

TEST_CASE("adam: scalar quadratic against the direct recurrence") {
    Parameter<double> p("p", Tensor<double>({1}, 1.0));
    std::vector<Parameter<double>*> params{&p};
    auto state = AdamState<double>::zeros(params);
    AdamConfig cfg;
    cfg.lr = 0.05;

    double q = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 200; ++t) {
        p.grad[0] = 2 * p.value[0];
        adam_step(params, state, cfg);

        const double g = 2 * q;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1 - std::pow(0.9, t)), vhat = v / (1 - std::pow(0.999, t));
        q -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
    }
    CHECK(std::abs(p.value[0] - q) < 1e-12);
    CHECK(std::abs(q) < 1e-2);
    CHECK(std::abs(p.value[0]) < 1e-2);
}

TEST_CASE("adam: non-finite gradient names the parameter") {
    Parameter<float> a("alpha", Tensor<float>({2}, 1.0f));
    Parameter<float> b("beta.w", Tensor<float>({2}, 1.0f));
    b.grad[1] = std::numeric_limits<float>::quiet_NaN();
    std::vector<Parameter<float>*> params{&a, &b};
    auto state = AdamState<float>::zeros(params);
    a.grad.fill(1.0f);
    try {
        adam_step(params, state, AdamConfig{});
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("beta.w") != std::string::npos);
    }
    CHECK(a.value[0] == 1.0f);
    CHECK(state.t == 0);
}

TEST_CASE("train config validation") {
    auto src = small_source<float>(2);
    TrainConfig cfg = small_config();
    cfg.steps = 0;
    CHECK_THROWS_AS(train<float>(cfg, src), ConfigError);
    cfg = small_config();
    cfg.adam.lr = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.supervision.levels = {3};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.precision = "f16";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("one step with lr 0 keeps the initial parameters") {
    auto src = small_source<float>(2);
    TrainConfig cfg = small_config();
    cfg.steps = 1;
    cfg.adam.lr = 0;
    const auto ck = train<float>(cfg, src);
    CHECK(ck.losses.size() == 1);
    CHECK(std::isfinite(ck.losses[0]));
    CHECK(ck.step == 1);
    CHECK(same_params(ck.model, Model<float>::init(cfg.pyramid, src.channels(), cfg.seed)));
}

TEST_CASE("training is deterministic and independent of the thread count") {
    auto src = small_source<float>();
    const TrainConfig cfg = small_config();
    const auto a = train<float>(cfg, src);
    const auto b = train<float>(cfg, src);
    TrainOptions<float> opts;
    opts.threads = 3;
    const auto c = train<float>(cfg, src, opts);
    CHECK(a.losses == b.losses);
    CHECK(a.losses == c.losses);
    CHECK(same_params(a.model, b.model));
    CHECK(same_params(a.model, c.model));
    for (double l : a.losses) CHECK(std::isfinite(l));

    TrainConfig other = cfg;
    other.seed = 1;
    CHECK(train<float>(other, src).losses != a.losses);
}

TEST_CASE("checkpoint round trip and bit-exact resume") {
    auto src = small_source<float>();
    TrainConfig cfg = small_config();
    cfg.steps = 6;
    const auto full = train<float>(cfg, src);

    const auto dir = scratch("resume");
    TrainConfig half = cfg;
    half.steps = 3;
    TrainOptions<float> opts;
    opts.out_dir = dir;
    opts.run_config = {{"note", "resume test"}};
    const auto first = train<float>(half, src, opts);

    const auto loaded = load_checkpoint<float>(dir);
    CHECK(loaded.step == 3);
    CHECK(loaded.losses == first.losses);
    CHECK(loaded.adam.t == first.adam.t);
    CHECK(loaded.config_hash == json_hash(opts.run_config));
    CHECK(loaded.config == opts.run_config);
    CHECK(same_params(loaded.model, first.model));
    for (std::size_t k = 0; k < loaded.adam.m.size(); ++k) {
        CHECK(loaded.adam.m[k] == first.adam.m[k]);
        CHECK(loaded.adam.v[k] == first.adam.v[k]);
    }
    CHECK(fs::exists(dir / "loss.csv"));
    CHECK(checkpoint_precision(dir) == "f32");
    CHECK_THROWS_AS(load_checkpoint<double>(dir), ConfigError);

    TrainOptions<float> resume;
    resume.resume = &loaded;
    const auto resumed = train<float>(cfg, src, resume);
    CHECK(resumed.losses == full.losses);
    CHECK(same_params(resumed.model, full.model));
}

TEST_CASE("divergence guard keeps the last good checkpoint") {
    auto inner = small_source<float>();
    std::atomic<bool> poison{false};
    PoisonSource src(inner, poison);
    const auto dir = scratch("diverge");
    TrainOptions<float> opts;
    opts.out_dir = dir;
    opts.on_step = [&](std::size_t step, double) {
        if (step == 1) poison = true;
    };
    try {
        train<float>(small_config(), src, opts);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step 2") != std::string::npos);
    }
    const auto ck = load_checkpoint<float>(dir);
    CHECK(ck.step == 2);
    CHECK(ck.losses.size() == 2);
    for (const auto* p : ck.model.parameters()) CHECK(p->value.all_finite());
}

TEST_CASE("gradient check on random tiny instances") {
    GradCheckConfig cfg;
    cfg.seeds = 4;
    const auto r = grad_check(cfg);
    REQUIRE(r.groups.size() == 5);
    for (const auto& g : r.groups) {
        INFO(g.name);
        CHECK(g.max_rel_error <= 1e-4);
        CHECK(g.max_abs_analytic > 0);
    }
    CHECK(r.passed);

    GradCheckConfig two = cfg;
    two.grid = 2;
    two.levels = 1;
    CHECK(grad_check(two).passed);

    GradCheckConfig big = cfg;
    big.grid = 5;
    CHECK_THROWS_AS(grad_check(big), ConfigError);
}

TEST_CASE("zeroed psi: the log u term contributes exactly 1 to d loss / d bias") {
    // Constant level-0 features reconstruct perfectly, leaving only log u.
    ConstantSource src(16, 4, 3);
    auto model = Model<double>::init(PyramidConfig{2, 5, false, 4}, 3, 0);
    model.psi.n_w.value.fill(0);
    model.psi.n_b.value.fill(0);
    std::vector<TransformSpec> views;
    Rng rng(3);
    for (int v = 0; v < 2; ++v) views.push_back(sample_transform(rng, JitterConfig{1, 1.25, 0.5}, 16, 16));
    SupervisionSet sup;

    auto fn = [&](Tape<double>& tape) { return image_loss(tape, model, src, 0, views, sup); };
    Tape<double> tape;
    auto loss = fn(tape);
    tape.backward(loss, false);
    CHECK(std::abs(loss.value().item()) < 1e-12);
    CHECK(tape.grad_of(model.psi.n_b)[0] == doctest::Approx(1.0).epsilon(1e-12));

    const auto fd = finite_diff_check(fn, {&model.psi.n_b});
    CHECK(fd.max_rel_error <= 1e-4);

    GradCheckConfig cfg;
    cfg.seeds = 2;
    cfg.zero_psi = true;
    CHECK(grad_check(cfg).passed);
}

TEST_CASE("frozen theta reports an exactly zero gradient") {
    GradCheckConfig cfg;
    cfg.seeds = 2;
    cfg.freeze_theta = true;
    const auto r = grad_check(cfg);
    CHECK(r.groups[2].name == "theta");
    CHECK(r.groups[2].max_abs_analytic == 0.0);
    CHECK(r.groups[2].max_rel_error == 0.0);
    CHECK(r.passed);

    auto src = small_source<float>(2);
    TrainConfig tc = small_config();
    tc.steps = 2;
    tc.freeze_theta = true;
    const auto ck = train<float>(tc, src);
    const auto init = Model<float>::init(tc.pyramid, src.channels(), tc.seed);
    for (std::size_t l = 0; l < init.jbu.size(); ++l) CHECK(ck.model.jbu[l].theta.value == init.jbu[l].theta.value);
    CHECK(!(ck.model.jbu[0].log_sigma_sim.value == init.jbu[0].log_sigma_sim.value));
}

TEST_CASE("loss csv keeps round-trip precision") {
    const std::vector<double> losses{0.1, 1.0 / 3.0};
    const auto csv = loss_csv(losses);
    CHECK(csv.rfind("step,loss\n", 0) == 0);
    CHECK(csv.find("0,0.10000000000000001\n") != std::string::npos);
    CHECK(std::stod(csv.substr(csv.rfind(',') + 1)) == 1.0 / 3.0);
}
