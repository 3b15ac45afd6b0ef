#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "pyrafeat/eval.hpp"
#include "test_util.hpp"

using namespace pyrafeat;
using testutil::covariance;
using testutil::jacobi_eigen;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::resize_oracle;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::current_path() / "scratch" / "eval";
    fs::create_directories(dir);
    return dir / name;
}

// Random orthogonal matrix by Gram-Schmidt.
std::vector<std::vector<double>> random_rotation(std::size_t c, std::uint64_t seed) {
    const auto r = random_tensor({c, c}, seed);
    std::vector<std::vector<double>> q(c, std::vector<double>(c));
    for (std::size_t i = 0; i < c; ++i) {
        std::vector<double> v(r.data() + i * c, r.data() + (i + 1) * c);
        for (std::size_t j = 0; j < i; ++j) {
            double d = 0;
            for (std::size_t k = 0; k < c; ++k) d += v[k] * q[j][k];
            for (std::size_t k = 0; k < c; ++k) v[k] -= d * q[j][k];
        }
        double nrm = 0;
        for (double x : v) nrm += x * x;
        for (std::size_t k = 0; k < c; ++k) q[i][k] = v[k] / std::sqrt(nrm);
    }
    return q;
}

// One (side, side, c) feature map and matching label map; class k has mean
// feature vector `means[k]` plus Gaussian noise.
struct Blob {
    std::vector<Tensor<double>> feats;
    std::vector<Tensor<float>> labels;
};

Blob noisy_classes(std::size_t items, std::size_t side, const std::vector<std::vector<double>>& means, double noise,
                   std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, noise);
    std::uniform_int_distribution<std::size_t> pick(0, means.size() - 1);
    const std::size_t c = means[0].size();
    Blob b;
    for (std::size_t i = 0; i < items; ++i) {
        Tensor<double> f({side, side, c});
        Tensor<float> l({side, side, 1});
        for (std::size_t p = 0; p < side * side; ++p) {
            const std::size_t k = pick(rng);
            l[p] = float(k);
            for (std::size_t j = 0; j < c; ++j) f[p * c + j] = means[k][j] + gauss(rng);
        }
        b.feats.push_back(std::move(f));
        b.labels.push_back(std::move(l));
    }
    return b;
}

}  // namespace

TEST_CASE("bilinear baseline") {
    const Tensor<double> flat({3, 4, 2}, 0.25);
    for (std::size_t f : {2, 4, 8}) {
        const auto up = bilinear_baseline(flat, f);
        CHECK(up.shape() == Shape{3 * f, 4 * f, 2});
        for (double v : up.storage()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
    const auto one = bilinear_baseline(Tensor<double>({1, 1, 3}, std::vector<double>{0.1, -0.2, 0.3}), 2);
    CHECK(one.shape() == Shape{2, 2, 3});
    for (std::size_t p = 0; p < 4; ++p) {
        CHECK(one[p * 3 + 0] == 0.1);
        CHECK(one[p * 3 + 1] == -0.2);
        CHECK(one[p * 3 + 2] == 0.3);
    }
    const auto r = random_tensor({3, 3, 2}, 11);
    for (std::size_t f : {2, 4, 8}) CHECK(max_abs_diff(bilinear_baseline(r, f), resize_oracle(r, 3 * f, 3 * f)) <= 1e-6);
    CHECK_THROWS_AS(bilinear_baseline(r, 3), ConfigError);
    CHECK_THROWS_AS(bilinear_baseline(r, 1), ConfigError);

    const auto g = random_tensor({5, 7, 3}, 12);
    CHECK(bilinear_baseline(hflip(g), 4) == hflip(bilinear_baseline(g, 4)));
}

TEST_CASE("probe sets: nearest-cell histograms and upsampled pixels") {
    Tensor<double> f({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
    Tensor<float> l({4, 4, 1}, 0.0f);
    l[0] = 1;
    l[5] = 2;
    l[15] = 1;
    const std::vector<Tensor<double>> fs{f};
    const std::vector<Tensor<float>> ls{l};
    const auto set = make_probe_set<double>(fs, ls, 3);
    REQUIRE(set.samples() == 4);
    CHECK(set.pixels() == 16);
    // Top-left cell covers label pixels 0, 1, 4, 5.
    CHECK(set.counts[0] == 2);
    CHECK(set.counts[1] == 1);
    CHECK(set.counts[2] == 1);
    CHECK(set.counts[3 * 3 + 0] == 3);
    CHECK(set.counts[3 * 3 + 1] == 1);
    CHECK(set.features[3] == 4);

    const auto up = make_probe_set<double>(fs, ls, 3, ProbeAlignment::upsample);
    CHECK(up.samples() == 16);
    CHECK(up.pixels() == 16);
    CHECK(up.counts[5 * 3 + 2] == 1);

    Tensor<float> bad({4, 4, 1}, 3.0f);
    const std::vector<Tensor<float>> bads{bad};
    CHECK_THROWS_AS(make_probe_set<double>(fs, bads, 3), ShapeError);
}

TEST_CASE("linear probe: separable labels") {
    // Classes are the argmax of a fixed linear score, so that score is a
    // perfect hand-fit rule.
    const std::vector<std::vector<double>> w{{1.0, 0.0, 0.3}, {-0.5, 1.0, -0.2}, {-0.5, -1.0, 0.4}};
    auto make = [&](std::uint64_t seed) {
        Blob b;
        for (int i = 0; i < 4; ++i) {
            auto f = random_tensor({12, 12, 3}, seed * 10 + std::uint64_t(i));
            Tensor<float> l({12, 12, 1});
            for (std::size_t p = 0; p < 144; ++p) {
                std::size_t best = 0;
                double bs = -1e9;
                for (std::size_t k = 0; k < 3; ++k) {
                    double s = 0;
                    for (std::size_t j = 0; j < 3; ++j) s += w[k][j] * f[p * 3 + j];
                    if (s > bs) bs = s, best = k;
                }
                l[p] = float(best);
            }
            b.feats.push_back(std::move(f));
            b.labels.push_back(std::move(l));
        }
        return b;
    };
    const auto tr = make(1), te = make(2);
    const auto ptr = make_probe_set<double>(tr.feats, tr.labels, 3);
    const auto pte = make_probe_set<double>(te.feats, te.labels, 3);

    std::size_t rule_hits = 0;
    for (std::size_t i = 0; i < pte.samples(); ++i) {
        std::size_t best = 0;
        double bs = -1e9;
        for (std::size_t k = 0; k < 3; ++k) {
            double s = 0;
            for (std::size_t j = 0; j < 3; ++j) s += w[k][j] * pte.features[i * 3 + j];
            if (s > bs) bs = s, best = k;
        }
        rule_hits += pte.counts[i * 3 + best];
    }
    CHECK(rule_hits == pte.pixels());

    const auto r = linear_probe(ptr, pte, ProbeConfig{}, "sep");
    CHECK(r.pixel_accuracy >= 0.95);
    CHECK(r.method == "sep");
    REQUIRE(r.per_class.size() == 3);
    for (const auto& a : r.per_class) {
        REQUIRE(a.has_value());
        CHECK(*a >= 0.0);
        CHECK(*a <= 1.0);
    }
    CHECK(r.warnings.empty());
}

TEST_CASE("linear probe: permuted labels give chance accuracy") {
    const std::size_t classes = 4;
    auto make = [&](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        Blob b;
        for (int i = 0; i < 8; ++i) {
            b.feats.push_back(random_tensor({24, 24, 6}, seed * 100 + std::uint64_t(i)));
            std::vector<float> lab(24 * 24);
            for (std::size_t p = 0; p < lab.size(); ++p) lab[p] = float(p % classes);
            std::shuffle(lab.begin(), lab.end(), rng);
            b.labels.emplace_back(Shape{24, 24, 1}, std::move(lab));
        }
        return b;
    };
    const auto tr = make(3), te = make(4);
    const auto r = linear_probe(make_probe_set<double>(tr.feats, tr.labels, classes),
                                make_probe_set<double>(te.feats, te.labels, classes), ProbeConfig{});
    CHECK(std::abs(r.pixel_accuracy - 1.0 / double(classes)) <= 0.05);
}

TEST_CASE("linear probe: determinism, rotation invariance, missing classes") {
    const std::vector<std::vector<double>> means{{0.4, 0.0, 0.1, -0.2}, {-0.3, 0.3, 0.0, 0.1},
                                                 {0.0, -0.4, 0.2, 0.0}, {0.1, 0.1, -0.4, 0.2}};
    const auto tr = noisy_classes(6, 16, means, 0.35, 5), te = noisy_classes(6, 16, means, 0.35, 6);
    const auto ptr = make_probe_set<double>(tr.feats, tr.labels, 4);
    const auto pte = make_probe_set<double>(te.feats, te.labels, 4);
    const auto a = linear_probe(ptr, pte, ProbeConfig{}, "bilinear");
    const auto b = linear_probe(ptr, pte, ProbeConfig{}, "jbu");
    CHECK(a.pixel_accuracy == b.pixel_accuracy);
    CHECK(a.pixel_accuracy > 0.5);

    const auto q = random_rotation(4, 9);
    auto rotate = [&](ProbeSet s) {
        const std::size_t n = s.samples();
        Tensor<double> out({n, 4});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < 4; ++r) {
                double v = 0;
                for (std::size_t c = 0; c < 4; ++c) v += q[r][c] * s.features[i * 4 + c];
                out[i * 4 + r] = v;
            }
        s.features = out;
        return s;
    };
    const auto rot = linear_probe(rotate(ptr), rotate(pte), ProbeConfig{});
    CHECK(std::abs(rot.pixel_accuracy - a.pixel_accuracy) <= 0.02);

    // Drop class 3 from the training split.
    Blob partial = tr;
    for (auto& l : partial.labels)
        for (auto& v : l.storage())
            if (v == 3.0f) v = 0.0f;
    const auto missing = linear_probe(make_probe_set<double>(partial.feats, partial.labels, 4), pte, ProbeConfig{});
    CHECK(!missing.per_class[3].has_value());
    CHECK(missing.per_class[0].has_value());
    REQUIRE(missing.warnings.size() == 1);
    CHECK(missing.warnings[0].find("class 3") != std::string::npos);

    nlohmann::json j = missing;
    CHECK(j["per_class_accuracy"][3].is_null());
    CHECK(j["pixel_accuracy"].get<double>() == missing.pixel_accuracy);
}

TEST_CASE("classification head") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> gauss(0.0, 0.3);
    auto make = [&](std::size_t n, bool shuffle) {
        std::vector<Tensor<double>> maps;
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = i % 2;
            Tensor<double> m({3, 3, 4});
            for (auto& v : m.storage()) v = (k ? 0.5 : -0.5) + gauss(rng);
            maps.push_back(std::move(m));
            labels.push_back(k);
        }
        if (shuffle) std::shuffle(labels.begin(), labels.end(), rng);
        return std::pair{maps, labels};
    };
    const auto [trm, trl] = make(200, false);
    const auto [tem, tel] = make(200, false);
    CHECK(classification_head<double>(trm, trl, tem, tel, 2, HeadConfig{}) >= 0.95);

    const auto [srm, srl] = make(2000, true);
    const auto [sem, sel] = make(2000, true);
    CHECK(std::abs(classification_head<double>(srm, srl, sem, sel, 2, HeadConfig{}) - 0.5) <= 0.05);

    HeadConfig zero;
    zero.hidden = 0;
    CHECK_THROWS_AS(classification_head<double>(trm, trl, tem, tel, 2, zero), ConfigError);
    const std::vector<std::size_t> single(trl.size(), 1);
    CHECK_THROWS_AS(classification_head<double>(trm, single, tem, tel, 2, HeadConfig{}), ConfigError);
}

TEST_CASE("dominant class ignores background") {
    Tensor<float> l({2, 3, 1}, std::vector<float>{0, 0, 0, 2, 1, 2});
    CHECK(dominant_class(l, 3) == 2);
    CHECK(dominant_class(Tensor<float>({2, 2, 1}, 0.0f), 3) == 0);
}

TEST_CASE("pca matches a Jacobi eigendecomposition") {
    for (std::size_t c : {3, 4, 5, 6}) {
        const auto feat = random_tensor({5, 5, c}, 30 + c);
        const std::vector<Tensor<double>> maps{feat};
        const auto rows = pixel_rows<double>(maps);
        const auto basis = pca_fit(rows, 3);
        std::vector<double> vals;
        std::vector<std::vector<double>> vecs;
        jacobi_eigen(covariance(rows), vals, vecs);
        double total = 0;
        for (double v : vals) total += v;
        REQUIRE(basis.rank == 3);
        for (std::size_t k = 0; k < 3; ++k) {
            double dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += basis.components[k * c + j] * vecs[j][k];
            const double sign = dot < 0 ? -1.0 : 1.0;
            double err = 0;
            for (std::size_t j = 0; j < c; ++j) err = std::max(err, std::abs(basis.components[k * c + j] - sign * vecs[j][k]));
            CHECK(err <= 1e-8);
            CHECK(std::abs(basis.explained[k] - vals[k] / total) <= 1e-10);
        }
        // Orthonormal, non-increasing, largest coefficient positive.
        for (std::size_t a = 0; a < 3; ++a) {
            for (std::size_t b = 0; b < 3; ++b) {
                double d = 0;
                for (std::size_t j = 0; j < c; ++j) d += basis.components[a * c + j] * basis.components[b * c + j];
                CHECK(std::abs(d - (a == b ? 1.0 : 0.0)) <= 1e-6);
            }
            double big = 0;
            for (std::size_t j = 0; j < c; ++j)
                if (std::abs(basis.components[a * c + j]) > std::abs(big)) big = basis.components[a * c + j];
            CHECK(big > 0);
            if (a) CHECK(basis.explained[a] <= basis.explained[a - 1]);
        }
        // Projections of centred data are decorrelated.
        const auto proj = pca_project(feat, basis);
        const auto pc = covariance(proj.reshaped({25, 3}));
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b)
                if (a != b) CHECK(std::abs(pc[a][b]) <= 1e-6);
    }
}

TEST_CASE("pca degenerate inputs") {
    Tensor<double> rows({10, 4});
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t j = 0; j < 4; ++j) rows[i * 4 + j] = double(i) * (j + 1.0) - 2.0;
    const auto rank1 = pca_fit(rows, 3);
    CHECK(rank1.rank == 1);
    CHECK(std::abs(rank1.explained[0] - 1.0) <= 1e-9);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(rank1.components[1 * 4 + j] == 0.0);
        CHECK(rank1.components[2 * 4 + j] == 0.0);
    }

    // Points in a plane: third component and its colour channel are zero.
    Tensor<double> plane({4, 4, 3});
    for (std::size_t p = 0; p < 16; ++p) {
        const double a = double(p % 4), b = double((p * 7) % 5);
        plane[p * 3 + 0] = a + b;
        plane[p * 3 + 1] = a - b;
        plane[p * 3 + 2] = 2 * a;
    }
    const std::vector<Tensor<double>> maps{plane};
    const auto basis = pca_fit(pixel_rows<double>(maps), 3);
    CHECK(basis.rank == 2);
    const auto rgb = pca_rgb(plane, basis);
    for (std::size_t p = 0; p < 16; ++p) CHECK(rgb[p * 3 + 2] == 0.0f);
}

TEST_CASE("pca rgb export writes valid images in range") {
    const auto feat = random_tensor({6, 9, 5}, 40);
    const std::vector<Tensor<double>> maps{feat};
    const auto basis = pca_fit(pixel_rows<double>(maps), 3);
    const auto rgb = pca_rgb(feat, basis);
    for (std::size_t i = 0; i < 3; ++i) {
        float lo = 1, hi = 0;
        for (std::size_t p = 0; p < 54; ++p) {
            const float v = rgb[p * 3 + i];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            const double level = double(v) * 255.0;
            CHECK(std::abs(level - std::round(level)) < 1e-3);
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);
    }
    for (const char* name : {"pca.ppm", "pca.png"}) {
        const auto path = scratch(name);
        pca_export_rgb(feat, basis, path);
        const auto back = load_image(path);
        CHECK(back.shape() == rgb.shape());
        for (std::size_t i = 0; i < rgb.size(); ++i) {
            CHECK(back[i] >= 0.0f);
            CHECK(back[i] <= 1.0f);
            CHECK(std::lround(back[i] * 255.0f) == std::lround(rgb[i] * 255.0f));
        }
    }
}

TEST_CASE("held-out reconstruction error equals the unweighted loss") {
    const auto ds = gen_shapes(2, 2, 3, 56);
    std::vector<Tensor<double>> images;
    for (const auto& im : ds.images) images.push_back(im.cast<double>());
    const ToyFeatureSource<double> src(images, ToyBackboneSpec{14, 5, 1});
    auto model = Model<double>::init(PyramidConfig{2, 5, false, 6}, 5, 3);
    model.omegas[0].omega_w.value.fill(0.3);
    model.omegas[1].affine_scale.value.fill(2.0);
    const std::vector<std::size_t> items{0, 1};
    const JitterConfig none{0, 1.0, 0.0};
    const auto mse = reconstruction_mse(model, src, items, none, 1, 0);
    REQUIRE(mse.size() == 2);

    // With psi = 0 the loss of one identity view is the plain MSE.
    for (std::size_t l = 1; l <= 2; ++l) {
        double oracle = 0;
        for (std::size_t item : items) {
            Tape<double> tape(Tape<double>::Mode::inference);
            SupervisionSet s;
            s.levels = {l};
            const std::vector<TransformSpec> views{TransformSpec{}};
            oracle += image_loss(tape, model, src, item, views, s).value().item() / 2.0;
        }
        CHECK(mse[l - 1] == doctest::Approx(oracle).epsilon(1e-12));
    }
    CHECK_THROWS_AS(level_features(model, src, items, 3), ConfigError);
    CHECK(level_features(model, src, items, 2)[0].shape() == Shape{16, 16, 5});
    CHECK(bilinear_features(src, items, 4)[1].shape() == Shape{16, 16, 5});
}

TEST_CASE("ablation report") {
    CHECK(ablation_supervision(3, true).levels == std::vector<std::size_t>{1, 2, 3});
    CHECK(ablation_supervision(3, false).levels == std::vector<std::size_t>{3});

    AblationConfig cfg;
    cfg.levels = {1, 2};
    cfg.train.steps = 2;
    cfg.train.batch = 2;
    cfg.train.pyramid.window = 5;
    cfg.train.pyramid.proj_dim = 4;
    cfg.backbone = ToyBackboneSpec{14, 4, 0};
    cfg.train_images = 3;
    cfg.test_images = 2;
    cfg.classes = 3;
    cfg.image_size = 56;
    cfg.probe.steps = 20;
    std::size_t progress = 0;
    const auto report = ablation_run(cfg, [&](const AblationReport&) { ++progress; });
    CHECK(progress == 4);
    REQUIRE(report.rows.size() == 2 + 4);
    CHECK(report.timings.size() == 4);

    std::size_t l1_supervised = 0;
    for (const auto& r : report.rows) {
        if (r.levels == 1 && r.hs) l1_supervised += r.supervised;
        if (r.levels == 2 && !r.hs) CHECK(r.supervised == (r.level == 2));
        CHECK(std::isfinite(r.recon_mse));
        CHECK(r.probe_accuracy >= 0.0);
        CHECK(r.probe_accuracy <= 1.0);
        CHECK(r.tape_mib > 0.0);
    }
    CHECK(l1_supervised == 1);
    // L = 1 with and without HS supervise the same set.
    CHECK(report.rows[0].recon_mse == report.rows[1].recon_mse);
    CHECK(report.rows[0].supervision == report.rows[1].supervision);

    const auto again = ablation_run(cfg);
    CHECK(ablation_csv(again.rows) == ablation_csv(report.rows));
    const auto csv = ablation_csv(report.rows);
    CHECK(csv.find("wall") == std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    CHECK(timing_csv(report.timings).rfind("levels,hs,seed,train_seconds,eval_seconds\n", 0) == 0);

    AblationConfig bad = cfg;
    bad.levels = {4};
    CHECK_THROWS_AS(ablation_run(bad), ConfigError);
}
