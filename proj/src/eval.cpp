#include "pyrafeat/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>

#include "pyrafeat/downsample.hpp"
#include "pyrafeat/jitter.hpp"
#include "pyrafeat/resample.hpp"
#include "pyrafeat/rng.hpp"

namespace pyrafeat {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Tensor<T> bilinear_baseline(const Tensor<T>& feat0, std::size_t factor) {
    if (factor != 2 && factor != 4 && factor != 8) {
        throw ConfigError("bilinear_baseline: factor must be 2, 4 or 8, got " + std::to_string(factor));
    }
    require_hwc(feat0, "bilinear_baseline");
    return bilinear_resample(feat0, feat0.dim(0) * factor, feat0.dim(1) * factor);
}

// ---------------------------------------------------------------------------
// Probing.

std::size_t ProbeSet::pixels() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
}

namespace {

std::size_t label_at(const Tensor<float>& labels, std::size_t i, std::size_t classes) {
    const float v = labels[i];
    if (!(v >= 0) || std::size_t(v) >= classes) {
        throw ShapeError("label " + std::to_string(v) + " outside 0.." + std::to_string(classes - 1));
    }
    return std::size_t(v);
}

void softmax_rows(MatrixRM& z) {
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
    }
}

Eigen::Index argmax_row(const MatrixRM& z, Eigen::Index r) {
    Eigen::Index best = 0;
    z.row(r).maxCoeff(&best);
    return best;
}

Parameter<double> make_param(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return Parameter<double>(name, Tensor<double>({std::size_t(rows), std::size_t(cols)}, 0.0));
}

Eigen::Map<MatrixRM> as_matrix(Tensor<double>& t) {
    return Eigen::Map<MatrixRM>(t.data(), Eigen::Index(t.dim(0)), Eigen::Index(t.dim(1)));
}

}  // namespace

template <typename T>
ProbeSet make_probe_set(std::span<const Tensor<T>> features, std::span<const Tensor<float>> labels,
                        std::size_t classes, ProbeAlignment align) {
    if (features.size() != labels.size()) throw ShapeError("make_probe_set: feature and label counts differ");
    if (features.empty() || classes < 2) throw ShapeError("make_probe_set: need items and at least two classes");
    const std::size_t c = features[0].rank() == 3 ? features[0].dim(2) : 0;
    std::vector<double> rows;
    std::vector<std::uint32_t> counts;
    for (std::size_t i = 0; i < features.size(); ++i) {
        require_hwc(features[i], "probe features");
        require_hwc(labels[i], "probe labels");
        if (features[i].dim(2) != c) throw ShapeError("make_probe_set: channel counts differ between items");
        const std::size_t lh = labels[i].dim(0), lw = labels[i].dim(1);
        if (align == ProbeAlignment::upsample) {
            const auto up = bilinear_resample(features[i], lh, lw);
            for (std::size_t p = 0; p < lh * lw; ++p) {
                rows.insert(rows.end(), up.data() + p * c, up.data() + (p + 1) * c);
                for (std::size_t k = 0; k < classes; ++k) counts.push_back(0);
                counts[counts.size() - classes + label_at(labels[i], p, classes)] = 1;
            }
            continue;
        }
        const std::size_t h = features[i].dim(0), w = features[i].dim(1);
        std::vector<std::uint32_t> hist(h * w * classes, 0);
        for (std::size_t y = 0; y < lh; ++y) {
            const std::size_t cy = std::min(h - 1, std::size_t((double(y) + 0.5) * double(h) / double(lh)));
            for (std::size_t x = 0; x < lw; ++x) {
                const std::size_t cx = std::min(w - 1, std::size_t((double(x) + 0.5) * double(w) / double(lw)));
                ++hist[(cy * w + cx) * classes + label_at(labels[i], y * lw + x, classes)];
            }
        }
        for (std::size_t cell = 0; cell < h * w; ++cell) {
            std::uint32_t total = 0;
            for (std::size_t k = 0; k < classes; ++k) total += hist[cell * classes + k];
            if (total == 0) continue;
            const T* f = features[i].data() + cell * c;
            rows.insert(rows.end(), f, f + c);
            counts.insert(counts.end(), hist.begin() + long(cell * classes), hist.begin() + long((cell + 1) * classes));
        }
    }
    ProbeSet set;
    set.classes = classes;
    const std::size_t n = rows.size() / c;
    set.features = Tensor<double>({n, c}, std::move(rows));
    set.counts = std::move(counts);
    return set;
}

void to_json(nlohmann::json& j, const ProbeResult& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& a : r.per_class) per.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
    j = nlohmann::json{{"method", r.method},
                       {"pixel_accuracy", r.pixel_accuracy},
                       {"per_class_accuracy", per},
                       {"seed", r.seed},
                       {"config_hash", r.config_hash},
                       {"warnings", r.warnings}};
}

ProbeResult linear_probe(const ProbeSet& train, const ProbeSet& test, const ProbeConfig& cfg,
                         const std::string& method) {
    if (train.classes != test.classes || train.samples() == 0 || test.samples() == 0) {
        throw ShapeError("linear_probe: train and test sets must be nonempty with the same classes");
    }
    if (train.features.dim(1) != test.features.dim(1)) throw ShapeError("linear_probe: channel counts differ");
    const Eigen::Index k = Eigen::Index(train.classes), c = Eigen::Index(train.features.dim(1));
    const Eigen::Index n = Eigen::Index(train.samples());

    ProbeResult result;
    result.method = method;
    result.seed = cfg.seed;
    result.config_hash =
        json_hash({{"steps", cfg.steps}, {"lr", cfg.lr}, {"seed", cfg.seed}, {"classes", train.classes}});

    const Eigen::Map<const MatrixRM> x(train.features.data(), n, c);
    MatrixRM hist(n, k);
    for (Eigen::Index i = 0; i < n * k; ++i) hist.data()[i] = double(train.counts[std::size_t(i)]);
    const Eigen::VectorXd totals = hist.rowwise().sum();
    const double pixels = totals.sum();
    const Eigen::RowVectorXd class_pixels = hist.colwise().sum();

    auto w = make_param("probe.w", c, k);
    auto b = make_param("probe.b", 1, k);
    std::vector<Parameter<double>*> params{&w, &b};
    auto state = AdamState<double>::zeros(params);
    AdamConfig adam;
    adam.lr = cfg.lr;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        MatrixRM z = x * as_matrix(w.value);
        z.rowwise() += as_matrix(b.value).row(0);
        softmax_rows(z);
        const MatrixRM g = ((z.array().colwise() * totals.array()) - hist.array()).matrix() / pixels;
        as_matrix(w.grad) = x.transpose() * g;
        as_matrix(b.grad) = g.colwise().sum();
        adam_step(params, state, adam);
    }

    const Eigen::Index nt = Eigen::Index(test.samples());
    const Eigen::Map<const MatrixRM> xt(test.features.data(), nt, c);
    MatrixRM zt = xt * as_matrix(w.value);
    zt.rowwise() += as_matrix(b.value).row(0);
    std::vector<double> correct(std::size_t(k), 0.0), seen(std::size_t(k), 0.0);
    double hit = 0, all = 0;
    for (Eigen::Index i = 0; i < nt; ++i) {
        const auto pred = std::size_t(argmax_row(zt, i));
        for (std::size_t cl = 0; cl < std::size_t(k); ++cl) {
            const double cnt = test.counts[std::size_t(i) * std::size_t(k) + cl];
            seen[cl] += cnt;
            all += cnt;
            if (cl == pred) {
                correct[cl] += cnt;
                hit += cnt;
            }
        }
    }
    result.pixel_accuracy = all > 0 ? hit / all : 0.0;
    for (Eigen::Index cl = 0; cl < k; ++cl) {
        if (class_pixels[cl] == 0) {
            result.warnings.push_back("class " + std::to_string(cl) + " absent from the training split");
            log_warning("linear_probe: " + result.warnings.back() + "; excluded from the per-class table");
            result.per_class.emplace_back();
        } else if (seen[std::size_t(cl)] == 0) {
            result.per_class.emplace_back();
        } else {
            result.per_class.emplace_back(correct[std::size_t(cl)] / seen[std::size_t(cl)]);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Classification head.

std::size_t dominant_class(const Tensor<float>& labels, std::size_t classes) {
    std::vector<std::size_t> hist(classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) ++hist[label_at(labels, i, classes)];
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k)
        if (hist[k] > (best ? hist[best] : 0)) best = k;
    return best;
}

namespace {

template <typename T>
MatrixRM pooled(std::span<const Tensor<T>> maps) {
    if (maps.empty()) throw ConfigError("classification_head: no images");
    require_hwc(maps[0], "classification features");
    const std::size_t c = maps[0].dim(2);
    MatrixRM x = MatrixRM::Zero(Eigen::Index(maps.size()), Eigen::Index(c));
    for (std::size_t i = 0; i < maps.size(); ++i) {
        require_hwc(maps[i], "classification features");
        if (maps[i].dim(2) != c) throw ShapeError("classification_head: channel counts differ");
        const std::size_t pix = maps[i].dim(0) * maps[i].dim(1);
        for (std::size_t p = 0; p < pix; ++p)
            for (std::size_t k = 0; k < c; ++k) x(Eigen::Index(i), Eigen::Index(k)) += double(maps[i][p * c + k]);
        x.row(Eigen::Index(i)) /= double(pix);
    }
    return x;
}

}  // namespace

template <typename T>
double classification_head(std::span<const Tensor<T>> train_maps, std::span<const std::size_t> train_labels,
                           std::span<const Tensor<T>> test_maps, std::span<const std::size_t> test_labels,
                           std::size_t classes, const HeadConfig& cfg) {
    if (cfg.hidden == 0) throw ConfigError("classification_head: hidden width must be >= 1");
    if (train_maps.size() != train_labels.size() || test_maps.size() != test_labels.size()) {
        throw ShapeError("classification_head: feature and label counts differ");
    }
    std::vector<bool> present(classes, false);
    for (auto l : train_labels) {
        if (l >= classes) throw ShapeError("classification_head: label " + std::to_string(l) + " out of range");
        present[l] = true;
    }
    if (std::count(present.begin(), present.end(), true) < 2) {
        throw ConfigError("classification_head: training labels cover fewer than two classes");
    }
    const MatrixRM x = pooled(train_maps);
    const MatrixRM xt = pooled(test_maps);
    const Eigen::Index n = x.rows(), c = x.cols(), hd = Eigen::Index(cfg.hidden), k = Eigen::Index(classes);

    auto w1 = make_param("head.w1", c, hd);
    auto b1 = make_param("head.b1", 1, hd);
    auto w2 = make_param("head.w2", hd, k);
    auto b2 = make_param("head.b2", 1, k);
    Rng rng(derive_seed(cfg.seed, {0xc1a5}));
    const double a1 = std::sqrt(3.0 / double(c)), a2 = std::sqrt(3.0 / double(hd));
    for (auto& v : w1.value.storage()) v = uniform(rng, -a1, a1);
    for (auto& v : w2.value.storage()) v = uniform(rng, -a2, a2);
    std::vector<Parameter<double>*> params{&w1, &b1, &w2, &b2};
    auto state = AdamState<double>::zeros(params);
    AdamConfig adam;
    adam.lr = cfg.lr;

    MatrixRM onehot = MatrixRM::Zero(n, k);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, Eigen::Index(train_labels[std::size_t(i)])) = 1.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        MatrixRM a = x * as_matrix(w1.value);
        a.rowwise() += as_matrix(b1.value).row(0);
        const MatrixRM r = a.cwiseMax(0.0);
        MatrixRM z = r * as_matrix(w2.value);
        z.rowwise() += as_matrix(b2.value).row(0);
        softmax_rows(z);
        const MatrixRM g2 = (z - onehot) / double(n);
        as_matrix(w2.grad) = r.transpose() * g2;
        as_matrix(b2.grad) = g2.colwise().sum();
        const MatrixRM g1 = ((g2 * as_matrix(w2.value).transpose()).array() * (a.array() > 0).cast<double>()).matrix();
        as_matrix(w1.grad) = x.transpose() * g1;
        as_matrix(b1.grad) = g1.colwise().sum();
        adam_step(params, state, adam);
    }

    MatrixRM a = xt * as_matrix(w1.value);
    a.rowwise() += as_matrix(b1.value).row(0);
    MatrixRM z = a.cwiseMax(0.0) * as_matrix(w2.value);
    z.rowwise() += as_matrix(b2.value).row(0);
    std::size_t hit = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) hit += std::size_t(argmax_row(z, i)) == test_labels[std::size_t(i)];
    return test_labels.empty() ? 0.0 : double(hit) / double(test_labels.size());
}

// ---------------------------------------------------------------------------
// PCA.

PcaBasis pca_fit(const Tensor<double>& samples, std::size_t k) {
    if (samples.rank() != 2) throw ShapeError("pca_fit: expected (N, C) samples, got " + shape_str(samples.shape()));
    const Eigen::Index n = Eigen::Index(samples.dim(0)), c = Eigen::Index(samples.dim(1));
    if (k == 0) throw ShapeError("pca_fit: need at least one component");
    const Eigen::Map<const MatrixRM> x(samples.data(), n, c);
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const MatrixRM centred = x.rowwise() - mean;
    const Eigen::MatrixXd cov = (centred.transpose() * centred) / double(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericError("pca_fit: eigendecomposition failed");

    PcaBasis basis;
    basis.mean.assign(mean.data(), mean.data() + c);
    basis.components = Tensor<double>({k, std::size_t(c)}, 0.0);
    basis.explained.assign(k, 0.0);
    const double total = cov.trace();
    const double top = eig.eigenvalues()(c - 1);
    for (std::size_t i = 0; i < k && Eigen::Index(i) < c; ++i) {
        const Eigen::Index col = c - 1 - Eigen::Index(i);
        const double lambda = eig.eigenvalues()(col);
        if (!(top > 0) || lambda <= 1e-12 * top) break;
        Eigen::VectorXd v = eig.eigenvectors().col(col);
        Eigen::Index big = 0;
        v.cwiseAbs().maxCoeff(&big);
        if (v(big) < 0) v = -v;
        for (Eigen::Index j = 0; j < c; ++j) basis.components[i * std::size_t(c) + std::size_t(j)] = v(j);
        basis.explained[i] = lambda / total;
        basis.rank = i + 1;
    }
    if (basis.rank < k) {
        log_warning("pca_fit: covariance has rank " + std::to_string(basis.rank) + " < " + std::to_string(k) +
                    "; remaining components zero-filled");
    }
    return basis;
}

template <typename T>
Tensor<double> pixel_rows(std::span<const Tensor<T>> maps) {
    if (maps.empty()) throw ShapeError("pixel_rows: no maps");
    const std::size_t c = maps[0].rank() == 3 ? maps[0].dim(2) : 0;
    std::vector<double> rows;
    for (const auto& m : maps) {
        require_hwc(m, "pixel_rows");
        if (m.dim(2) != c) throw ShapeError("pixel_rows: channel counts differ");
        rows.insert(rows.end(), m.storage().begin(), m.storage().end());
    }
    const std::size_t n = rows.size() / c;
    return Tensor<double>({n, c}, std::move(rows));
}

template <typename T>
Tensor<double> pca_project(const Tensor<T>& feat, const PcaBasis& basis) {
    require_hwc(feat, "pca_project");
    const std::size_t c = feat.dim(2), k = basis.components.dim(0);
    if (basis.mean.size() != c) throw ShapeError("pca_project: basis has " + std::to_string(basis.mean.size()) +
                                                 " channels, features " + std::to_string(c));
    const std::size_t pix = feat.dim(0) * feat.dim(1);
    Tensor<double> out({feat.dim(0), feat.dim(1), k}, 0.0);
    for (std::size_t p = 0; p < pix; ++p)
        for (std::size_t i = 0; i < k; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < c; ++j) s += (double(feat[p * c + j]) - basis.mean[j]) * basis.components[i * c + j];
            out[p * k + i] = s;
        }
    return out;
}

template <typename T>
Tensor<float> pca_rgb(const Tensor<T>& feat, const PcaBasis& basis) {
    const auto coords = pca_project(feat, basis);
    const std::size_t pix = feat.dim(0) * feat.dim(1), k = coords.dim(2);
    Tensor<float> rgb({feat.dim(0), feat.dim(1), 3}, 0.0f);
    for (std::size_t i = 0; i < std::min<std::size_t>(3, k); ++i) {
        if (i >= basis.rank) continue;
        double lo = coords[i], hi = coords[i];
        for (std::size_t p = 0; p < pix; ++p) {
            lo = std::min(lo, coords[p * k + i]);
            hi = std::max(hi, coords[p * k + i]);
        }
        if (!(hi > lo)) continue;
        for (std::size_t p = 0; p < pix; ++p) {
            const double level = std::round((coords[p * k + i] - lo) / (hi - lo) * 255.0);
            rgb[p * 3 + i] = float(std::clamp(level, 0.0, 255.0) / 255.0);
        }
    }
    return rgb;
}

template <typename T>
void pca_export_rgb(const Tensor<T>& feat, const PcaBasis& basis, const fs::path& path) {
    save_image(pca_rgb(feat, basis), path);
}

// ---------------------------------------------------------------------------
// Held-out evaluation.

template <typename T>
std::vector<double> reconstruction_mse(const Model<T>& model, const FeatureSource<T>& source,
                                       std::span<const std::size_t> items, const JitterConfig& jitter,
                                       std::size_t views, std::uint64_t seed) {
    const std::size_t levels = model.pyramid.levels;
    std::vector<double> mse(levels, 0.0);
    if (items.empty() || views == 0) throw ConfigError("reconstruction_mse: need items and views");
    JitterConfig jc = jitter;
    if (!source.arbitrary_transforms()) jc = JitterConfig{0, 1.0, jitter.flip_prob};
    const std::size_t v = source.patch();
    for (std::size_t item : items) {
        const auto& image = source.image(item);
        const std::size_t ih = image.dim(0), iw = image.dim(1);
        const auto pyramid = model.upsample(source.features(item, TransformSpec{}), image);
        Rng rng(derive_seed(seed, {0xe7a1, item}));
        for (std::size_t t = 0; t < views; ++t) {
            const TransformSpec spec = sample_transform(rng, jc, ih, iw);
            const auto target = source.features(item, spec);
            for (std::size_t l = 1; l <= levels; ++l) {
                const auto recon =
                    attention_downsample(apply_to_features(pyramid[l], spec), model.omegas[l - 1], ih, iw, v);
                double s = 0;
                for (std::size_t i = 0; i < target.size(); ++i) {
                    const double e = double(target[i]) - double(recon[i]);
                    s += e * e;
                }
                mse[l - 1] += s / double(target.size());
            }
        }
    }
    for (auto& m : mse) m /= double(items.size() * views);
    return mse;
}

template <typename T>
std::vector<Tensor<T>> level_features(const Model<T>& model, const FeatureSource<T>& source,
                                      std::span<const std::size_t> items, std::size_t level) {
    if (level > model.pyramid.levels) {
        throw ConfigError("level " + std::to_string(level) + " exceeds the model's " +
                          std::to_string(model.pyramid.levels) + " levels");
    }
    std::vector<Tensor<T>> out;
    for (std::size_t item : items) {
        auto feat0 = source.features(item, TransformSpec{});
        if (level == 0) {
            out.push_back(std::move(feat0));
            continue;
        }
        auto pyr = model.upsample(feat0, source.image(item));
        out.push_back(std::move(pyr[level]));
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> bilinear_features(const FeatureSource<T>& source, std::span<const std::size_t> items,
                                         std::size_t factor) {
    std::vector<Tensor<T>> out;
    for (std::size_t item : items) out.push_back(bilinear_baseline(source.features(item, TransformSpec{}), factor));
    return out;
}

// ---------------------------------------------------------------------------
// Ablation.

SupervisionSet ablation_supervision(std::size_t levels, bool hs) {
    SupervisionSet s;
    s.levels.clear();
    if (hs) {
        for (std::size_t l = 1; l <= levels; ++l) s.levels.push_back(l);
    } else {
        s.levels.push_back(levels);
    }
    return s;
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::size_t> iota_items(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace

AblationReport ablation_run(const AblationConfig& cfg, const std::function<void(const AblationReport&)>& on_progress) {
    using clock = std::chrono::steady_clock;
    for (auto l : cfg.levels)
        if (l < 1 || l > 3) throw ConfigError("ablation levels must lie in 1..3");
    if (cfg.train_images == 0 || cfg.test_images == 0) throw ConfigError("ablation needs train and test images");

    AblationReport report;
    for (std::uint64_t seed : cfg.seeds) {
        const auto ds = gen_shapes(seed, cfg.train_images + cfg.test_images, cfg.classes, cfg.image_size,
                                   cfg.train_images, cfg.threads);
        const std::vector<Tensor<float>> train_images(ds.images.begin(), ds.images.begin() + long(cfg.train_images));
        const std::vector<Tensor<float>> test_images(ds.images.begin() + long(cfg.train_images), ds.images.end());
        const std::vector<Tensor<float>> train_labels(ds.labels.begin(), ds.labels.begin() + long(cfg.train_images));
        const std::vector<Tensor<float>> test_labels(ds.labels.begin() + long(cfg.train_images), ds.labels.end());
        const ToyFeatureSource<float> train_src(train_images, cfg.backbone);
        const ToyFeatureSource<float> test_src(test_images, cfg.backbone);
        const auto train_items = iota_items(cfg.train_images), test_items = iota_items(cfg.test_images);

        for (std::size_t levels : cfg.levels) {
            for (bool hs : cfg.hs) {
                TrainConfig tc = cfg.train;
                tc.pyramid.levels = levels;
                tc.supervision = ablation_supervision(levels, hs);
                tc.seed = seed;
                TrainOptions<float> opts;
                opts.threads = cfg.threads;
                TrainStats stats;
                const auto t0 = clock::now();
                const auto ck = train<float>(tc, train_src, opts, &stats);
                const auto t1 = clock::now();
                const auto mse = reconstruction_mse(ck.model, test_src, test_items, tc.jitter, tc.views, seed);
                for (std::size_t l = 1; l <= levels; ++l) {
                    const auto ftr = level_features(ck.model, train_src, train_items, l);
                    const auto fte = level_features(ck.model, test_src, test_items, l);
                    const auto ptr = make_probe_set<float>(ftr, train_labels, cfg.classes);
                    const auto pte = make_probe_set<float>(fte, test_labels, cfg.classes);
                    ProbeConfig pc = cfg.probe;
                    pc.seed = seed;
                    const auto probe = linear_probe(ptr, pte, pc, "level-" + std::to_string(l));
                    AblationRow row;
                    row.levels = levels;
                    row.hs = hs;
                    row.seed = seed;
                    row.supervision = tc.supervision.str();
                    row.level = l;
                    row.supervised = std::find(tc.supervision.levels.begin(), tc.supervision.levels.end(), l) !=
                                     tc.supervision.levels.end();
                    row.recon_mse = mse[l - 1];
                    row.probe_accuracy = probe.pixel_accuracy;
                    row.final_loss = ck.losses.back();
                    row.tape_mib = double(stats.peak_tape_bytes) / (1024.0 * 1024.0);
                    report.rows.push_back(row);
                }
                const auto t2 = clock::now();
                report.timings.push_back({levels, hs, seed, std::chrono::duration<double>(t1 - t0).count(),
                                          std::chrono::duration<double>(t2 - t1).count()});
                if (on_progress) on_progress(report);
            }
        }
    }
    return report;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "levels,hs,seed,supervision,level,supervised,recon_mse,probe_accuracy,final_loss,tape_mib\n";
    for (const auto& r : rows) {
        out += std::to_string(r.levels) + "," + (r.hs ? "on" : "off") + "," + std::to_string(r.seed) + ",\"" +
               r.supervision + "\"," + std::to_string(r.level) + "," + (r.supervised ? "1" : "0") + "," +
               fmt(r.recon_mse) + "," + fmt(r.probe_accuracy) + "," + fmt(r.final_loss) + "," + fmt(r.tape_mib) + "\n";
    }
    return out;
}

std::string timing_csv(const std::vector<AblationTiming>& timings) {
    std::string out = "levels,hs,seed,train_seconds,eval_seconds\n";
    for (const auto& t : timings) {
        out += std::to_string(t.levels) + "," + (t.hs ? "on" : "off") + "," + std::to_string(t.seed) + "," +
               fmt(t.train_seconds) + "," + fmt(t.eval_seconds) + "\n";
    }
    return out;
}

#define PYRAFEAT_INSTANTIATE_EVAL(T)                                                                          \
    template Tensor<T> bilinear_baseline(const Tensor<T>&, std::size_t);                                      \
    template ProbeSet make_probe_set(std::span<const Tensor<T>>, std::span<const Tensor<float>>, std::size_t, \
                                     ProbeAlignment);                                                         \
    template double classification_head(std::span<const Tensor<T>>, std::span<const std::size_t>,             \
                                        std::span<const Tensor<T>>, std::span<const std::size_t>, std::size_t, \
                                        const HeadConfig&);                                                   \
    template Tensor<double> pixel_rows(std::span<const Tensor<T>>);                                           \
    template Tensor<double> pca_project(const Tensor<T>&, const PcaBasis&);                                   \
    template Tensor<float> pca_rgb(const Tensor<T>&, const PcaBasis&);                                        \
    template void pca_export_rgb(const Tensor<T>&, const PcaBasis&, const fs::path&);                         \
    template std::vector<double> reconstruction_mse(const Model<T>&, const FeatureSource<T>&,                 \
                                                    std::span<const std::size_t>, const JitterConfig&,        \
                                                    std::size_t, std::uint64_t);                              \
    template std::vector<Tensor<T>> level_features(const Model<T>&, const FeatureSource<T>&,                  \
                                                   std::span<const std::size_t>, std::size_t);                \
    template std::vector<Tensor<T>> bilinear_features(const FeatureSource<T>&, std::span<const std::size_t>,  \
                                                      std::size_t);

PYRAFEAT_INSTANTIATE_EVAL(float)
PYRAFEAT_INSTANTIATE_EVAL(double)

}  // namespace pyrafeat
