#include "pyrafeat/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <numbers>

#include "pyrafeat/parallel.hpp"
#include "pyrafeat/resample.hpp"
#include "pyrafeat/rng.hpp"

namespace pyrafeat {

void to_json(nlohmann::json& j, const ToyBackboneSpec& s) {
    j = nlohmann::json{{"patch", s.patch}, {"channels", s.channels}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, ToyBackboneSpec& s) {
    s.patch = j.value("patch", s.patch);
    s.channels = j.value("channels", s.channels);
    s.seed = j.value("seed", s.seed);
}

ToyBackbone::ToyBackbone(ToyBackboneSpec spec) : spec_(spec) {
    const std::size_t p = spec.patch, c = spec.channels;
    if (p == 0 || c == 0) throw ConfigError("toy backbone needs patch >= 1 and channels >= 1");
    weight_ = Tensor<double>({3 * p * p, c});
    Rng rng(derive_seed(spec.seed, {0xbacb}));
    const double bound = std::sqrt(3.0 / double(3 * p * p));
    for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < (p + 1) / 2; ++dx)
            for (std::size_t ch = 0; ch < 3; ++ch)
                for (std::size_t k = 0; k < c; ++k) {
                    const double v = uniform(rng, -bound, bound);
                    weight_[((dy * p + dx) * 3 + ch) * c + k] = v;
                    weight_[((dy * p + (p - 1 - dx)) * 3 + ch) * c + k] = v;
                }
}

template <typename T>
Tensor<T> ToyBackbone::features(const Tensor<T>& image) const {
    require_hwc(image, "toy backbone");
    const std::size_t p = spec_.patch, c = spec_.channels;
    if (image.dim(2) != 3) throw ShapeError("toy backbone expects RGB, got " + shape_str(image.shape()));
    if (image.dim(0) % p || image.dim(1) % p) {
        throw ShapeError("image " + shape_str(image.shape()) + " is not divisible by patch " + std::to_string(p));
    }
    const std::size_t gh = image.dim(0) / p, gw = image.dim(1) / p;
    Tensor<T> out({gh, gw, c});
    std::vector<double> acc(c);
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            std::fill(acc.begin(), acc.end(), 0.0);
            // Mirrored columns share filters; pairing them first makes the
            // result bit-identical under a horizontal flip.
            for (std::size_t dy = 0; dy < p; ++dy)
                for (std::size_t dx = 0; dx < (p + 1) / 2; ++dx)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        double v = image.at(gy * p + dy, gx * p + dx, ch);
                        if (dx != p - 1 - dx) v += double(image.at(gy * p + dy, gx * p + p - 1 - dx, ch));
                        const double* w = weight_.data() + ((dy * p + dx) * 3 + ch) * c;
                        for (std::size_t k = 0; k < c; ++k) acc[k] += v * w[k];
                    }
            for (std::size_t k = 0; k < c; ++k) out.at(gy, gx, k) = T(acc[k]);
        }
    return out;
}

template Tensor<float> ToyBackbone::features(const Tensor<float>&) const;
template Tensor<double> ToyBackbone::features(const Tensor<double>&) const;

// ---------------------------------------------------------------------------
// Shapes.

std::array<float, 3> class_color(std::size_t c, std::size_t classes) {
    if (c == 0) return {0.5f, 0.5f, 0.5f};
    // Fully saturated hue wheel, value 0.9.
    const double h = double(c - 1) / double(classes - 1) * 6.0;
    const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
    std::array<double, 3> rgb{};
    switch (int(h) % 6) {
        case 0: rgb = {1, x, 0}; break;
        case 1: rgb = {x, 1, 0}; break;
        case 2: rgb = {0, 1, x}; break;
        case 3: rgb = {0, x, 1}; break;
        case 4: rgb = {x, 0, 1}; break;
        default: rgb = {1, 0, x}; break;
    }
    return {float(0.9 * rgb[0]), float(0.9 * rgb[1]), float(0.9 * rgb[2])};
}

namespace {

struct Item {
    Tensor<float> image;
    Tensor<float> labels;
};

Item make_item(std::uint64_t seed, std::size_t classes, std::size_t size) {
    Rng rng(seed);
    const std::size_t n = size * size;
    std::vector<std::uint8_t> label(n, 0);
    std::vector<std::size_t> counts(classes, 0);
    counts[0] = n;

    const double two_pi = 2 * std::numbers::pi;
    const double scale = double(size) / 112.0;
    auto paint = [&](std::size_t cls, auto&& inside) {
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
                if (inside(x + 0.5, y + 0.5)) {
                    --counts[label[y * size + x]];
                    label[y * size + x] = std::uint8_t(cls);
                    ++counts[cls];
                }
    };

    for (int placed = 0; placed < 200; ++placed) {
        if (placed > 0 && counts[0] * classes <= n) break;
        // Least represented shape class, lowest id on ties.
        std::size_t cls = 1;
        for (std::size_t c = 2; c < classes; ++c)
            if (counts[c] < counts[cls]) cls = c;
        const double cx = uniform(rng, 0, double(size)), cy = uniform(rng, 0, double(size));
        const double r = uniform(rng, 7, 18) * scale;
        if (uniform01(rng) < 0.5) {
            paint(cls, [&](double x, double y) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; });
        } else {
            // Convex polygon with 3..6 vertices on a circle.
            const auto k = std::size_t(uniform_int(rng, 3, 6));
            std::vector<double> ang(k);
            for (auto& a : ang) a = uniform(rng, 0, two_pi);
            std::sort(ang.begin(), ang.end());
            std::vector<std::array<double, 2>> v(k);
            for (std::size_t i = 0; i < k; ++i) v[i] = {cx + r * std::cos(ang[i]), cy + r * std::sin(ang[i])};
            paint(cls, [&](double x, double y) {
                for (std::size_t i = 0; i < k; ++i) {
                    const auto& a = v[i];
                    const auto& b = v[(i + 1) % k];
                    if ((b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) < 0) return false;
                }
                return true;
            });
        }
    }

    // Grey background texture: a few low-frequency waves plus fine noise.
    std::array<double, 9> wave{};
    for (std::size_t i = 0; i < 3; ++i) {
        wave[3 * i] = uniform(rng, 1, 4) * two_pi / double(size);
        wave[3 * i + 1] = uniform(rng, 0, two_pi);
        wave[3 * i + 2] = uniform(rng, 0, two_pi);
    }
    Item it{Tensor<float>({size, size, 3}), Tensor<float>({size, size, 1})};
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const std::size_t i = y * size + x;
            const std::size_t cls = label[i];
            const double noise = uniform(rng, -0.04, 0.04);
            it.labels[i] = float(cls);
            if (cls == 0) {
                double g = 0.45;
                for (std::size_t k = 0; k < 3; ++k) {
                    const double a = wave[3 * k + 2];
                    g += 0.07 * std::sin(wave[3 * k] * (std::cos(a) * x + std::sin(a) * y) + wave[3 * k + 1]);
                }
                for (std::size_t ch = 0; ch < 3; ++ch) it.image[i * 3 + ch] = float(g + noise);
            } else {
                const auto col = class_color(cls, classes);
                for (std::size_t ch = 0; ch < 3; ++ch)
                    it.image[i * 3 + ch] = float(std::clamp(double(col[ch]) * 0.9 + 0.05 + noise, 0.0, 1.0));
            }
        }
    return it;
}

}  // namespace

ShapesDataset gen_shapes(std::uint64_t seed, std::size_t n, std::size_t classes, std::size_t size,
                         std::size_t train_count, std::size_t threads) {
    if (classes < 2 || classes > 255) throw ConfigError("shapes dataset needs 2..255 classes");
    if (size < 16) throw ConfigError("shapes dataset images must be at least 16 pixels");
    ShapesDataset ds;
    ds.classes = classes;
    ds.train_count = train_count ? std::min(train_count, n) : (2 * n + 2) / 3;
    ds.images.resize(n);
    ds.labels.resize(n);
    parallel_for(n, threads, [&](std::size_t i) {
        auto it = make_item(derive_seed(seed, {0x5a9e, i}), classes, size);
        ds.images[i] = std::move(it.image);
        ds.labels[i] = std::move(it.labels);
    });
    return ds;
}

void save_dataset(const ShapesDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string stem = "item" + std::to_string(i);
        save_image(ds.images[i], dir / (stem + ".png"));
        save_labels(ds.labels[i], dir / (stem + "_labels.png"));
        items.push_back({{"image", stem + ".png"}, {"labels", stem + "_labels.png"}});
    }
    write_json(dir / "dataset.json", {{"classes", ds.classes}, {"train_count", ds.train_count}, {"items", items}});
}

ShapesDataset load_dataset(const fs::path& dir) {
    const auto j = read_json(dir / "dataset.json");
    ShapesDataset ds;
    ds.classes = j.at("classes").get<std::size_t>();
    ds.train_count = j.at("train_count").get<std::size_t>();
    for (const auto& it : j.at("items")) {
        ds.images.push_back(load_image(dir / it.at("image").get<std::string>()));
        ds.labels.push_back(load_labels(dir / it.at("labels").get<std::string>()));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Feature sources.

template <typename T>
ToyFeatureSource<T>::ToyFeatureSource(std::vector<Tensor<T>> images, ToyBackboneSpec spec)
    : images_(std::move(images)), backbone_(spec) {}

template <typename T>
Tensor<T> ToyFeatureSource<T>::features(std::size_t i, const TransformSpec& t) const {
    return backbone_.features(apply_to_image(images_.at(i), t));
}

template class ToyFeatureSource<float>;
template class ToyFeatureSource<double>;

void to_json(nlohmann::json& j, const ExportManifest& m) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : m.items) {
        nlohmann::json e{{"image", it.image}, {"features", it.features}};
        if (!it.features_hflip.empty()) e["features_hflip"] = it.features_hflip;
        items.push_back(e);
    }
    j = nlohmann::json{{"model", m.model},       {"layer", m.layer},
                       {"input_resolution", {m.input_h, m.input_w}},
                       {"grid", {m.grid_h, m.grid_w}},
                       {"patch", m.patch},       {"channels", m.channels},
                       {"items", items}};
}

void from_json(const nlohmann::json& j, ExportManifest& m) {
    m.model = j.value("model", std::string());
    m.layer = j.value("layer", m.layer);
    if (j.contains("input_resolution")) {
        m.input_h = j["input_resolution"].at(0).get<std::size_t>();
        m.input_w = j["input_resolution"].at(1).get<std::size_t>();
    }
    m.grid_h = j.at("grid").at(0).get<std::size_t>();
    m.grid_w = j.at("grid").at(1).get<std::size_t>();
    m.patch = j.at("patch").get<std::size_t>();
    m.channels = j.at("channels").get<std::size_t>();
    m.items.clear();
    for (const auto& e : j.at("items")) {
        m.items.push_back({e.at("image").get<std::string>(), e.at("features").get<std::string>(),
                           e.value("features_hflip", std::string())});
    }
}

ExportManifest load_export_manifest(const fs::path& dir) {
    const auto path = dir / "manifest.json";
    try {
        auto m = read_json(path).get<ExportManifest>();
        if (m.items.empty()) throw FormatError(path.string() + ": manifest lists no items");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad export manifest: " + e.what());
    }
}

template <typename T>
ManifestFeatureSource<T>::ManifestFeatureSource(const fs::path& dir) : manifest_(load_export_manifest(dir)) {
    std::cerr << "WARNING: features come from a pre-extracted manifest (" << dir.string()
              << "); jitter is restricted to horizontal flips\n";
    const Shape grid{manifest_.grid_h, manifest_.grid_w, manifest_.channels};
    auto load = [&](const std::string& rel) {
        auto f = load_npy_any<T>(dir / rel);
        if (f.shape() != grid) {
            throw FormatError((dir / rel).string() + ": shape " + shape_str(f.shape()) +
                              " does not match manifest grid " + shape_str(grid));
        }
        return f;
    };
    for (const auto& it : manifest_.items) {
        auto img = load_image(dir / it.image).template cast<T>();
        const std::size_t h = manifest_.grid_h * manifest_.patch, w = manifest_.grid_w * manifest_.patch;
        if (img.dim(0) != h || img.dim(1) != w) img = bilinear_resample(img, h, w);
        images_.push_back(std::move(img));
        feats_.push_back(load(it.features));
        flipped_.push_back(it.features_hflip.empty() ? Tensor<T>() : load(it.features_hflip));
    }
}

template <typename T>
Tensor<T> ManifestFeatureSource<T>::features(std::size_t i, const TransformSpec& t) const {
    const bool pure_flip = t.pad == 0 && t.zoom == 1.0 && t.crop.w == 1.0 && t.crop.h == 1.0;
    if (!pure_flip) throw ConfigError("manifest features support only identity and horizontal-flip views");
    if (!t.hflip) return feats_.at(i);
    if (flipped_.at(i).empty()) {
        throw ConfigError("manifest item " + std::to_string(i) + " has no flipped feature variant");
    }
    return flipped_[i];
}

template class ManifestFeatureSource<float>;
template class ManifestFeatureSource<double>;

}  // namespace pyrafeat
