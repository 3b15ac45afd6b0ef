#include "pyrafeat/config.hpp"

#include <set>
#include <type_traits>

namespace pyrafeat {

namespace {

using nlohmann::json;

class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_unsigned()) throw ConfigError(path(key) + " must be a non-negative integer");
        }
        try {
            out = v.get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(path(key) + ": " + e.what());
        }
    }

    void get(const char* key, fs::path& out) {
        std::string s = out.string();
        get(key, s);
        out = s;
    }

    template <typename T>
    void get(const char* key, std::vector<T>& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if (!v.is_array()) throw ConfigError(path(key) + " must be an array");
        out.clear();
        for (const auto& e : v) {
            if constexpr (std::is_unsigned_v<T>) {
                if (!e.is_number_unsigned()) throw ConfigError(path(key) + " entries must be non-negative integers");
            }
            out.push_back(e.get<T>());
        }
    }

    /// Nested object, or nullptr when absent.
    const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string path(const std::string& key) const { return where_ + "." + key; }

    void finish() const {
        for (const auto& item : j_.items()) {
            if (!seen_.count(item.key())) throw ConfigError("unknown config key " + path(item.key()));
        }
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

}  // namespace

ProbeAlignment parse_alignment(const std::string& name) {
    if (name == "nearest") return ProbeAlignment::nearest;
    if (name == "upsample") return ProbeAlignment::upsample;
    throw ConfigError("eval.alignment must be nearest or upsample, got " + name);
}

void RunConfig::validate() const {
    if (data.source != "shapes" && data.source != "manifest") {
        throw ConfigError("data.source must be shapes or manifest, got " + data.source);
    }
    if (data.source == "manifest" && data.manifest.empty()) throw ConfigError("data.manifest is required for manifest sources");
    if (data.images == 0) throw ConfigError("data.images must be >= 1");
    if (data.classes < 2) throw ConfigError("data.classes must be >= 2");
    if (backbone.patch == 0 || backbone.channels == 0) throw ConfigError("backbone patch and channels must be >= 1");
    if (data.size == 0 || data.size % backbone.patch != 0) {
        throw ConfigError("data.size must be a positive multiple of backbone.patch");
    }
    train.validate();
    if (eval.train_images == 0 || eval.test_images == 0) throw ConfigError("eval needs train and test images");
    if (eval.seeds.empty()) throw ConfigError("eval.seeds must not be empty");
    if (eval.head.hidden == 0) throw ConfigError("eval.head_hidden must be >= 1");
    parse_alignment(eval.alignment);
}

nlohmann::json RunConfig::to_json() const {
    const auto& t = train;
    return json{
        {"data",
         {{"source", data.source},
          {"manifest", data.manifest.string()},
          {"dataset", data.dataset.string()},
          {"seed", data.seed},
          {"images", data.images},
          {"classes", data.classes},
          {"size", data.size}}},
        {"backbone", {{"patch", backbone.patch}, {"channels", backbone.channels}, {"seed", backbone.seed}}},
        {"pyramid",
         {{"levels", t.pyramid.levels},
          {"window", t.pyramid.window},
          {"share_params", t.pyramid.share_params},
          {"proj_dim", t.pyramid.proj_dim}}},
        {"jitter", {{"max_pad", t.jitter.max_pad}, {"max_zoom", t.jitter.max_zoom}, {"flip_prob", t.jitter.flip_prob}}},
        {"train",
         {{"steps", t.steps},
          {"batch", t.batch},
          {"lr", t.adam.lr},
          {"beta1", t.adam.beta1},
          {"beta2", t.adam.beta2},
          {"eps", t.adam.eps},
          {"supervision", t.supervision.levels},
          {"views", t.views},
          {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every},
          {"precision", t.precision},
          {"freeze_theta", t.freeze_theta}}},
        {"eval",
         {{"train_images", eval.train_images},
          {"test_images", eval.test_images},
          {"seeds", eval.seeds},
          {"alignment", eval.alignment},
          {"probe_steps", eval.probe.steps},
          {"probe_lr", eval.probe.lr},
          {"head_hidden", eval.head.hidden},
          {"head_steps", eval.head.steps},
          {"head_lr", eval.head.lr}}},
    };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    Section root(j, "config");
    if (const json* d = root.child("data")) {
        Section s(*d, "data");
        s.get("source", c.data.source);
        s.get("manifest", c.data.manifest);
        s.get("dataset", c.data.dataset);
        s.get("seed", c.data.seed);
        s.get("images", c.data.images);
        s.get("classes", c.data.classes);
        s.get("size", c.data.size);
        s.finish();
    }
    if (const json* b = root.child("backbone")) {
        Section s(*b, "backbone");
        s.get("patch", c.backbone.patch);
        s.get("channels", c.backbone.channels);
        s.get("seed", c.backbone.seed);
        s.finish();
    }
    auto& t = c.train;
    if (const json* p = root.child("pyramid")) {
        Section s(*p, "pyramid");
        s.get("levels", t.pyramid.levels);
        s.get("window", t.pyramid.window);
        s.get("share_params", t.pyramid.share_params);
        s.get("proj_dim", t.pyramid.proj_dim);
        s.finish();
    }
    if (const json* p = root.child("jitter")) {
        Section s(*p, "jitter");
        s.get("max_pad", t.jitter.max_pad);
        s.get("max_zoom", t.jitter.max_zoom);
        s.get("flip_prob", t.jitter.flip_prob);
        s.finish();
    }
    if (const json* p = root.child("train")) {
        Section s(*p, "train");
        s.get("steps", t.steps);
        s.get("batch", t.batch);
        s.get("lr", t.adam.lr);
        s.get("beta1", t.adam.beta1);
        s.get("beta2", t.adam.beta2);
        s.get("eps", t.adam.eps);
        s.get("supervision", t.supervision.levels);
        s.get("views", t.views);
        s.get("seed", t.seed);
        s.get("checkpoint_every", t.checkpoint_every);
        s.get("precision", t.precision);
        s.get("freeze_theta", t.freeze_theta);
        s.finish();
    }
    if (const json* p = root.child("eval")) {
        Section s(*p, "eval");
        s.get("train_images", c.eval.train_images);
        s.get("test_images", c.eval.test_images);
        s.get("seeds", c.eval.seeds);
        s.get("alignment", c.eval.alignment);
        s.get("probe_steps", c.eval.probe.steps);
        s.get("probe_lr", c.eval.probe.lr);
        s.get("head_hidden", c.eval.head.hidden);
        s.get("head_steps", c.eval.head.steps);
        s.get("head_lr", c.eval.head.lr);
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
    try {
        return RunConfig::from_json(j);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace pyrafeat
