#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "pyrafeat/data.hpp"
#include "pyrafeat/eval.hpp"
#include "pyrafeat/io.hpp"
#include "pyrafeat/train.hpp"

namespace pyrafeat {

struct DataConfig {
    std::string source = "shapes";  ///< "shapes" or "manifest"
    fs::path manifest;               ///< export directory when source == "manifest"
    fs::path dataset;                ///< saved shapes dataset; generated when empty
    std::uint64_t seed = 0;
    std::size_t images = 32;
    std::size_t classes = 4;
    std::size_t size = 112;
};

struct EvalConfig {
    std::size_t train_images = 64;
    std::size_t test_images = 32;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::string alignment = "nearest";  ///< or "upsample"
    ProbeConfig probe;
    HeadConfig head;
};

/// Everything a command needs to reproduce its outputs. Sections: data,
/// backbone, pyramid, jitter, train, eval. Unknown keys are rejected.
struct RunConfig {
    DataConfig data;
    ToyBackboneSpec backbone;
    TrainConfig train;
    EvalConfig eval;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    std::string hash() const { return json_hash(to_json()); }
};

/// Parses and validates a config file; any problem is a ConfigError naming
/// the path.
RunConfig load_run_config(const fs::path& path);

ProbeAlignment parse_alignment(const std::string& name);

}  // namespace pyrafeat
