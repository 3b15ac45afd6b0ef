#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "pyrafeat/errors.hpp"
#include "pyrafeat/tensor.hpp"

namespace pyrafeat {

namespace fs = std::filesystem;

// Distinct NPY failure modes.
class NpyHeaderError : public FormatError {
public:
    using FormatError::FormatError;
};
class NpyDtypeError : public FormatError {
public:
    using FormatError::FormatError;
};
class NpyOrderError : public FormatError {
public:
    using FormatError::FormatError;
};
class NpyTruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

/// NPY v1.0, little-endian, C order. Ranks 0..4.
template <typename T>
void save_npy(const Tensor<T>& t, const fs::path& path);

/// Loads an NPY whose dtype must be exactly T ('<f4' for float, '<f8' for
/// double).
template <typename T>
Tensor<T> load_npy(const fs::path& path);

/// "<f4", "<f8", ... as declared in the header.
std::string npy_dtype(const fs::path& path);

/// Loads f4 or f8 and converts to T.
template <typename T>
Tensor<T> load_npy_any(const fs::path& path);

/// Sidecar description of a saved feature grid (`x.npy` -> `x.json`).
struct FeatureManifest {
    std::string source = "toy";
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t patch = 14;
    std::size_t channels = 0;
    std::string image_ref;
};

void to_json(nlohmann::json& j, const FeatureManifest& m);
void from_json(const nlohmann::json& j, FeatureManifest& m);

fs::path sidecar_path(const fs::path& npy);

/// Writes the NPY (f32) and its sidecar manifest.
void save_features(const Tensor<float>& feat, const fs::path& npy, FeatureManifest manifest);
/// Loads the NPY and, when present, checks it against the sidecar.
Tensor<float> load_features(const fs::path& npy, FeatureManifest* manifest = nullptr);

// 8-bit images. RGB tensors are (H, W, 3) in [0, 1]; label maps are (H, W, 1)
// holding integer class ids. Format is chosen from the extension: .ppm/.pgm
// (binary P6/P5) or .png.
Tensor<float> load_image(const fs::path& path);
void save_image(const Tensor<float>& rgb, const fs::path& path);
Tensor<float> load_labels(const fs::path& path);
void save_labels(const Tensor<float>& labels, const fs::path& path);

/// "WARNING: <msg>" on stderr.
void log_warning(const std::string& msg);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);
nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);

/// FNV-1a 64 of the compact dump, as 16 hex digits.
std::string json_hash(const nlohmann::json& j);

}  // namespace pyrafeat
