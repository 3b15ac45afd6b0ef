#include "pyrafeat/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>
#include <regex>
#include <sstream>
#include <vector>

namespace pyrafeat {

static_assert(std::endian::native == std::endian::little, "NPY writer assumes a little-endian host");

namespace {

constexpr char kMagic[] = "\x93NUMPY";

template <typename T>
const char* dtype_of();
template <>
const char* dtype_of<float>() {
    return "<f4";
}
template <>
const char* dtype_of<double>() {
    return "<f8";
}

struct NpyHeader {
    std::string dtype;
    Shape shape;
    std::size_t data_offset = 0;
};

NpyHeader read_header(std::istream& in, const fs::path& path) {
    const std::string where = path.string() + ": ";
    char pre[8];
    if (!in.read(pre, 8) || std::memcmp(pre, kMagic, 6) != 0) throw NpyHeaderError(where + "malformed header (bad magic)");
    const int major = static_cast<unsigned char>(pre[6]);
    std::size_t len = 0;
    std::size_t prefix = 0;
    if (major == 1) {
        unsigned char b[2];
        if (!in.read(reinterpret_cast<char*>(b), 2)) throw NpyHeaderError(where + "malformed header (short)");
        len = b[0] | (std::size_t(b[1]) << 8);
        prefix = 10;
    } else if (major == 2 || major == 3) {
        unsigned char b[4];
        if (!in.read(reinterpret_cast<char*>(b), 4)) throw NpyHeaderError(where + "malformed header (short)");
        len = b[0] | (std::size_t(b[1]) << 8) | (std::size_t(b[2]) << 16) | (std::size_t(b[3]) << 24);
        prefix = 12;
    } else {
        throw NpyHeaderError(where + "malformed header (version " + std::to_string(major) + ")");
    }
    std::string dict(len, '\0');
    if (!in.read(dict.data(), std::streamsize(len))) throw NpyHeaderError(where + "malformed header (short)");

    static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
    static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
    static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
    std::smatch m;
    NpyHeader h;
    if (!std::regex_search(dict, m, descr_re)) throw NpyHeaderError(where + "malformed header (no descr)");
    h.dtype = m[1];
    if (!std::regex_search(dict, m, order_re)) throw NpyHeaderError(where + "malformed header (no fortran_order)");
    if (m[1] == "True") throw NpyOrderError(where + "unsupported order (Fortran)");
    if (!std::regex_search(dict, m, shape_re)) throw NpyHeaderError(where + "malformed header (no shape)");
    std::stringstream dims(m[1].str());
    std::string item;
    while (std::getline(dims, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.empty()) continue;
        if (!std::all_of(item.begin(), item.end(), ::isdigit)) {
            throw NpyHeaderError(where + "malformed header (shape entry '" + item + "')");
        }
        const auto d = std::stoull(item);
        if (d == 0) throw NpyHeaderError(where + "malformed header (zero extent)");
        h.shape.push_back(std::size_t(d));
    }
    if (h.shape.size() > 4) throw NpyHeaderError(where + "malformed header (rank > 4 unsupported)");
    h.data_offset = prefix + len;
    return h;
}

template <typename T>
Tensor<T> read_payload(std::istream& in, const NpyHeader& h, const fs::path& path) {
    std::vector<T> data(shape_numel(h.shape));
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(T)));
    if (std::size_t(in.gcount()) != data.size() * sizeof(T)) {
        throw NpyTruncatedError(path.string() + ": truncated payload (expected " + std::to_string(data.size()) +
                                " values for shape " + shape_str(h.shape) + ")");
    }
    return Tensor<T>(h.shape, std::move(data));
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return in;
}

}  // namespace

template <typename T>
void save_npy(const Tensor<T>& t, const fs::path& path) {
    if (t.rank() > 4) throw ShapeError("save_npy supports rank <= 4, got " + shape_str(t.shape()));
    // Same spelling as numpy: "()", "(5,)", "(2, 3)".
    std::string shape = "(";
    for (std::size_t i = 0; i < t.rank(); ++i) shape += (i ? ", " : "") + std::to_string(t.dim(i));
    shape += t.rank() == 1 ? ",)" : ")";
    std::string dict = std::string("{'descr': '") + dtype_of<T>() + "', 'fortran_order': False, 'shape': " + shape + ", }";
    const std::size_t total = 10 + dict.size() + 1;
    dict += std::string((64 - total % 64) % 64, ' ') + "\n";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(kMagic, 6);
    const char version[2] = {1, 0};
    out.write(version, 2);
    const unsigned char len[2] = {static_cast<unsigned char>(dict.size() & 0xff),
                                  static_cast<unsigned char>(dict.size() >> 8)};
    out.write(reinterpret_cast<const char*>(len), 2);
    out.write(dict.data(), std::streamsize(dict.size()));
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
    if (!out) throw FormatError("write failed for " + path.string());
}

template <typename T>
Tensor<T> load_npy(const fs::path& path) {
    auto in = open_in(path);
    const auto h = read_header(in, path);
    if (h.dtype != dtype_of<T>()) {
        throw NpyDtypeError(path.string() + ": dtype mismatch (file " + h.dtype + ", expected " + dtype_of<T>() + ")");
    }
    return read_payload<T>(in, h, path);
}

std::string npy_dtype(const fs::path& path) {
    auto in = open_in(path);
    return read_header(in, path).dtype;
}

template <typename T>
Tensor<T> load_npy_any(const fs::path& path) {
    const auto dtype = npy_dtype(path);
    if (dtype == "<f4") return load_npy<float>(path).template cast<T>();
    if (dtype == "<f8") return load_npy<double>(path).template cast<T>();
    throw NpyDtypeError(path.string() + ": dtype mismatch (file " + dtype + ", expected <f4 or <f8)");
}

template void save_npy(const Tensor<float>&, const fs::path&);
template void save_npy(const Tensor<double>&, const fs::path&);
template Tensor<float> load_npy(const fs::path&);
template Tensor<double> load_npy(const fs::path&);
template Tensor<float> load_npy_any(const fs::path&);
template Tensor<double> load_npy_any(const fs::path&);

void to_json(nlohmann::json& j, const FeatureManifest& m) {
    j = nlohmann::json{{"source", m.source},
                       {"grid", {m.grid_h, m.grid_w}},
                       {"patch", m.patch},
                       {"channels", m.channels},
                       {"image_ref", m.image_ref}};
}

void from_json(const nlohmann::json& j, FeatureManifest& m) {
    m.source = j.at("source").get<std::string>();
    m.grid_h = j.at("grid").at(0).get<std::size_t>();
    m.grid_w = j.at("grid").at(1).get<std::size_t>();
    m.patch = j.at("patch").get<std::size_t>();
    m.channels = j.at("channels").get<std::size_t>();
    m.image_ref = j.value("image_ref", std::string());
}

fs::path sidecar_path(const fs::path& npy) {
    fs::path p = npy;
    return p.replace_extension(".json");
}

void save_features(const Tensor<float>& feat, const fs::path& npy, FeatureManifest manifest) {
    require_hwc(feat, "save_features");
    manifest.grid_h = feat.dim(0);
    manifest.grid_w = feat.dim(1);
    manifest.channels = feat.dim(2);
    save_npy(feat, npy);
    write_json(sidecar_path(npy), manifest);
}

Tensor<float> load_features(const fs::path& npy, FeatureManifest* manifest) {
    auto feat = load_npy_any<float>(npy);
    require_hwc(feat, "load_features");
    const auto side = sidecar_path(npy);
    if (fs::exists(side)) {
        FeatureManifest m;
        try {
            m = read_json(side).get<FeatureManifest>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(side.string() + ": bad feature manifest: " + e.what());
        }
        if (m.grid_h != feat.dim(0) || m.grid_w != feat.dim(1) || m.channels != feat.dim(2)) {
            throw FormatError(npy.string() + ": payload " + shape_str(feat.shape()) + " disagrees with manifest grid " +
                              std::to_string(m.grid_h) + "x" + std::to_string(m.grid_w) + "x" +
                              std::to_string(m.channels));
        }
        if (manifest) *manifest = m;
    } else if (manifest) {
        *manifest = FeatureManifest{"unknown", feat.dim(0), feat.dim(1), 0, feat.dim(2), ""};
    }
    return feat;
}

// ---------------------------------------------------------------------------
// Images.

namespace {

std::string lower_ext(const fs::path& p) {
    auto e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), ::tolower);
    return e;
}

struct Raster {
    std::size_t h = 0, w = 0, c = 0;
    std::vector<std::uint8_t> bytes;
};

std::string pnm_token(std::istream& in) {
    std::string tok;
    char ch;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string rest;
            std::getline(in, rest);
        } else if (!std::isspace(static_cast<unsigned char>(ch))) {
            tok += ch;
            break;
        }
    }
    while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok += ch;
    return tok;
}

Raster read_pnm(const fs::path& path) {
    auto in = open_in(path);
    const auto magic = pnm_token(in);
    Raster r;
    if (magic == "P6") r.c = 3;
    else if (magic == "P5") r.c = 1;
    else throw FormatError(path.string() + ": not a binary PPM/PGM");
    try {
        r.w = std::stoul(pnm_token(in));
        r.h = std::stoul(pnm_token(in));
        if (std::stoul(pnm_token(in)) != 255) throw FormatError(path.string() + ": only 8-bit PNM supported");
    } catch (const std::logic_error&) {
        throw FormatError(path.string() + ": malformed PNM header");
    }
    if (r.w == 0 || r.h == 0) throw FormatError(path.string() + ": empty image");
    r.bytes.resize(r.h * r.w * r.c);
    if (!in.read(reinterpret_cast<char*>(r.bytes.data()), std::streamsize(r.bytes.size()))) {
        throw FormatError(path.string() + ": truncated PNM payload");
    }
    return r;
}

void write_pnm(const Raster& r, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << (r.c == 3 ? "P6" : "P5") << "\n" << r.w << " " << r.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(r.bytes.data()), std::streamsize(r.bytes.size()));
}

struct FileCloser {
    void operator()(FILE* f) const { std::fclose(f); }
};

Raster read_png(const fs::path& path) {
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw FormatError("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw FormatError("libpng initialisation failed");
    }
    Raster r;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path.string() + ": invalid PNG");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    r.w = png_get_image_width(png, info);
    r.h = png_get_image_height(png, info);
    r.c = png_get_channels(png, info);
    r.bytes.resize(r.h * r.w * r.c);
    rows.resize(r.h);
    for (std::size_t y = 0; y < r.h; ++y) rows[y] = r.bytes.data() + y * r.w * r.c;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return r;
}

void write_png(const Raster& r, const fs::path& path) {
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw FormatError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw FormatError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(r.h);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("PNG encoding failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(r.w), png_uint_32(r.h), 8, r.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < r.h; ++y) rows[y] = const_cast<png_bytep>(r.bytes.data() + y * r.w * r.c);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Raster read_raster(const fs::path& path) {
    const auto ext = lower_ext(path);
    if (ext == ".png") return read_png(path);
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_pnm(path);
    throw FormatError(path.string() + ": unsupported image extension (use .ppm, .pgm or .png)");
}

void write_raster(const Raster& r, const fs::path& path) {
    const auto ext = lower_ext(path);
    if (ext == ".png") return write_png(r, path);
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
        if ((ext == ".ppm") != (r.c == 3)) {
            throw FormatError(path.string() + ": extension does not match channel count " + std::to_string(r.c));
        }
        return write_pnm(r, path);
    }
    throw FormatError(path.string() + ": unsupported image extension (use .ppm, .pgm or .png)");
}

}  // namespace

Tensor<float> load_image(const fs::path& path) {
    const Raster r = read_raster(path);
    Tensor<float> out({r.h, r.w, 3});
    for (std::size_t i = 0; i < r.h * r.w; ++i)
        for (std::size_t k = 0; k < 3; ++k) out[i * 3 + k] = float(r.bytes[i * r.c + (r.c == 3 ? k : 0)]) / 255.0f;
    return out;
}

void save_image(const Tensor<float>& rgb, const fs::path& path) {
    require_hwc(rgb, "save_image");
    if (rgb.dim(2) != 3) throw ShapeError("save_image expects 3 channels, got " + shape_str(rgb.shape()));
    Raster r{rgb.dim(0), rgb.dim(1), 3, {}};
    r.bytes.resize(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i)
        r.bytes[i] = std::uint8_t(std::lround(std::clamp(double(rgb[i]), 0.0, 1.0) * 255.0));
    write_raster(r, path);
}

Tensor<float> load_labels(const fs::path& path) {
    const Raster r = read_raster(path);
    if (r.c != 1) throw FormatError(path.string() + ": label maps must be single-channel");
    Tensor<float> out({r.h, r.w, 1});
    for (std::size_t i = 0; i < r.bytes.size(); ++i) out[i] = float(r.bytes[i]);
    return out;
}

void save_labels(const Tensor<float>& labels, const fs::path& path) {
    require_hwc(labels, "save_labels");
    Raster r{labels.dim(0), labels.dim(1), 1, {}};
    r.bytes.resize(r.h * r.w);
    for (std::size_t i = 0; i < r.bytes.size(); ++i) {
        const float v = labels[i * labels.dim(2)];
        if (v < 0 || v > 255 || v != std::floor(v)) throw ShapeError("label values must be integers in 0..255");
        r.bytes[i] = std::uint8_t(v);
    }
    write_raster(r, path);
}

void log_warning(const std::string& msg) { std::cerr << "WARNING: " << msg << std::endl; }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
    if (!out) throw FormatError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json read_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": invalid JSON: " + e.what());
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    write_text(path, j.dump(2) + "\n");
}

std::string json_hash(const nlohmann::json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace pyrafeat
