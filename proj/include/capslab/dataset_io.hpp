#pragma once

#include <bit>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "capslab/datagen.hpp"

// On-disk dataset container: <dir>/manifest.json describing the records plus
// <dir>/images.bin, a flat blob of little-endian float32 pixels in record
// order. Labels and provenance live in the manifest.

namespace capslab {

using nlohmann::json;

inline std::filesystem::path data_dir() {
    if (const char* env = std::getenv("CAPSLAB_DATA_DIR")) return env;
    return "data";
}

namespace detail {

inline void write_f32_le(std::ostream& out, const std::vector<float>& v) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(float)));
    } else {
        for (float f : v) {
            auto u = std::bit_cast<std::uint32_t>(f);
            const unsigned char b[4] = {static_cast<unsigned char>(u),
                                        static_cast<unsigned char>(u >> 8),
                                        static_cast<unsigned char>(u >> 16),
                                        static_cast<unsigned char>(u >> 24)};
            out.write(reinterpret_cast<const char*>(b), 4);
        }
    }
}

inline void read_f32_le(std::istream& in, std::vector<float>& v, const std::string& path) {
    if constexpr (std::endian::native == std::endian::little) {
        if (!in.read(reinterpret_cast<char*>(v.data()),
                     static_cast<std::streamsize>(v.size() * sizeof(float))))
            throw TruncatedFileError("truncated image blob " + path);
    } else {
        unsigned char b[4];
        for (auto& f : v) {
            if (!in.read(reinterpret_cast<char*>(b), 4))
                throw TruncatedFileError("truncated image blob " + path);
            f = std::bit_cast<float>(std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                                     (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24));
        }
    }
}

}  // namespace detail

/// Write samples to <dir>/manifest.json + <dir>/images.bin. `meta` is carried
/// verbatim under the manifest's "meta" key (seed, split side, grid info...).
inline void save_dataset(const std::filesystem::path& dir,
                         const std::vector<MultiMnistSample>& samples, json meta = json::object()) {
    if (samples.empty()) throw DataError("save_dataset: refusing to write an empty dataset");
    std::filesystem::create_directories(dir);
    const std::size_t rows = samples.front().image.extent(0);
    const std::size_t cols = samples.front().image.extent(1);

    json labels = json::array();
    std::vector<float> blob;
    blob.reserve(samples.size() * rows * cols);
    for (const auto& s : samples) {
        if (s.image.extent(0) != rows || s.image.extent(1) != cols)
            throw ShapeError("save_dataset: inconsistent image shapes in batch");
        labels.push_back({s.labels.lo, s.labels.hi});
        for (std::size_t k = 0; k < s.image.numel(); ++k)
            blob.push_back(static_cast<float>(s.image[k]));
    }

    json manifest{{"format_version", 1},
                  {"count", samples.size()},
                  {"rows", rows},
                  {"cols", cols},
                  {"dtype", "f32"},
                  {"byte_order", "little"},
                  {"blob", "images.bin"},
                  {"labels", std::move(labels)},
                  {"meta", std::move(meta)}};

    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw DataError("cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";

    std::ofstream bf(dir / "images.bin", std::ios::binary);
    if (!bf) throw DataError("cannot write " + (dir / "images.bin").string());
    detail::write_f32_le(bf, blob);
}

struct LoadedDataset {
    std::vector<MultiMnistSample> samples;
    json meta;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw DataError("cannot open " + (dir / "manifest.json").string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw DataError("malformed manifest " + (dir / "manifest.json").string() + ": " + e.what());
    }
    if (manifest.value("format_version", 0) != 1)
        throw DataError("unsupported dataset format_version in " + (dir / "manifest.json").string());
    if (manifest.value("dtype", "") != "f32" || manifest.value("byte_order", "") != "little")
        throw DataError("unsupported dataset encoding in " + (dir / "manifest.json").string());

    const std::size_t count = manifest.at("count").get<std::size_t>();
    const std::size_t rows = manifest.at("rows").get<std::size_t>();
    const std::size_t cols = manifest.at("cols").get<std::size_t>();
    const auto& labels = manifest.at("labels");
    if (labels.size() != count)
        throw CountMismatchError("manifest label count " + std::to_string(labels.size()) +
                                 " does not match image count " + std::to_string(count));

    const auto blob_path = dir / manifest.value("blob", "images.bin");
    std::ifstream bf(blob_path, std::ios::binary);
    if (!bf) throw DataError("cannot open " + blob_path.string());
    std::vector<float> blob(count * rows * cols);
    detail::read_f32_le(bf, blob, blob_path.string());

    LoadedDataset out;
    out.meta = manifest.value("meta", json::object());
    out.samples.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        MultiMnistSample s;
        s.image = Tensor({rows, cols});
        for (std::size_t k = 0; k < rows * cols; ++k)
            s.image[k] = static_cast<Real>(blob[n * rows * cols + k]);
        s.labels = DuplexLabel(labels[n][0].get<int>(), labels[n][1].get<int>());
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace capslab
