#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "capslab/tensor.hpp"

// Reader/writer for the IDX container used by the standard MNIST distribution:
// a big-endian magic word (0x00000803 for image stacks, 0x00000801 for label
// vectors), big-endian u32 dimension sizes, then raw unsigned bytes.

namespace capslab {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BadMagicError : public DataError {
public:
    using DataError::DataError;
};

class TruncatedFileError : public DataError {
public:
    using DataError::DataError;
};

class CountMismatchError : public DataError {
public:
    using DataError::DataError;
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char buf[4];
    if (!in.read(reinterpret_cast<char*>(buf), 4))
        throw TruncatedFileError("truncated IDX header in " + path);
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(buf), 4);
}

}  // namespace detail

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Raw byte images from an IDX image stack, each rows*cols bytes.
struct IdxImages {
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<unsigned char> pixels;  // count * rows * cols
};

inline IdxImages read_idx_images(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open IDX file " + path);
    const auto magic = detail::read_be32(in, path);
    if (magic != kIdxImageMagic)
        throw BadMagicError("bad IDX image magic in " + path + ": got " + std::to_string(magic));
    IdxImages out;
    out.count = detail::read_be32(in, path);
    out.rows = detail::read_be32(in, path);
    out.cols = detail::read_be32(in, path);
    out.pixels.resize(out.count * out.rows * out.cols);
    if (!in.read(reinterpret_cast<char*>(out.pixels.data()),
                 static_cast<std::streamsize>(out.pixels.size())))
        throw TruncatedFileError("truncated IDX pixel data in " + path + ": expected " +
                                 std::to_string(out.pixels.size()) + " bytes");
    return out;
}

inline std::vector<unsigned char> read_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open IDX file " + path);
    const auto magic = detail::read_be32(in, path);
    if (magic != kIdxLabelMagic)
        throw BadMagicError("bad IDX label magic in " + path + ": got " + std::to_string(magic));
    const auto count = detail::read_be32(in, path);
    std::vector<unsigned char> labels(count);
    if (!in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(count)))
        throw TruncatedFileError("truncated IDX label data in " + path + ": expected " +
                                 std::to_string(count) + " bytes");
    return labels;
}

inline void write_idx_images(const std::string& path, const IdxImages& imgs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open IDX file for writing: " + path);
    detail::write_be32(out, kIdxImageMagic);
    detail::write_be32(out, static_cast<std::uint32_t>(imgs.count));
    detail::write_be32(out, static_cast<std::uint32_t>(imgs.rows));
    detail::write_be32(out, static_cast<std::uint32_t>(imgs.cols));
    out.write(reinterpret_cast<const char*>(imgs.pixels.data()),
              static_cast<std::streamsize>(imgs.pixels.size()));
}

inline void write_idx_labels(const std::string& path, const std::vector<unsigned char>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open IDX file for writing: " + path);
    detail::write_be32(out, kIdxLabelMagic);
    detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
}

/// One grayscale source digit with pixels scaled to [0,1].
struct MnistDigit {
    Tensor image;  // [28,28]
    int label = 0;
};

/// Load an image/label IDX pair into digit records, scaling bytes by 1/255.
inline std::vector<MnistDigit> read_idx(const std::string& image_path,
                                        const std::string& label_path) {
    const IdxImages imgs = read_idx_images(image_path);
    const auto labels = read_idx_labels(label_path);
    if (labels.size() != imgs.count)
        throw CountMismatchError("IDX image count " + std::to_string(imgs.count) +
                                 " does not match label count " + std::to_string(labels.size()));
    std::vector<MnistDigit> digits;
    digits.reserve(imgs.count);
    const std::size_t px = imgs.rows * imgs.cols;
    for (std::size_t n = 0; n < imgs.count; ++n) {
        MnistDigit d;
        d.image = Tensor({imgs.rows, imgs.cols});
        for (std::size_t k = 0; k < px; ++k)
            d.image[k] = static_cast<Real>(imgs.pixels[n * px + k]) / Real{255};
        d.label = static_cast<int>(labels[n]);
        digits.push_back(std::move(d));
    }
    return digits;
}

}  // namespace capslab
