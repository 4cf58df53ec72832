#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "capslab/adam.hpp"
#include "capslab/idx.hpp"
#include "capslab/serialize.hpp"

// Single-file model snapshot:
//   "CRLB" | u32 format version | u64 config hash | u64 json length | json
//   | u64 scalar count | little-endian f64 payload
// The JSON block names the model family, architecture, parameter layout,
// optimizer state shape, step counter and the batch-sampler RNG state; the
// payload holds parameter values followed by the Adam first and second
// moments in the same order. Reloading reproduces forward passes bitwise and
// resumes training deterministically.

namespace capslab {

inline constexpr char kCheckpointMagic[4] = {'C', 'R', 'L', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public DataError {
public:
    using DataError::DataError;
};

struct Checkpoint {
    std::string family;  // "capsnet" or "cnn"
    CapsNetSpec spec;
    ParamSet params;
    long step = 0;
    std::string rng_state;  // serialized std::mt19937_64 batch sampler
    long adam_t = 0;
    AdamConfig adam_cfg;
    std::vector<Tensor> adam_m, adam_v;
    std::uint64_t config_hash = 0;
};

namespace detail {

inline void write_u32_le(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32_le(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw TruncatedFileError("truncated checkpoint " + path);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

inline std::uint64_t read_u64_le(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8))
        throw TruncatedFileError("truncated checkpoint " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline void write_f64_le(std::ostream& out, const Tensor& t) {
    for (std::size_t k = 0; k < t.numel(); ++k) {
        const auto u = std::bit_cast<std::uint64_t>(static_cast<double>(t[k]));
        write_u64_le(out, u);
    }
}

inline void read_f64_le(std::istream& in, Tensor& t, const std::string& path) {
    for (std::size_t k = 0; k < t.numel(); ++k)
        t[k] = static_cast<Real>(std::bit_cast<double>(read_u64_le(in, path)));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    if (c.adam_m.size() != c.params.values.size() || c.adam_v.size() != c.params.values.size())
        throw std::invalid_argument("save_checkpoint: optimizer moments do not match parameters");
    nlohmann::json meta{{"family", c.family},
                        {"arch", json_of(c.spec)},
                        {"step", c.step},
                        {"rng", c.rng_state},
                        {"adam", nlohmann::json{{"t", c.adam_t},
                                                {"lr", c.adam_cfg.lr},
                                                {"beta1", c.adam_cfg.beta1},
                                                {"beta2", c.adam_cfg.beta2},
                                                {"eps", c.adam_cfg.eps}}}};
    nlohmann::json layout = nlohmann::json::array();
    std::size_t scalars = 0;
    for (std::size_t i = 0; i < c.params.values.size(); ++i) {
        layout.push_back({{"name", c.params.names[i]}, {"shape", c.params.values[i].shape()}});
        scalars += c.params.values[i].numel();
    }
    meta["params"] = layout;
    const std::string meta_str = meta.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
    out.write(kCheckpointMagic, 4);
    detail::write_u32_le(out, kCheckpointVersion);
    detail::write_u64_le(out, c.config_hash);
    detail::write_u64_le(out, meta_str.size());
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    detail::write_u64_le(out, 3 * scalars);
    for (const auto& t : c.params.values) detail::write_f64_le(out, t);
    for (const auto& t : c.adam_m) detail::write_f64_le(out, t);
    for (const auto& t : c.adam_v) detail::write_f64_le(out, t);
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path.string());
    char magic[4];
    if (!in.read(magic, 4)) throw TruncatedFileError("truncated checkpoint " + path.string());
    if (std::string_view(magic, 4) != std::string_view(kCheckpointMagic, 4))
        throw BadMagicError("not a checkpoint file (bad magic): " + path.string());
    const auto version = detail::read_u32_le(in, path.string());
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " +
                              path.string());

    Checkpoint c;
    c.config_hash = detail::read_u64_le(in, path.string());
    const auto meta_len = detail::read_u64_le(in, path.string());
    std::string meta_str(meta_len, '\0');
    if (!in.read(meta_str.data(), static_cast<std::streamsize>(meta_len)))
        throw TruncatedFileError("truncated checkpoint metadata " + path.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError("corrupt checkpoint metadata in " + path.string() + ": " + e.what());
    }

    c.family = meta.at("family").get<std::string>();
    c.spec = spec_from_json(meta.at("arch"));
    c.step = meta.at("step").get<long>();
    c.rng_state = meta.at("rng").get<std::string>();
    const auto& ad = meta.at("adam");
    c.adam_t = ad.at("t").get<long>();
    c.adam_cfg.lr = ad.at("lr").get<Real>();
    c.adam_cfg.beta1 = ad.at("beta1").get<Real>();
    c.adam_cfg.beta2 = ad.at("beta2").get<Real>();
    c.adam_cfg.eps = ad.at("eps").get<Real>();

    std::size_t scalars = 0;
    for (const auto& entry : meta.at("params")) {
        c.params.names.push_back(entry.at("name").get<std::string>());
        c.params.values.emplace_back(entry.at("shape").get<Shape>());
        scalars += c.params.values.back().numel();
    }
    const auto payload = detail::read_u64_le(in, path.string());
    if (payload != 3 * scalars)
        throw CheckpointError("checkpoint payload count " + std::to_string(payload) +
                              " does not match declared layout in " + path.string());
    for (auto& t : c.params.values) detail::read_f64_le(in, t, path.string());
    for (const auto& t : c.params.values) {
        c.adam_m.emplace_back(t.shape());
        c.adam_v.emplace_back(t.shape());
    }
    for (auto& t : c.adam_m) detail::read_f64_le(in, t, path.string());
    for (auto& t : c.adam_v) detail::read_f64_le(in, t, path.string());
    return c;
}

}  // namespace capslab
