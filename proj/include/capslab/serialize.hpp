#pragma once

#include <bit>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "capslab/nets.hpp"

// JSON descriptors for architectures and a stable 64-bit content hash, shared
// by the checkpoint container and the run configuration loader.

namespace capslab {

/// FNV-1a. Stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

/// Hash of a parameter set's raw scalar bytes, in declaration order. Used to
/// prove frozen layers stayed bit-identical through a fine-tuning phase.
inline std::uint64_t param_bytes_hash(const ParamSet& p, const std::vector<std::string>& names) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& name : names) {
        const Tensor& t = p.at(name);
        for (std::size_t k = 0; k < t.numel(); ++k) {
            const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(t[k]));
            h = fnv1a64(&bits, sizeof bits) ^ (h * 0x100000001b3ull);
        }
    }
    return h;
}

inline std::string to_string(RouteGrad g) {
    return g == RouteGrad::coefficients_constant ? "coefficients_constant" : "full_unroll";
}

inline RouteGrad route_grad_from_string(const std::string& s) {
    if (s == "coefficients_constant") return RouteGrad::coefficients_constant;
    if (s == "full_unroll") return RouteGrad::full_unroll;
    throw std::invalid_argument("unknown routing gradient mode '" + s + "'");
}

inline nlohmann::json json_of(const RoutingConfig& r) {
    return {{"n_em", r.n_em}, {"eta", r.eta}, {"grad", to_string(r.grad)}};
}

inline RoutingConfig routing_from_json(const nlohmann::json& j) {
    RoutingConfig r;
    r.n_em = j.at("n_em").get<std::size_t>();
    r.eta = j.at("eta").get<Real>();
    if (j.contains("grad")) r.grad = route_grad_from_string(j.at("grad").get<std::string>());
    return r;
}

inline nlohmann::json json_of(const ConvSpec& c) {
    return {{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}};
}

inline ConvSpec conv_from_json(const nlohmann::json& j) {
    return {j.at("out_channels").get<std::size_t>(), j.at("kernel").get<std::size_t>(),
            j.at("stride").get<std::size_t>()};
}

inline nlohmann::json json_of(const CapsNetSpec& s) {
    nlohmann::json j{{"input_edge", s.input_edge},
                     {"conv", json_of(s.conv)},
                     {"primary", json_of(s.primary)},
                     {"primary_dim", s.primary_dim},
                     {"cap1_count", s.cap1_count},
                     {"cap1_dim", s.cap1_dim},
                     {"has_extra", s.has_extra},
                     {"extra_count", s.extra_count},
                     {"extra_dim", s.extra_dim},
                     {"class_count", s.class_count},
                     {"class_dim", s.class_dim},
                     {"r1", json_of(s.r1)},
                     {"r2", json_of(s.r2)},
                     {"r3", json_of(s.r3)}};
    return j;
}

inline CapsNetSpec spec_from_json(const nlohmann::json& j) {
    CapsNetSpec s;
    s.input_edge = j.at("input_edge").get<std::size_t>();
    s.conv = conv_from_json(j.at("conv"));
    s.primary = conv_from_json(j.at("primary"));
    s.primary_dim = j.at("primary_dim").get<std::size_t>();
    s.cap1_count = j.at("cap1_count").get<std::size_t>();
    s.cap1_dim = j.at("cap1_dim").get<std::size_t>();
    s.has_extra = j.at("has_extra").get<bool>();
    s.extra_count = j.at("extra_count").get<std::size_t>();
    s.extra_dim = j.at("extra_dim").get<std::size_t>();
    s.class_count = j.at("class_count").get<std::size_t>();
    s.class_dim = j.at("class_dim").get<std::size_t>();
    s.r1 = routing_from_json(j.at("r1"));
    s.r2 = routing_from_json(j.at("r2"));
    s.r3 = routing_from_json(j.at("r3"));
    return s;
}

}  // namespace capslab
