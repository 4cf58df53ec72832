#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capslab/train.hpp"
#include "capslab/tsne.hpp"

// Experiment configuration: one JSON document per experiment. Strictly
// validated before any work starts; unknown keys anywhere are errors, so a
// typo like "bacth_size" cannot silently fall back to a default.

namespace capslab {

class ConfigError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SweepSettings {
    std::vector<std::size_t> n_em;
    std::vector<Real> eta;
    std::size_t trials = 3;
};

struct TransferSettings {
    std::string scheme;  // B, B1B, B2B, A1B or A2B
};

struct AnalysisSettings {
    Real perplexity = 10;
    std::size_t iters = 1000;
    std::size_t restarts = 3;
};

struct ExperimentConfig {
    std::string name;
    std::uint64_t seed = 1;
    std::filesystem::path out_dir = "runs";

    bool has_data = false;
    std::filesystem::path train_dir, test_dir;

    bool has_model = false;
    ModelFamily family = ModelFamily::capsnet;
    CapsNetSpec arch;

    TrainConfig train;  // seed mirrors the top-level seed
    std::optional<SweepSettings> sweep;
    std::optional<TransferSettings> transfer;
    AnalysisSettings analysis;
};

inline ModelFamily family_from_string(const std::string& s) {
    if (s == "capsnet") return ModelFamily::capsnet;
    if (s == "cnn") return ModelFamily::cnn;
    throw ConfigError("model.family must be \"capsnet\" or \"cnn\", got \"" + s + "\"");
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        if (!known) throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
    }
}

template <typename T>
T get_as(const nlohmann::json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad value for \"" + std::string(key) + "\" in " + where + ": " + e.what());
    }
}

template <typename T>
void maybe_set(T& out, const nlohmann::json& j, const char* key, const std::string& where) {
    if (j.contains(key)) out = get_as<T>(j, key, where);
}

inline void apply_routing_overrides(RoutingConfig& r, const nlohmann::json& j,
                                    const std::string& where) {
    reject_unknown_keys(j, {"n_em", "eta", "grad"}, where);
    maybe_set(r.n_em, j, "n_em", where);
    maybe_set(r.eta, j, "eta", where);
    if (j.contains("grad")) r.grad = route_grad_from_string(get_as<std::string>(j, "grad", where));
}

inline void apply_conv_overrides(ConvSpec& c, const nlohmann::json& j, const std::string& where) {
    reject_unknown_keys(j, {"out_channels", "kernel", "stride"}, where);
    maybe_set(c.out_channels, j, "out_channels", where);
    maybe_set(c.kernel, j, "kernel", where);
    maybe_set(c.stride, j, "stride", where);
}

/// Partial override of the default architecture; nested sections are partial
/// too, so a config can say just {"r1": {"n_em": 9}}.
inline void apply_arch_overrides(CapsNetSpec& s, const nlohmann::json& j) {
    const std::string where = "model.arch";
    reject_unknown_keys(j,
                        {"input_edge", "conv", "primary", "primary_dim", "cap1_count", "cap1_dim",
                         "has_extra", "extra_count", "extra_dim", "class_count", "class_dim", "r1",
                         "r2", "r3"},
                        where);
    maybe_set(s.input_edge, j, "input_edge", where);
    if (j.contains("conv")) apply_conv_overrides(s.conv, j.at("conv"), where + ".conv");
    if (j.contains("primary")) apply_conv_overrides(s.primary, j.at("primary"), where + ".primary");
    maybe_set(s.primary_dim, j, "primary_dim", where);
    maybe_set(s.cap1_count, j, "cap1_count", where);
    maybe_set(s.cap1_dim, j, "cap1_dim", where);
    maybe_set(s.has_extra, j, "has_extra", where);
    maybe_set(s.extra_count, j, "extra_count", where);
    maybe_set(s.extra_dim, j, "extra_dim", where);
    maybe_set(s.class_count, j, "class_count", where);
    maybe_set(s.class_dim, j, "class_dim", where);
    if (j.contains("r1")) apply_routing_overrides(s.r1, j.at("r1"), where + ".r1");
    if (j.contains("r2")) apply_routing_overrides(s.r2, j.at("r2"), where + ".r2");
    if (j.contains("r3")) apply_routing_overrides(s.r3, j.at("r3"), where + ".r3");
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& doc) {
    using detail::get_as;
    using detail::maybe_set;
    using detail::reject_unknown_keys;

    reject_unknown_keys(
        doc, {"name", "seed", "out_dir", "data", "model", "train", "sweep", "transfer", "analysis"},
        "the config root");
    ExperimentConfig cfg;
    if (!doc.contains("name")) throw ConfigError("config needs a \"name\"");
    cfg.name = get_as<std::string>(doc, "name", "the config root");
    if (cfg.name.empty() || cfg.name.find_first_not_of(
                                "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-") !=
                                std::string::npos)
        throw ConfigError("\"name\" must be a nonempty [A-Za-z0-9_-] token, got \"" + cfg.name +
                          "\"");
    maybe_set(cfg.seed, doc, "seed", "the config root");
    if (doc.contains("out_dir"))
        cfg.out_dir = get_as<std::string>(doc, "out_dir", "the config root");

    if (doc.contains("data")) {
        const auto& d = doc.at("data");
        reject_unknown_keys(d, {"train", "test"}, "data");
        if (!d.contains("train") || !d.contains("test"))
            throw ConfigError("data needs both \"train\" and \"test\" dataset directories");
        cfg.train_dir = get_as<std::string>(d, "train", "data");
        cfg.test_dir = get_as<std::string>(d, "test", "data");
        cfg.has_data = true;
    }

    if (doc.contains("model")) {
        const auto& m = doc.at("model");
        reject_unknown_keys(m, {"family", "arch"}, "model");
        if (!m.contains("family")) throw ConfigError("model needs a \"family\"");
        cfg.family = family_from_string(get_as<std::string>(m, "family", "model"));
        if (m.contains("arch")) detail::apply_arch_overrides(cfg.arch, m.at("arch"));
        try {
            cfg.arch.validate_for_task();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("model.arch invalid: ") + e.what());
        }
        cfg.has_model = true;
    }

    if (doc.contains("train")) {
        const auto& t = doc.at("train");
        reject_unknown_keys(t, {"batch_size", "total_steps", "eval_every", "eval_subset", "adam"},
                            "train");
        maybe_set(cfg.train.batch_size, t, "batch_size", "train");
        maybe_set(cfg.train.total_steps, t, "total_steps", "train");
        maybe_set(cfg.train.eval_every, t, "eval_every", "train");
        maybe_set(cfg.train.eval_subset, t, "eval_subset", "train");
        if (t.contains("adam")) {
            const auto& a = t.at("adam");
            reject_unknown_keys(a, {"lr", "beta1", "beta2", "eps"}, "train.adam");
            maybe_set(cfg.train.adam.lr, a, "lr", "train.adam");
            maybe_set(cfg.train.adam.beta1, a, "beta1", "train.adam");
            maybe_set(cfg.train.adam.beta2, a, "beta2", "train.adam");
            maybe_set(cfg.train.adam.eps, a, "eps", "train.adam");
        }
    }
    cfg.train.seed = cfg.seed;
    try {
        cfg.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("train section invalid: ") + e.what());
    }

    if (doc.contains("sweep")) {
        const auto& s = doc.at("sweep");
        reject_unknown_keys(s, {"n_em", "eta", "trials"}, "sweep");
        SweepSettings sw;
        if (!s.contains("n_em") || !s.contains("eta"))
            throw ConfigError("sweep needs \"n_em\" and \"eta\" arrays");
        sw.n_em = get_as<std::vector<std::size_t>>(s, "n_em", "sweep");
        sw.eta = get_as<std::vector<Real>>(s, "eta", "sweep");
        maybe_set(sw.trials, s, "trials", "sweep");
        if (sw.n_em.empty() || sw.eta.empty() || sw.trials == 0)
            throw ConfigError("sweep grid must be nonempty with trials >= 1");
        for (const Real eta : sw.eta)
            if (!(eta > 0 && eta <= 1))
                throw ConfigError("sweep eta values must lie in (0, 1], got " + std::to_string(eta));
        cfg.sweep = std::move(sw);
    }

    if (doc.contains("transfer")) {
        const auto& t = doc.at("transfer");
        reject_unknown_keys(t, {"scheme"}, "transfer");
        if (!t.contains("scheme")) throw ConfigError("transfer needs a \"scheme\" tag");
        TransferSettings ts;
        ts.scheme = get_as<std::string>(t, "scheme", "transfer");
        try {
            TransferScheme::from_tag(ts.scheme);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        cfg.transfer = std::move(ts);
    }

    if (doc.contains("analysis")) {
        const auto& a = doc.at("analysis");
        reject_unknown_keys(a, {"perplexity", "iters", "restarts"}, "analysis");
        maybe_set(cfg.analysis.perplexity, a, "perplexity", "analysis");
        maybe_set(cfg.analysis.iters, a, "iters", "analysis");
        maybe_set(cfg.analysis.restarts, a, "restarts", "analysis");
        if (!(cfg.analysis.perplexity > 0) || cfg.analysis.iters == 0 || cfg.analysis.restarts == 0)
            throw ConfigError("analysis settings must be positive");
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return parse_experiment_config(doc);
}

}  // namespace capslab
