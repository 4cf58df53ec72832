#pragma once

#include <map>
#include <string>

#include "capslab/datagen.hpp"
#include "capslab/routing.hpp"

// Model definitions: the capsule network (conv stem -> primary capsules ->
// routed capsule layers -> class capsules whose vector norms are the class
// scores), an optional extra capsule layer for transfer experiments, and a
// neuron-count-matched CNN baseline (same conv stem shape, fully connected
// layers sized so every intermediate layer has exactly as many neurons as the
// corresponding capsule layer).

namespace capslab {

struct ConvSpec {
    std::size_t out_channels = 0, kernel = 0, stride = 1;
};

struct CapsNetSpec {
    std::size_t input_edge = 36;
    ConvSpec conv{32, 9, 1};
    ConvSpec primary{16, 9, 2};   // out_channels must be a multiple of primary_dim
    std::size_t primary_dim = 8;
    std::size_t cap1_count = 16, cap1_dim = 12;
    bool has_extra = false;
    std::size_t extra_count = 16, extra_dim = 12;
    std::size_t class_count = 10, class_dim = 16;
    RoutingConfig r1, r2, r3;

    std::size_t conv_out_edge() const {
        return (input_edge - conv.kernel) / conv.stride + 1;
    }
    std::size_t primary_out_edge() const {
        return (conv_out_edge() - primary.kernel) / primary.stride + 1;
    }
    std::size_t primary_groups() const { return primary.out_channels / primary_dim; }
    std::size_t num_primary_capsules() const {
        return primary_groups() * primary_out_edge() * primary_out_edge();
    }

    void validate() const {
        if (conv.kernel == 0 || primary.kernel == 0 || conv.out_channels == 0)
            throw std::invalid_argument("conv layers need nonzero channels and kernel");
        if (input_edge < conv.kernel || conv_out_edge() < primary.kernel)
            throw std::invalid_argument("kernels exceed their input extents");
        if (primary_dim == 0 || primary.out_channels % primary_dim != 0)
            throw std::invalid_argument("primary conv channels must be a multiple of the capsule dim");
        if (cap1_count == 0 || cap1_dim == 0 || class_count == 0 || class_dim == 0)
            throw std::invalid_argument("capsule layer sizes must be >= 1");
        r1.validate();
        r2.validate();
        if (has_extra) {
            if (extra_count == 0 || extra_dim == 0)
                throw std::invalid_argument("extra capsule layer sizes must be >= 1");
            r3.validate();
        }
    }

    /// The duplex-digit task requires exactly ten class capsules.
    void validate_for_task() const {
        validate();
        if (class_count != 10)
            throw std::invalid_argument("duplex task needs class_count = 10, got " +
                                        std::to_string(class_count));
    }
};

/// Layer-by-layer neuron counts shared by the CapsNet and its CNN mirror.
/// Index 0 is the first capsule layer (cap1 <-> fc1) and so on; the conv stem
/// is mirrored exactly and the CNN's 10-way head has no capsule counterpart.
inline std::vector<std::size_t> parity_neuron_counts(const CapsNetSpec& s) {
    std::vector<std::size_t> counts{s.cap1_count * s.cap1_dim};
    if (s.has_extra) counts.push_back(s.extra_count * s.extra_dim);
    counts.push_back(s.class_count * s.class_dim);
    return counts;
}

// ---------------------------------------------------------------------------
// parameters

struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor> values;

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw std::out_of_range("no parameter named " + name);
    }
    Tensor& at(const std::string& name) { return values[index_of(name)]; }
    const Tensor& at(const std::string& name) const { return values[index_of(name)]; }
    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& v : values) n += v.numel();
        return n;
    }
};

namespace detail {

inline void add_param(ParamSet& p, Rng& rng, const std::string& name, Shape shape,
                      std::size_t fan_in) {
    const Real bound = Real{1} / std::sqrt(static_cast<Real>(fan_in));
    Tensor t(std::move(shape));
    fill_uniform(t, rng, -bound, bound);
    p.names.push_back(name);
    p.values.push_back(std::move(t));
}

inline void add_bias(ParamSet& p, const std::string& name, std::size_t n) {
    p.names.push_back(name);
    p.values.push_back(Tensor({n}));
}

}  // namespace detail

/// Weights ~ uniform(+-1/sqrt(fan_in)), biases zero, in fixed layer order.
inline ParamSet init_capsnet_params(const CapsNetSpec& s, std::uint64_t seed) {
    s.validate();
    Rng rng(derive_seed(seed, 0x636170730001));
    ParamSet p;
    detail::add_param(p, rng, "conv1.w", {s.conv.out_channels, 1, s.conv.kernel, s.conv.kernel},
                      s.conv.kernel * s.conv.kernel);
    detail::add_bias(p, "conv1.b", s.conv.out_channels);
    detail::add_param(p, rng, "primary.w",
                      {s.primary.out_channels, s.conv.out_channels, s.primary.kernel, s.primary.kernel},
                      s.conv.out_channels * s.primary.kernel * s.primary.kernel);
    detail::add_bias(p, "primary.b", s.primary.out_channels);
    detail::add_param(p, rng, "cap1.w",
                      {s.num_primary_capsules(), s.cap1_count, s.primary_dim, s.cap1_dim},
                      s.primary_dim);
    if (s.has_extra)
        detail::add_param(p, rng, "cap_extra.w", {s.cap1_count, s.extra_count, s.cap1_dim, s.extra_dim},
                          s.cap1_dim);
    const std::size_t class_in_count = s.has_extra ? s.extra_count : s.cap1_count;
    const std::size_t class_in_dim = s.has_extra ? s.extra_dim : s.cap1_dim;
    detail::add_param(p, rng, "class.w", {class_in_count, s.class_count, class_in_dim, s.class_dim},
                      class_in_dim);
    return p;
}

inline ParamSet init_cnn_params(const CapsNetSpec& s, std::uint64_t seed) {
    s.validate();
    Rng rng(derive_seed(seed, 0x636e6e0001));
    ParamSet p;
    detail::add_param(p, rng, "conv1.w", {s.conv.out_channels, 1, s.conv.kernel, s.conv.kernel},
                      s.conv.kernel * s.conv.kernel);
    detail::add_bias(p, "conv1.b", s.conv.out_channels);
    detail::add_param(p, rng, "conv2.w",
                      {s.primary.out_channels, s.conv.out_channels, s.primary.kernel, s.primary.kernel},
                      s.conv.out_channels * s.primary.kernel * s.primary.kernel);
    detail::add_bias(p, "conv2.b", s.primary.out_channels);

    const auto counts = parity_neuron_counts(s);
    std::size_t in_features =
        s.primary.out_channels * s.primary_out_edge() * s.primary_out_edge();
    const char* names[] = {"fc1", "fc_extra", "fc2"};
    std::size_t layer = 0;
    for (std::size_t i = 0; i < counts.size(); ++i, ++layer) {
        if (!s.has_extra && layer == 1) ++layer;  // skip the fc_extra slot
        const std::string base = names[layer];
        detail::add_param(p, rng, base + ".w", {in_features, counts[i]}, in_features);
        detail::add_bias(p, base + ".b", counts[i]);
        in_features = counts[i];
    }
    detail::add_param(p, rng, "head.w", {in_features, s.class_count}, in_features);
    detail::add_bias(p, "head.b", s.class_count);
    return p;
}

/// Structural parity: each fully connected layer's width equals the matching
/// capsule layer's neuron count (capsules x dim). Throws if violated.
inline void assert_structural_parity(const CapsNetSpec& s, const ParamSet& cnn) {
    const auto counts = parity_neuron_counts(s);
    const char* names[] = {"fc1", "fc_extra", "fc2"};
    std::size_t layer = 0;
    for (std::size_t i = 0; i < counts.size(); ++i, ++layer) {
        if (!s.has_extra && layer == 1) ++layer;
        const Tensor& w = cnn.at(std::string(names[layer]) + ".w");
        if (w.extent(1) != counts[i])
            throw std::logic_error("neuron parity violated at " + std::string(names[layer]) + ": " +
                                   std::to_string(w.extent(1)) + " vs " + std::to_string(counts[i]));
    }
}

/// Tape handles for every parameter, in ParamSet order.
struct BoundParams {
    std::vector<Var> vars;
    const ParamSet* source = nullptr;

    Var at(const ParamSet& p, const std::string& name) const { return vars[p.index_of(name)]; }
};

inline BoundParams bind_params(Tape& tape, const ParamSet& p) {
    BoundParams b;
    b.source = &p;
    b.vars.reserve(p.values.size());
    for (const auto& v : p.values) b.vars.push_back(tape.leaf(v));
    return b;
}

// ---------------------------------------------------------------------------
// forward passes

struct ForwardOut {
    Var scores;                        // [class_count]; capsule norms or sigmoid probabilities
    Var tap;                           // first capsule/linear layer activations, flattened
    Var logits;                        // CNN only: pre-sigmoid head outputs
    bool has_logits = false;
    std::vector<RoutingTrace> traces;  // one per routing site, bottom-up; empty for the CNN
};

inline ForwardOut capsnet_forward(const CapsNetSpec& s, Tape& tape, const BoundParams& bp,
                                  const ParamSet& p, const Tensor& image) {
    if (image.rank() != 3 || image.extent(0) != 1 || image.extent(1) != s.input_edge ||
        image.extent(2) != s.input_edge)
        throw ShapeError("capsnet_forward expects [1," + std::to_string(s.input_edge) + "," +
                         std::to_string(s.input_edge) + "], got " + shape_str(image.shape()));
    ForwardOut out;
    Var x = tape.constant(image);
    Var h = relu(bias_channels(conv2d(x, bp.at(p, "conv1.w"), s.conv.stride), bp.at(p, "conv1.b")));
    Var pm = bias_channels(conv2d(h, bp.at(p, "primary.w"), s.primary.stride), bp.at(p, "primary.b"));
    Var u = squash(primary_capsules(pm, s.primary_dim));

    RoutingTrace t1;
    Var v1 = route(capsule_predict(u, bp.at(p, "cap1.w")), s.r1, &t1);
    out.traces.push_back(std::move(t1));
    out.tap = reshape(v1, {s.cap1_count * s.cap1_dim});

    Var top = v1;
    if (s.has_extra) {
        RoutingTrace t2;
        top = route(capsule_predict(top, bp.at(p, "cap_extra.w")), s.r2, &t2);
        out.traces.push_back(std::move(t2));
    }
    RoutingTrace tc;
    const RoutingConfig& class_cfg = s.has_extra ? s.r3 : s.r2;
    Var vc = route(capsule_predict(top, bp.at(p, "class.w")), class_cfg, &tc);
    out.traces.push_back(std::move(tc));

    out.scores = row_norms(vc);
    return out;
}

inline ForwardOut cnn_forward(const CapsNetSpec& s, Tape& tape, const BoundParams& bp,
                              const ParamSet& p, const Tensor& image) {
    if (image.rank() != 3 || image.extent(0) != 1 || image.extent(1) != s.input_edge ||
        image.extent(2) != s.input_edge)
        throw ShapeError("cnn_forward expects [1," + std::to_string(s.input_edge) + "," +
                         std::to_string(s.input_edge) + "], got " + shape_str(image.shape()));
    ForwardOut out;
    Var x = tape.constant(image);
    Var h = relu(bias_channels(conv2d(x, bp.at(p, "conv1.w"), s.conv.stride), bp.at(p, "conv1.b")));
    h = relu(bias_channels(conv2d(h, bp.at(p, "conv2.w"), s.primary.stride), bp.at(p, "conv2.b")));

    const std::size_t flat = s.primary.out_channels * s.primary_out_edge() * s.primary_out_edge();
    Var v = reshape(h, {std::size_t{1}, flat});

    auto dense = [&](Var in, const std::string& base) {
        Var w = bp.at(p, base + ".w");
        Var z = matmul(in, w);
        const std::size_t width = w.value().extent(1);
        return add(reshape(z, {width}), bp.at(p, base + ".b"));
    };

    Var a1 = relu(dense(v, "fc1"));
    out.tap = a1;
    Var top = a1;
    if (s.has_extra) top = relu(dense(reshape(top, {std::size_t{1}, top.value().numel()}), "fc_extra"));
    top = relu(dense(reshape(top, {std::size_t{1}, top.value().numel()}), "fc2"));
    out.logits = dense(reshape(top, {std::size_t{1}, top.value().numel()}), "head");
    out.has_logits = true;
    out.scores = sigmoid(out.logits);
    return out;
}

// ---------------------------------------------------------------------------
// losses and prediction

struct MarginLossParams {
    Real m_plus = 0.9, m_minus = 0.1, lambda = 0.5;
};

/// Sum over classes of T_k max(0, m+ - s_k)^2 + lambda (1-T_k) max(0, s_k - m-)^2.
inline Var margin_loss(Var scores, const DuplexLabel& labels, const MarginLossParams& mp = {}) {
    Tape& tape = *scores.tape;
    const std::size_t k = scores.value().numel();
    if (labels.lo < 0 || static_cast<std::size_t>(labels.hi) >= k)
        throw std::invalid_argument("margin_loss: label outside class range");
    Tensor pos_mask({k}), neg_mask({k});
    for (std::size_t c = 0; c < k; ++c) {
        const bool hit = labels.contains(static_cast<int>(c));
        pos_mask[c] = hit ? Real{1} : Real{0};
        neg_mask[c] = hit ? Real{0} : mp.lambda;
    }
    Var present = relu(affine(scores, Real{-1}, mp.m_plus));
    Var absent = relu(affine(scores, Real{1}, -mp.m_minus));
    Var lp = sum(mul(mul(present, present), tape.constant(pos_mask)));
    Var ln = sum(mul(mul(absent, absent), tape.constant(neg_mask)));
    return add(lp, ln);
}

/// Exactly-two-hot BCE target vector for the CNN head.
inline Tensor two_hot(const DuplexLabel& labels, std::size_t classes) {
    Tensor t({classes});
    t[static_cast<std::size_t>(labels.lo)] = 1;
    t[static_cast<std::size_t>(labels.hi)] = 1;
    return t;
}

struct DuplexPrediction {
    DuplexLabel pair;
    Tensor scores;  // [10]
};

/// Two highest-scoring classes; ties broken toward the lower class index.
inline DuplexPrediction duplex_predict(const Tensor& scores) {
    if (scores.rank() != 1 || scores.numel() < 2)
        throw ShapeError("duplex_predict expects at least two class scores");
    std::size_t first = 0;
    for (std::size_t c = 1; c < scores.numel(); ++c)
        if (scores[c] > scores[first]) first = c;
    std::size_t second = first == 0 ? 1 : 0;
    for (std::size_t c = 0; c < scores.numel(); ++c) {
        if (c == first) continue;
        if (scores[c] > scores[second]) second = c;
    }
    return {DuplexLabel(static_cast<int>(first), static_cast<int>(second)), scores};
}

// ---------------------------------------------------------------------------
// freezing blocks
//
// Block 0 is the conv stem; blocks 1..n are the capsule layers (or their
// matched linear layers) bottom-up. Keeping k pre-trained layers means the
// stem plus the bottom k capsule blocks stay fixed; k = 0 freezes nothing
// (plain training). At least one top block must remain trainable.

inline std::vector<std::string> frozen_param_names(const CapsNetSpec& s, bool cnn,
                                                   std::size_t frozen_layers) {
    std::vector<std::vector<std::string>> blocks;
    if (!cnn) {
        blocks.push_back({"conv1.w", "conv1.b", "primary.w", "primary.b"});
        blocks.push_back({"cap1.w"});
        if (s.has_extra) blocks.push_back({"cap_extra.w"});
        blocks.push_back({"class.w"});
    } else {
        blocks.push_back({"conv1.w", "conv1.b", "conv2.w", "conv2.b"});
        blocks.push_back({"fc1.w", "fc1.b"});
        if (s.has_extra) blocks.push_back({"fc_extra.w", "fc_extra.b"});
        blocks.push_back({"fc2.w", "fc2.b", "head.w", "head.b"});
    }
    if (frozen_layers + 2 > blocks.size())
        throw std::invalid_argument("frozen_layers " + std::to_string(frozen_layers) +
                                    " leaves no trainable block (architecture has " +
                                    std::to_string(blocks.size() - 1) + " capsule blocks)");
    std::vector<std::string> names;
    if (frozen_layers == 0) return names;
    for (std::size_t b = 0; b <= frozen_layers; ++b)
        for (const auto& n : blocks[b]) names.push_back(n);
    return names;
}

}  // namespace capslab
