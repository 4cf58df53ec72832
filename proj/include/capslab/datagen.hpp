#pragma once

#include <algorithm>
#include <array>
#include <set>
#include <vector>

#include "capslab/idx.hpp"
#include "capslab/rng.hpp"

// Synthesis of two-digit overlay images: training/test sets with random
// placement, regular shift grids for manifold probing, and the disjoint
// pair-class domain splits used by the transfer protocol.

namespace capslab {

constexpr std::size_t kCanvas = 36;          // overlay canvas edge
constexpr std::size_t kDigitEdge = 28;       // source digit edge
constexpr std::size_t kMaxOffset = kCanvas - kDigitEdge;  // inclusive placement range 0..8

/// Unordered pair of distinct digit classes.
struct DuplexLabel {
    int lo = 0, hi = 0;

    DuplexLabel() = default;
    DuplexLabel(int a, int b) : lo(std::min(a, b)), hi(std::max(a, b)) {
        if (a == b) throw DataError("duplex label requires two distinct digits, got " +
                                    std::to_string(a) + " twice");
    }
    bool operator==(const DuplexLabel&) const = default;
    auto operator<=>(const DuplexLabel&) const = default;
    bool contains(int d) const { return d == lo || d == hi; }
};

struct MultiMnistSample {
    Tensor image;  // [36,36], values in [0,1]
    DuplexLabel labels;
};

/// Paste a digit onto the canvas at top-left (row, col), combining by pixel max.
inline void paste_max(Tensor& canvas, const Tensor& digit, std::size_t row, std::size_t col) {
    for (std::size_t r = 0; r < kDigitEdge; ++r)
        for (std::size_t c = 0; c < kDigitEdge; ++c) {
            Real& px = canvas(row + r, col + c);
            px = std::max(px, digit(r, c));
        }
}

inline Tensor compose_pair(const Tensor& a, std::size_t ra, std::size_t ca, const Tensor& b,
                           std::size_t rb, std::size_t cb) {
    Tensor canvas({kCanvas, kCanvas});
    paste_max(canvas, a, ra, ca);
    paste_max(canvas, b, rb, cb);
    return canvas;
}

/// Random overlay set: each sample places two digits of different classes at
/// independent uniform offsets in {0..8}^2 and combines them by pixel-wise max.
/// Pass `allowed` to restrict which unordered pair classes may appear.
inline std::vector<MultiMnistSample> synthesize_multimnist(
    const std::vector<MnistDigit>& digits, std::size_t count, std::uint64_t seed,
    const std::set<DuplexLabel>* allowed = nullptr) {
    if (count < 1) throw DataError("synthesize_multimnist: count must be >= 1");
    std::set<int> classes;
    for (const auto& d : digits) classes.insert(d.label);
    if (classes.size() < 2)
        throw DataError("synthesize_multimnist needs digits from at least 2 classes, found " +
                        std::to_string(classes.size()));
    if (allowed) {
        bool any = false;
        for (const auto& p : *allowed)
            if (classes.count(p.lo) && classes.count(p.hi)) { any = true; break; }
        if (!any) throw DataError("synthesize_multimnist: no allowed pair is realizable from the sources");
    }

    Rng rng(derive_seed(seed, 0x6d756c7469));  // "multi"
    std::uniform_int_distribution<std::size_t> pick(0, digits.size() - 1);
    std::uniform_int_distribution<std::size_t> off(0, kMaxOffset);

    std::vector<MultiMnistSample> out;
    out.reserve(count);
    while (out.size() < count) {
        const std::size_t i = pick(rng), j = pick(rng);
        if (digits[i].label == digits[j].label) continue;
        DuplexLabel lab(digits[i].label, digits[j].label);
        if (allowed && !allowed->count(lab)) continue;
        const std::size_t ri = off(rng), ci = off(rng), rj = off(rng), cj = off(rng);
        out.push_back({compose_pair(digits[i].image, ri, ci, digits[j].image, rj, cj), lab});
    }
    return out;
}

/// 81-sample grid: the fixed digit sits centered (top-left (4,4)); the moving
/// digit's top-left is (4 + dr*unit_px, 4 + dc*unit_px) clamped to the canvas,
/// for (dr,dc) over {-4..4}^2. Negative dr shifts up, negative dc shifts left.
struct ShiftGridSet {
    int fixed_digit = 0, moving_digit = 0;
    int unit_px = 1;
    std::vector<MultiMnistSample> samples;  // 81, index (dr+4)*9 + (dc+4)

    static std::size_t index_of(int dr, int dc) {
        return static_cast<std::size_t>(dr + 4) * 9 + static_cast<std::size_t>(dc + 4);
    }
    const MultiMnistSample& at(int dr, int dc) const { return samples[index_of(dr, dc)]; }
};

inline ShiftGridSet make_shift_grid(const MnistDigit& fixed, const MnistDigit& moving,
                                    int unit_px = 1) {
    if (fixed.label == moving.label)
        throw DataError("shift grid requires distinct digit classes, got " +
                        std::to_string(fixed.label) + " twice");
    if (unit_px < 1) throw DataError("shift grid unit_px must be >= 1");
    ShiftGridSet grid;
    grid.fixed_digit = fixed.label;
    grid.moving_digit = moving.label;
    grid.unit_px = unit_px;
    grid.samples.resize(81);
    const long center = static_cast<long>(kMaxOffset) / 2;  // 4
    for (int dr = -4; dr <= 4; ++dr)
        for (int dc = -4; dc <= 4; ++dc) {
            const long r = std::clamp(center + long(dr) * unit_px, 0L, long(kMaxOffset));
            const long c = std::clamp(center + long(dc) * unit_px, 0L, long(kMaxOffset));
            MultiMnistSample s;
            s.image = compose_pair(fixed.image, std::size_t(center), std::size_t(center),
                                   moving.image, std::size_t(r), std::size_t(c));
            s.labels = DuplexLabel(fixed.label, moving.label);
            grid.samples[ShiftGridSet::index_of(dr, dc)] = std::move(s);
        }
    return grid;
}

/// First digit of the requested class, by source order.
inline const MnistDigit& first_instance_of(const std::vector<MnistDigit>& digits, int cls) {
    for (const auto& d : digits)
        if (d.label == cls) return d;
    throw DataError("no digit of class " + std::to_string(cls) + " in the source set");
}

/// Disjoint partition of the 45 unordered digit pairs. Side B gets the 10
/// pairs of a seed-shuffled cycle over the digits (so B covers every digit
/// with exactly two pairs); side A gets the other 35 (seven pairs per digit).
struct DomainSplit {
    std::set<DuplexLabel> pair_classes_A, pair_classes_B;
};

inline DomainSplit make_domain_split(std::uint64_t seed) {
    std::array<int, 10> perm{};
    for (int d = 0; d < 10; ++d) perm[std::size_t(d)] = d;
    Rng rng(derive_seed(seed, 0x73706c6974));  // "split"
    std::shuffle(perm.begin(), perm.end(), rng);

    DomainSplit split;
    for (std::size_t i = 0; i < 10; ++i)
        split.pair_classes_B.insert(DuplexLabel(perm[i], perm[(i + 1) % 10]));
    for (int a = 0; a < 10; ++a)
        for (int b = a + 1; b < 10; ++b) {
            DuplexLabel p(a, b);
            if (!split.pair_classes_B.count(p)) split.pair_classes_A.insert(p);
        }
    return split;
}

}  // namespace capslab
