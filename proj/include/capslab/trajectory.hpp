#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capslab/metrics.hpp"

// Joins evaluation metric streams into (step, accuracy, entropy) trajectories
// for plotting accuracy against mean association entropy per routing setting.

namespace capslab {

struct TrajectoryPoint {
    long step = 0;
    Real accuracy = 0;
    Real entropy = 0;
    std::string setting_id;

    bool operator==(const TrajectoryPoint&) const = default;
};

struct TrajectorySeries {
    std::string setting_id;
    std::vector<TrajectoryPoint> points;
    std::size_t skipped = 0;  // steps where one of the two metrics was missing
};

/// Joins "duplex_accuracy" and "mean_entropy_r1" records by step. Steps with
/// only one of the two metrics are counted in `skipped`, not emitted. If
/// max_entropy is set, entropy values are validated against [0, max_entropy]
/// (the ln J bound of the routing layer the tap came from).
inline TrajectorySeries build_trajectory(const MetricStream& stream, const std::string& setting_id,
                                         std::optional<Real> max_entropy = std::nullopt) {
    const auto acc = stream.series("duplex_accuracy");
    const auto ent = stream.series("mean_entropy_r1");
    if (acc.empty())
        throw std::invalid_argument("build_trajectory: stream '" + stream.run_id +
                                    "' has no duplex_accuracy records");
    if (ent.empty())
        throw std::invalid_argument("build_trajectory: stream '" + stream.run_id +
                                    "' has no mean_entropy_r1 records");

    std::map<long, Real> ent_by_step;
    for (const auto& [step, value] : ent) ent_by_step.emplace(step, value);

    TrajectorySeries out;
    out.setting_id = setting_id;
    for (const auto& [step, accuracy] : acc) {
        const auto it = ent_by_step.find(step);
        if (it == ent_by_step.end()) {
            ++out.skipped;
            continue;
        }
        if (!(accuracy >= 0 && accuracy <= 1))
            throw std::invalid_argument("build_trajectory: accuracy " + std::to_string(accuracy) +
                                        " at step " + std::to_string(step) + " outside [0,1]");
        if (it->second < 0 || (max_entropy && it->second > *max_entropy + Real{1e-12}))
            throw std::invalid_argument("build_trajectory: entropy " + std::to_string(it->second) +
                                        " at step " + std::to_string(step) + " outside [0, ln J]");
        out.points.push_back({step, accuracy, it->second, setting_id});
        ent_by_step.erase(it);
    }
    out.skipped += ent_by_step.size();  // entropy records with no matching accuracy
    std::sort(out.points.begin(), out.points.end(),
              [](const TrajectoryPoint& a, const TrajectoryPoint& b) { return a.step < b.step; });
    return out;
}

/// One series per stream, in input order.
inline std::vector<TrajectorySeries> build_trajectory(
    const std::vector<MetricStream>& streams, const std::vector<std::string>& setting_ids,
    std::optional<Real> max_entropy = std::nullopt) {
    if (streams.size() != setting_ids.size())
        throw std::invalid_argument("build_trajectory: stream/setting count mismatch");
    std::vector<TrajectorySeries> out;
    out.reserve(streams.size());
    for (std::size_t i = 0; i < streams.size(); ++i)
        out.push_back(build_trajectory(streams[i], setting_ids[i], max_entropy));
    return out;
}

}  // namespace capslab
