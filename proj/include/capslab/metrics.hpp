#pragma once

#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capslab/tensor.hpp"

// Append-only per-run metric log, one JSON object per line:
//   {"step": 100, "split": "test", "metric": "duplex_accuracy", "value": 0.61, "run_id": "..."}

namespace capslab {

struct MetricRecord {
    long step = 0;
    std::string split;
    std::string metric;
    Real value = 0;
    std::string run_id;

    bool operator==(const MetricRecord&) const = default;
};

struct MetricStream {
    std::string run_id;
    std::vector<MetricRecord> records;

    void add(long step, const std::string& split, const std::string& metric, Real value) {
        records.push_back({step, split, metric, value, run_id});
    }

    std::size_t count(const std::string& metric) const {
        std::size_t n = 0;
        for (const auto& r : records) n += r.metric == metric;
        return n;
    }

    /// (step, value) pairs for one metric, in log order.
    std::vector<std::pair<long, Real>> series(const std::string& metric) const {
        std::vector<std::pair<long, Real>> out;
        for (const auto& r : records)
            if (r.metric == metric) out.emplace_back(r.step, r.value);
        return out;
    }

    void to_ndjson(std::ostream& os) const {
        for (const auto& r : records) {
            nlohmann::json j{{"step", r.step},
                             {"split", r.split},
                             {"metric", r.metric},
                             {"value", r.value},
                             {"run_id", r.run_id}};
            os << j.dump() << '\n';
        }
    }

    std::string to_ndjson() const {
        std::ostringstream ss;
        to_ndjson(ss);
        return ss.str();
    }

    static MetricStream from_ndjson(std::istream& is) {
        MetricStream m;
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            m.records.push_back({j.at("step").get<long>(), j.at("split").get<std::string>(),
                                 j.at("metric").get<std::string>(), j.at("value").get<Real>(),
                                 j.at("run_id").get<std::string>()});
        }
        if (!m.records.empty()) m.run_id = m.records.front().run_id;
        return m;
    }

    bool operator==(const MetricStream&) const = default;
};

}  // namespace capslab
