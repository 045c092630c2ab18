#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "forksim/common.hpp"
#include "forksim/sim_clock.hpp"

namespace forksim {

enum class QueryClass : std::uint8_t { Normal = 0, Snapshot };

inline const char* to_string(QueryClass c) {
    return c == QueryClass::Normal ? "normal" : "snapshot";
}

struct LatencyRecord {
    std::uint64_t query_id = 0;
    QueryClass cls = QueryClass::Normal;
    SimTime arrival_ns = 0;
    SimTime latency_ns = 0;
};

struct HistBucket {
    std::uint64_t lo_us = 0;
    std::uint64_t hi_us = 0;
    std::uint64_t count = 0;
};

/// Latency percentiles, throughput series, interruption histograms and
/// out-of-service accounting over a finished run.
class Metrics {
public:
    std::vector<LatencyRecord> latencies;

    /// Nearest-rank percentile of a class; p = 1.0 is the maximum.
    SimTime percentile(QueryClass cls, double p) const {
        std::vector<SimTime> vals;
        for (const LatencyRecord& r : latencies) {
            if (r.cls == cls) vals.push_back(r.latency_ns);
        }
        if (vals.empty()) throw std::invalid_argument("no latency records in class");
        if (p <= 0.0 || p > 1.0) throw std::invalid_argument("percentile must be in (0, 1]");
        std::sort(vals.begin(), vals.end());
        std::size_t rank = static_cast<std::size_t>(
            std::ceil(p * static_cast<double>(vals.size())));
        if (rank == 0) rank = 1;
        return vals[rank - 1];
    }

    std::uint64_t count(QueryClass cls) const {
        std::uint64_t n = 0;
        for (const LatencyRecord& r : latencies) n += (r.cls == cls) ? 1 : 0;
        return n;
    }

    /// Power-of-two microsecond buckets [2^k, 2^(k+1)-1]; sub-microsecond
    /// episodes land in a leading [0, 0] bucket. Buckets are dense up to the
    /// longest observed episode.
    static std::vector<HistBucket> interruption_histogram(const std::vector<Episode>& log) {
        std::vector<HistBucket> buckets;
        buckets.push_back({0, 0, 0});
        auto bucket_index = [](std::uint64_t us) -> std::size_t {
            if (us == 0) return 0;
            std::size_t k = 0;
            while ((2ULL << k) <= us) ++k; // k = floor(log2(us))
            return k + 1;
        };
        for (const Episode& e : log) {
            std::uint64_t us = static_cast<std::uint64_t>(e.duration) / 1000;
            std::size_t idx = bucket_index(us);
            while (buckets.size() <= idx) {
                std::uint64_t k = buckets.size() - 1;
                buckets.push_back({1ULL << k, (2ULL << k) - 1, 0});
            }
            ++buckets[idx].count;
        }
        return buckets;
    }

    /// Completed-query counts per window of completion time, covering
    /// [0, last completion].
    std::vector<std::pair<SimTime, std::uint64_t>> throughput_series(SimTime window_ns) const {
        if (window_ns <= 0) throw std::invalid_argument("window must be positive");
        SimTime last = 0;
        for (const LatencyRecord& r : latencies) {
            last = std::max(last, r.arrival_ns + r.latency_ns);
        }
        std::size_t windows =
            latencies.empty() ? 0 : static_cast<std::size_t>(last / window_ns) + 1;
        std::vector<std::pair<SimTime, std::uint64_t>> out;
        out.reserve(windows);
        for (std::size_t i = 0; i < windows; ++i) {
            out.emplace_back(static_cast<SimTime>(i) * window_ns, 0);
        }
        for (const LatencyRecord& r : latencies) {
            out[static_cast<std::size_t>((r.arrival_ns + r.latency_ns) / window_ns)].second++;
        }
        return out;
    }

    static SimTime out_of_service_total(const KernelLedger& ledger) { return ledger.total(); }

    static SimTime out_of_service_total(const KernelLedger& ledger, EpisodeCause cause) {
        return ledger.total(cause);
    }
};

} // namespace forksim
