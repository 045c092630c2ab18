#pragma once

#include <cmath>
#include <vector>

#include "forksim/common.hpp"

namespace forksim {

enum class QueryKind : std::uint8_t { Set = 0, Get };
enum class KeyDist : std::uint8_t { Uniform = 0, Gaussian };
enum class ArrivalModel : std::uint8_t { Fixed = 0, Poisson };

struct WorkloadSpec {
    double rate_qps = 50000.0;
    std::uint32_t set_ratio = 1;
    std::uint32_t get_ratio = 0;
    std::uint64_t key_space = 1 << 20;
    KeyDist key_dist = KeyDist::Uniform;
    double gaussian_mean = -1.0;   // <0: key_space/2
    double gaussian_stddev = -1.0; // <0: key_space/6
    std::uint32_t clients = 50;
    std::uint64_t total_queries = 0;
    ArrivalModel arrival = ArrivalModel::Fixed;
    SimTime start_ns = 0;
    std::uint64_t seed = 0;

    void validate() const {
        if (rate_qps <= 0) throw ConfigError("workload rate must be positive");
        if (set_ratio + get_ratio == 0) throw ConfigError("set:get ratio must be non-zero");
        if (key_space == 0) throw ConfigError("key space must be non-empty");
        if (clients == 0) throw ConfigError("client count must be positive");
    }
};

struct Query {
    SimTime at = 0;
    QueryKind kind = QueryKind::Set;
    std::uint64_t key = 0;
    std::uint32_t client = 0;
};

/// Deterministic open-loop arrival stream. Fixed mode places arrivals at
/// exact 1e9/rate intervals; Poisson mode draws exponential gaps from the
/// seeded generator. Clients take queries round-robin. The normal/snapshot
/// class tag is applied later, from the recorded snapshot windows.
inline std::vector<Query> generate(const WorkloadSpec& spec) {
    spec.validate();
    std::vector<Query> out;
    out.reserve(spec.total_queries);
    SplitMix64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    const double interarrival = 1e9 / spec.rate_qps;
    const double set_prob =
        static_cast<double>(spec.set_ratio) / (spec.set_ratio + spec.get_ratio);
    const double mean = spec.gaussian_mean >= 0 ? spec.gaussian_mean
                                                : static_cast<double>(spec.key_space) / 2.0;
    const double stddev = spec.gaussian_stddev >= 0
                              ? spec.gaussian_stddev
                              : static_cast<double>(spec.key_space) / 6.0;
    double clock = static_cast<double>(spec.start_ns);
    for (std::uint64_t i = 0; i < spec.total_queries; ++i) {
        Query q;
        if (spec.arrival == ArrivalModel::Fixed) {
            q.at = spec.start_ns +
                   static_cast<SimTime>(std::llround(static_cast<double>(i) * interarrival));
        } else {
            double u = rng.unit();
            if (u <= 0.0) u = 1e-12;
            clock += -std::log(u) * interarrival;
            q.at = static_cast<SimTime>(std::llround(clock));
        }
        q.kind = rng.unit() < set_prob ? QueryKind::Set : QueryKind::Get;
        if (spec.key_dist == KeyDist::Uniform) {
            q.key = rng.below(spec.key_space);
        } else {
            // Box-Muller, clamped into [0, key_space).
            double u1 = rng.unit();
            double u2 = rng.unit();
            if (u1 <= 0.0) u1 = 1e-12;
            double g = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
            double k = mean + stddev * g;
            if (k < 0) k = 0;
            if (k >= static_cast<double>(spec.key_space)) {
                k = static_cast<double>(spec.key_space) - 1;
            }
            q.key = static_cast<std::uint64_t>(k);
        }
        q.client = static_cast<std::uint32_t>(i % spec.clients);
        out.push_back(q);
    }
    return out;
}

} // namespace forksim
