#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "forksim/simulation.hpp"

namespace forksim {

// Report columns are fixed and all-integer so that re-running a scenario with
// the same config and seed reproduces the files byte for byte.

inline std::string render_latencies_csv(const RunResult& r) {
    std::string out = "query_id,class,arrival_ns,latency_ns\n";
    for (const LatencyRecord& rec : r.metrics.latencies) {
        out += std::to_string(rec.query_id);
        out += ',';
        out += to_string(rec.cls);
        out += ',';
        out += std::to_string(rec.arrival_ns);
        out += ',';
        out += std::to_string(rec.latency_ns);
        out += '\n';
    }
    return out;
}

inline std::string render_interruptions_csv(const RunResult& r) {
    std::string out = "start_ns,duration_ns,cause\n";
    for (const Episode& e : r.ledger.episodes()) {
        out += std::to_string(e.start);
        out += ',';
        out += std::to_string(e.duration);
        out += ',';
        out += to_string(e.cause);
        out += '\n';
    }
    return out;
}

inline std::string render_throughput_csv(const RunResult& r, SimTime window_ns) {
    std::string out = "window_start_ns,count\n";
    for (auto [start, count] : r.metrics.throughput_series(window_ns)) {
        out += std::to_string(start);
        out += ',';
        out += std::to_string(count);
        out += '\n';
    }
    return out;
}

inline std::string render_trace_jsonl(const RunResult& r) {
    std::string out;
    for (const TraceEntry& e : r.trace.entries) {
        nlohmann::json j;
        j["at"] = e.at;
        j["kind"] = to_string(e.kind);
        j["pid"] = e.pid;
        j["duration"] = e.duration;
        if (e.kind == TraceKind::KernelEpisode) {
            j["cause"] = to_string(static_cast<EpisodeCause>(e.cause));
        } else {
            j["cause"] = e.cause;
        }
        j["detail"] = e.detail;
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline nlohmann::json build_summary(const ScenarioConfig& cfg, const RunResult& r) {
    nlohmann::json j;
    j["name"] = cfg.name;
    j["engine"] = to_string(cfg.engine);
    j["seed"] = cfg.seed;
    j["workers"] = cfg.workers;
    j["instance_bytes"] = cfg.instance_bytes;

    auto pct = [&](QueryClass cls, double p) -> nlohmann::json {
        if (r.metrics.count(cls) == 0) return nullptr;
        return r.metrics.percentile(cls, p);
    };
    j["latency"]["normal"]["count"] = r.metrics.count(QueryClass::Normal);
    j["latency"]["normal"]["p99_ns"] = pct(QueryClass::Normal, 0.99);
    j["latency"]["normal"]["max_ns"] = pct(QueryClass::Normal, 1.0);
    j["latency"]["snapshot"]["count"] = r.metrics.count(QueryClass::Snapshot);
    j["latency"]["snapshot"]["p99_ns"] = pct(QueryClass::Snapshot, 0.99);
    j["latency"]["snapshot"]["max_ns"] = pct(QueryClass::Snapshot, 1.0);

    nlohmann::json causes;
    std::uint64_t interruptions = 0;
    for (std::size_t c = 0; c < kEpisodeCauseCount; ++c) {
        auto cause = static_cast<EpisodeCause>(c);
        causes[to_string(cause)]["total_ns"] = r.ledger.total(cause);
        std::uint64_t n = 0;
        for (const Episode& e : r.ledger.episodes()) n += (e.cause == cause) ? 1 : 0;
        causes[to_string(cause)]["count"] = n;
        interruptions += n;
    }
    j["out_of_service"] = causes;
    j["out_of_service_total_ns"] = r.ledger.total();
    j["interruption_count"] = interruptions;

    nlohmann::json hist = nlohmann::json::array();
    for (const HistBucket& b : Metrics::interruption_histogram(r.ledger.episodes())) {
        hist.push_back({{"lo_us", b.lo_us}, {"hi_us", b.hi_us}, {"count", b.count}});
    }
    j["interruption_histogram_us"] = hist;

    j["coherence"]["detector_flags"] = r.detector.size();
    j["coherence"]["final_audit"] = r.final_audit.size();
    j["odf_table_splits"] = r.odf_splits;

    nlohmann::json sessions = nlohmann::json::array();
    bool any_fail = false;
    for (const SessionReport& s : r.sessions) {
        nlohmann::json js;
        js["id"] = s.id;
        js["engine"] = to_string(s.engine);
        js["phase"] = to_string(s.phase);
        js["error"] = static_cast<int>(s.error);
        js["fork_invoked_ns"] = s.fork_invoked;
        js["fork_return_ns"] = s.fork_return;
        js["fork_kernel_ns"] = s.kernel_time;
        js["copy_end_ns"] = s.copy_end;
        js["persist_end_ns"] = s.persist_end;
        js["pmds_total"] = s.pmds_total;
        js["pmds_copied_by_child"] = s.pmds_copied_by_child;
        js["pmds_synced"] = s.pmds_synced;
        js["pmds_flushed_ahead"] = s.pmds_flushed_ahead;
        js["mapped_pages"] = s.mapped_pages;
        js["consistency"] = s.consistency;
        js["audit_violations_at_persist_end"] = s.audit_violations_at_end;
        sessions.push_back(js);
        any_fail |= (s.consistency == "fail");
    }
    j["sessions"] = sessions;
    j["consistency_verdict"] = r.sessions.empty() ? "none" : (any_fail ? "fail" : "pass");
    return j;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

/// Write the four report files (plus optional trace and dump) under
/// cfg.output_dir. Returns the run's exit code: 0 success, 2 consistency
/// violation in an engine that must be consistent.
inline int write_reports(const ScenarioConfig& cfg, const RunResult& r,
                         const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file(dir / "latencies.csv", render_latencies_csv(r));
    write_file(dir / "interruptions.csv", render_interruptions_csv(r));
    write_file(dir / "throughput.csv", render_throughput_csv(r, cfg.throughput_window_ns));
    write_file(dir / "summary.json", build_summary(cfg, r).dump(2) + "\n");
    if (cfg.trace_jsonl) write_file(dir / "trace.jsonl", render_trace_jsonl(r));
    if (cfg.dump_output) {
        for (const SessionReport& s : r.sessions) {
            if (s.dump.empty() && s.phase != SessionPhase::Done) continue;
            auto bin = dump_to_binary(s.dump);
            std::string name = "dump_" + std::to_string(s.id);
            write_file(dir / (name + ".bin"),
                       std::string(bin.begin(), bin.end()));
            write_file(dir / (name + ".json"), dump_to_json(s.dump) + "\n");
        }
    }
    return r.exit_code;
}

inline int run_scenario(const std::string& config_path) {
    ScenarioConfig cfg = parse_scenario_file(config_path);
    RunResult result = run_config(cfg);
    return write_reports(cfg, result, cfg.output_dir);
}

enum class SweepAxis : std::uint8_t { InstanceBytes, Workers, Rate, Clients };

inline SweepAxis parse_axis(const std::string& axis) {
    if (axis == "instance_bytes") return SweepAxis::InstanceBytes;
    if (axis == "workers") return SweepAxis::Workers;
    if (axis == "rate") return SweepAxis::Rate;
    if (axis == "clients") return SweepAxis::Clients;
    throw ConfigError("unknown sweep axis: " + axis);
}

inline void apply_axis(ScenarioConfig& cfg, SweepAxis axis, std::uint64_t value) {
    switch (axis) {
    case SweepAxis::InstanceBytes: cfg.instance_bytes = value; break;
    case SweepAxis::Workers: cfg.workers = static_cast<int>(value); break;
    case SweepAxis::Rate: cfg.workload.rate_qps = static_cast<double>(value); break;
    case SweepAxis::Clients: cfg.workload.clients = static_cast<std::uint32_t>(value); break;
    }
}

/// One run per axis value with a shared seed; per-value reports land in
/// <output_dir>/<axis>_<value>/ and the merged table in sweep_summary.json.
inline int sweep(const std::string& config_path, const std::string& axis_name,
                 const std::vector<std::uint64_t>& values) {
    ScenarioConfig base = parse_scenario_file(config_path);
    SweepAxis axis = parse_axis(axis_name);
    nlohmann::json merged = nlohmann::json::array();
    int worst = 0;
    for (std::uint64_t v : values) {
        ScenarioConfig cfg = base;
        apply_axis(cfg, axis, v);
        cfg.validate();
        RunResult result = run_config(cfg);
        std::filesystem::path dir =
            std::filesystem::path(base.output_dir) / (axis_name + "_" + std::to_string(v));
        int code = write_reports(cfg, result, dir);
        worst = std::max(worst, code);
        nlohmann::json row = build_summary(cfg, result);
        row["axis"] = axis_name;
        row["value"] = v;
        merged.push_back(row);
    }
    std::filesystem::create_directories(base.output_dir);
    write_file(std::filesystem::path(base.output_dir) / "sweep_summary.json",
               merged.dump(2) + "\n");
    return worst;
}

} // namespace forksim
