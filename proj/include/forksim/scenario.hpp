#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "forksim/common.hpp"
#include "forksim/cost_model.hpp"
#include "forksim/fork_engines.hpp"
#include "forksim/workload.hpp"

namespace forksim {

enum class InjectOp : std::uint8_t { Migrate = 0, Unmap, Oom, Set };

inline const char* to_string(InjectOp op) {
    switch (op) {
    case InjectOp::Migrate: return "migrate";
    case InjectOp::Unmap: return "unmap";
    case InjectOp::Oom: return "oom";
    case InjectOp::Set: return "set";
    }
    return "?";
}

/// A scripted OS operation or query, fired at a fixed simulated time.
/// Migrations act instantly from the OS side; unmap/oom/set are executed by
/// the parent and queue behind its other work.
struct Injection {
    SimTime at_ns = 0;
    InjectOp op = InjectOp::Migrate;
    VPage vpage = 0;       // migrate / oom
    VPage start_vpage = 0; // unmap
    VPage end_vpage = 0;
    std::uint64_t key = 0; // set
    std::uint64_t value_seed = 0;
};

struct ErrorInjection {
    RollbackCase phase = RollbackCase::ParentPhase;
    int after_allocs = 0; // table allocations of that phase to allow first
};

struct ScenarioConfig {
    std::string name;
    std::uint64_t instance_bytes = 64ULL << 20;
    std::uint64_t page_bytes = 4096;
    std::uint32_t payload_bytes = 64;
    EngineKind engine = EngineKind::Async;
    int workers = 8;
    std::uint32_t vma_count = 1;
    std::uint64_t seed = 0;
    std::uint64_t prefill_keys = 0;
    std::uint32_t value_bytes = 64;
    std::uint64_t phys_pages = 0; // 0 = auto
    double heap_reserve_factor = 2.0;
    std::vector<SimTime> snapshot_at_ns;
    bool expect_leak = false;
    bool verify_consistency = true;
    bool dump_output = false;
    bool trace_jsonl = false;
    std::string output_dir = "out";
    SimTime run_until_ns = 0; // 0 = run to quiescence
    SimTime throughput_window_ns = 50'000'000;

    CostModel cost;
    WorkloadSpec workload;
    std::vector<Injection> injections;
    std::vector<ErrorInjection> error_injections;

    std::uint64_t instance_pages() const { return instance_bytes / page_bytes; }

    std::uint64_t reserved_pages() const {
        auto reserved = static_cast<std::uint64_t>(
            static_cast<double>(instance_pages()) * heap_reserve_factor);
        return std::max(reserved, instance_pages());
    }

    std::uint64_t phys_page_budget() const {
        if (phys_pages != 0) return phys_pages;
        return reserved_pages() + instance_pages() + 64;
    }

    void validate() const {
        if (page_bytes == 0 || instance_bytes == 0 || instance_bytes % page_bytes != 0) {
            throw ConfigError("instance_bytes must be a positive multiple of page_bytes");
        }
        if (payload_bytes == 0 || payload_bytes > 4096) {
            throw ConfigError("payload_bytes must be in [1, 4096]");
        }
        if (value_bytes == 0 || value_bytes > payload_bytes) {
            throw ConfigError("value_bytes must fit a page payload");
        }
        if (workers < 1) throw ConfigError("workers must be at least 1");
        if (vma_count < 1) throw ConfigError("vmas must be at least 1");
        if (instance_pages() % vma_count != 0) {
            throw ConfigError("instance pages must divide evenly into vmas");
        }
        if (vma_count > 1 && (instance_pages() / vma_count) % kEntriesPerTable != 0) {
            throw ConfigError("per-vma page count must be a multiple of 512");
        }
        if (heap_reserve_factor < 1.0) throw ConfigError("heap_reserve_factor must be >= 1");
        if (prefill_keys > 0) {
            std::uint64_t per_page = payload_bytes / value_bytes;
            if (per_page == 0 || prefill_keys > instance_pages() * per_page) {
                throw ConfigError("prefill_keys does not fit the instance");
            }
        }
        cost.validate();
        if (workload.total_queries > 0) workload.validate();
    }
};

// ---- config grammar ---------------------------------------------------------
//
// Line-oriented key = value pairs with '#' comments. [cost_model] and
// [workload] open nested sections; every [inject] / [error_inject] heading
// starts one new entry. Sizes accept KiB/MiB/GiB suffixes; lists are
// comma-separated. Unknown keys and sections are rejected.

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::uint64_t parse_size(std::string_view v, int line) {
    std::uint64_t mult = 1;
    if (v.size() > 3 && v.substr(v.size() - 3) == "KiB") {
        mult = 1024;
        v.remove_suffix(3);
    } else if (v.size() > 3 && v.substr(v.size() - 3) == "MiB") {
        mult = 1024 * 1024;
        v.remove_suffix(3);
    } else if (v.size() > 3 && v.substr(v.size() - 3) == "GiB") {
        mult = 1024ULL * 1024 * 1024;
        v.remove_suffix(3);
    }
    v = trim(v);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ConfigError("line " + std::to_string(line) + ": bad size value");
    }
    return out * mult;
}

inline std::int64_t parse_int(std::string_view v, int line) {
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ConfigError("line " + std::to_string(line) + ": bad integer value");
    }
    return out;
}

inline double parse_double(std::string_view v, int line) {
    try {
        std::size_t pos = 0;
        double out = std::stod(std::string(v), &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw ConfigError("line " + std::to_string(line) + ": bad numeric value");
    }
}

inline bool parse_bool(std::string_view v, int line) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("line " + std::to_string(line) + ": expected true or false");
}

inline EngineKind parse_engine(std::string_view v, int line) {
    if (v == "default") return EngineKind::Default;
    if (v == "odf") return EngineKind::Odf;
    if (v == "async") return EngineKind::Async;
    throw ConfigError("line " + std::to_string(line) + ": unknown engine '" + std::string(v) + "'");
}

} // namespace detail

inline ScenarioConfig parse_scenario(std::istream& in) {
    using namespace detail;
    ScenarioConfig cfg;
    enum class Section { Top, CostModel, Workload, Inject, ErrorInject };
    Section section = Section::Top;
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string_view s = trim(raw);
        if (auto hash = s.find('#'); hash != std::string_view::npos) {
            s = trim(s.substr(0, hash));
        }
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError("line " + std::to_string(line) + ": bad section");
            std::string_view name = s.substr(1, s.size() - 2);
            if (name == "cost_model") section = Section::CostModel;
            else if (name == "workload") section = Section::Workload;
            else if (name == "inject") {
                section = Section::Inject;
                cfg.injections.emplace_back();
            } else if (name == "error_inject") {
                section = Section::ErrorInject;
                cfg.error_injections.emplace_back();
            } else {
                throw ConfigError("line " + std::to_string(line) + ": unknown section [" +
                                  std::string(name) + "]");
            }
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("line " + std::to_string(line) + ": expected key = value");
        }
        std::string_view key = trim(s.substr(0, eq));
        std::string_view val = trim(s.substr(eq + 1));
        switch (section) {
        case Section::Top:
            if (key == "name") cfg.name = std::string(val);
            else if (key == "instance_bytes") cfg.instance_bytes = parse_size(val, line);
            else if (key == "page_bytes") cfg.page_bytes = parse_size(val, line);
            else if (key == "payload_bytes") cfg.payload_bytes = static_cast<std::uint32_t>(parse_int(val, line));
            else if (key == "engine") cfg.engine = parse_engine(val, line);
            else if (key == "workers") cfg.workers = static_cast<int>(parse_int(val, line));
            else if (key == "vmas") cfg.vma_count = static_cast<std::uint32_t>(parse_int(val, line));
            else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(val, line));
            else if (key == "prefill_keys") cfg.prefill_keys = static_cast<std::uint64_t>(parse_int(val, line));
            else if (key == "value_bytes") cfg.value_bytes = static_cast<std::uint32_t>(parse_int(val, line));
            else if (key == "phys_pages") cfg.phys_pages = static_cast<std::uint64_t>(parse_int(val, line));
            else if (key == "heap_reserve_factor") cfg.heap_reserve_factor = parse_double(val, line);
            else if (key == "snapshot_at_ns") {
                std::string list(val);
                std::stringstream ss(list);
                std::string item;
                while (std::getline(ss, item, ',')) {
                    cfg.snapshot_at_ns.push_back(parse_int(trim(item), line));
                }
            } else if (key == "expect_leak") cfg.expect_leak = parse_bool(val, line);
            else if (key == "verify_consistency") cfg.verify_consistency = parse_bool(val, line);
            else if (key == "dump_output") cfg.dump_output = parse_bool(val, line);
            else if (key == "trace_jsonl") cfg.trace_jsonl = parse_bool(val, line);
            else if (key == "output_dir") cfg.output_dir = std::string(val);
            else if (key == "run_until_ns") cfg.run_until_ns = parse_int(val, line);
            else if (key == "throughput_window_ns") cfg.throughput_window_ns = parse_int(val, line);
            else throw ConfigError("line " + std::to_string(line) + ": unknown key '" + std::string(key) + "'");
            break;
        case Section::CostModel:
            if (key == "c_nonleaf_ns") cfg.cost.c_nonleaf_ns = parse_double(val, line);
            else if (key == "c_pte_ns") cfg.cost.c_pte_ns = parse_double(val, line);
            else if (key == "c_wp_ns") cfg.cost.c_wp_ns = parse_double(val, line);
            else if (key == "c_fault_ns") cfg.cost.c_fault_ns = parse_double(val, line);
            else if (key == "persist_per_page_ns") cfg.cost.persist_per_page_ns = parse_double(val, line);
            else if (key == "service_time_ns") cfg.cost.service_time_ns = parse_double(val, line);
            else throw ConfigError("line " + std::to_string(line) + ": unknown cost_model key '" + std::string(key) + "'");
            break;
        case Section::Workload:
            if (key == "rate_qps") cfg.workload.rate_qps = parse_double(val, line);
            else if (key == "set_ratio") cfg.workload.set_ratio = static_cast<std::uint32_t>(parse_int(val, line));
            else if (key == "get_ratio") cfg.workload.get_ratio = static_cast<std::uint32_t>(parse_int(val, line));
            else if (key == "key_space") cfg.workload.key_space = static_cast<std::uint64_t>(parse_int(val, line));
            else if (key == "key_dist") {
                if (val == "uniform") cfg.workload.key_dist = KeyDist::Uniform;
                else if (val == "gaussian") cfg.workload.key_dist = KeyDist::Gaussian;
                else throw ConfigError("line " + std::to_string(line) + ": unknown key_dist");
            } else if (key == "gaussian_mean") cfg.workload.gaussian_mean = parse_double(val, line);
            else if (key == "gaussian_stddev") cfg.workload.gaussian_stddev = parse_double(val, line);
            else if (key == "clients") cfg.workload.clients = static_cast<std::uint32_t>(parse_int(val, line));
            else if (key == "total_queries") cfg.workload.total_queries = static_cast<std::uint64_t>(parse_int(val, line));
            else if (key == "arrival") {
                if (val == "fixed") cfg.workload.arrival = ArrivalModel::Fixed;
                else if (val == "poisson") cfg.workload.arrival = ArrivalModel::Poisson;
                else throw ConfigError("line " + std::to_string(line) + ": unknown arrival model");
            } else if (key == "start_ns") cfg.workload.start_ns = parse_int(val, line);
            else throw ConfigError("line " + std::to_string(line) + ": unknown workload key '" + std::string(key) + "'");
            break;
        case Section::Inject: {
            Injection& inj = cfg.injections.back();
            if (key == "at_ns") inj.at_ns = parse_int(val, line);
            else if (key == "op") {
                if (val == "migrate") inj.op = InjectOp::Migrate;
                else if (val == "unmap") inj.op = InjectOp::Unmap;
                else if (val == "oom") inj.op = InjectOp::Oom;
                else if (val == "set") inj.op = InjectOp::Set;
                else throw ConfigError("line " + std::to_string(line) + ": unknown inject op");
            } else if (key == "vpage") inj.vpage = static_cast<VPage>(parse_int(val, line));
            else if (key == "start_vpage") inj.start_vpage = static_cast<VPage>(parse_int(val, line));
            else if (key == "end_vpage") inj.end_vpage = static_cast<VPage>(parse_int(val, line));
            else if (key == "key") inj.key = static_cast<std::uint64_t>(parse_int(val, line));
            else if (key == "value_seed") inj.value_seed = static_cast<std::uint64_t>(parse_int(val, line));
            else throw ConfigError("line " + std::to_string(line) + ": unknown inject key '" + std::string(key) + "'");
            break;
        }
        case Section::ErrorInject: {
            ErrorInjection& err = cfg.error_injections.back();
            if (key == "phase") {
                if (val == "parent") err.phase = RollbackCase::ParentPhase;
                else if (val == "child") err.phase = RollbackCase::ChildPhase;
                else if (val == "sync") err.phase = RollbackCase::SyncPhase;
                else throw ConfigError("line " + std::to_string(line) + ": unknown error phase");
            } else if (key == "after_allocs") {
                err.after_allocs = static_cast<int>(parse_int(val, line));
            } else {
                throw ConfigError("line " + std::to_string(line) + ": unknown error_inject key '" + std::string(key) + "'");
            }
            break;
        }
        }
    }
    cfg.workload.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

inline ScenarioConfig parse_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse_scenario(in);
}

inline ScenarioConfig parse_scenario_string(const std::string& text) {
    std::istringstream in(text);
    return parse_scenario(in);
}

} // namespace forksim
