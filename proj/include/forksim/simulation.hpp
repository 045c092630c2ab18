#pragma once

#include <deque>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "forksim/common.hpp"
#include "forksim/fork_engines.hpp"
#include "forksim/kv_engine.hpp"
#include "forksim/metrics.hpp"
#include "forksim/scenario.hpp"
#include "forksim/sim_clock.hpp"
#include "forksim/workload.hpp"
#include "forksim/world.hpp"

namespace forksim {

/// The pre-snapshot machine state: parent process with the instance mapped
/// and prefilled. Copyable, so sweeps and paired-seed studies can clone one
/// template instead of rebuilding.
struct BuiltWorld {
    World world;
    KvHeap kv;
    ProcessId parent = 0;
};

inline std::vector<std::uint8_t> make_value(std::uint64_t key, std::uint64_t salt,
                                            std::uint32_t len) {
    SplitMix64 r(key * 0x9e3779b97f4a7c15ULL + salt);
    std::uint64_t word = r.next();
    std::vector<std::uint8_t> out(len);
    for (std::uint32_t i = 0; i < len; ++i) {
        out[i] = static_cast<std::uint8_t>((word >> ((i % 8) * 8)) ^ (i / 8));
    }
    return out;
}

inline BuiltWorld build_world(const ScenarioConfig& cfg) {
    cfg.validate();
    BuiltWorld b{World(cfg.phys_page_budget(), cfg.payload_bytes), KvHeap{}, 0};
    b.parent = b.world.create_process();
    const std::uint64_t pages = cfg.instance_pages();
    const std::uint64_t reserved = cfg.reserved_pages();
    const std::uint64_t chunk = pages / cfg.vma_count;
    for (std::uint32_t i = 0; i < cfg.vma_count; ++i) {
        b.world.add_vma(b.parent, i * chunk, (i + 1) * chunk);
    }
    if (reserved > pages) b.world.add_vma(b.parent, pages, reserved);
    for (std::uint32_t i = 0; i < cfg.vma_count; ++i) {
        b.world.map_range(b.parent, i * chunk, chunk);
    }
    b.kv.payload_bytes = cfg.payload_bytes;
    b.kv.heap_start = 0;
    b.kv.heap_end = reserved;
    b.kv.mapped_end = pages;
    for (std::uint64_t k = 0; k < cfg.prefill_keys; ++k) {
        b.kv.set(b.world, b.parent, k, make_value(k, cfg.seed, cfg.value_bytes));
    }
    return b;
}

struct SessionReport {
    int id = 0;
    EngineKind engine = EngineKind::Default;
    SessionPhase phase = SessionPhase::Done;
    ErrorCode error = ErrorCode::None;
    ProcessId child = kNoProcess;
    SimTime fork_invoked = 0;
    SimTime fork_return = 0;
    SimTime copy_end = 0;
    SimTime persist_end = 0;
    SimTime aborted_at = 0;
    SimTime kernel_time = 0;
    std::uint64_t pmds_total = 0;
    std::uint64_t pmds_copied_by_child = 0;
    std::uint64_t pmds_synced = 0;
    std::uint64_t pmds_flushed_ahead = 0;
    std::uint64_t mapped_pages = 0;
    std::string consistency = "skipped"; // pass | fail | expected_leak | skipped | aborted
    std::size_t audit_violations_at_end = 0;
    KvEntries dump;

    SimTime window_end() const {
        if (phase == SessionPhase::Done) return persist_end;
        if (phase == SessionPhase::Aborted) return aborted_at;
        return persist_end;
    }
};

struct RunResult {
    Metrics metrics;
    KernelLedger ledger;
    Trace trace;
    std::vector<SessionReport> sessions;
    std::vector<Violation> detector; // read-time coherence flags
    std::vector<Violation> final_audit;
    WorldStats stats;
    std::uint64_t odf_splits = 0;
    int exit_code = 0;
};

/// One scenario run on the single simulated timeline: an open-loop query
/// stream against the parent, snapshot triggers, scripted OS operations, and
/// the resulting latency/interruption record.
class Simulation {
public:
    Simulation(BuiltWorld built, const ScenarioConfig& cfg)
        : cfg_(cfg), world_(std::move(built.world)), kv_(std::move(built.kv)),
          parent_(built.parent), coord_(world_) {
        world_.cost = &cfg_.cost;
        world_.charge_hook = [this](ProcessId pid, SimTime ns, EpisodeCause cause) {
            charge(pid, ns, cause);
        };
        world_.now_fn = [this] { return sched_.now(); };
        coord_.charge_fn = [this](ProcessId pid, SimTime ns, EpisodeCause cause) {
            return charge(pid, ns, cause);
        };
        coord_.schedule_fn = [this](SimTime at, EventKind kind, std::uint64_t a,
                                    std::uint64_t b) { sched_.schedule(at, kind, a, b); };
        for (const ErrorInjection& err : cfg_.error_injections) {
            coord_.arm_failure(err.phase, err.after_allocs);
        }
    }

    RunResult run() {
        queries_ = generate(with_seed(cfg_.workload, cfg_.seed));
        for (std::size_t i = 0; i < queries_.size(); ++i) {
            sched_.schedule(queries_[i].at, EventKind::QueryArrival, i);
        }
        for (std::size_t i = 0; i < cfg_.snapshot_at_ns.size(); ++i) {
            sched_.schedule(cfg_.snapshot_at_ns[i], EventKind::SnapshotTrigger, i);
        }
        for (std::size_t i = 0; i < cfg_.injections.size(); ++i) {
            sched_.schedule(cfg_.injections[i].at_ns, EventKind::OsOp, i);
        }
        SimTime t_end = cfg_.run_until_ns > 0 ? cfg_.run_until_ns
                                              : std::numeric_limits<SimTime>::max() / 4;
        sched_.run_until(t_end, [this](const Event& ev) { dispatch(ev); });
        return finalize();
    }

    World& world() { return world_; }
    ForkCoordinator& coordinator() { return coord_; }

private:
    static WorkloadSpec with_seed(WorkloadSpec spec, std::uint64_t seed) {
        spec.seed = seed;
        return spec;
    }

    struct WorkItem {
        enum class Kind : std::uint8_t { Query, Snapshot, Inject } kind;
        std::uint64_t idx = 0;
        SimTime enqueued = 0;
    };

    /// Child-side dump in flight: key reads spread evenly over the persist
    /// window, advanced lazily before any state mutation so migrations
    /// interleave with the walk at the right instants.
    struct PersistTask {
        int session = -1;
        bool active = false;
        bool done = false;
        bool verify = false;
        SimTime start = 0;
        SimTime end = 0;
        std::vector<std::pair<std::uint64_t, std::uint64_t>> entries;
        std::size_t cursor = 0;
        KvEntries dump;
        KvEntries oracle;

        SimTime read_time(std::size_t i) const {
            if (entries.empty()) return start;
            return start + static_cast<SimTime>(
                               (static_cast<__int128>(end - start) * static_cast<SimTime>(i)) /
                               static_cast<SimTime>(entries.size()));
        }
    };

    // ---- event dispatch ------------------------------------------------------

    void dispatch(const Event& ev) {
        switch (ev.kind) {
        case EventKind::QueryArrival:
            enqueue(WorkItem{WorkItem::Kind::Query, ev.a, ev.at});
            break;
        case EventKind::SnapshotTrigger:
            enqueue(WorkItem{WorkItem::Kind::Snapshot, ev.a, ev.at});
            break;
        case EventKind::OsOp: {
            const Injection& inj = cfg_.injections[ev.a];
            if (inj.op == InjectOp::Migrate) {
                run_migration(inj);
            } else {
                enqueue(WorkItem{WorkItem::Kind::Inject, ev.a, ev.at});
            }
            break;
        }
        case EventKind::ParentWakeup:
            parent_wakeup();
            break;
        case EventKind::ChildCopyStep:
            coord_.worker_step(static_cast<int>(ev.a), ev.b);
            break;
        case EventKind::ChildCopyDone: {
            int sid = static_cast<int>(ev.a);
            coord_.on_copy_done(sid);
            if (coord_.sessions[sid].phase == SessionPhase::Persist) activate_persist(sid);
            break;
        }
        case EventKind::PersistDone:
            finish_persist(static_cast<int>(ev.a));
            break;
        case EventKind::ErrorInject:
            break;
        }
    }

    // ---- the parent's serialized timeline -------------------------------------

    void enqueue(WorkItem item) {
        work_q_.push_back(item);
        if (!parent_active_) {
            parent_active_ = true;
            sched_.schedule(sched_.now(), EventKind::ParentWakeup);
        }
    }

    void parent_wakeup() {
        if (work_q_.empty()) {
            parent_active_ = false;
            return;
        }
        WorkItem item = work_q_.front();
        work_q_.pop_front();
        execute(item);
        if (work_q_.empty()) {
            parent_active_ = false;
        } else {
            sched_.schedule(cursor_, EventKind::ParentWakeup);
        }
    }

    /// State mutations apply atomically at the item's service start; kernel
    /// episodes and service time only advance the completion cursor.
    void execute(const WorkItem& item) {
        SimTime t0 = sched_.now();
        advance_persists(t0);
        in_work_ = true;
        cursor_ = t0;
        switch (item.kind) {
        case WorkItem::Kind::Query: {
            const Query& q = queries_[item.idx];
            if (q.kind == QueryKind::Set) {
                kv_.set(world_, parent_, q.key, make_value(q.key, cfg_.seed ^ item.idx, cfg_.value_bytes));
            } else {
                scratch_.clear();
                kv_.try_get(world_, parent_, q.key, scratch_);
            }
            cursor_ += cfg_.cost.service_ns();
            if (cfg_.trace_jsonl) {
                trace_.record(t0, TraceKind::UserService, parent_, cursor_ - t0, 0, item.idx);
            }
            metrics_.latencies.push_back(
                {item.idx, QueryClass::Normal, item.enqueued, cursor_ - item.enqueued});
            break;
        }
        case WorkItem::Kind::Snapshot:
            run_fork();
            break;
        case WorkItem::Kind::Inject:
            run_injection(cfg_.injections[item.idx]);
            break;
        }
        in_work_ = false;
        parent_free_ = cursor_;
    }

    Episode charge(ProcessId pid, SimTime ns, EpisodeCause cause) {
        SimTime start = (pid == parent_ && in_work_) ? cursor_ : sched_.now();
        if (pid == parent_ && in_work_) cursor_ += ns;
        Episode ep = ledger_.charge(pid, start, ns, cause);
        if (cfg_.trace_jsonl) {
            trace_.record(start, TraceKind::KernelEpisode, pid, ns,
                          static_cast<std::uint32_t>(cause));
        }
        return ep;
    }

    // ---- snapshots ------------------------------------------------------------

    void run_fork() {
        SimTime t0 = cursor_;
        ForkResult fr;
        int sid = -1;
        try {
            sid = coord_.begin_snapshot(cfg_.engine, parent_, cfg_.workers, fr);
        } catch (const OutOfPhysMem&) {
            return; // fork failed and rolled back; the parent serves on
        }
        if (fr.kernel_ns > 0) charge(parent_, fr.kernel_ns, EpisodeCause::ForkCall);
        SimTime ret = cursor_;
        coord_.launch(sid, t0, ret);
        for (int prior : fr.flushed_sessions) {
            coord_.sessions[prior].last_sync_end =
                std::max(coord_.sessions[prior].last_sync_end, ret);
        }
        PersistTask task;
        task.session = sid;
        task.verify = cfg_.verify_consistency;
        if (cfg_.verify_consistency || cfg_.dump_output) {
            task.entries = kv_.index.sorted_entries(); // the child's index at the fork instant
        }
        if (cfg_.verify_consistency) {
            task.oracle = oracle_snapshot(world_, parent_, kv_.index);
        }
        tasks_.push_back(std::move(task));
        if (cfg_.trace_jsonl) {
            trace_.record(t0, TraceKind::SessionPhase, parent_, ret - t0,
                          static_cast<std::uint32_t>(coord_.sessions[sid].phase),
                          static_cast<std::uint64_t>(sid));
        }
        if (coord_.sessions[sid].phase == SessionPhase::Persist) activate_persist(sid);
    }

    void activate_persist(int sid) {
        const SnapshotSession& s = coord_.sessions[sid];
        for (PersistTask& t : tasks_) {
            if (t.session == sid && !t.active) {
                t.active = true;
                t.start = s.copy_end;
                t.end = s.persist_end;
            }
        }
    }

    void advance_persists(SimTime now) {
        for (PersistTask& t : tasks_) {
            if (!t.active || t.done) continue;
            advance_task(t, now);
        }
    }

    void advance_task(PersistTask& t, SimTime now) {
        const SnapshotSession& s = coord_.sessions[static_cast<std::size_t>(t.session)];
        while (t.cursor < t.entries.size() && t.read_time(t.cursor) <= now) {
            auto [key, packed] = t.entries[t.cursor];
            t.dump.emplace_back(key, KvHeap::read_value(world_, s.child,
                                                        KvLocation::unpack(packed),
                                                        World::ReadAccounting::Bypass));
            ++t.cursor;
        }
    }

    void finish_persist(int sid) {
        SnapshotSession& s = coord_.sessions[static_cast<std::size_t>(sid)];
        if (s.phase != SessionPhase::Persist) return;
        for (PersistTask& t : tasks_) {
            if (t.session != sid || t.done) continue;
            advance_task(t, t.end);
            t.done = true;
            if (t.verify) {
                session_audits_[sid] = world_.coherence_audit().size();
            }
        }
        if (cfg_.trace_jsonl) {
            trace_.record(s.copy_end, TraceKind::Persist, s.child, s.persist_end - s.copy_end,
                          0, static_cast<std::uint64_t>(sid));
        }
        coord_.on_persist_done(sid);
    }

    // ---- scripted OS operations ------------------------------------------------

    void run_migration(const Injection& inj) {
        advance_persists(sched_.now());
        PhysPageId fresh = world_.phys.allocate();
        world_.migrate_page(parent_, inj.vpage, fresh);
        if (cfg_.trace_jsonl) {
            trace_.record(sched_.now(), TraceKind::OsOp, parent_, 0,
                          static_cast<std::uint32_t>(InjectOp::Migrate), inj.vpage);
        }
    }

    void run_injection(const Injection& inj) {
        switch (inj.op) {
        case InjectOp::Unmap:
            world_.unmap_range(parent_, inj.start_vpage, inj.end_vpage);
            break;
        case InjectOp::Oom:
            world_.oom_reclaim(parent_, inj.vpage);
            break;
        case InjectOp::Set:
            kv_.set(world_, parent_, inj.key,
                    make_value(inj.key, inj.value_seed, cfg_.value_bytes));
            break;
        case InjectOp::Migrate:
            break; // dispatched directly, never queued
        }
        if (cfg_.trace_jsonl) {
            trace_.record(sched_.now(), TraceKind::OsOp, parent_, cursor_ - sched_.now(),
                          static_cast<std::uint32_t>(inj.op), inj.vpage);
        }
    }

    // ---- wrap-up ---------------------------------------------------------------

    RunResult finalize() {
        RunResult out;
        // Tag every query normal or snapshot by arrival against the recorded
        // snapshot windows.
        struct Window {
            SimTime lo, hi;
        };
        std::vector<Window> windows;
        for (const SnapshotSession& s : coord_.sessions) {
            SimTime hi = s.phase == SessionPhase::Aborted ? s.aborted_at : s.persist_end;
            windows.push_back({s.fork_invoked, hi});
        }
        for (LatencyRecord& r : metrics_.latencies) {
            for (const Window& w : windows) {
                if (r.arrival_ns >= w.lo && r.arrival_ns <= w.hi) {
                    r.cls = QueryClass::Snapshot;
                    break;
                }
            }
        }
        out.metrics = std::move(metrics_);
        out.ledger = std::move(ledger_);
        out.trace = std::move(trace_);
        out.detector = world_.violations;
        out.final_audit = world_.coherence_audit();
        out.stats = world_.stats;
        out.odf_splits = coord_.odf_splits();
        for (const SnapshotSession& s : coord_.sessions) {
            SessionReport r;
            r.id = s.id;
            r.engine = s.engine;
            r.phase = s.phase;
            r.error = s.error;
            r.child = s.child;
            r.fork_invoked = s.fork_invoked;
            r.fork_return = s.fork_return;
            r.copy_end = s.copy_end;
            r.persist_end = s.persist_end;
            r.aborted_at = s.aborted_at;
            r.kernel_time = s.kernel_time;
            r.pmds_total = s.pmds_total;
            r.pmds_copied_by_child = s.pmds_copied_by_child;
            r.pmds_synced = s.pmds_synced;
            r.pmds_flushed_ahead = s.pmds_flushed_ahead;
            r.mapped_pages = s.mapped_pages;
            if (auto it = session_audits_.find(s.id); it != session_audits_.end()) {
                r.audit_violations_at_end = it->second;
            }
            if (s.phase == SessionPhase::Aborted) {
                r.consistency = "aborted";
            } else {
                for (const PersistTask& t : tasks_) {
                    if (t.session != s.id) continue;
                    if (!t.verify) {
                        r.consistency = "skipped";
                    } else if (t.dump == t.oracle) {
                        r.consistency = "pass";
                    } else if (s.engine == EngineKind::Odf && cfg_.expect_leak) {
                        r.consistency = "expected_leak";
                    } else {
                        r.consistency = "fail";
                        out.exit_code = 2;
                    }
                    if (t.verify || cfg_.dump_output) r.dump = t.dump;
                }
            }
            out.sessions.push_back(std::move(r));
        }
        return out;
    }

    ScenarioConfig cfg_;
    World world_;
    KvHeap kv_;
    ProcessId parent_ = 0;
    ForkCoordinator coord_;
    Scheduler sched_;
    KernelLedger ledger_;
    Trace trace_;
    Metrics metrics_;
    std::vector<Query> queries_;
    std::deque<WorkItem> work_q_;
    std::vector<PersistTask> tasks_;
    std::map<int, std::size_t> session_audits_;
    std::vector<std::uint8_t> scratch_;
    bool parent_active_ = false;
    bool in_work_ = false;
    SimTime cursor_ = 0;
    SimTime parent_free_ = 0;
};

inline RunResult run_built(BuiltWorld built, const ScenarioConfig& cfg) {
    Simulation sim(std::move(built), cfg);
    return sim.run();
}

inline RunResult run_config(const ScenarioConfig& cfg) {
    return run_built(build_world(cfg), cfg);
}

} // namespace forksim
