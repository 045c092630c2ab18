#pragma once

#include <algorithm>
#include <cassert>
#include <functional>
#include <vector>

#include "forksim/common.hpp"
#include "forksim/cost_model.hpp"
#include "forksim/sim_clock.hpp"
#include "forksim/world.hpp"

namespace forksim {

enum class EngineKind : std::uint8_t { Default = 0, Odf, Async };

inline const char* to_string(EngineKind e) {
    switch (e) {
    case EngineKind::Default: return "default";
    case EngineKind::Odf: return "odf";
    case EngineKind::Async: return "async";
    }
    return "?";
}

enum class SessionPhase : std::uint8_t { ParentCopy = 0, ChildCopy, Persist, Done, Aborted };

inline const char* to_string(SessionPhase p) {
    switch (p) {
    case SessionPhase::ParentCopy: return "parent_copy";
    case SessionPhase::ChildCopy: return "child_copy";
    case SessionPhase::Persist: return "persist";
    case SessionPhase::Done: return "done";
    case SessionPhase::Aborted: return "aborted";
    }
    return "?";
}

enum class RollbackCase : std::uint8_t { ParentPhase = 0, ChildPhase, SyncPhase };

/// One child worker's share of the copy work: fork-time VMA ranges, walked
/// PMD by PMD. Workers are span arithmetic, not threads; each one is an
/// independent event chain on the simulated timeline.
struct WorkerState {
    struct Span {
        VPage start = 0;
        VPage end = 0;
    };
    std::vector<Span> spans;
    std::size_t span_idx = 0;
    VPage next_base = 0;
    bool span_entered = false; // pre-copy link check done for the current span
    std::vector<VPage> revisit; // claim conflicts, retried after the spans
    bool done = false;
    SimTime end_time = 0;
    SimTime busy_ns = 0;
};

struct VmaProgress {
    VPage start = 0;
    VPage end = 0;
    std::uint64_t uncopied = 0;
};

/// One in-flight fork+persist.
struct SnapshotSession {
    int id = 0;
    EngineKind engine = EngineKind::Default;
    ProcessId parent = 0;
    ProcessId child = kNoProcess;
    SessionPhase phase = SessionPhase::ParentCopy;
    int workers = 1;
    ErrorCode error = ErrorCode::None;

    SimTime fork_invoked = 0;
    SimTime fork_return = 0;
    SimTime copy_end = 0;     // == persist start
    SimTime persist_end = 0;
    SimTime last_sync_end = 0;
    SimTime aborted_at = 0;
    SimTime kernel_time = 0;  // the fork call episode

    std::vector<VmaProgress> progress; // per fork-time VMA
    std::vector<VPage> marked_bases;   // PMD bases this session write-protected
    std::uint64_t pmds_total = 0;
    std::uint64_t pmds_copied_by_child = 0;
    std::uint64_t pmds_synced = 0;     // proactive syncs by the parent
    std::uint64_t pmds_flushed_ahead = 0; // copied during a later fork call (consecutive rule)
    std::uint64_t mapped_pages = 0;    // at persist start

    std::vector<WorkerState> worker_state;
    int workers_pending = 0;

    bool copy_phase_active() const { return phase == SessionPhase::ChildCopy; }
};

struct ForkResult {
    SimTime kernel_ns = 0;
    std::vector<int> flushed_sessions; // prior sessions advanced by the consecutive rule
};

/// The three snapshot-fork mechanisms plus Async-fork's proactive
/// synchronization, checkpoint handling and error rollback. Owns the session
/// list; time is charged through charge_fn and child work is driven by
/// scheduled ChildCopyStep events.
class ForkCoordinator {
public:
    explicit ForkCoordinator(World& world) : world_(world) {
        world_.checkpoint_hook = [this](const CheckpointEvent& ev) { return checkpoint(ev); };
        world_.shared_split_hook = [this](ProcessId pid, VPage v) { odf_cow_pte_table(pid, v); };
    }

    // Episode accounting; must return the charged interval so sync containment
    // can extend the copy span.
    std::function<Episode(ProcessId, SimTime, EpisodeCause)> charge_fn;
    // Event scheduling into the driving simulation.
    std::function<void(SimTime, EventKind, std::uint64_t, std::uint64_t)> schedule_fn;

    std::vector<SnapshotSession> sessions;

    /// Arm an allocation failure in one of the three fork phases, after
    /// `after_allocs` successful allocations of that phase.
    void arm_failure(RollbackCase phase, int after_allocs) {
        fail_plans_.push_back({phase, after_allocs});
    }

    const CostModel& cost() const { return *world_.cost; }

    // ---- fork entry points ---------------------------------------------------

    /// Runs the engine's fork at the current instant. The caller owns charging
    /// the returned kernel time and then calling launch(session_id, fork_return).
    /// On a fork error the session is kept in Aborted state and the error
    /// rethrown; no child survives.
    int begin_snapshot(EngineKind engine, ProcessId parent, int workers, ForkResult& out) {
        int id = static_cast<int>(sessions.size());
        sessions.emplace_back();
        {
            SnapshotSession& s = sessions.back();
            s.id = id;
            s.engine = engine;
            s.parent = parent;
            s.workers = std::max(1, workers);
        }
        try {
            SnapshotSession& s = sessions.back();
            switch (engine) {
            case EngineKind::Default: out.kernel_ns = fork_default(s); break;
            case EngineKind::Odf: out.kernel_ns = fork_odf(s); break;
            case EngineKind::Async: out.kernel_ns = fork_async_parent(s, out); break;
            }
            s.kernel_time = out.kernel_ns;
        } catch (...) {
            sessions[id].aborted_at = world_.now();
            throw;
        }
        return id;
    }

    /// Called once the fork episode has been charged: records the window and
    /// puts the child to work (Async) or hands over to persist (others).
    void launch(int session_id, SimTime fork_invoked, SimTime fork_return) {
        SnapshotSession& s = sessions[session_id];
        s.fork_invoked = fork_invoked;
        s.fork_return = fork_return;
        if (s.engine == EngineKind::Async) {
            s.phase = SessionPhase::ChildCopy;
            partition_workers(s);
            s.workers_pending = static_cast<int>(s.worker_state.size());
            for (std::size_t w = 0; w < s.worker_state.size(); ++w) {
                schedule_fn(fork_return, EventKind::ChildCopyStep,
                            static_cast<std::uint64_t>(s.id), w);
            }
        } else {
            s.phase = SessionPhase::Persist;
            s.copy_end = fork_return;
            schedule_persist(s, fork_return);
        }
    }

    // ---- checkpoint & proactive synchronization ------------------------------

    /// Interception before a PTE-mutating parent operation. PMD-wide events
    /// check one R/W flag; VMA-wide events short-circuit through the peer link
    /// before scanning. Migrations are exempt. Returns syncs performed.
    int checkpoint(const CheckpointEvent& ev) {
        if (ev.op == CheckpointOp::Migrate) return 0;
        SnapshotSession* s = active_async_session(ev.pid);
        if (!s) return 0;
        int syncs = 0;
        if (!ev.vma_wide) {
            Entry* pmd = world_.pmd_entry(ev.pid, ev.start);
            if (pmd && pmd->has_value() && !pmd->writable()) {
                proactive_sync(*s, pmd_base(ev.start));
                ++syncs;
            }
            return syncs;
        }
        // The link tells whether any of this VMA's entries remain uncopied
        // without looping over its PMDs.
        Process& parent = world_.process(ev.pid);
        Vma* vma = parent.find_vma(ev.start);
        if (!vma || !vma->peer.linked() || vma->peer.linked_pid != s->child) return 0;
        for (VPage base = pmd_base(ev.start); base < ev.end; base += kEntriesPerTable) {
            Entry* pmd = world_.pmd_entry(ev.pid, base);
            if (pmd && pmd->has_value() && !pmd->writable()) {
                proactive_sync(*s, base);
                ++syncs;
                if (s->error != ErrorCode::None) break; // sync error rolled the VMA back
            }
        }
        return syncs;
    }

    /// Parent copies one uncopied PMD entry plus its 512 PTEs to the child
    /// ahead of modifying them. Kernel time goes to the parent; a failure
    /// rolls back only the containing VMA and parks the error in its link.
    void proactive_sync(SnapshotSession& s, VPage pmd_base_v) {
        try {
            copy_pmd_to_child(s, pmd_base_v, RollbackCase::SyncPhase);
        } catch (const OutOfPhysMem&) {
            rollback(s, RollbackCase::SyncPhase, pmd_base_v);
            return;
        }
        ++s.pmds_synced;
        if (charge_fn) {
            Episode ep = charge_fn(s.parent, cost().pte_table_copy_ns(), EpisodeCause::ProactiveSync);
            s.last_sync_end = std::max(s.last_sync_end, ep.start + ep.duration);
        }
    }

    /// ODF: un-share the PTE table containing vpage on behalf of the writing
    /// process, copying all 512 PTEs. An interruption when pid is the parent.
    void odf_cow_pte_table(ProcessId pid, VPage vpage) {
        Entry* pmd = world_.pmd_entry(pid, vpage);
        assert(pmd && pmd->has_value());
        TableId shared = pmd->table();
        assert(world_.tables[shared].sharers >= 2);
        TableId fresh = world_.tables.allocate(Level::Pte); // may throw OutOfPhysMem
        EntryTable& src = world_.tables[shared];
        EntryTable& dst = world_.tables[fresh];
        for (std::size_t i = 0; i < kEntriesPerTable; ++i) {
            dst.slots[i] = src.slots[i];
            if (src.slots[i].has_value()) world_.phys.ref(src.slots[i].page());
        }
        --src.sharers;
        pmd = world_.pmd_entry(pid, vpage); // re-fetch: allocate may have moved tables
        pmd->set_value(fresh);
        if (charge_fn) charge_fn(pid, cost().pte_table_copy_ns(), EpisodeCause::OdfCow);
        ++odf_splits_;
    }

    std::uint64_t odf_splits() const { return odf_splits_; }

    // ---- child copy ----------------------------------------------------------

    /// One scheduled step of a child worker: skip already-copied PMDs, claim
    /// and copy the next write-protected one, then reschedule at the copy's
    /// completion time. Peer-link errors abort the remainder.
    void worker_step(int session_id, std::size_t widx) {
        SnapshotSession& s = sessions[session_id];
        if (s.phase != SessionPhase::ChildCopy) return;
        WorkerState& w = s.worker_state[widx];
        SimTime now = world_.now();

        while (w.span_idx < w.spans.size()) {
            WorkerState::Span span = w.spans[w.span_idx];
            if (!w.span_entered) {
                if (span_has_link_error(s, span)) {
                    rollback(s, RollbackCase::ChildPhase);
                    return;
                }
                w.span_entered = true;
                w.next_base = pmd_base(span.start);
            }
            while (w.next_base < span.end) {
                VPage base = w.next_base;
                w.next_base += kEntriesPerTable;
                Entry* pmd = world_.pmd_entry(s.parent, base);
                if (!pmd || !pmd->has_value() || pmd->writable()) continue; // copied or absent
                if (world_.tables[pmd->table()].claimed()) {
                    w.revisit.push_back(base); // busy; revisit after this VMA
                    continue;
                }
                try {
                    copy_pmd_to_child(s, base);
                } catch (const OutOfPhysMem&) {
                    s.error = ErrorCode::OutOfPhysMem;
                    rollback(s, RollbackCase::ChildPhase);
                    return;
                }
                ++s.pmds_copied_by_child;
                SimTime dur = cost().pte_table_copy_ns();
                w.busy_ns += dur;
                w.end_time = now + dur;
                schedule_fn(now + dur, EventKind::ChildCopyStep,
                            static_cast<std::uint64_t>(session_id), widx);
                return;
            }
            // span finished: post-copy link check, then close the connection
            if (span_has_link_error(s, span)) {
                rollback(s, RollbackCase::ChildPhase);
                return;
            }
            clear_span_links(s, span);
            ++w.span_idx;
            w.span_entered = false;
        }
        if (!w.revisit.empty()) {
            std::vector<VPage> pending = std::move(w.revisit);
            w.revisit.clear();
            bool still_claimed = false;
            for (VPage base : pending) {
                Entry* pmd = world_.pmd_entry(s.parent, base);
                if (!pmd || !pmd->has_value() || pmd->writable()) continue;
                if (world_.tables[pmd->table()].claimed()) {
                    w.revisit.push_back(base);
                    still_claimed = true;
                    continue;
                }
                try {
                    copy_pmd_to_child(s, base);
                } catch (const OutOfPhysMem&) {
                    s.error = ErrorCode::OutOfPhysMem;
                    rollback(s, RollbackCase::ChildPhase);
                    return;
                }
                ++s.pmds_copied_by_child;
                SimTime dur = cost().pte_table_copy_ns();
                w.busy_ns += dur;
                w.end_time = now + dur;
                schedule_fn(now + dur, EventKind::ChildCopyStep,
                            static_cast<std::uint64_t>(session_id), widx);
                return;
            }
            if (still_claimed) { // poll again after one copy interval
                schedule_fn(now + cost().pte_table_copy_ns(), EventKind::ChildCopyStep,
                            static_cast<std::uint64_t>(session_id), widx);
                return;
            }
        }
        if (!w.done) {
            w.done = true;
            w.end_time = std::max(w.end_time, now);
            if (--s.workers_pending == 0) {
                // The copy phase closes once the last claim is released, which
                // may be a parent sync still in flight.
                SimTime end = s.last_sync_end;
                for (const WorkerState& ws : s.worker_state) end = std::max(end, ws.end_time);
                schedule_fn(std::max(now, end), EventKind::ChildCopyDone,
                            static_cast<std::uint64_t>(session_id), 0);
            }
        }
    }

    void on_copy_done(int session_id) {
        SnapshotSession& s = sessions[session_id];
        if (s.phase != SessionPhase::ChildCopy) return; // aborted meanwhile
        complete_copy(s, world_.now());
    }

    void on_persist_done(int session_id) {
        SnapshotSession& s = sessions[session_id];
        if (s.phase != SessionPhase::Persist) return;
        s.persist_end = world_.now();
        s.phase = SessionPhase::Done;
        if (s.child != kNoProcess) world_.kill_process(s.child);
    }

    // ---- rollback -------------------------------------------------------------

    /// Restore the parent to a consistent pre-fork state after an error.
    /// ParentPhase clears every write-protect mark of this session; ChildPhase
    /// clears the remaining uncopied marks and kills the child; SyncPhase
    /// clears only the containing VMA and parks the error in its peer link.
    void rollback(SnapshotSession& s, RollbackCase rb, VPage failing_pmd = 0) {
        Process& parent = world_.process(s.parent);
        switch (rb) {
        case RollbackCase::ParentPhase:
            // Exactly the marks made by this (failing) fork call.
            for (VPage base : s.marked_bases) {
                Entry* pmd = world_.pmd_entry(s.parent, base);
                if (pmd && pmd->has_value()) pmd->set_writable(true);
            }
            for (Vma& vma : parent.vmas) {
                if (vma.peer.linked_pid == s.child) vma.peer.clear();
            }
            break;
        case RollbackCase::ChildPhase:
            // Remaining uncopied marks live in VMAs still linked to this child.
            for (Vma& vma : parent.vmas) {
                if (vma.peer.linked_pid == s.child) {
                    clear_wp_range(s, vma.start, vma.end);
                    vma.peer.clear();
                }
            }
            s.phase = SessionPhase::Aborted;
            s.aborted_at = world_.now();
            if (s.error == ErrorCode::None) s.error = ErrorCode::OutOfPhysMem;
            if (s.child != kNoProcess) world_.kill_process(s.child); // SIGKILL before user mode
            break;
        case RollbackCase::SyncPhase: {
            // Only the containing VMA, to avoid contending with the child.
            Vma* vma = parent.find_vma(failing_pmd);
            if (vma) {
                clear_wp_range(s, vma->start, vma->end);
                vma->peer.error = ErrorCode::OutOfPhysMem;
                if (s.child != kNoProcess) {
                    for (Vma& cv : world_.process(s.child).vmas) {
                        if (cv.start == vma->start && cv.end == vma->end) {
                            cv.peer.error = ErrorCode::OutOfPhysMem;
                        }
                    }
                }
            }
            s.error = ErrorCode::OutOfPhysMem;
            break;
        }
        }
    }

    // ---- helpers / inspection -------------------------------------------------

    SnapshotSession* active_async_session(ProcessId parent) {
        for (auto it = sessions.rbegin(); it != sessions.rend(); ++it) {
            if (it->parent == parent && it->engine == EngineKind::Async &&
                it->phase == SessionPhase::ChildCopy) {
                return &*it;
            }
        }
        return nullptr;
    }

    /// Count of parent PMD entries still write-protect-marked by session s.
    std::uint64_t wp_census(const SnapshotSession& s) {
        std::uint64_t n = 0;
        for (const VmaProgress& vp : s.progress) {
            for (VPage base = pmd_base(vp.start); base < vp.end; base += kEntriesPerTable) {
                Entry* pmd = world_.pmd_entry(s.parent, base);
                if (pmd && pmd->has_value() && !pmd->writable()) ++n;
            }
        }
        return n;
    }

    std::uint64_t uncopied_total(const SnapshotSession& s) const {
        std::uint64_t n = 0;
        for (const VmaProgress& vp : s.progress) n += vp.uncopied;
        return n;
    }

    void schedule_persist(SnapshotSession& s, SimTime start) {
        s.copy_end = start;
        s.mapped_pages = world_.mapped_page_count(s.child);
        s.persist_end = start + cost().persist_ns(s.mapped_pages);
        schedule_fn(s.persist_end, EventKind::PersistDone, static_cast<std::uint64_t>(s.id), 0);
    }

private:
    void complete_copy(SnapshotSession& s, SimTime at) {
        s.phase = SessionPhase::Persist;
        schedule_persist(s, at);
    }

    // ---- fork mechanics -------------------------------------------------------

    SimTime fork_default(SnapshotSession& s) {
        Process& parent = world_.process(s.parent);
        ProcessId child_pid = world_.create_process();
        s.child = child_pid;
        std::uint64_t nonleaf = 0, pte_tables = 0;
        try {
            clone_levels(parent.root, child_pid, EngineKind::Default, nonleaf, pte_tables);
        } catch (const OutOfPhysMem&) {
            world_.kill_process(child_pid); // standard abort; parent untouched
            sessions_note_abort(s);
            throw;
        }
        // CoW: every PTE in both processes becomes write-protected. Done as a
        // second pass so an allocation failure above leaves the parent intact.
        write_protect_leaves(parent.root);
        write_protect_leaves(world_.process(child_pid).root);
        copy_vmas(parent, world_.process(child_pid), /*link=*/false);
        record_progress(s, /*count_wp=*/false);
        return cost().fork_copy_ns(nonleaf, pte_tables);
    }

    SimTime fork_odf(SnapshotSession& s) {
        Process& parent = world_.process(s.parent);
        ProcessId child_pid = world_.create_process();
        s.child = child_pid;
        std::uint64_t nonleaf = 0, pte_tables = 0;
        try {
            clone_levels(parent.root, child_pid, EngineKind::Odf, nonleaf, pte_tables);
        } catch (const OutOfPhysMem&) {
            world_.kill_process(child_pid);
            sessions_note_abort(s);
            throw;
        }
        copy_vmas(parent, world_.process(child_pid), /*link=*/false);
        record_progress(s, false);
        return cost().fork_copy_ns(nonleaf, 0);
    }

    /// Async-fork parent phase: per VMA, flush any predecessor still copying
    /// (consecutive-snapshot rule), copy the PGD/PUD entries, then mark the
    /// VMA's PMDs write-protected and wire the peer link.
    SimTime fork_async_parent(SnapshotSession& s, ForkResult& out) {
        Process& parent = world_.process(s.parent);
        ProcessId child_pid = world_.create_process();
        s.child = child_pid;
        std::uint64_t nonleaf = 0, marked = 0, flushed = 0;
        std::vector<VPage> vma_starts;
        for (Vma& vma : parent.vmas) vma_starts.push_back(vma.start);
        try {
            for (VPage start : vma_starts) {
                Vma* vma = parent.find_vma(start);
                if (!vma) continue;
                if (vma->peer.linked()) {
                    // A previous child is still copying this VMA: proactively
                    // copy its whole remaining table to that child first.
                    flushed += flush_vma_to_prior(s, *vma, out);
                    vma = parent.find_vma(start);
                }
                VPage vstart = vma->start, vend = vma->end;
                for (VPage base = pmd_base(vstart); base < vend; base += kEntriesPerTable) {
                    Entry* pmd = world_.pmd_entry(s.parent, base);
                    if (!pmd || !pmd->has_value()) continue;
                    nonleaf += ensure_child_path(child_pid, s.parent, base);
                    Entry* again = world_.pmd_entry(s.parent, base);
                    if (again->writable()) {
                        again->set_writable(false); // reuse of the R/W flag: not yet copied
                        s.marked_bases.push_back(base);
                        ++marked;
                    }
                }
                vma = parent.find_vma(start);
                vma->peer.linked_pid = child_pid;
                Vma cv{vstart, vend, PeerLink{}};
                cv.peer.linked_pid = s.parent;
                world_.process(child_pid).vmas.push_back(cv);
                s.progress.push_back({vstart, vend, count_wp_range(s.parent, vstart, vend)});
            }
        } catch (const OutOfPhysMem&) {
            rollback(s, RollbackCase::ParentPhase);
            world_.kill_process(child_pid);
            s.phase = SessionPhase::Aborted;
            s.error = ErrorCode::OutOfPhysMem;
            throw;
        }
        s.pmds_total = marked;
        return cost().async_parent_ns(nonleaf, marked) +
               static_cast<SimTime>(flushed) * cost().pte_table_copy_ns();
    }

    std::uint64_t flush_vma_to_prior(SnapshotSession& s, Vma& vma, ForkResult& out) {
        SnapshotSession* prior = nullptr;
        for (auto& candidate : sessions) {
            if (candidate.child == vma.peer.linked_pid &&
                candidate.phase == SessionPhase::ChildCopy) {
                prior = &candidate;
            }
        }
        if (!prior) { // stale or errored link; the child's own checks handle it
            if (vma.peer.error == ErrorCode::None) vma.peer.clear();
            return 0;
        }
        std::uint64_t flushed = 0;
        for (VPage base = pmd_base(vma.start); base < vma.end; base += kEntriesPerTable) {
            Entry* pmd = world_.pmd_entry(s.parent, base);
            if (pmd && pmd->has_value() && !pmd->writable()) {
                copy_pmd_to_child(*prior, base, RollbackCase::ParentPhase);
                ++prior->pmds_flushed_ahead;
                ++flushed;
            }
        }
        clear_span_links(*prior, {vma.start, vma.end});
        bool found = false;
        for (int id : out.flushed_sessions) found |= (id == prior->id);
        if (!found) out.flushed_sessions.push_back(prior->id);
        return flushed;
    }

    /// Copy one PMD entry and all 512 PTEs of its table from parent to child
    /// under the table claim; the parent PMD becomes writable (copied) and the
    /// PTEs on both sides become write-protected.
    void copy_pmd_to_child(SnapshotSession& s, VPage base,
                           RollbackCase alloc_phase = RollbackCase::ChildPhase) {
        Entry* ppmd = world_.pmd_entry(s.parent, base);
        assert(ppmd && ppmd->has_value() && !ppmd->writable());
        TableId src_id = ppmd->table();
        assert(!world_.tables[src_id].claimed());
        world_.tables[src_id].claimed_by = s.parent;

        TableId dst_id;
        try {
            maybe_fail(alloc_phase);
            dst_id = world_.tables.allocate(Level::Pte); // may throw
        } catch (...) {
            world_.tables[src_id].claimed_by = kNoProcess;
            throw;
        }
        EntryTable& src = world_.tables[src_id];
        EntryTable& dst = world_.tables[dst_id];
        for (std::size_t i = 0; i < kEntriesPerTable; ++i) {
            dst.slots[i] = src.slots[i];
            if (src.slots[i].has_value()) {
                world_.phys.ref(src.slots[i].page());
                src.slots[i].set_writable(false);
                dst.slots[i].set_writable(false);
            }
        }
        Entry* cpmd = child_pmd_slot(s.child, base);
        assert(cpmd && !cpmd->has_value());
        cpmd->set_value(dst_id);
        cpmd->set_present(true);
        cpmd->set_writable(true);
        ppmd = world_.pmd_entry(s.parent, base);
        ppmd->set_writable(true);
        world_.tables[src_id].claimed_by = kNoProcess;
        note_copied(s, base);
    }

    Entry* child_pmd_slot(ProcessId child, VPage base) { return world_.pmd_entry(child, base); }

    void note_copied(SnapshotSession& s, VPage base) {
        for (VmaProgress& vp : s.progress) {
            if (base >= pmd_base(vp.start) && base < vp.end && vp.uncopied > 0) {
                --vp.uncopied;
                return;
            }
        }
    }

    bool span_has_link_error(SnapshotSession& s, WorkerState::Span span) {
        for (Vma& vma : world_.process(s.parent).vmas) {
            if (vma.start < span.end && span.start < vma.end &&
                vma.peer.error != ErrorCode::None) {
                s.error = vma.peer.error;
                return true;
            }
        }
        return false;
    }

    void clear_span_links(SnapshotSession& s, WorkerState::Span span) {
        for (Vma& vma : world_.process(s.parent).vmas) {
            if (vma.start >= span.start && vma.end <= span.end &&
                vma.peer.linked_pid == s.child) {
                vma.peer.clear();
            }
        }
        if (s.child == kNoProcess) return;
        for (Vma& vma : world_.process(s.child).vmas) {
            if (vma.start >= span.start && vma.end <= span.end &&
                vma.peer.linked_pid == s.parent) {
                vma.peer.clear();
            }
        }
    }

    /// VMAs are independent: assign them to workers round-robin by descending
    /// PMD count to balance span length without intra-VMA splitting.
    void partition_workers(SnapshotSession& s) {
        struct Item {
            VPage start, end;
            std::uint64_t pmds;
        };
        std::vector<Item> items;
        for (const VmaProgress& vp : s.progress) {
            items.push_back({vp.start, vp.end, vp.uncopied});
        }
        std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
            return a.pmds > b.pmds;
        });
        int n = std::min<int>(s.workers, std::max<std::size_t>(items.size(), 1));
        s.worker_state.assign(static_cast<std::size_t>(n), WorkerState{});
        for (std::size_t i = 0; i < items.size(); ++i) {
            s.worker_state[i % n].spans.push_back({items[i].start, items[i].end});
        }
    }

    void record_progress(SnapshotSession& s, bool count_wp) {
        for (const Vma& vma : world_.process(s.parent).vmas) {
            std::uint64_t wp = count_wp ? count_wp_range(s.parent, vma.start, vma.end) : 0;
            s.progress.push_back({vma.start, vma.end, wp});
        }
    }

    std::uint64_t count_wp_range(ProcessId pid, VPage start, VPage end) {
        std::uint64_t n = 0;
        for (VPage base = pmd_base(start); base < end; base += kEntriesPerTable) {
            Entry* pmd = world_.pmd_entry(pid, base);
            if (pmd && pmd->has_value() && !pmd->writable()) ++n;
        }
        return n;
    }

    void clear_wp_range(SnapshotSession& s, VPage start, VPage end) {
        for (VPage base = pmd_base(start); base < end; base += kEntriesPerTable) {
            Entry* pmd = world_.pmd_entry(s.parent, base);
            if (pmd && pmd->has_value() && !pmd->writable()) {
                pmd->set_writable(true);
            }
        }
        for (VmaProgress& vp : s.progress) {
            if (vp.start >= start && vp.end <= end) vp.uncopied = 0;
        }
    }

    /// Ensure the child's PUD/PMD tables exist along the path to `base`;
    /// returns the number of non-leaf entries copied (each allocates and
    /// initializes the next-level table in the child).
    std::uint64_t ensure_child_path(ProcessId child, ProcessId parent, VPage base) {
        (void)parent;
        std::uint64_t copied = 0;
        Process& c = world_.process(child);
        TableId t = c.root;
        const std::size_t idx[2] = {pgd_index(base), pud_index(base)};
        const Level next[2] = {Level::Pud, Level::Pmd};
        for (int l = 0; l < 2; ++l) {
            if (!world_.tables[t].slots[idx[l]].has_value()) {
                maybe_fail(RollbackCase::ParentPhase);
                TableId fresh = world_.tables.allocate(next[l]);
                Entry& e = world_.tables[t].slots[idx[l]];
                e.set_value(fresh);
                e.set_present(true);
                e.set_writable(true);
                ++copied;
            }
            t = world_.tables[t].slots[idx[l]].table();
        }
        return copied;
    }

    /// Deep (Default) or PTE-table-sharing (ODF) clone of the non-leaf levels.
    void clone_levels(TableId parent_root, ProcessId child, EngineKind engine,
                      std::uint64_t& nonleaf, std::uint64_t& pte_tables) {
        Process& c = world_.process(child);
        clone_table_into(parent_root, c.root, engine, nonleaf, pte_tables);
    }

    void clone_table_into(TableId src_id, TableId dst_id, EngineKind engine,
                          std::uint64_t& nonleaf, std::uint64_t& pte_tables) {
        Level level = world_.tables[src_id].level;
        for (std::size_t i = 0; i < kEntriesPerTable; ++i) {
            if (!world_.tables[src_id].slots[i].has_value()) continue;
            if (level == Level::Pmd) {
                ++nonleaf;
                if (engine == EngineKind::Odf) {
                    TableId shared = world_.tables[src_id].slots[i].table();
                    ++world_.tables[shared].sharers;
                    Entry& dslot = world_.tables[dst_id].slots[i];
                    dslot = world_.tables[src_id].slots[i];
                } else {
                    maybe_fail(RollbackCase::ParentPhase);
                    TableId fresh = world_.tables.allocate(Level::Pte);
                    TableId leaf_src = world_.tables[src_id].slots[i].table();
                    EntryTable& sl = world_.tables[leaf_src];
                    EntryTable& dl = world_.tables[fresh];
                    for (std::size_t j = 0; j < kEntriesPerTable; ++j) {
                        dl.slots[j] = sl.slots[j];
                        if (sl.slots[j].has_value()) world_.phys.ref(sl.slots[j].page());
                    }
                    Entry& dslot = world_.tables[dst_id].slots[i];
                    dslot = world_.tables[src_id].slots[i];
                    dslot.set_value(fresh);
                    ++pte_tables;
                }
            } else {
                ++nonleaf;
                maybe_fail(RollbackCase::ParentPhase);
                Level next = level == Level::Pgd ? Level::Pud : Level::Pmd;
                TableId fresh = world_.tables.allocate(next);
                Entry& dslot = world_.tables[dst_id].slots[i];
                dslot = world_.tables[src_id].slots[i];
                dslot.set_value(fresh);
                clone_table_into(world_.tables[src_id].slots[i].table(), fresh, engine,
                                 nonleaf, pte_tables);
            }
        }
    }

    void write_protect_leaves(TableId root) {
        protect_rec(root);
    }

    void protect_rec(TableId id) {
        EntryTable& tab = world_.tables[id];
        if (tab.level == Level::Pte) {
            for (Entry& e : tab.slots) {
                if (e.has_value()) e.set_writable(false);
            }
            return;
        }
        for (Entry& e : tab.slots) {
            if (e.has_value()) protect_rec(e.table());
        }
    }

    void copy_vmas(Process& parent, Process& child, bool link) {
        child.vmas.clear();
        for (const Vma& vma : parent.vmas) {
            Vma cv{vma.start, vma.end, PeerLink{}};
            if (link) cv.peer.linked_pid = parent.pid;
            child.vmas.push_back(cv);
        }
    }

    void sessions_note_abort(SnapshotSession& s) {
        s.phase = SessionPhase::Aborted;
        s.error = ErrorCode::OutOfPhysMem;
    }

    struct FailPlan {
        RollbackCase phase;
        int countdown;
    };

    void maybe_fail(RollbackCase phase) {
        for (std::size_t i = 0; i < fail_plans_.size(); ++i) {
            if (fail_plans_[i].phase != phase) continue;
            if (fail_plans_[i].countdown-- == 0) {
                fail_plans_.erase(fail_plans_.begin() + static_cast<std::ptrdiff_t>(i));
                throw OutOfPhysMem("injected allocation failure");
            }
            return;
        }
    }

    World& world_;
    std::vector<FailPlan> fail_plans_;
    std::uint64_t odf_splits_ = 0;
};

} // namespace forksim
