#pragma once

#include <array>
#include <cassert>
#include <cstdint>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "forksim/common.hpp"

namespace forksim {

enum class EventKind : std::uint8_t {
    QueryArrival = 0,
    ParentWakeup,   // the parent finished its current work item
    ChildCopyStep,  // one child worker advances
    ChildCopyDone,  // a session's copy phase completed
    PersistDone,
    OsOp,           // injected OS operation (migrate / unmap / oom / scripted set)
    ErrorInject,
    SnapshotTrigger,
};

inline const char* to_string(EventKind k) {
    switch (k) {
    case EventKind::QueryArrival: return "query_arrival";
    case EventKind::ParentWakeup: return "parent_wakeup";
    case EventKind::ChildCopyStep: return "child_copy_step";
    case EventKind::ChildCopyDone: return "child_copy_done";
    case EventKind::PersistDone: return "persist_done";
    case EventKind::OsOp: return "os_op";
    case EventKind::ErrorInject: return "error_inject";
    case EventKind::SnapshotTrigger: return "snapshot_trigger";
    }
    return "?";
}

struct Event {
    SimTime at = 0;
    std::uint64_t seq = 0; // insertion order; breaks timestamp ties
    EventKind kind = EventKind::QueryArrival;
    std::uint64_t a = 0;
    std::uint64_t b = 0;
};

struct EventLater {
    bool operator()(const Event& x, const Event& y) const {
        if (x.at != y.at) return x.at > y.at;
        return x.seq > y.seq;
    }
};

enum class TraceKind : std::uint8_t {
    KernelEpisode = 0, // parent out-of-service interval
    UserService,       // query service interval
    ChildCopy,
    Persist,
    OsOp,
    ModeSwitch,
    SessionPhase,
};

inline const char* to_string(TraceKind k) {
    switch (k) {
    case TraceKind::KernelEpisode: return "kernel_episode";
    case TraceKind::UserService: return "user_service";
    case TraceKind::ChildCopy: return "child_copy";
    case TraceKind::Persist: return "persist";
    case TraceKind::OsOp: return "os_op";
    case TraceKind::ModeSwitch: return "mode_switch";
    case TraceKind::SessionPhase: return "session_phase";
    }
    return "?";
}

struct TraceEntry {
    SimTime at = 0;
    TraceKind kind = TraceKind::KernelEpisode;
    ProcessId pid = kNoProcess;
    SimTime duration = 0;
    std::uint32_t cause = 0; // EpisodeCause for kernel episodes, free-form otherwise
    std::uint64_t detail = 0;
};

/// Ordered record of everything the run did; byte-identical for a fixed seed.
struct Trace {
    std::vector<TraceEntry> entries;

    void record(SimTime at, TraceKind kind, ProcessId pid, SimTime dur,
                std::uint32_t cause = 0, std::uint64_t detail = 0) {
        entries.push_back({at, kind, pid, dur, cause, detail});
    }
};

struct Episode {
    SimTime start = 0;
    SimTime duration = 0;
    EpisodeCause cause = EpisodeCause::ForkCall;
    ProcessId pid = 0;
};

/// Out-of-service accounting: one entry per kernel-mode episode, time-ordered
/// by construction because the parent timeline is serialized.
class KernelLedger {
public:
    const Episode& charge(ProcessId pid, SimTime start, SimTime duration, EpisodeCause cause) {
        assert(duration > 0);
        episodes_.push_back({start, duration, cause, pid});
        totals_[static_cast<std::size_t>(cause)] += duration;
        return episodes_.back();
    }

    const std::vector<Episode>& episodes() const { return episodes_; }

    SimTime total(EpisodeCause cause) const {
        return totals_[static_cast<std::size_t>(cause)];
    }

    SimTime total() const {
        SimTime t = 0;
        for (SimTime x : totals_) t += x;
        return t;
    }

private:
    std::vector<Episode> episodes_;
    std::array<SimTime, kEpisodeCauseCount> totals_{};
};

/// Deterministic discrete-event queue. Events execute in (at, insertion)
/// order; scheduling into the past is rejected.
class Scheduler {
public:
    SimTime now() const { return now_; }

    void schedule(SimTime at, EventKind kind, std::uint64_t a = 0, std::uint64_t b = 0) {
        if (at < now_) {
            throw std::invalid_argument("cannot schedule an event in the past");
        }
        queue_.push(Event{at, next_seq_++, kind, a, b});
    }

    bool empty() const { return queue_.empty(); }

    std::optional<Event> peek() const {
        if (queue_.empty()) return std::nullopt;
        return queue_.top();
    }

    /// Execute events with at <= t_end through `dispatch`. The handler may
    /// schedule more events (including at the current instant).
    template <typename Dispatch>
    void run_until(SimTime t_end, Dispatch&& dispatch) {
        while (!queue_.empty() && queue_.top().at <= t_end) {
            Event ev = queue_.top();
            queue_.pop();
            now_ = ev.at;
            dispatch(ev);
        }
        if (t_end > now_) now_ = t_end;
    }

private:
    std::priority_queue<Event, std::vector<Event>, EventLater> queue_;
    std::uint64_t next_seq_ = 0;
    SimTime now_ = 0;
};

} // namespace forksim
