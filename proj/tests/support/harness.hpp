#pragma once

// Minimal direct-drive rig: world + coordinator + scheduler, no workload or
// parent queue. Fork tests step the simulated clock by pumping events.

#include <limits>

#include "forksim/fork_engines.hpp"
#include "forksim/sim_clock.hpp"
#include "forksim/world.hpp"

namespace forksim::test {

struct Harness {
    World world;
    ForkCoordinator coord;
    Scheduler sched;
    KernelLedger ledger;

    explicit Harness(std::uint64_t phys_pages, std::uint32_t payload = 64)
        : world(phys_pages, payload), coord(world) {
        world.now_fn = [this] { return sched.now(); };
        world.charge_hook = [this](ProcessId pid, SimTime ns, EpisodeCause cause) {
            ledger.charge(pid, sched.now(), ns, cause);
        };
        coord.charge_fn = [this](ProcessId pid, SimTime ns, EpisodeCause cause) {
            return ledger.charge(pid, sched.now(), ns, cause);
        };
        coord.schedule_fn = [this](SimTime at, EventKind kind, std::uint64_t a,
                                   std::uint64_t b) { sched.schedule(at, kind, a, b); };
    }

    ProcessId spawn_parent(VPage vma_pages, std::uint64_t mapped_pages,
                           std::uint32_t vmas = 1) {
        ProcessId pid = world.create_process();
        VPage chunk = vma_pages / vmas;
        for (std::uint32_t i = 0; i < vmas; ++i) {
            world.add_vma(pid, i * chunk, (i + 1) * chunk);
        }
        std::uint64_t per = mapped_pages / vmas;
        for (std::uint32_t i = 0; i < vmas; ++i) {
            world.map_range(pid, i * chunk, per);
        }
        return pid;
    }

    /// Fork and immediately record the window; kernel time is charged as one
    /// episode starting now.
    int fork(EngineKind engine, ProcessId parent, int workers = 1) {
        ForkResult fr;
        SimTime t0 = sched.now();
        int sid = coord.begin_snapshot(engine, parent, workers, fr);
        if (fr.kernel_ns > 0) ledger.charge(parent, t0, fr.kernel_ns, EpisodeCause::ForkCall);
        coord.launch(sid, t0, t0 + fr.kernel_ns);
        return sid;
    }

    void pump(SimTime until = std::numeric_limits<SimTime>::max() / 4) {
        sched.run_until(until, [this](const Event& ev) {
            switch (ev.kind) {
            case EventKind::ChildCopyStep:
                coord.worker_step(static_cast<int>(ev.a), ev.b);
                break;
            case EventKind::ChildCopyDone:
                coord.on_copy_done(static_cast<int>(ev.a));
                break;
            case EventKind::PersistDone:
                coord.on_persist_done(static_cast<int>(ev.a));
                break;
            default:
                break;
            }
        });
    }
};

} // namespace forksim::test
