#pragma once

#include <algorithm>
#include <cassert>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forksim/common.hpp"
#include "forksim/cost_model.hpp"
#include "forksim/page_table.hpp"
#include "forksim/phys_mem.hpp"
#include "forksim/process.hpp"

namespace forksim {

enum class CheckpointOp : std::uint8_t {
    Unmap = 0,
    Protect,
    Merge,
    Split,
    PageFault,
    OomReclaim,
    GetUserPage,
    Migrate,
};

inline const char* to_string(CheckpointOp op) {
    switch (op) {
    case CheckpointOp::Unmap: return "unmap";
    case CheckpointOp::Protect: return "protect";
    case CheckpointOp::Merge: return "merge";
    case CheckpointOp::Split: return "split";
    case CheckpointOp::PageFault: return "page_fault";
    case CheckpointOp::OomReclaim: return "oom_reclaim";
    case CheckpointOp::GetUserPage: return "get_user_page";
    case CheckpointOp::Migrate: return "migrate";
    }
    return "?";
}

/// Interception point reached before a PTE-mutating operation. VmaWide events
/// span at least one PMD; PmdWide events resolve to exactly one PMD entry.
struct CheckpointEvent {
    ProcessId pid = kNoProcess;
    bool vma_wide = false;
    CheckpointOp op = CheckpointOp::PageFault;
    VPage start = 0;
    VPage end = 0; // exclusive
};

struct Violation {
    ProcessId pid;
    VPage vpage;
    PhysPageId cached;
    PhysPageId walked;
    SimTime at;
};

struct PteView {
    bool exists = false;   // leaf slot reachable and carrying a translation
    bool present = false;
    bool writable = false;
    PhysPageId phys = kNoPage;
};

struct WriteOutcome {
    bool cow = false;       // a data-page copy was performed
    int syncs = 0;          // proactive synchronizations triggered
    bool table_split = false; // an ODF shared table was un-shared first
};

/// Captures TLB/PTE state of every live process after each protocol step of
/// migrate_page, for state-by-state inspection.
struct MigrationTrace {
    struct ProcState {
        ProcessId pid;
        std::optional<PhysPageId> tlb;
        PteView pte;
    };
    struct Step {
        std::string label;
        std::vector<ProcState> procs;
    };
    std::vector<Step> steps;
};

struct WorldStats {
    std::uint64_t walks = 0;
    std::uint64_t tlb_hits = 0;
    std::uint64_t data_cow_faults = 0;
    std::uint64_t presence_faults = 0;
};

/// Physical memory, page tables, VMAs and TLBs of every process in one
/// simulated machine, plus the OS-level operations that act as checkpoints.
/// Engine policy (proactive sync, ODF table splits) and time accounting are
/// injected through hooks so the module stays independently testable.
class World {
public:
    World() = default;

    World(std::uint64_t phys_pages, std::uint32_t payload_bytes)
        : phys(phys_pages, payload_bytes) {}

    // State is value-copied; hooks are deliberately not (a clone is re-wired
    // by whoever runs it).
    World(const World& o)
        : phys(o.phys), tables(o.tables), procs(o.procs), violations(o.violations),
          stats(o.stats), cost(o.cost) {}
    World& operator=(const World&) = delete;
    World(World&&) = default;
    World& operator=(World&&) = default;

    PhysMem phys;
    TableStore tables;
    std::vector<Process> procs;
    std::vector<Violation> violations;
    WorldStats stats;

    // Wiring points. checkpoint_hook returns the number of proactive syncs
    // performed; shared_split_hook un-shares the PTE table containing vpage
    // on behalf of pid (ODF) and must be installed whenever tables can be
    // shared. charge_hook accounts kernel-mode time against a process.
    std::function<int(const CheckpointEvent&)> checkpoint_hook;
    std::function<void(ProcessId, VPage)> shared_split_hook;
    std::function<void(ProcessId, SimTime, EpisodeCause)> charge_hook;
    std::function<SimTime()> now_fn;

    SimTime now() const { return now_fn ? now_fn() : 0; }

    // ---- process lifecycle -------------------------------------------------

    ProcessId create_process() {
        Process p;
        p.pid = static_cast<ProcessId>(procs.size());
        p.alive = true;
        p.root = tables.allocate(Level::Pgd);
        procs.push_back(std::move(p));
        return procs.back().pid;
    }

    Process& process(ProcessId pid) { return procs[pid]; }
    const Process& process(ProcessId pid) const { return procs[pid]; }

    /// Tear down a process: every translation it holds is released (shared
    /// tables lose a sharer instead), private tables are freed. The VMA list
    /// is kept for post-mortem inspection.
    void kill_process(ProcessId pid) {
        Process& p = process(pid);
        if (!p.alive) return;
        release_subtree(p.root);
        p.root = kNoTable;
        p.alive = false;
        p.tlb.flush_all();
    }

    // ---- mapping ------------------------------------------------------------

    void add_vma(ProcessId pid, VPage start, VPage end) {
        Process& p = process(pid);
        Vma v;
        v.start = start;
        v.end = end;
        auto it = std::upper_bound(p.vmas.begin(), p.vmas.end(), start,
                                   [](VPage x, const Vma& m) { return x < m.start; });
        p.vmas.insert(it, v);
    }

    /// Map `count` fresh physical pages at [start, start+count). Intermediate
    /// tables are created on demand. On allocation failure the partial work of
    /// this call is undone before the error propagates.
    void map_range(ProcessId pid, VPage start, std::uint64_t count) {
        Process& p = process(pid);
        std::vector<VPage> mapped;
        mapped.reserve(count);
        try {
            for (std::uint64_t i = 0; i < count; ++i) {
                VPage v = start + i;
                if (!p.find_vma(v)) throw UnmappedAddress(v);
                if (walk(p, v, /*create=*/true)->has_value()) {
                    throw std::invalid_argument("map_range over an already mapped page");
                }
                fire_leaf_checkpoint(pid, v, CheckpointOp::PageFault);
                split_if_shared(pid, v);
                // re-walk: a sync or split above may have replaced the table
                Entry* slot = walk(p, v, false);
                PhysPageId page = phys.allocate();
                slot->set_value(page);
                slot->set_present(true);
                slot->set_writable(true);
                mapped.push_back(v);
            }
        } catch (const OutOfPhysMem&) {
            for (VPage v : mapped) {
                Entry* slot = walk(p, v, false);
                phys.unref(slot->page());
                slot->raw = 0;
            }
            throw;
        }
    }

    // ---- reads --------------------------------------------------------------

    enum class ReadAccounting { Charge, Bypass };

    /// TLB-first read. A hit returns the cached page's payload even if stale
    /// (the leakage vector); the coherence detector records the mismatch. On a
    /// miss the table is walked, a non-present PTE raises a simulated fault
    /// that re-establishes presence, and the TLB is filled.
    std::span<const std::uint8_t> read(ProcessId pid, VPage vpage,
                                       ReadAccounting acct = ReadAccounting::Charge) {
        Process& p = process(pid);
        assert(p.alive);
        if (!p.find_vma(vpage)) throw UnmappedAddress(vpage);
        if (auto hit = p.tlb.lookup(vpage)) {
            ++stats.tlb_hits;
            detect(pid, vpage, *hit);
            return phys.payload(*hit);
        }
        Entry* slot = walk(p, vpage, false);
        ++stats.walks;
        if (!slot || !slot->has_value()) throw UnmappedAddress(vpage);
        if (!slot->present()) {
            // Presence fault: payload is wherever the most recent protocol
            // step left it; the model never swaps to disk.
            fire_leaf_checkpoint(pid, vpage, CheckpointOp::PageFault);
            split_if_shared(pid, vpage);
            slot = walk(p, vpage, false);
            slot->set_present(true);
            ++stats.presence_faults;
            if (acct == ReadAccounting::Charge && charge_hook) {
                charge_hook(pid, cost->fault_ns(), EpisodeCause::DataPageFault);
            }
        }
        PhysPageId page = slot->page();
        p.tlb.fill(vpage, page);
        return phys.payload(page);
    }

    // ---- writes -------------------------------------------------------------

    /// CoW write of `bytes` at byte `offset` within vpage's payload. The
    /// checkpoint hook runs first; under ODF a shared containing table is
    /// un-shared; a write-protected PTE or a refcount above one forces the
    /// data-page copy, charged to the writing process as kernel time.
    WriteOutcome write(ProcessId pid, VPage vpage, std::uint32_t offset,
                       std::span<const std::uint8_t> bytes) {
        Process& p = process(pid);
        assert(p.alive);
        if (!p.find_vma(vpage)) throw UnmappedAddress(vpage);
        WriteOutcome out;
        out.syncs = fire_leaf_checkpoint(pid, vpage, CheckpointOp::PageFault);
        out.table_split = split_if_shared(pid, vpage);
        Entry* slot = walk(p, vpage, false);
        if (!slot || !slot->has_value()) throw UnmappedAddress(vpage);

        bool needs_presence = !slot->present();
        if (!slot->writable() || phys.refcount(slot->page()) > 1) {
            PhysPageId old = slot->page();
            PhysPageId fresh = phys.allocate();
            phys.copy_payload(old, fresh);
            phys.unref(old);
            slot->set_value(fresh);
            slot->set_present(true);
            slot->set_writable(true);
            p.tlb.flush(vpage);
            ++stats.data_cow_faults;
            if (charge_hook) charge_hook(pid, cost->fault_ns(), EpisodeCause::DataPageFault);
            out.cow = true;
        } else if (needs_presence) {
            slot->set_present(true);
            ++stats.presence_faults;
            if (charge_hook) charge_hook(pid, cost->fault_ns(), EpisodeCause::DataPageFault);
        }
        phys.write_payload(slot->page(), offset, bytes);
        return out;
    }

    // ---- migration ----------------------------------------------------------

    /// Six-step migration of vpage's backing page to new_phys (obtained from
    /// allocate()). Every same-vpage translation equal to the old page is
    /// moved; under a shared table the scan of the sharing process finds the
    /// already-cleared slot and is skipped, stranding that process's TLB
    /// entry. Never fails mid-protocol; checkpoint-exempt.
    void migrate_page(ProcessId owner_pid, VPage vpage, PhysPageId new_phys,
                      MigrationTrace* trace = nullptr) {
        Process& owner = process(owner_pid);
        Entry* oslot = walk(owner, vpage, false);
        assert(oslot && oslot->has_value() && oslot->present());
        assert(phys.refcount(new_phys) == 1); // freshly allocated reservation

        if (checkpoint_hook) {
            CheckpointEvent ev{owner_pid, false, CheckpointOp::Migrate, pmd_base(vpage),
                               pmd_base(vpage) + kEntriesPerTable};
            int syncs = checkpoint_hook(ev);
            assert(syncs == 0);
            (void)syncs;
        }
        // Hold the PTE-table claim across the slot updates when an Async-fork
        // session has this PMD write-protected.
        TableId owner_table = leaf_table(owner, vpage);
        bool claimed = false;
        if (owner_table != kNoTable && !tables[owner_table].claimed()) {
            tables[owner_table].claimed_by = owner_pid;
            claimed = true;
        }

        PhysPageId old = oslot->page();
        capture(trace, "initial", vpage);

        struct Moved {
            Entry* slot;
            bool writable;
        };
        std::vector<Moved> moved;

        // Step 2: owner's PTE -> none present.
        moved.push_back({oslot, oslot->writable()});
        oslot->raw = 0;
        capture(trace, "set_pte_none", vpage);

        // Step 3: flush owner's TLB entry.
        owner.tlb.flush(vpage);
        capture(trace, "flush_owner_tlb", vpage);

        // Step 4: loop over the other processes in ascending pid; a slot still
        // reading the old page is invalidated and flushed, anything else
        // (including the shared slot already set to none) is skipped.
        for (Process& p : procs) {
            if (!p.alive || p.pid == owner_pid) continue;
            Entry* slot = walk(p, vpage, false);
            if (slot && slot->has_value() && slot->page() == old) {
                moved.push_back({slot, slot->writable()});
                slot->raw = 0;
                p.tlb.flush(vpage);
            }
        }
        capture(trace, "scan_others", vpage);

        // Step 5: update the invalidated PTEs to the new page.
        for (const Moved& m : moved) {
            m.slot->set_value(new_phys);
            m.slot->set_present(true);
            m.slot->set_writable(m.writable);
            if (&m != &moved.front()) phys.ref(new_phys);
        }
        // Payload moves with the page; then the old page is released.
        phys.copy_payload(old, new_phys);
        for (std::size_t i = 0; i < moved.size(); ++i) phys.unref(old);
        capture(trace, "update_pte", vpage);

        if (claimed) tables[owner_table].claimed_by = kNoProcess;
    }

    // ---- unmap / reclaim ----------------------------------------------------

    /// Remove [start, end) from pid's address space: affected VMAs are split,
    /// shrunk or deleted, covered translations are released. Classified as a
    /// VMA-wide checkpoint, fired per affected VMA before any mutation.
    void unmap_range(ProcessId pid, VPage start, VPage end) {
        Process& p = process(pid);
        for (VPage v = start; v < end; ++v) {
            if (!p.find_vma(v)) throw UnmappedAddress(v);
        }
        // Checkpoints first: a VMA-wide event per affected VMA, restricted to
        // the overlap.
        for (const Vma& vma : p.vmas) {
            VPage s = std::max(vma.start, start);
            VPage e = std::min(vma.end, end);
            if (s >= e) continue;
            fire_vma_checkpoint(pid, CheckpointOp::Unmap, s, e);
        }
        // Release translations.
        for (VPage v = start; v < end; ++v) {
            Entry* slot = walk(p, v, false);
            if (!slot || !slot->has_value()) continue;
            split_if_shared(pid, v);
            slot = walk(p, v, false);
            phys.unref(slot->page());
            slot->raw = 0;
            p.tlb.flush(v);
        }
        rebuild_vmas(p, start, end);
    }

    /// OOM reclaim of the PMD containing vpage: present bits are cleared and
    /// TLB entries flushed; translations are retained so a later fault
    /// re-establishes them (the model never swaps to disk). PMD-wide
    /// checkpoint.
    void oom_reclaim(ProcessId pid, VPage vpage) {
        Process& p = process(pid);
        fire_leaf_checkpoint(pid, vpage, CheckpointOp::OomReclaim);
        split_if_shared(pid, vpage);
        TableId t = leaf_table(p, vpage);
        if (t == kNoTable) return;
        VPage base = pmd_base(vpage);
        EntryTable& tab = tables[t];
        for (std::size_t i = 0; i < kEntriesPerTable; ++i) {
            if (tab.slots[i].has_value() && tab.slots[i].present()) {
                tab.slots[i].set_present(false);
                p.tlb.flush(base + static_cast<VPage>(i));
            }
        }
    }

    // ---- coherence ----------------------------------------------------------

    /// Compare every live process's TLB entries against a fresh walk of its
    /// own table; returns mismatches (sorted) without mutating state.
    std::vector<Violation> coherence_audit() {
        std::vector<Violation> out;
        for (Process& p : procs) {
            if (!p.alive) continue;
            std::vector<std::pair<VPage, PhysPageId>> cached(p.tlb.entries.begin(),
                                                             p.tlb.entries.end());
            std::sort(cached.begin(), cached.end());
            for (auto [v, page] : cached) {
                Entry* slot = walk(p, v, false);
                PhysPageId walked = (slot && slot->has_value()) ? slot->page() : kNoPage;
                if (walked != page) out.push_back({p.pid, v, page, walked, now()});
            }
        }
        return out;
    }

    // ---- inspection helpers (also used by the fork engines) -----------------

    PteView peek_pte(ProcessId pid, VPage vpage) {
        Entry* slot = walk(process(pid), vpage, false);
        PteView v;
        if (slot && slot->has_value()) {
            v.exists = true;
            v.present = slot->present();
            v.writable = slot->writable();
            v.phys = slot->page();
        }
        return v;
    }

    /// PMD-level entry for vpage, or nullptr if the path is incomplete.
    Entry* pmd_entry(ProcessId pid, VPage vpage) {
        Process& p = process(pid);
        if (p.root == kNoTable) return nullptr;
        Entry& pgd = tables[p.root].slots[pgd_index(vpage)];
        if (!pgd.has_value()) return nullptr;
        Entry& pud = tables[pgd.table()].slots[pud_index(vpage)];
        if (!pud.has_value()) return nullptr;
        return &tables[pud.table()].slots[pmd_index(vpage)];
    }

    TableId leaf_table(Process& p, VPage vpage) {
        Entry* pmd = pmd_entry(p.pid, vpage);
        return (pmd && pmd->has_value()) ? pmd->table() : kNoTable;
    }

    Entry* walk(Process& p, VPage vpage, bool create) {
        if (p.root == kNoTable) return nullptr;
        TableId t = p.root;
        const std::size_t idx[3] = {pgd_index(vpage), pud_index(vpage), pmd_index(vpage)};
        const Level next[3] = {Level::Pud, Level::Pmd, Level::Pte};
        for (int l = 0; l < 3; ++l) {
            if (!tables[t].slots[idx[l]].has_value()) {
                if (!create) return nullptr;
                // allocate() can grow the store; re-fetch the slot afterwards.
                TableId fresh = tables.allocate(next[l]);
                Entry& e = tables[t].slots[idx[l]];
                e.set_value(fresh);
                e.set_present(true);
                e.set_writable(true);
            }
            t = tables[t].slots[idx[l]].table();
        }
        return &tables[t].slots[pte_index(vpage)];
    }

    std::uint64_t mapped_page_count(ProcessId pid) {
        std::uint64_t n = 0;
        for_each_mapped(pid, [&](VPage, Entry&) { ++n; });
        return n;
    }

    template <typename Fn> // Fn(VPage, Entry&)
    void for_each_mapped(ProcessId pid, Fn&& fn) {
        Process& p = process(pid);
        if (p.root == kNoTable) return;
        EntryTable& pgd = tables[p.root];
        for (std::size_t gi = 0; gi < kEntriesPerTable; ++gi) {
            if (!pgd.slots[gi].has_value()) continue;
            EntryTable& pud = tables[pgd.slots[gi].table()];
            for (std::size_t ui = 0; ui < kEntriesPerTable; ++ui) {
                if (!pud.slots[ui].has_value()) continue;
                EntryTable& pmd = tables[pud.slots[ui].table()];
                for (std::size_t mi = 0; mi < kEntriesPerTable; ++mi) {
                    if (!pmd.slots[mi].has_value()) continue;
                    EntryTable& pte = tables[pmd.slots[mi].table()];
                    VPage base = ((static_cast<VPage>(gi) * 512 + ui) * 512 + mi) * 512;
                    for (std::size_t ti = 0; ti < kEntriesPerTable; ++ti) {
                        if (pte.slots[ti].has_value()) {
                            fn(base + static_cast<VPage>(ti), pte.slots[ti]);
                        }
                    }
                }
            }
        }
    }

    const CostModel* cost = &default_cost();

    static const CostModel& default_cost() {
        static const CostModel m{};
        return m;
    }

private:
    int fire_leaf_checkpoint(ProcessId pid, VPage vpage, CheckpointOp op) {
        if (!checkpoint_hook) return 0;
        CheckpointEvent ev{pid, false, op, pmd_base(vpage), pmd_base(vpage) + kEntriesPerTable};
        return checkpoint_hook(ev);
    }

    int fire_vma_checkpoint(ProcessId pid, CheckpointOp op, VPage start, VPage end) {
        if (!checkpoint_hook) return 0;
        CheckpointEvent ev{pid, true, op, start, end};
        return checkpoint_hook(ev);
    }

    bool split_if_shared(ProcessId pid, VPage vpage) {
        TableId t = leaf_table(process(pid), vpage);
        if (t == kNoTable || tables[t].sharers < 2) return false;
        if (!shared_split_hook) {
            throw std::logic_error("shared PTE table mutated with no split hook installed");
        }
        shared_split_hook(pid, vpage);
        return true;
    }

    void release_subtree(TableId id) {
        EntryTable& tab = tables[id];
        for (Entry& e : tab.slots) {
            if (!e.has_value()) continue;
            if (tab.level == Level::Pte) {
                phys.unref(e.page());
            } else if (tab.level == Level::Pmd) {
                EntryTable& child = tables[e.table()];
                if (child.sharers > 1) {
                    --child.sharers;
                } else {
                    release_subtree(e.table());
                }
            } else {
                release_subtree(e.table());
            }
        }
        tables.release(id);
    }

    /// VMA surgery for unmap: pieces inherit the peer link of the original;
    /// the linked process's VMA list is updated symmetrically (its pages stay
    /// mapped). A fully removed VMA closes the peer connection on both sides.
    void rebuild_vmas(Process& p, VPage start, VPage end) {
        std::vector<Vma> next;
        for (Vma& vma : p.vmas) {
            VPage s = std::max(vma.start, start);
            VPage e = std::min(vma.end, end);
            if (s >= e) {
                next.push_back(vma);
                continue;
            }
            if (vma.peer.linked()) {
                mirror_split(process(vma.peer.linked_pid), p.pid, vma.start, vma.end, s, e);
            }
            if (vma.start < s) next.push_back(Vma{vma.start, s, vma.peer});
            if (e < vma.end) next.push_back(Vma{e, vma.end, vma.peer});
        }
        p.vmas = std::move(next);
    }

    void mirror_split(Process& peer, ProcessId back_pid, VPage vstart, VPage vend,
                      VPage cut_s, VPage cut_e) {
        std::vector<Vma> next;
        for (Vma& vma : peer.vmas) {
            if (vma.start != vstart || vma.end != vend ||
                vma.peer.linked_pid != back_pid) {
                next.push_back(vma);
                continue;
            }
            if (vma.start < cut_s) next.push_back(Vma{vma.start, cut_s, vma.peer});
            // The counterpart of the removed middle keeps its pages but has no
            // parent-side VMA left to copy from; the connection closes.
            Vma orphan{cut_s, cut_e, vma.peer};
            orphan.peer.clear();
            next.push_back(orphan);
            if (cut_e < vma.end) next.push_back(Vma{cut_e, vma.end, vma.peer});
        }
        peer.vmas = std::move(next);
    }

    void capture(MigrationTrace* trace, const char* label, VPage vpage) {
        if (!trace) return;
        MigrationTrace::Step step;
        step.label = label;
        for (Process& p : procs) {
            if (!p.alive) continue;
            MigrationTrace::ProcState st;
            st.pid = p.pid;
            st.tlb = p.tlb.lookup(vpage);
            st.pte = peek_pte(p.pid, vpage);
            step.procs.push_back(st);
        }
        trace->steps.push_back(std::move(step));
    }

    void detect(ProcessId pid, VPage vpage, PhysPageId cached) {
        Entry* slot = walk(process(pid), vpage, false);
        PhysPageId walked = (slot && slot->has_value()) ? slot->page() : kNoPage;
        if (walked != cached) violations.push_back({pid, vpage, cached, walked, now()});
    }
};

} // namespace forksim
