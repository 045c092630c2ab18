#pragma once

// Test-side oracles: brute-force audits independent of the implementation
// paths they check.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "forksim/world.hpp"

namespace forksim::test {

/// Recount every physical page's references by scanning all live processes'
/// leaf slots (a shared PTE table contributes once) and compare against the
/// store's refcounts and free list. Returns a description of the first
/// mismatch, or empty when consistent.
inline std::string refcount_audit(World& w) {
    std::map<PhysPageId, std::uint32_t> counted;
    std::set<TableId> seen_tables;
    for (Process& p : w.procs) {
        if (!p.alive || p.root == kNoTable) continue;
        EntryTable& pgd = w.tables[p.root];
        for (std::size_t gi = 0; gi < kEntriesPerTable; ++gi) {
            if (!pgd.slots[gi].has_value()) continue;
            EntryTable& pud = w.tables[pgd.slots[gi].table()];
            for (std::size_t ui = 0; ui < kEntriesPerTable; ++ui) {
                if (!pud.slots[ui].has_value()) continue;
                EntryTable& pmd = w.tables[pud.slots[ui].table()];
                for (std::size_t mi = 0; mi < kEntriesPerTable; ++mi) {
                    if (!pmd.slots[mi].has_value()) continue;
                    TableId leaf = pmd.slots[mi].table();
                    if (!seen_tables.insert(leaf).second) continue; // shared: once
                    for (Entry& e : w.tables[leaf].slots) {
                        if (e.has_value()) ++counted[e.page()];
                    }
                }
            }
        }
    }
    for (std::uint64_t p = 0; p < w.phys.page_count(); ++p) {
        auto id = static_cast<PhysPageId>(p);
        std::uint32_t expect = counted.count(id) ? counted[id] : 0;
        if (w.phys.refcount(id) != expect) {
            return "page " + std::to_string(p) + ": refcount " +
                   std::to_string(w.phys.refcount(id)) + " != counted " +
                   std::to_string(expect);
        }
    }
    return {};
}

/// Structure audit: levels descend PGD->PUD->PMD->PTE, and no PTE table is
/// reachable from two PMD entries unless its sharer count says so.
inline std::string structural_audit(World& w) {
    std::map<TableId, int> pmd_parents;
    for (Process& p : w.procs) {
        if (!p.alive || p.root == kNoTable) continue;
        if (w.tables[p.root].level != Level::Pgd) return "root is not PGD";
        EntryTable& pgd = w.tables[p.root];
        for (std::size_t gi = 0; gi < kEntriesPerTable; ++gi) {
            if (!pgd.slots[gi].has_value()) continue;
            TableId pud_id = pgd.slots[gi].table();
            if (w.tables[pud_id].level != Level::Pud) return "PGD entry points below PUD";
            EntryTable& pud = w.tables[pud_id];
            for (std::size_t ui = 0; ui < kEntriesPerTable; ++ui) {
                if (!pud.slots[ui].has_value()) continue;
                TableId pmd_id = pud.slots[ui].table();
                if (w.tables[pmd_id].level != Level::Pmd) return "PUD entry points below PMD";
                EntryTable& pmd = w.tables[pmd_id];
                for (std::size_t mi = 0; mi < kEntriesPerTable; ++mi) {
                    if (!pmd.slots[mi].has_value()) continue;
                    TableId leaf = pmd.slots[mi].table();
                    if (w.tables[leaf].level != Level::Pte) return "PMD entry not at PTE";
                    ++pmd_parents[leaf];
                }
            }
        }
    }
    for (auto [leaf, parents] : pmd_parents) {
        if (static_cast<std::uint32_t>(parents) != w.tables[leaf].sharers) {
            return "table " + std::to_string(leaf) + ": " + std::to_string(parents) +
                   " PMD parents but sharer count " + std::to_string(w.tables[leaf].sharers);
        }
        if (parents > 1 && w.tables[leaf].sharers < 2) {
            return "table " + std::to_string(leaf) + " multiply parented but not shared";
        }
    }
    return {};
}

struct PageView {
    bool present = false;
    bool writable = false;
    std::vector<std::uint8_t> payload;

    bool operator==(const PageView&) const = default;
};

/// Content map of a process's address space, for structural diffs between
/// fork mechanisms (physical page ids intentionally excluded).
inline std::map<VPage, PageView> content_snapshot(World& w, ProcessId pid) {
    std::map<VPage, PageView> out;
    w.for_each_mapped(pid, [&](VPage v, Entry& e) {
        PageView pv;
        pv.present = e.present();
        pv.writable = e.writable();
        auto span = w.phys.payload(e.page());
        pv.payload.assign(span.begin(), span.end());
        out[v] = pv;
    });
    return out;
}

/// Present-entry census per level for one process (the materialized
/// counterpart of table_shape).
inline TableShape level_census(World& w, ProcessId pid) {
    TableShape s;
    Process& p = w.process(pid);
    if (p.root == kNoTable) return s;
    EntryTable& pgd = w.tables[p.root];
    for (std::size_t gi = 0; gi < kEntriesPerTable; ++gi) {
        if (!pgd.slots[gi].has_value()) continue;
        ++s.pgd_entries;
        EntryTable& pud = w.tables[pgd.slots[gi].table()];
        for (std::size_t ui = 0; ui < kEntriesPerTable; ++ui) {
            if (!pud.slots[ui].has_value()) continue;
            ++s.pud_entries;
            EntryTable& pmd = w.tables[pud.slots[ui].table()];
            for (std::size_t mi = 0; mi < kEntriesPerTable; ++mi) {
                if (!pmd.slots[mi].has_value()) continue;
                ++s.pmd_entries;
                EntryTable& pte = w.tables[pmd.slots[mi].table()];
                for (Entry& e : pte.slots) {
                    if (e.has_value()) ++s.pte_entries;
                }
            }
        }
    }
    return s;
}

/// Count of write-protected PMD entries across a process's whole table.
inline std::uint64_t wp_pmd_census(World& w, ProcessId pid) {
    std::uint64_t n = 0;
    Process& p = w.process(pid);
    if (p.root == kNoTable) return 0;
    EntryTable& pgd = w.tables[p.root];
    for (std::size_t gi = 0; gi < kEntriesPerTable; ++gi) {
        if (!pgd.slots[gi].has_value()) continue;
        EntryTable& pud = w.tables[pgd.slots[gi].table()];
        for (std::size_t ui = 0; ui < kEntriesPerTable; ++ui) {
            if (!pud.slots[ui].has_value()) continue;
            EntryTable& pmd = w.tables[pud.slots[ui].table()];
            for (std::size_t mi = 0; mi < kEntriesPerTable; ++mi) {
                if (pmd.slots[mi].has_value() && !pmd.slots[mi].writable()) ++n;
            }
        }
    }
    return n;
}

} // namespace forksim::test
