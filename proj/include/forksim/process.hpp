#pragma once

#include <algorithm>
#include <optional>
#include <unordered_map>
#include <vector>

#include "forksim/common.hpp"
#include "forksim/page_table.hpp"

namespace forksim {

/// Per-VMA association with the counterpart VMA of an Async-fork child.
/// linked_pid is set while that child still has uncopied PMDs in this range;
/// a sync-phase error parks its code here for the child to discover.
struct PeerLink {
    ProcessId linked_pid = kNoProcess;
    ErrorCode error = ErrorCode::None;

    bool linked() const { return linked_pid != kNoProcess; }
    void clear() { linked_pid = kNoProcess; }
};

struct Vma {
    VPage start = 0; // inclusive
    VPage end = 0;   // exclusive
    PeerLink peer;

    bool covers(VPage v) const { return v >= start && v < end; }
    std::uint64_t pages() const { return end - start; }
};

/// Unbounded translation cache: vpage -> physical page. Entries are only
/// installed by a walk of the owning process's table and only removed by
/// explicit flushes, so every incoherence is protocol-caused, not capacity.
struct Tlb {
    std::unordered_map<VPage, PhysPageId> entries;

    std::optional<PhysPageId> lookup(VPage v) const {
        auto it = entries.find(v);
        if (it == entries.end()) return std::nullopt;
        return it->second;
    }

    void fill(VPage v, PhysPageId p) { entries[v] = p; }
    void flush(VPage v) { entries.erase(v); }
    void flush_all() { entries.clear(); }
};

struct Process {
    ProcessId pid = 0;
    bool alive = false;
    TableId root = kNoTable; // PGD
    std::vector<Vma> vmas;   // disjoint, sorted by start
    Tlb tlb;

    Vma* find_vma(VPage v) {
        auto it = std::upper_bound(vmas.begin(), vmas.end(), v,
                                   [](VPage x, const Vma& m) { return x < m.start; });
        if (it == vmas.begin()) return nullptr;
        --it;
        return it->covers(v) ? &*it : nullptr;
    }

    const Vma* find_vma(VPage v) const { return const_cast<Process*>(this)->find_vma(v); }
};

} // namespace forksim
