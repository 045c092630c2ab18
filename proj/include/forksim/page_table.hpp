#pragma once

#include <array>
#include <cassert>
#include <vector>

#include "forksim/common.hpp"

namespace forksim {

enum class Level : std::uint8_t { Pgd = 0, Pud = 1, Pmd = 2, Pte = 3 };

inline const char* to_string(Level l) {
    switch (l) {
    case Level::Pgd: return "PGD";
    case Level::Pud: return "PUD";
    case Level::Pmd: return "PMD";
    case Level::Pte: return "PTE";
    }
    return "?";
}

/// One 8-byte table slot. Non-leaf slots hold a child TableId; leaf (PTE)
/// slots hold a PhysPageId. The writable bit is the R/W flag: at PMD level
/// it doubles as copied-status while an Async-fork session is active, at PTE
/// level cleared means copy-on-write protected.
/// Layout: bit 0 present, bit 1 writable, bits [16,63] value+1 (0 = none).
struct Entry {
    std::uint64_t raw = 0;

    bool has_value() const { return (raw >> 16) != 0; }
    std::uint64_t value() const { return (raw >> 16) - 1; }
    bool present() const { return raw & 1; }
    bool writable() const { return raw & 2; }

    void set_value(std::uint64_t v) { raw = (raw & 0xffffULL) | ((v + 1) << 16); }
    void clear_value() { raw &= 0xffffULL; }
    void set_present(bool p) { raw = p ? (raw | 1) : (raw & ~1ULL); }
    void set_writable(bool w) { raw = w ? (raw | 2) : (raw & ~2ULL); }

    TableId table() const { return static_cast<TableId>(value()); }
    PhysPageId page() const { return static_cast<PhysPageId>(value()); }
};

struct EntryTable {
    std::array<Entry, kEntriesPerTable> slots{};
    Level level = Level::Pte;
    std::uint32_t sharers = 1;       // ODF: number of PMD entries targeting this table
    ProcessId claimed_by = kNoProcess; // trylock surface for table copies
    bool live = false;

    bool claimed() const { return claimed_by != kNoProcess; }
};

/// Store of entry tables shared by all processes of a world (ODF shares PTE
/// tables across processes, so ownership cannot be per-process). Table pages
/// come from a separate pool than data pages; allocation failures are driven
/// by an injectable countdown to exercise the fork error paths.
class TableStore {
public:
    TableId allocate(Level level) {
        if (fail_after_ >= 0) {
            if (fail_after_ == 0) {
                fail_after_ = -1;
                throw OutOfPhysMem("injected table allocation failure");
            }
            --fail_after_;
        }
        TableId id;
        if (!free_.empty()) {
            id = free_.back();
            free_.pop_back();
            tables_[id] = EntryTable{};
        } else {
            id = static_cast<TableId>(tables_.size());
            tables_.emplace_back();
        }
        tables_[id].level = level;
        tables_[id].live = true;
        ++live_count_;
        return id;
    }

    void release(TableId id) {
        assert(tables_[id].live);
        tables_[id].live = false;
        free_.push_back(id);
        --live_count_;
    }

    EntryTable& operator[](TableId id) { return tables_[id]; }
    const EntryTable& operator[](TableId id) const { return tables_[id]; }

    std::size_t live_count() const { return live_count_; }
    std::size_t capacity() const { return tables_.size(); }

    /// Arm the next allocation failure after `n` further successful allocations.
    void fail_after(int n) { fail_after_ = n; }
    void clear_failure() { fail_after_ = -1; }

private:
    std::vector<EntryTable> tables_;
    std::vector<TableId> free_;
    std::size_t live_count_ = 0;
    int fail_after_ = -1;
};

/// (pgd, pud, pmd, pte) present-entry counts for a contiguous mapping of
/// mem_bytes at 4 KiB pages. Levels above PGD are not modeled.
struct TableShape {
    std::uint64_t pgd_entries = 0;
    std::uint64_t pud_entries = 0;
    std::uint64_t pmd_entries = 0;
    std::uint64_t pte_entries = 0;

    bool operator==(const TableShape&) const = default;
};

inline TableShape table_shape(std::uint64_t mem_bytes, std::uint64_t page_bytes) {
    if (page_bytes == 0 || mem_bytes == 0 || mem_bytes % page_bytes != 0) {
        throw ConfigError("memory size must be a positive multiple of the page size");
    }
    TableShape s;
    s.pte_entries = mem_bytes / page_bytes;
    s.pmd_entries = (s.pte_entries + kEntriesPerTable - 1) / kEntriesPerTable;
    s.pud_entries = (s.pmd_entries + kEntriesPerTable - 1) / kEntriesPerTable;
    s.pgd_entries = (s.pud_entries + kEntriesPerTable - 1) / kEntriesPerTable;
    if (s.pgd_entries > kEntriesPerTable) {
        throw ConfigError("memory size exceeds the modeled 4-level address space");
    }
    return s;
}

} // namespace forksim
