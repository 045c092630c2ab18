#pragma once

#include <cmath>
#include <stdexcept>

#include "forksim/common.hpp"

namespace forksim {

/// Per-action nanosecond charges. Values are kept as doubles; every charged
/// episode is rounded once, to integer nanoseconds.
struct CostModel {
    double c_nonleaf_ns = 500.0;       // copy of one PGD/PUD/PMD entry (allocates+inits the child table)
    double c_pte_ns = 33.4;            // copy of one PTE slot
    double c_wp_ns = 18.0;             // write-protect mark of one PMD entry
    double c_fault_ns = 3600.0;        // data-page copy-on-write fault
    double persist_per_page_ns = 19000.0; // child persist work per mapped page
    double service_time_ns = 20000.0;  // query service cost (free parameter)

    void validate() const {
        if (c_nonleaf_ns <= 0 || c_pte_ns <= 0 || c_wp_ns <= 0 || c_fault_ns <= 0 ||
            persist_per_page_ns <= 0 || service_time_ns <= 0) {
            throw ConfigError("all cost model charges must be strictly positive");
        }
    }

    static SimTime round_ns(double ns) { return static_cast<SimTime>(std::llround(ns)); }

    /// One PTE-table transfer: the PMD entry plus all 512 slots of its table.
    /// Used uniformly by the child copy, proactive sync and the ODF table split.
    SimTime pte_table_copy_ns() const {
        return round_ns(c_nonleaf_ns + static_cast<double>(kEntriesPerTable) * c_pte_ns);
    }

    SimTime fork_copy_ns(std::uint64_t nonleaf_entries, std::uint64_t pte_tables) const {
        return round_ns(static_cast<double>(nonleaf_entries) * c_nonleaf_ns +
                        static_cast<double>(pte_tables) * static_cast<double>(kEntriesPerTable) * c_pte_ns);
    }

    SimTime async_parent_ns(std::uint64_t nonleaf_entries, std::uint64_t pmds_marked) const {
        return round_ns(static_cast<double>(nonleaf_entries) * c_nonleaf_ns +
                        static_cast<double>(pmds_marked) * c_wp_ns);
    }

    SimTime fault_ns() const { return round_ns(c_fault_ns); }
    SimTime service_ns() const { return round_ns(service_time_ns); }

    SimTime persist_ns(std::uint64_t mapped_pages) const {
        return round_ns(static_cast<double>(mapped_pages) * persist_per_page_ns);
    }
};

} // namespace forksim
