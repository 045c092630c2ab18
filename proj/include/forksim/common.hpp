#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace forksim {

using SimTime = std::int64_t; // integer nanoseconds
using ProcessId = std::uint32_t;
using PhysPageId = std::uint32_t;
using TableId = std::uint32_t;
using VPage = std::uint64_t;

inline constexpr std::size_t kEntriesPerTable = 512;
inline constexpr std::uint64_t kPageBytes = 4096; // address arithmetic granularity
inline constexpr PhysPageId kNoPage = std::numeric_limits<PhysPageId>::max();
inline constexpr TableId kNoTable = std::numeric_limits<TableId>::max();
inline constexpr ProcessId kNoProcess = std::numeric_limits<ProcessId>::max();

enum class ErrorCode : std::uint8_t {
    None = 0,
    OutOfPhysMem,
    UnmappedAddress,
    KeyNotFound,
};

struct OutOfPhysMem : std::runtime_error {
    OutOfPhysMem() : std::runtime_error("out of physical memory") {}
    explicit OutOfPhysMem(const std::string& what) : std::runtime_error(what) {}
};

struct UnmappedAddress : std::runtime_error {
    explicit UnmappedAddress(VPage vpage)
        : std::runtime_error("unmapped virtual page " + std::to_string(vpage)) {}
};

struct KeyNotFound : std::runtime_error {
    explicit KeyNotFound(std::uint64_t key)
        : std::runtime_error("key not found: " + std::to_string(key)) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Causes of parent kernel-mode episodes; they partition out-of-service time.
enum class EpisodeCause : std::uint8_t {
    ForkCall = 0,
    ProactiveSync,
    OdfCow,
    DataPageFault,
};

inline const char* to_string(EpisodeCause c) {
    switch (c) {
    case EpisodeCause::ForkCall: return "fork_call";
    case EpisodeCause::ProactiveSync: return "proactive_sync";
    case EpisodeCause::OdfCow: return "odf_cow";
    case EpisodeCause::DataPageFault: return "data_page_fault";
    }
    return "?";
}

inline constexpr std::size_t kEpisodeCauseCount = 4;

// Deterministic, platform-independent RNG (splitmix64); simulation results
// must be bit-identical for a fixed seed, so std:: distributions are avoided.
struct SplitMix64 {
    std::uint64_t state = 0;

    explicit SplitMix64(std::uint64_t seed = 0) : state(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, bound); bound > 0. Modulo bias is negligible for the
    // key-space sizes used here and keeps the generator portable.
    std::uint64_t below(std::uint64_t bound) { return next() % bound; }

    double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
};

// Page-table index arithmetic: vpage splits into four 9-bit indices,
// PGD:PUD:PMD:PTE from the top.
inline std::size_t pte_index(VPage v) { return static_cast<std::size_t>(v & 511); }
inline std::size_t pmd_index(VPage v) { return static_cast<std::size_t>((v >> 9) & 511); }
inline std::size_t pud_index(VPage v) { return static_cast<std::size_t>((v >> 18) & 511); }
inline std::size_t pgd_index(VPage v) { return static_cast<std::size_t>((v >> 27) & 511); }

/// Virtual page index of the first page covered by the PMD entry containing v.
inline VPage pmd_base(VPage v) { return v & ~static_cast<VPage>(511); }

} // namespace forksim
