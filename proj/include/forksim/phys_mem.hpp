#pragma once

#include <cstring>
#include <span>
#include <vector>

#include "forksim/common.hpp"

namespace forksim {

/// Refcounted physical page store. A page's refcount equals the number of
/// leaf PTE slots referencing it across all live processes; a shared PTE
/// table contributes its slots once. Payloads are stored at a configurable
/// size (default 64 bytes) while address arithmetic stays at 4 KiB pages;
/// the backing buffer is only materialized on first write.
class PhysMem {
public:
    PhysMem() = default;

    PhysMem(std::uint64_t page_count, std::uint32_t payload_bytes)
        : payload_bytes_(payload_bytes), refcount_(page_count, 0) {
        free_list_.reserve(page_count);
        // LIFO free list initialized so pages are handed out in ascending order.
        for (std::uint64_t i = page_count; i > 0; --i) {
            free_list_.push_back(static_cast<PhysPageId>(i - 1));
        }
    }

    std::uint64_t page_count() const { return refcount_.size(); }
    std::uint32_t payload_bytes() const { return payload_bytes_; }
    std::size_t free_pages() const { return free_list_.size(); }

    PhysPageId allocate() {
        if (free_list_.empty()) throw OutOfPhysMem("physical page free list exhausted");
        PhysPageId p = free_list_.back();
        free_list_.pop_back();
        refcount_[p] = 1;
        return p;
    }

    void ref(PhysPageId p) { ++refcount_[p]; }

    void unref(PhysPageId p) {
        if (--refcount_[p] == 0) free_list_.push_back(p);
    }

    std::uint32_t refcount(PhysPageId p) const { return refcount_[p]; }

    std::span<const std::uint8_t> payload(PhysPageId p) const {
        static const std::vector<std::uint8_t> zero(4096, 0);
        if (payload_.empty()) return {zero.data(), payload_bytes_};
        return {payload_.data() + static_cast<std::size_t>(p) * payload_bytes_, payload_bytes_};
    }

    void write_payload(PhysPageId p, std::uint32_t offset, std::span<const std::uint8_t> bytes) {
        materialize();
        std::memcpy(payload_.data() + static_cast<std::size_t>(p) * payload_bytes_ + offset,
                    bytes.data(), bytes.size());
    }

    void copy_payload(PhysPageId from, PhysPageId to) {
        if (payload_.empty()) return; // nothing ever written; both pages are zero
        std::memcpy(payload_.data() + static_cast<std::size_t>(to) * payload_bytes_,
                    payload_.data() + static_cast<std::size_t>(from) * payload_bytes_,
                    payload_bytes_);
    }

private:
    void materialize() {
        if (payload_.empty()) payload_.assign(refcount_.size() * payload_bytes_, 0);
    }

    std::uint32_t payload_bytes_ = 64;
    std::vector<std::uint32_t> refcount_;
    std::vector<PhysPageId> free_list_;
    std::vector<std::uint8_t> payload_;
};

} // namespace forksim
