#pragma once

#include <algorithm>
#include <cstring>
#include <optional>
#include <span>
#include <vector>

#include "forksim/common.hpp"
#include "forksim/world.hpp"

namespace forksim {

/// Value location inside the heap: vpage (40 bits), byte offset and length
/// (12 bits each). Values never straddle a page.
struct KvLocation {
    VPage vpage = 0;
    std::uint32_t offset = 0;
    std::uint32_t length = 0;

    std::uint64_t pack() const {
        return (vpage << 24) | (static_cast<std::uint64_t>(offset) << 12) | length;
    }
    static KvLocation unpack(std::uint64_t raw) {
        return {raw >> 24, static_cast<std::uint32_t>((raw >> 12) & 0xfff),
                static_cast<std::uint32_t>(raw & 0xfff)};
    }
};

/// Open-addressing map from key to packed location. Keys are never erased;
/// flat storage keeps world clones cheap (plain vector copies).
class FlatIndex {
public:
    FlatIndex() { rehash(1024); }

    std::size_t size() const { return size_; }

    void put(std::uint64_t key, std::uint64_t value) {
        if ((size_ + 1) * 10 >= keys_.size() * 7) rehash(keys_.size() * 2);
        std::size_t i = slot_of(key);
        if (keys_[i] == 0) {
            keys_[i] = key + 1;
            ++size_;
        }
        vals_[i] = value;
    }

    std::optional<std::uint64_t> find(std::uint64_t key) const {
        std::size_t i = slot_of(key);
        if (keys_[i] == 0) return std::nullopt;
        return vals_[i];
    }

    /// All entries, sorted by key.
    std::vector<std::pair<std::uint64_t, std::uint64_t>> sorted_entries() const {
        std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
        out.reserve(size_);
        for (std::size_t i = 0; i < keys_.size(); ++i) {
            if (keys_[i] != 0) out.emplace_back(keys_[i] - 1, vals_[i]);
        }
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    std::size_t slot_of(std::uint64_t key) const {
        std::uint64_t h = key + 1;
        h ^= h >> 33;
        h *= 0xff51afd7ed558ccdULL;
        h ^= h >> 33;
        std::size_t i = static_cast<std::size_t>(h) & (keys_.size() - 1);
        while (keys_[i] != 0 && keys_[i] != key + 1) i = (i + 1) & (keys_.size() - 1);
        return i;
    }

    void rehash(std::size_t cap) {
        std::vector<std::uint64_t> old_k = std::move(keys_);
        std::vector<std::uint64_t> old_v = std::move(vals_);
        keys_.assign(cap, 0);
        vals_.assign(cap, 0);
        size_ = 0;
        for (std::size_t i = 0; i < old_k.size(); ++i) {
            if (old_k[i] != 0) put(old_k[i] - 1, old_v[i]);
        }
    }

    std::vector<std::uint64_t> keys_;
    std::vector<std::uint64_t> vals_;
    std::size_t size_ = 0;
};

using KvEntries = std::vector<std::pair<std::uint64_t, std::vector<std::uint8_t>>>;

/// Toy store backed by vm_core pages: a key index plus a bump allocator over
/// the heap VMA range. Mutations funnel through World::write so snapshots see
/// the full CoW / checkpoint machinery.
class KvHeap {
public:
    FlatIndex index;
    VPage heap_start = 0;
    VPage heap_end = 0;    // reserved (VMA) end
    VPage mapped_end = 0;  // pages below this are mapped
    VPage cursor_page = 0;
    std::uint32_t cursor_off = 0;
    std::uint32_t payload_bytes = 64;

    void set(World& world, ProcessId pid, std::uint64_t key,
             std::span<const std::uint8_t> value) {
        if (value.size() > payload_bytes) {
            throw std::invalid_argument("value larger than a page payload");
        }
        if (auto packed = index.find(key)) {
            KvLocation loc = KvLocation::unpack(*packed);
            if (loc.length >= value.size()) {
                world.write(pid, loc.vpage, loc.offset, value);
                if (loc.length != value.size()) {
                    loc.length = static_cast<std::uint32_t>(value.size());
                    index.put(key, loc.pack());
                }
                return;
            }
        }
        KvLocation loc = bump(world, pid, static_cast<std::uint32_t>(value.size()));
        world.write(pid, loc.vpage, loc.offset, value);
        index.put(key, loc.pack());
    }

    std::vector<std::uint8_t> get(World& world, ProcessId pid, std::uint64_t key) {
        auto packed = index.find(key);
        if (!packed) throw KeyNotFound(key);
        return read_value(world, pid, KvLocation::unpack(*packed));
    }

    bool try_get(World& world, ProcessId pid, std::uint64_t key,
                 std::vector<std::uint8_t>& out) {
        auto packed = index.find(key);
        if (!packed) return false;
        out = read_value(world, pid, KvLocation::unpack(*packed));
        return true;
    }

    static std::vector<std::uint8_t> read_value(World& world, ProcessId pid, KvLocation loc,
                                                World::ReadAccounting acct =
                                                    World::ReadAccounting::Charge) {
        auto page = world.read(pid, loc.vpage, acct);
        return {page.begin() + loc.offset, page.begin() + loc.offset + loc.length};
    }

private:
    KvLocation bump(World& world, ProcessId pid, std::uint32_t len) {
        if (payload_bytes - cursor_off < len) {
            ++cursor_page;
            cursor_off = 0;
        }
        if (cursor_page >= heap_end) throw OutOfPhysMem("kv heap range exhausted");
        if (cursor_page >= mapped_end) {
            world.map_range(pid, cursor_page, 1);
            mapped_end = cursor_page + 1;
        }
        KvLocation loc{cursor_page, cursor_off, len};
        cursor_off += len;
        return loc;
    }
};

/// Instantaneous deep copy of the store at the fork instant, outside the cost
/// model: values are taken by direct table walk, independent of the TLB-based
/// read path the dump will use.
inline KvEntries oracle_snapshot(World& world, ProcessId pid, const FlatIndex& index) {
    KvEntries out;
    for (auto [key, packed] : index.sorted_entries()) {
        KvLocation loc = KvLocation::unpack(packed);
        PteView pte = world.peek_pte(pid, loc.vpage);
        if (!pte.exists) continue;
        auto page = world.phys.payload(pte.phys);
        out.emplace_back(key, std::vector<std::uint8_t>(page.begin() + loc.offset,
                                                        page.begin() + loc.offset + loc.length));
    }
    return out;
}

inline void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

/// Length-prefixed binary form of a dump, keys ascending.
inline std::vector<std::uint8_t> dump_to_binary(const KvEntries& entries) {
    std::vector<std::uint8_t> out;
    append_u64(out, entries.size());
    for (const auto& [key, value] : entries) {
        append_u64(out, key);
        append_u32(out, static_cast<std::uint32_t>(value.size()));
        out.insert(out.end(), value.begin(), value.end());
    }
    return out;
}

/// Debug form: {"<key>": "<hex>"} pairs, keys ascending.
inline std::string dump_to_json(const KvEntries& entries) {
    static const char* hex = "0123456789abcdef";
    std::string out = "{";
    bool first = true;
    for (const auto& [key, value] : entries) {
        if (!first) out += ",";
        first = false;
        out += "\"" + std::to_string(key) + "\":\"";
        for (std::uint8_t b : value) {
            out += hex[b >> 4];
            out += hex[b & 15];
        }
        out += "\"";
    }
    out += "}";
    return out;
}

} // namespace forksim
