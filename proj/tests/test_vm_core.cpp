#include <catch2/catch_amalgamated.hpp>

#include "forksim/world.hpp"
#include "support/oracles.hpp"

using namespace forksim;

namespace {

World small_world(std::uint64_t pages = 2048, VPage vma_pages = 2048) {
    World w(pages, 64);
    ProcessId pid = w.create_process();
    w.add_vma(pid, 0, vma_pages);
    return w;
}

std::vector<std::uint8_t> bytes(std::initializer_list<std::uint8_t> xs) { return xs; }

} // namespace

TEST_CASE("map 512 pages fills one PTE table behind one PMD entry") {
    World w = small_world();
    w.map_range(0, 0, 512);
    auto census = test::level_census(w, 0);
    CHECK(census == TableShape{1, 1, 1, 512});
    CHECK(test::refcount_audit(w).empty());
    CHECK(test::structural_audit(w).empty());
}

TEST_CASE("map 513 pages crosses one table boundary") {
    World w = small_world();
    w.map_range(0, 0, 513);
    auto census = test::level_census(w, 0);
    CHECK(census == TableShape{1, 1, 2, 513});
}

TEST_CASE("map with an exhausted free list fails and rolls back") {
    World w(4, 64);
    ProcessId pid = w.create_process();
    w.add_vma(pid, 0, 64);
    CHECK_THROWS_AS(w.map_range(pid, 0, 8), OutOfPhysMem);
    CHECK(w.mapped_page_count(pid) == 0);
    CHECK(test::refcount_audit(w).empty());
}

TEST_CASE("second read is a TLB hit and performs no walk") {
    World w = small_world();
    w.map_range(0, 0, 4);
    w.read(0, 2);
    std::uint64_t walks = w.stats.walks;
    w.read(0, 2);
    CHECK(w.stats.walks == walks);
    CHECK(w.stats.tlb_hits == 1);
}

TEST_CASE("read outside any VMA raises UnmappedAddress") {
    World w = small_world(2048, 16);
    w.map_range(0, 0, 16);
    CHECK_THROWS_AS(w.read(0, 100), UnmappedAddress);
    CHECK_THROWS_AS(w.write(0, 100, 0, bytes({1})), UnmappedAddress);
}

TEST_CASE("write in place when writable with refcount one") {
    World w = small_world();
    w.map_range(0, 0, 1);
    WriteOutcome out = w.write(0, 0, 0, bytes({7, 8}));
    CHECK_FALSE(out.cow);
    CHECK(w.read(0, 0)[0] == 7);
    CHECK(w.stats.data_cow_faults == 0);
}

TEST_CASE("write with refcount two copies the page and conserves refcounts") {
    World w = small_world();
    w.map_range(0, 0, 1);
    w.write(0, 0, 0, bytes({42}));
    // Manufacture a second reference the way a fork would.
    Entry* slot = w.walk(w.process(0), 0, false);
    PhysPageId original = slot->page();
    w.phys.ref(original);
    REQUIRE(w.phys.refcount(original) == 2);

    WriteOutcome out = w.write(0, 0, 0, bytes({43}));
    CHECK(out.cow);
    Entry* after = w.walk(w.process(0), 0, false);
    CHECK(after->page() != original);
    CHECK(w.phys.refcount(after->page()) == 1);
    CHECK(w.phys.refcount(original) == 1);
    CHECK(w.phys.payload(original)[0] == 42); // old copy intact
    CHECK(w.read(0, 0)[0] == 43);
}

TEST_CASE("write to a write-protected page copies even at refcount one") {
    World w = small_world();
    w.map_range(0, 0, 1);
    w.write(0, 0, 0, bytes({1}));
    Entry* slot = w.walk(w.process(0), 0, false);
    slot->set_writable(false);
    PhysPageId original = slot->page();
    WriteOutcome out = w.write(0, 0, 0, bytes({2}));
    CHECK(out.cow);
    Entry* after = w.walk(w.process(0), 0, false);
    CHECK(after->writable());
    CHECK(after->page() != original);
    CHECK(w.phys.refcount(original) == 0);
    CHECK(test::refcount_audit(w).empty());
}

TEST_CASE("oom reclaim clears presence; a later read faults it back") {
    World w = small_world();
    w.map_range(0, 0, 8);
    w.write(0, 3, 0, bytes({99}));
    std::vector<std::pair<ProcessId, EpisodeCause>> charges;
    w.charge_hook = [&](ProcessId pid, SimTime ns, EpisodeCause cause) {
        charges.emplace_back(pid, cause);
        CHECK(ns == 3600);
    };
    w.oom_reclaim(0, 3);
    PteView pte = w.peek_pte(0, 3);
    CHECK(pte.exists);
    CHECK_FALSE(pte.present);
    CHECK(w.read(0, 3)[0] == 99); // payload is wherever the protocol left it
    CHECK(w.peek_pte(0, 3).present);
    REQUIRE(charges.size() == 1);
    CHECK(charges[0].second == EpisodeCause::DataPageFault);
    CHECK(test::refcount_audit(w).empty());
}

TEST_CASE("coherence audit is empty on a fresh world") {
    World w = small_world();
    w.map_range(0, 0, 32);
    for (VPage v = 0; v < 32; ++v) w.read(0, v);
    CHECK(w.coherence_audit().empty());
}
