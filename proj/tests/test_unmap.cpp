#include <catch2/catch_amalgamated.hpp>

#include "support/harness.hpp"
#include "support/oracles.hpp"

using namespace forksim;
using test::Harness;

TEST_CASE("unmapping a whole VMA removes it and releases its pages") {
    Harness h(256);
    ProcessId pid = h.spawn_parent(128, 128, 2);
    REQUIRE(h.world.process(pid).vmas.size() == 2);
    std::uint64_t before = h.world.mapped_page_count(pid);
    h.world.unmap_range(pid, 0, 64);
    CHECK(h.world.process(pid).vmas.size() == 1);
    CHECK(h.world.mapped_page_count(pid) == before - 64);
    CHECK(test::refcount_audit(h.world).empty());
    CHECK_THROWS_AS(h.world.read(pid, 3), UnmappedAddress);
}

TEST_CASE("unmapping the middle third splits the VMA and keeps the rest mapped") {
    Harness h(256);
    ProcessId pid = h.spawn_parent(90, 90);
    std::uint64_t before = h.world.mapped_page_count(pid);
    h.world.unmap_range(pid, 30, 60);
    auto& vmas = h.world.process(pid).vmas;
    REQUIRE(vmas.size() == 2);
    CHECK(vmas[0].start == 0);
    CHECK(vmas[0].end == 30);
    CHECK(vmas[1].start == 60);
    CHECK(vmas[1].end == 90);
    CHECK(h.world.mapped_page_count(pid) == before - 30);
    CHECK(test::refcount_audit(h.world).empty());
}

TEST_CASE("peer links are inherited on split and mirrored into the child") {
    Harness h(2048);
    ProcessId parent = h.spawn_parent(1024, 1024); // 2 PMDs, one VMA
    h.fork(EngineKind::Async, parent);
    ProcessId child = h.coord.sessions[0].child;

    // Split before the child copies anything.
    h.world.unmap_range(parent, 100, 200);
    auto& pv = h.world.process(parent).vmas;
    REQUIRE(pv.size() == 2);
    CHECK(pv[0].peer.linked_pid == child);
    CHECK(pv[1].peer.linked_pid == child);
    auto& cv = h.world.process(child).vmas;
    REQUIRE(cv.size() == 3);
    CHECK(cv[0].peer.linked_pid == parent);
    CHECK_FALSE(cv[1].peer.linked()); // orphaned middle piece keeps its pages
    CHECK(cv[2].peer.linked_pid == parent);

    h.pump();
    CHECK(h.coord.sessions[0].phase == SessionPhase::Done);
}

TEST_CASE("unmap during async copy proactively syncs the range first") {
    Harness h(4096);
    ProcessId parent = h.spawn_parent(2048, 2048); // 4 PMDs
    h.fork(EngineKind::Async, parent);
    // Three uncopied PMDs lie under [512, 2048); unmapping must sync all of
    // them before the clear so the child still owns the fork-time state.
    std::uint64_t synced_before = h.coord.sessions[0].pmds_synced;
    h.world.unmap_range(parent, 512, 2048);
    CHECK(h.coord.sessions[0].pmds_synced == synced_before + 3);
    CHECK(test::refcount_audit(h.world).empty());
    h.pump();
    CHECK(h.coord.sessions[0].phase == SessionPhase::Done);
    CHECK(test::refcount_audit(h.world).empty());
}

TEST_CASE("re-walk oracle: mapping census is consistent before and after unmap") {
    Harness h(512);
    ProcessId pid = h.spawn_parent(300, 300);
    auto before = test::level_census(h.world, pid);
    CHECK(before.pte_entries == 300);
    h.world.unmap_range(pid, 100, 150);
    auto after = test::level_census(h.world, pid);
    CHECK(after.pte_entries == 250);
    CHECK(test::structural_audit(h.world).empty());
}
