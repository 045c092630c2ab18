#include <catch2/catch_amalgamated.hpp>

#include "forksim/kv_engine.hpp"
#include "support/harness.hpp"
#include "support/oracles.hpp"

using namespace forksim;
using test::Harness;

namespace {

std::vector<std::uint8_t> tag(std::uint8_t x) { return std::vector<std::uint8_t>(8, x); }

} // namespace

TEST_CASE("migration with private tables updates every mapper") {
    Harness h(256);
    ProcessId parent = h.spawn_parent(64, 8);
    h.world.write(parent, 5, 0, tag(0xaa));
    h.fork(EngineKind::Default, parent);
    ProcessId child = h.coord.sessions[0].child;
    h.world.read(parent, 5);
    h.world.read(child, 5);

    PhysPageId old_phys = h.world.peek_pte(parent, 5).phys;
    PhysPageId fresh = h.world.phys.allocate();
    h.world.migrate_page(parent, 5, fresh);

    CHECK(h.world.peek_pte(parent, 5).phys == fresh);
    CHECK(h.world.peek_pte(child, 5).phys == fresh);
    CHECK(h.world.read(parent, 5)[0] == 0xaa);
    CHECK(h.world.read(child, 5)[0] == 0xaa);
    CHECK(h.world.phys.refcount(old_phys) == 0);
    CHECK(h.world.coherence_audit().empty());
    CHECK(test::refcount_audit(h.world).empty());
}

TEST_CASE("migration under a shared table strands the sharing child's TLB") {
    Harness h(256);
    ProcessId parent = h.spawn_parent(64, 8);
    h.world.write(parent, 5, 0, tag(0xbb));
    h.fork(EngineKind::Odf, parent);
    ProcessId child = h.coord.sessions[0].child;
    h.world.read(child, 5); // warms the child's TLB through the shared table
    PhysPageId old_phys = h.world.peek_pte(child, 5).phys;

    MigrationTrace trace;
    PhysPageId fresh = h.world.phys.allocate();
    h.world.migrate_page(parent, 5, fresh, &trace);

    // The scan of the child is skipped: its slot is the parent's and already
    // reads none, so the stale TLB entry survives.
    REQUIRE(trace.steps.size() == 5);
    auto& scan = trace.steps[3];
    CHECK(scan.label == "scan_others");
    CHECK(scan.procs[1].pid == child);
    CHECK(scan.procs[1].tlb == old_phys);
    CHECK_FALSE(scan.procs[1].pte.exists); // V -> N

    CHECK(h.world.peek_pte(child, 5).phys == fresh);
    CHECK(h.world.read(child, 5)[0] == 0xbb); // stale physical page, same bytes so far
    auto violations = h.world.coherence_audit();
    REQUIRE(violations.size() == 1);
    CHECK(violations[0].pid == child);
    CHECK(violations[0].vpage == 5);
    CHECK(violations[0].cached == old_phys);
    // The read-time detector flagged it as well.
    REQUIRE_FALSE(h.world.violations.empty());
    CHECK(h.world.violations.back().pid == child);
}

TEST_CASE("migration before the async child copies the PTE") {
    Harness h(4096);
    ProcessId parent = h.spawn_parent(1024, 1024);
    h.world.write(parent, 600, 0, tag(0xcc)); // second PMD's range
    h.fork(EngineKind::Async, parent);
    ProcessId child = h.coord.sessions[0].child;

    // No events pumped yet: the child has not copied any PMD.
    MigrationTrace trace;
    PhysPageId fresh = h.world.phys.allocate();
    h.world.migrate_page(parent, 600, fresh, &trace);
    auto& scan = trace.steps[3];
    REQUIRE(scan.procs.size() == 2);
    CHECK_FALSE(scan.procs[1].pte.exists); // child: PTE N/A
    CHECK_FALSE(scan.procs[1].tlb.has_value());

    h.pump();
    CHECK(h.coord.sessions[0].phase == SessionPhase::Done);
    CHECK(h.world.peek_pte(parent, 600).phys == fresh);
    // The child copied the updated entry and reads the migrated page.
    // (The child was killed at persist end; check the audit trail instead.)
    CHECK(h.world.coherence_audit().empty());
    (void)child;
}

TEST_CASE("migration is checkpoint-exempt") {
    Harness h(4096);
    ProcessId parent = h.spawn_parent(1024, 1024);
    h.fork(EngineKind::Async, parent);
    PhysPageId fresh = h.world.phys.allocate();
    h.world.migrate_page(parent, 600, fresh);
    CHECK(h.coord.sessions[0].pmds_synced == 0);
    // The PMD stays write-protected: data did not change, only the PTE.
    Entry* pmd = h.world.pmd_entry(parent, 600);
    CHECK_FALSE(pmd->writable());
}
