#include <catch2/catch_amalgamated.hpp>

#include "forksim/phys_mem.hpp"

using namespace forksim;

TEST_CASE("pages hand out in ascending order and recycle LIFO") {
    PhysMem mem(4, 64);
    CHECK(mem.allocate() == 0);
    CHECK(mem.allocate() == 1);
    mem.unref(0);
    CHECK(mem.allocate() == 0); // most recently freed first
}

TEST_CASE("free list exhaustion raises OutOfPhysMem") {
    PhysMem mem(2, 64);
    mem.allocate();
    mem.allocate();
    CHECK_THROWS_AS(mem.allocate(), OutOfPhysMem);
}

TEST_CASE("refcounts gate the free list") {
    PhysMem mem(2, 64);
    PhysPageId p = mem.allocate();
    mem.ref(p);
    CHECK(mem.refcount(p) == 2);
    mem.unref(p);
    CHECK(mem.free_pages() == 1); // still held by one reference
    mem.unref(p);
    CHECK(mem.free_pages() == 2);
}

TEST_CASE("payload bytes materialize on first write only") {
    PhysMem mem(8, 64);
    PhysPageId a = mem.allocate();
    PhysPageId b = mem.allocate();
    for (std::uint8_t x : mem.payload(a)) CHECK(x == 0);
    std::uint8_t bytes[3] = {1, 2, 3};
    mem.write_payload(b, 4, bytes);
    CHECK(mem.payload(b)[4] == 1);
    CHECK(mem.payload(b)[6] == 3);
    CHECK(mem.payload(a)[4] == 0);
    mem.copy_payload(b, a);
    CHECK(mem.payload(a)[5] == 2);
}
