#include <catch2/catch_amalgamated.hpp>

#include "forksim/page_table.hpp"

using namespace forksim;

namespace {
constexpr std::uint64_t GiB = 1ULL << 30;
constexpr std::uint64_t MiB = 1ULL << 20;
}

TEST_CASE("8 GiB instance shape") {
    CHECK(table_shape(8 * GiB, 4096) == TableShape{1, 8, 4096, 2097152});
}

TEST_CASE("single PTE table instance") {
    CHECK(table_shape(2 * MiB, 4096) == TableShape{1, 1, 1, 512});
}

TEST_CASE("64 GiB is eight times the 8 GiB shape") {
    CHECK(table_shape(64 * GiB, 4096) == TableShape{1, 64, 32768, 16777216});
}

TEST_CASE("shape growth over the measured instance range") {
    std::uint64_t prev = 0;
    for (std::uint64_t g = 1; g <= 64; g *= 2) {
        TableShape s = table_shape(g * GiB, 4096);
        CHECK(s.pte_entries == g * GiB / 4096);
        CHECK(s.pte_entries > prev);
        prev = s.pte_entries;
    }
}

TEST_CASE("non-multiple sizes rejected") {
    CHECK_THROWS_AS(table_shape(4097, 4096), ConfigError);
    CHECK_THROWS_AS(table_shape(0, 4096), ConfigError);
    CHECK_THROWS_AS(table_shape(4096, 0), ConfigError);
}
