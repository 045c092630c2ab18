#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "forksim/forksim.hpp"

namespace {

std::vector<std::uint64_t> parse_values(const std::string& csv) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::istringstream dummy(item);
        out.push_back(forksim::detail::parse_size(forksim::detail::trim(item), 0));
    }
    if (out.empty()) throw forksim::ConfigError("no sweep values given");
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"forksim: deterministic simulator of fork-based snapshotting "
                 "for in-memory key-value stores"};
    app.require_subcommand(1);

    std::string run_config;
    CLI::App* run = app.add_subcommand("run", "run one scenario config");
    run->add_option("config", run_config, "scenario config file")->required();

    std::string sweep_config, sweep_axis, sweep_values;
    CLI::App* sw = app.add_subcommand("sweep", "run a scenario across one axis");
    sw->add_option("config", sweep_config, "scenario config file")->required();
    sw->add_option("--axis", sweep_axis, "instance_bytes | workers | rate | clients")
        ->required();
    sw->add_option("--values", sweep_values, "comma-separated values (sizes allow KiB/MiB/GiB)")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            return forksim::run_scenario(run_config);
        }
        return forksim::sweep(sweep_config, sweep_axis, parse_values(sweep_values));
    } catch (const forksim::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
