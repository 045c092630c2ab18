#pragma once

#include "forksim/common.hpp"
#include "forksim/cost_model.hpp"
#include "forksim/fork_engines.hpp"
#include "forksim/kv_engine.hpp"
#include "forksim/metrics.hpp"
#include "forksim/page_table.hpp"
#include "forksim/phys_mem.hpp"
#include "forksim/process.hpp"
#include "forksim/report.hpp"
#include "forksim/scenario.hpp"
#include "forksim/sim_clock.hpp"
#include "forksim/simulation.hpp"
#include "forksim/workload.hpp"
#include "forksim/world.hpp"
