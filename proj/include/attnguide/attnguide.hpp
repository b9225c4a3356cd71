// Umbrella header.
#pragma once

#include "attnguide/core.hpp"
#include "attnguide/grad.hpp"
#include "attnguide/harness.hpp"
#include "attnguide/io.hpp"
#include "attnguide/losses.hpp"
#include "attnguide/metrics.hpp"
#include "attnguide/regions.hpp"
#include "attnguide/sim.hpp"
