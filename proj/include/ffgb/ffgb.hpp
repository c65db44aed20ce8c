#pragma once

// Umbrella header.

#include "ffgb/data.hpp"
#include "ffgb/experiment.hpp"
#include "ffgb/fedboost.hpp"
#include "ffgb/functions.hpp"
#include "ffgb/losses.hpp"
#include "ffgb/measures.hpp"
#include "ffgb/oracles.hpp"
#include "ffgb/random.hpp"
#include "ffgb/serialization.hpp"
#include "ffgb/transport.hpp"
