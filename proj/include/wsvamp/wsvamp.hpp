#pragma once

#include "wsvamp/denoisers.hpp"
#include "wsvamp/harness.hpp"
#include "wsvamp/lmmse.hpp"
#include "wsvamp/mp_engine.hpp"
#include "wsvamp/onsager.hpp"
#include "wsvamp/operators.hpp"
#include "wsvamp/problem.hpp"
#include "wsvamp/rng.hpp"
