#pragma once

// Umbrella header for the whole library.

#include "mgipm/error.hpp"
#include "mgipm/grid.hpp"
#include "mgipm/operators.hpp"
#include "mgipm/krylov.hpp"
#include "mgipm/precond.hpp"
#include "mgipm/diagnostics.hpp"
#include "mgipm/ipm.hpp"
#include "mgipm/experiments.hpp"
