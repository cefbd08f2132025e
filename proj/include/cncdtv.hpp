#pragma once

#include "cncdtv/bench.hpp"
#include "cncdtv/direction.hpp"
#include "cncdtv/grid.hpp"
#include "cncdtv/imaging.hpp"
#include "cncdtv/prox.hpp"
#include "cncdtv/random.hpp"
#include "cncdtv/solver.hpp"
