#pragma once

// Umbrella header: Monte Carlo simulation of SDEs reflected in smooth convex
// domains, the associated time-delayed generalized BSDE solver, and the
// analysis operators built on top of them.

#include "rfbsde/common.hpp"
#include "rfbsde/rng.hpp"
#include "rfbsde/parallel.hpp"
#include "rfbsde/paths.hpp"
#include "rfbsde/geometry.hpp"
#include "rfbsde/problem.hpp"
#include "rfbsde/forward.hpp"
#include "rfbsde/backward.hpp"
#include "rfbsde/analysis.hpp"
