#pragma once

#include "evnf/bench.hpp"
#include "evnf/error.hpp"
#include "evnf/events.hpp"
#include "evnf/geometry.hpp"
#include "evnf/homography.hpp"
#include "evnf/io.hpp"
#include "evnf/linear_solvers.hpp"
#include "evnf/normal_flow.hpp"
#include "evnf/rng.hpp"
#include "evnf/spline.hpp"
#include "evnf/synthesis.hpp"
#include "evnf/version.hpp"
