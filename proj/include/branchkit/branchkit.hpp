#pragma once

#include "builtin_models.hpp"
#include "config.hpp"
#include "counts.hpp"
#include "deviations.hpp"
#include "distributions.hpp"
#include "env.hpp"
#include "errors.hpp"
#include "finite_model.hpp"
#include "growth.hpp"
#include "kernels.hpp"
#include "lln.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "runner.hpp"
#include "simulate.hpp"
#include "stats.hpp"
