#pragma once

#include "bsdelab/stats.hpp"
#include "bsdelab/rng.hpp"
#include "bsdelab/spectral.hpp"
#include "bsdelab/forward.hpp"
#include "bsdelab/generators.hpp"
#include "bsdelab/regression.hpp"
#include "bsdelab/bsde.hpp"
#include "bsdelab/bismut.hpp"
#include "bsdelab/control.hpp"
#include "bsdelab/io.hpp"
#include "bsdelab/config.hpp"
#include "bsdelab/experiment.hpp"
