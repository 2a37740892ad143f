#pragma once

#include "tacbrac/data_io.hpp"
#include "tacbrac/deconvolution.hpp"
#include "tacbrac/density.hpp"
#include "tacbrac/error.hpp"
#include "tacbrac/forward_model.hpp"
#include "tacbrac/grid_basis.hpp"
#include "tacbrac/kv_config.hpp"
#include "tacbrac/nnls.hpp"
#include "tacbrac/population_fit.hpp"
#include "tacbrac/synth.hpp"
#include "tacbrac/uncertainty.hpp"
