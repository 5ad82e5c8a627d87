#pragma once

#include "sqparts/alignment.hpp"
#include "sqparts/core.hpp"
#include "sqparts/decoders.hpp"
#include "sqparts/dsq.hpp"
#include "sqparts/dual.hpp"
#include "sqparts/fitter.hpp"
#include "sqparts/io.hpp"
#include "sqparts/losses.hpp"
#include "sqparts/membership.hpp"
#include "sqparts/metrics.hpp"
#include "sqparts/sparse_ops.hpp"
#include "sqparts/synthetic.hpp"
