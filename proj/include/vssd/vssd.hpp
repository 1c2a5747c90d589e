#pragma once

#include "vssd/core/error.hpp"
#include "vssd/core/tensor.hpp"
#include "vssd/core/rng.hpp"
#include "vssd/core/blas.hpp"
#include "vssd/core/tape.hpp"
#include "vssd/core/ops.hpp"
#include "vssd/core/conv.hpp"
#include "vssd/core/grad_check.hpp"
#include "vssd/core/nctd.hpp"

#include "vssd/ssd/reference.hpp"
#include "vssd/ssd/autodiff.hpp"

#include "vssd/ncssd/scan_route.hpp"
#include "vssd/ncssd/kernels.hpp"
#include "vssd/ncssd/autodiff.hpp"

#include "vssd/model/config.hpp"
#include "vssd/model/params.hpp"
#include "vssd/model/layers.hpp"
#include "vssd/model/vssd.hpp"
#include "vssd/model/accounting.hpp"
#include "vssd/model/checkpoint.hpp"

#include "vssd/train/data.hpp"
#include "vssd/train/optim.hpp"
#include "vssd/train/loop.hpp"

#include "vssd/analysis/image_io.hpp"
#include "vssd/analysis/erf.hpp"
#include "vssd/analysis/heatmap.hpp"
#include "vssd/analysis/stability.hpp"

#include "vssd/bench/check.hpp"
#include "vssd/bench/bench.hpp"
