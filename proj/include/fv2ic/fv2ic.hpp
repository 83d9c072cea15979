#pragma once

// Federated semi-supervised segmentation with VAE-assisted intra- and
// inter-client consistency, plus the single-process federation simulator
// and its experiment front-end.

#include "fv2ic/analysis.hpp"
#include "fv2ic/autodiff.hpp"
#include "fv2ic/checkpoint.hpp"
#include "fv2ic/config.hpp"
#include "fv2ic/csv.hpp"
#include "fv2ic/errors.hpp"
#include "fv2ic/experiments.hpp"
#include "fv2ic/fedsim.hpp"
#include "fv2ic/layers.hpp"
#include "fv2ic/losses.hpp"
#include "fv2ic/metrics.hpp"
#include "fv2ic/models.hpp"
#include "fv2ic/optim.hpp"
#include "fv2ic/parallel.hpp"
#include "fv2ic/params.hpp"
#include "fv2ic/rng.hpp"
#include "fv2ic/svgplot.hpp"
#include "fv2ic/synthdata.hpp"
#include "fv2ic/tensor.hpp"
