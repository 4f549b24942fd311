#pragma once

#include "pcam/autodiff.hpp"
#include "pcam/checkpoint.hpp"
#include "pcam/cloud_io.hpp"
#include "pcam/confidence.hpp"
#include "pcam/config.hpp"
#include "pcam/error.hpp"
#include "pcam/geometry.hpp"
#include "pcam/layers.hpp"
#include "pcam/losses.hpp"
#include "pcam/matching.hpp"
#include "pcam/metrics.hpp"
#include "pcam/model.hpp"
#include "pcam/optim.hpp"
#include "pcam/pipeline.hpp"
#include "pcam/rng.hpp"
#include "pcam/synth.hpp"
