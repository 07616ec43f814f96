#pragma once

#include "mtac/augraph.hpp"
#include "mtac/checkpoint.hpp"
#include "mtac/common.hpp"
#include "mtac/config.hpp"
#include "mtac/core.hpp"
#include "mtac/losses.hpp"
#include "mtac/memory.hpp"
#include "mtac/metrics.hpp"
#include "mtac/model.hpp"
#include "mtac/nn.hpp"
#include "mtac/rundir.hpp"
#include "mtac/synth.hpp"
#include "mtac/trainer.hpp"
