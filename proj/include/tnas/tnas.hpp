#pragma once

// Umbrella header.

#include "tnas/adam.hpp"
#include "tnas/checkpoint.hpp"
#include "tnas/config.hpp"
#include "tnas/data.hpp"
#include "tnas/error.hpp"
#include "tnas/genome.hpp"
#include "tnas/metrics.hpp"
#include "tnas/network.hpp"
#include "tnas/nn.hpp"
#include "tnas/pipeline.hpp"
#include "tnas/search.hpp"
#include "tnas/supernet.hpp"
#include "tnas/tensor.hpp"
#include "tnas/train.hpp"
#include "tnas/ttfs.hpp"
