// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tsdet/error.hpp"
#include "tsdet/random.hpp"
#include "tsdet/tensor.hpp"
#include "tsdet/parameters.hpp"
#include "tsdet/grad_check.hpp"
#include "tsdet/geometry.hpp"
#include "tsdet/synth_data.hpp"
#include "tsdet/coco_io.hpp"
#include "tsdet/augment.hpp"
#include "tsdet/detector.hpp"
#include "tsdet/losses.hpp"
#include "tsdet/eval.hpp"
#include "tsdet/ssl_engine.hpp"
#include "tsdet/experiment.hpp"
