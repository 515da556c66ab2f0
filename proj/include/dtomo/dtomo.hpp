#pragma once

// Umbrella header: joint tilt-series alignment and reconstruction toolkit.

#include "dtomo/adam.hpp"
#include "dtomo/autodiff.hpp"
#include "dtomo/common.hpp"
#include "dtomo/fbp.hpp"
#include "dtomo/field.hpp"
#include "dtomo/geometry.hpp"
#include "dtomo/io.hpp"
#include "dtomo/metrics.hpp"
#include "dtomo/tensor.hpp"
#include "dtomo/training.hpp"
#include "dtomo/version.hpp"
